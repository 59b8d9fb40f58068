"""Hierarchical attentive encoder.

A bidirectional low-level LSTM reads every frame.  The sequence is cut into
chunks of ``chunk`` frames (the last one may be shorter, it is never padded)
and a unidirectional high-level LSTM takes one step per chunk, reading an
attention summary of that chunk's low-level outputs.  The chunk attention is
queried with the high-level state from the previous chunk.

A "flat" encoder is the same object without the high level; the non-
hierarchical model variants use it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import SoftAttentionParams, attend, chunk_keys, prepare_keys
from .recurrent import LstmParams, bilstm_encode, lstm_step, masked_update, zero_state
from .tensor import ShapeError, Tensor, stack


@dataclass(frozen=True)
class HierEncoderConfig:
    name: str
    input_dim: int
    low_hidden: int
    high_hidden: int
    chunk: int
    max_len: int = 50
    hierarchical: bool = True
    bidirectional_low: bool = True

    def __post_init__(self):
        if self.chunk < 1:
            raise ValueError(f"{self.name}: chunk size must be >= 1, got {self.chunk}")
        for key in ("input_dim", "low_hidden", "max_len"):
            if getattr(self, key) < 1:
                raise ValueError(f"{self.name}: {key} must be positive")
        if self.hierarchical and self.high_hidden < 1:
            raise ValueError(f"{self.name}: high_hidden must be positive")
        if not self.bidirectional_low:
            raise ValueError(f"{self.name}: only a bidirectional low-level encoder is supported")

    @property
    def low_dim(self) -> int:
        return 2 * self.low_hidden


@dataclass
class HierEncoderParams:
    low_fwd: LstmParams
    low_bwd: LstmParams
    chunk_attn: SoftAttentionParams | None = None
    high: LstmParams | None = None


@dataclass
class EncodedModality:
    name: str
    low: Tensor                        # (B, n, 2 * low_hidden)
    low_mask: np.ndarray | None        # (B, n); None when no padding
    high: Tensor | None = None         # (B, ceil(n / s), high_hidden)
    high_mask: np.ndarray | None = None
    chunk_spans: list[tuple[int, int]] = field(default_factory=list)
    chunk_weights: list[np.ndarray] = field(default_factory=list)
    high_steps: int = 0                # high-level steps summed over real samples

    @property
    def batch(self) -> int:
        return self.low.shape[0]


def chunk_spans(n: int, s: int) -> list[tuple[int, int]]:
    """Zero-based half-open index ranges of each chunk of a length-``n`` sequence."""
    if n < 1 or s < 1:
        raise ValueError(f"chunk_spans: need n >= 1 and s >= 1, got n={n}, s={s}")
    return [(start, min(start + s, n)) for start in range(0, n, s)]


def num_chunks(n: int, s: int) -> int:
    return math.ceil(n / s)


def encode(features, config: HierEncoderConfig, params: HierEncoderParams,
           lengths=None) -> EncodedModality:
    """Encode a (B, n, d) feature batch; rows shorter than ``n`` give ``lengths``."""
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.ndim == 2:
        x = Tensor(x.data[None])
    if x.ndim != 3:
        raise ShapeError(f"{config.name}: features must be (B, n, d), got {x.shape}")
    batch, n, d = x.shape
    if n == 0:
        raise ValueError(f"{config.name}: empty feature sequence")
    if d != config.input_dim:
        raise ShapeError(f"{config.name}: feature dim {d}, encoder expects {config.input_dim}")
    if lengths is None:
        lengths = np.full(batch, n)
    lengths = np.asarray(lengths)
    if lengths.min() < 1:
        raise ValueError(f"{config.name}: empty feature sequence in batch")
    if lengths.max() > config.max_len:
        raise ValueError(
            f"{config.name}: sequence length {lengths.max()} exceeds max {config.max_len}")
    positions = np.arange(n)
    mask = positions[None, :] < lengths[:, None]
    low_mask = None if mask.all() else mask

    low = bilstm_encode(x, params.low_fwd, params.low_bwd, low_mask)
    if not config.hierarchical:
        return EncodedModality(config.name, low, low_mask)

    keys = prepare_keys(low, params.chunk_attn, low_mask)
    h, c = zero_state(batch, params.high.hidden)
    spans = chunk_spans(n, config.chunk)
    highs, weights = [], []
    steps = 0
    for start, stop in spans:
        summary, alpha = attend(h, chunk_keys(keys, start, stop), params.chunk_attn)
        live = lengths > start
        _, h_new, c_new = lstm_step(summary, h, c, params.high)
        h = masked_update(live, h_new, h)
        c = masked_update(live, c_new, c)
        highs.append(h)
        weights.append(alpha.data)
        steps += int(live.sum())
    high_mask = np.array([[lengths[b] > start for start, _ in spans] for b in range(batch)])
    return EncodedModality(
        config.name, low, low_mask,
        high=stack(highs, axis=1),
        high_mask=None if high_mask.all() else high_mask,
        chunk_spans=spans, chunk_weights=weights, high_steps=steps,
    )
