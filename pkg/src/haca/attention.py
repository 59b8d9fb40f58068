"""Additive soft attention and cross-modal fusion.

Scores follow the additive form ``v . tanh(W_f x_k + W_q q)``.  Feature-side
projections depend only on the attended sequence, so they are computed once
per sequence (:func:`prepare_keys`) and reused for every query.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (ShapeError, Tensor, add, concat, linear, reshape, softmax, stack, take,
                     tanh, weighted_sum, where)

MASKED_SCORE = -1e30


@dataclass
class SoftAttentionParams:
    W_f: Tensor  # (a, d_feature)
    W_q: Tensor  # (a, d_query)
    v: Tensor    # (1, a)

    def tensors(self) -> dict[str, Tensor]:
        return {"W_f": self.W_f, "W_q": self.W_q, "v": self.v}


@dataclass
class AttentionKeys:
    """An attended sequence with its cached feature projection."""

    values: Tensor            # (B, K, d)
    proj: Tensor              # (B, K, a)
    mask: np.ndarray | None   # (B, K) bool, None when every position is real

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def take_rows(self, rows: np.ndarray) -> "AttentionKeys":
        mask = None if self.mask is None else self.mask[rows]
        return AttentionKeys(Tensor(self.values.data[rows]), Tensor(self.proj.data[rows]), mask)

    def append(self, value: Tensor, proj: Tensor) -> "AttentionKeys":
        """Extend by one position; used for growing decoder histories."""
        value = reshape(value, (value.shape[0], 1, value.shape[1]))
        proj = reshape(proj, (proj.shape[0], 1, proj.shape[1]))
        return AttentionKeys(concat([self.values, value], axis=1),
                             concat([self.proj, proj], axis=1), None)


def _as_sequence(features) -> Tensor:
    if isinstance(features, Tensor):
        if features.ndim != 3:
            raise ShapeError(f"attention: features must be (B, K, d), got {features.shape}")
        if features.shape[1] == 0:
            raise ValueError("attention: empty feature sequence")
        return features
    if not features:
        raise ValueError("attention: empty feature sequence")
    dims = {f.shape for f in features}
    if len(dims) != 1:
        raise ShapeError(f"attention: features must share one shape, got {sorted(dims)}")
    return stack(list(features), axis=1)


def prepare_keys(features, params: SoftAttentionParams,
                 mask: np.ndarray | None = None) -> AttentionKeys:
    values = _as_sequence(features)
    if values.shape[-1] != params.W_f.shape[1]:
        raise ShapeError(
            f"attention: feature dim {values.shape[-1]} != W_f in-dim {params.W_f.shape[1]}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != values.shape[:2]:
            raise ShapeError(f"attention: mask {mask.shape} != features {values.shape[:2]}")
        if mask.all():
            mask = None
    return AttentionKeys(values, linear(values, params.W_f), mask)


def attend(query: Tensor, keys: AttentionKeys,
           params: SoftAttentionParams) -> tuple[Tensor, Tensor]:
    """Context ``sum_k alpha_k x_k`` and the (B, K) weights ``alpha``."""
    if query.shape[-1] != params.W_q.shape[1]:
        raise ShapeError(
            f"attention: query dim {query.shape[-1]} != W_q in-dim {params.W_q.shape[1]}")
    q = linear(query, params.W_q)
    q = reshape(q, (q.shape[0], 1, q.shape[1]))
    scores = linear(tanh(add(keys.proj, q)), params.v)
    scores = reshape(scores, scores.shape[:2])
    if keys.mask is not None:
        scores = where(keys.mask, scores, MASKED_SCORE)
    weights = softmax(scores, axis=-1)
    return weighted_sum(weights, keys.values), weights


def soft_attention(query: Tensor, features, params: SoftAttentionParams,
                   mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """One-shot attention over ``features`` (list of (B, d) or a (B, K, d) tensor)."""
    return attend(query, prepare_keys(features, params, mask), params)


def chunk_keys(keys: AttentionKeys, start: int, stop: int) -> AttentionKeys:
    """Positions ``[start, stop)`` of a prepared sequence."""
    idx = (slice(None), slice(start, stop))
    mask = None
    if keys.mask is not None:
        mask = keys.mask[:, start:stop]
        if mask.all():
            mask = None
    return AttentionKeys(take(keys.values, idx), take(keys.proj, idx), mask)


@dataclass
class CrossModalParams:
    """Per-source projections into a shared fusion space plus a scorer over them."""

    projections: list[Tensor]   # each (f, d_i)
    b: Tensor                   # (f,)
    scorer: SoftAttentionParams  # W_f (a, f), W_q (a, d_query), v (1, a)

    @property
    def fusion_dim(self) -> int:
        return self.b.shape[0]


def cross_modal_fuse(contexts: Sequence[Tensor], query: Tensor,
                     params: CrossModalParams) -> tuple[Tensor, Tensor]:
    """Fusion context ``tanh(sum_i beta_i W_i c_i + b)`` and the (B, k) weights beta.

    The betas come from the additive scorer run over the projected contexts
    with ``query`` (the decoder's recurrent state) as the query.
    """
    if len(contexts) != len(params.projections):
        raise ShapeError(
            f"cross_modal_fuse: {len(contexts)} contexts for "
            f"{len(params.projections)} projections")
    projected = []
    for i, (c, W) in enumerate(zip(contexts, params.projections)):
        if c.shape[-1] != W.shape[1]:
            raise ShapeError(
                f"cross_modal_fuse: context {i} has dim {c.shape[-1]}, "
                f"projection expects {W.shape[1]}")
        projected.append(linear(c, W))
    keys = prepare_keys(stack(projected, axis=1), params.scorer)
    mixed, beta = attend(query, keys, params.scorer)
    return tanh(add(mixed, params.b)), beta
