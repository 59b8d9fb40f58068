"""Attentive decoders, their cross-modal fusion, and the per-variant decode step.

Every decoder step attends over its encoder sources with the decoder's
previous hidden state as query, optionally attends over its own hidden-state
history, fuses the resulting contexts, and advances an LSTM on
``[fusion, emb(w_prev), extra]``.  ``extra`` carries the global decoder's
output into the local decoder in the aligned model.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .attention import (AttentionKeys, CrossModalParams, SoftAttentionParams, attend,
                        cross_modal_fuse, prepare_keys)
from .encoder import EncodedModality
from .recurrent import LstmParams, lstm_step, zero_state
from .tensor import (ShapeError, Tensor, concat, dropout, embedding, linear, log_softmax,
                     reshape, softmax)


class ModelVariant(str, enum.Enum):
    ATT_V = "att_v"
    CM_ATT_VA = "cm_att_va"
    CM_ATT_VAD = "cm_att_vad"
    HACA_NO_ALIGN = "haca_no_align"
    HACA = "haca"

    @property
    def hierarchical(self) -> bool:
        return self in (ModelVariant.HACA, ModelVariant.HACA_NO_ALIGN)

    @property
    def modalities(self) -> tuple[str, ...]:
        return ("visual",) if self is ModelVariant.ATT_V else ("visual", "audio")

    @classmethod
    def parse(cls, value) -> "ModelVariant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown variant {value!r}; choose one of {names}") from None


@dataclass
class DecoderParams:
    name: str
    sources: list[str]                       # "visual.high", "audio.low", ...
    attns: dict[str, SoftAttentionParams]
    lstm: LstmParams
    self_attn: SoftAttentionParams | None = None
    fusion: CrossModalParams | None = None

    @property
    def hidden(self) -> int:
        return self.lstm.hidden


@dataclass
class RecurrentState:
    h: Tensor
    c: Tensor
    history: list[Tensor] = field(default_factory=list)
    keys: AttentionKeys | None = None        # stacked history + its projection

    def take_rows(self, rows: np.ndarray) -> "RecurrentState":
        return RecurrentState(
            Tensor(self.h.data[rows]), Tensor(self.c.data[rows]),
            [Tensor(x.data[rows]) for x in self.history],
            None if self.keys is None else self.keys.take_rows(rows))


@dataclass
class DecoderState:
    """Recurrent state of every decoder plus the word fed at the last step.

    ``cells`` is keyed by decoder name ("global"/"local" for the aligned
    model, "main" for single-decoder variants).  A fresh state holds BOS in
    ``prev_words`` and empty histories.
    """

    cells: dict[str, RecurrentState]
    prev_words: np.ndarray
    step: int = 1

    def take_rows(self, rows) -> "DecoderState":
        rows = np.asarray(rows)
        return DecoderState({k: v.take_rows(rows) for k, v in self.cells.items()},
                            self.prev_words[rows].copy(), self.step)

    @property
    def global_history(self) -> list[Tensor]:
        return self.cells["global"].history

    @property
    def local_history(self) -> list[Tensor]:
        return self.cells["local" if "local" in self.cells else "main"].history


Memory = dict[str, dict[str, AttentionKeys]]


@dataclass
class DecoderStack:
    variant: ModelVariant
    decoders: list[DecoderParams]
    embedding: Tensor   # (|V|, emb)
    W_p: Tensor         # (|V|, final hidden)
    dropout: float = 0.0

    @property
    def vocab_size(self) -> int:
        return self.W_p.shape[0]

    def initial_state(self, batch: int, bos: int) -> DecoderState:
        cells = {}
        for dec in self.decoders:
            h, c = zero_state(batch, dec.hidden)
            cells[dec.name] = RecurrentState(h, c)
        return DecoderState(cells, np.full(batch, bos, dtype=np.int64))

    def prepare_memory(self, encoded: Mapping[str, EncodedModality]) -> Memory:
        """Project every encoder sequence once for each decoder attention reading it."""
        memory: Memory = {}
        for dec in self.decoders:
            memory[dec.name] = {}
            for src in dec.sources:
                modality, level = src.split(".")
                enc = encoded[modality]
                seq = enc.high if level == "high" else enc.low
                mask = enc.high_mask if level == "high" else enc.low_mask
                memory[dec.name][src] = prepare_keys(seq, dec.attns[src], mask)
        return memory


def take_memory(memory: Memory, rows) -> Memory:
    rows = np.asarray(rows)
    return {d: {s: k.take_rows(rows) for s, k in m.items()} for d, m in memory.items()}


def decoder_self_attention(history: AttentionKeys | None, query: Tensor,
                           params: SoftAttentionParams, dim: int) -> tuple[Tensor, np.ndarray]:
    """Attention over prior hidden states; an empty history gives the zero vector."""
    batch = query.shape[0]
    if history is None or history.length == 0:
        return Tensor(np.zeros((batch, dim))), np.zeros((batch, 0))
    context, weights = attend(query, history, params)
    return context, weights.data


def decoder_step(dec: DecoderParams, cell: RecurrentState, memory: Mapping[str, AttentionKeys],
                 word_emb: Tensor, extra: Tensor | None = None, *, train: bool = False,
                 rng: np.random.Generator | None = None, p_drop: float = 0.0,
                 logs: dict | None = None) -> tuple[Tensor, RecurrentState]:
    query = cell.h
    contexts = []
    for src in dec.sources:
        ctx, alpha = attend(query, memory[src], dec.attns[src])
        contexts.append(ctx)
        if logs is not None:
            logs[f"alpha.{dec.name}.{src}"] = alpha.data
    if dec.self_attn is not None:
        ctx, alpha = decoder_self_attention(cell.keys, query, dec.self_attn, dec.hidden)
        contexts.append(ctx)
        if logs is not None:
            logs[f"alpha.{dec.name}.decoder"] = alpha
    if dec.fusion is not None:
        fused, beta = cross_modal_fuse(contexts, query, dec.fusion)
        if logs is not None:
            logs[f"beta.{dec.name}"] = beta.data
    else:
        fused = contexts[0]
    parts = [fused, word_emb] if extra is None else [fused, word_emb, extra]
    x = dropout(concat(parts, axis=-1), p_drop, rng, train)
    out, h, c = lstm_step(x, cell.h, cell.c, dec.lstm)

    keys = cell.keys
    if dec.self_attn is not None:
        proj = linear(h, dec.self_attn.W_f)
        if keys is None:
            keys = AttentionKeys(reshape(h, (h.shape[0], 1, h.shape[1])),
                                 reshape(proj, (proj.shape[0], 1, proj.shape[1])), None)
        else:
            keys = keys.append(h, proj)
    return out, RecurrentState(h, c, cell.history + [h], keys)


def _embed(stack: DecoderStack, words: np.ndarray) -> Tensor:
    words = np.asarray(words)
    if words.size and (words.min() < 0 or words.max() >= stack.vocab_size):
        raise ValueError(
            f"unknown word id {int(words.max() if words.max() >= stack.vocab_size else words.min())}"
            f" for vocabulary of size {stack.vocab_size}")
    return embedding(stack.embedding, words)


def global_step(stack: DecoderStack, state: DecoderState, memory: Memory, w_prev,
                logs: dict | None = None, train: bool = False, rng=None):
    """Aligned model only: advance the global decoder; returns ``(o_global, cell)``."""
    dec = stack.decoders[0]
    return decoder_step(dec, state.cells[dec.name], memory[dec.name], _embed(stack, w_prev),
                        train=train, rng=rng, p_drop=stack.dropout, logs=logs)


def local_step(stack: DecoderStack, state: DecoderState, memory: Memory, w_prev,
               o_global: Tensor, logs: dict | None = None, train: bool = False, rng=None):
    """Aligned model only: advance the local decoder given the global output."""
    dec = stack.decoders[1]
    return decoder_step(dec, state.cells[dec.name], memory[dec.name], _embed(stack, w_prev),
                        extra=o_global, train=train, rng=rng, p_drop=stack.dropout, logs=logs)


def project_vocab(output: Tensor, W_p: Tensor) -> Tensor:
    """Next-word distribution ``softmax(W_p o)``."""
    if output.shape[-1] != W_p.shape[1]:
        raise ShapeError(
            f"project_vocab: output dim {output.shape[-1]} != W_p in-dim {W_p.shape[1]}")
    return softmax(linear(output, W_p), axis=-1)


def decode_step(stack: DecoderStack, state: DecoderState, memory: Memory, w_prev=None, *,
                train: bool = False, rng: np.random.Generator | None = None,
                logs: dict | None = None) -> tuple[Tensor, DecoderState]:
    """One decoding step for every row; returns next-word log-probabilities (B, |V|)."""
    if w_prev is None:
        w_prev = state.prev_words
    w_prev = np.asarray(w_prev)
    emb = _embed(stack, w_prev)
    cells = dict(state.cells)
    if stack.variant is ModelVariant.HACA:
        g, l = stack.decoders
        o_g, cells[g.name] = decoder_step(g, state.cells[g.name], memory[g.name], emb,
                                          train=train, rng=rng, p_drop=stack.dropout, logs=logs)
        out, cells[l.name] = decoder_step(l, state.cells[l.name], memory[l.name], emb,
                                          extra=o_g, train=train, rng=rng,
                                          p_drop=stack.dropout, logs=logs)
    else:
        (dec,) = stack.decoders
        out, cells[dec.name] = decoder_step(dec, state.cells[dec.name], memory[dec.name], emb,
                                            train=train, rng=rng, p_drop=stack.dropout,
                                            logs=logs)
    out = dropout(out, stack.dropout, rng, train)
    logp = log_softmax(linear(out, stack.W_p), axis=-1)
    return logp, DecoderState(cells, w_prev.copy(), state.step + 1)
