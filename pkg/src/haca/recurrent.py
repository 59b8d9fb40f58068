"""LSTM cell and bidirectional runner.

All step functions are batched: vectors are (B, dim) tensors, a single
vector is just a batch of one.  Gate blocks are stacked in the order
input, forget, cell-candidate, output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (ShapeError, Tensor, add, concat, linear, mul, sigmoid, stack, take,
                     tanh, where)

GATE_ORDER = ("input", "forget", "cell", "output")


@dataclass
class LstmParams:
    W_x: Tensor  # (4h, d_in)
    W_h: Tensor  # (4h, h)
    b: Tensor    # (4h,)

    @property
    def hidden(self) -> int:
        return self.W_h.shape[1]

    @property
    def input_dim(self) -> int:
        return self.W_x.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"W_x": self.W_x, "W_h": self.W_h, "b": self.b}

    @classmethod
    def zeros(cls, input_dim: int, hidden: int) -> "LstmParams":
        return cls(Tensor(np.zeros((4 * hidden, input_dim)), requires_grad=True),
                   Tensor(np.zeros((4 * hidden, hidden)), requires_grad=True),
                   Tensor(np.zeros(4 * hidden), requires_grad=True))


def zero_state(batch: int, hidden: int) -> tuple[Tensor, Tensor]:
    return Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden)))


def _cell(pre: Tensor, c_prev: Tensor, h: int) -> tuple[Tensor, Tensor]:
    gates = sigmoid(pre)
    i = take(gates, (slice(None), slice(0, h)))
    f = take(gates, (slice(None), slice(h, 2 * h)))
    o = take(gates, (slice(None), slice(3 * h, 4 * h)))
    g = tanh(take(pre, (slice(None), slice(2 * h, 3 * h))))
    c = add(mul(f, c_prev), mul(i, g))
    return mul(o, tanh(c)), c


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: LstmParams,
              x_proj: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """One LSTM step; returns ``(output, hidden, cell)`` with output == hidden.

    ``x_proj`` lets callers pass a precomputed ``x @ W_x.T + b`` so a whole
    input sequence can be projected in one product.
    """
    h = params.hidden
    if h_prev.shape[-1] != h or c_prev.shape[-1] != h:
        raise ShapeError(
            f"lstm_step: state dim must be {h}, got h {h_prev.shape} c {c_prev.shape}")
    if x_proj is None:
        if x.shape[-1] != params.input_dim:
            raise ShapeError(
                f"lstm_step: input dim must be {params.input_dim}, got {x.shape}")
        x_proj = linear(x, params.W_x, params.b)
    pre = add(x_proj, linear(h_prev, params.W_h))
    hidden, cell = _cell(pre, c_prev, h)
    return hidden, hidden, cell


def masked_update(mask: np.ndarray | None, new: Tensor, old: Tensor) -> Tensor:
    """Keep ``old`` rows where ``mask`` is False; no-op when every row is live."""
    if mask is None or mask.all():
        return new
    return where(mask[:, None], new, old)


def run_lstm(sequence: Tensor, params: LstmParams, mask: np.ndarray | None = None,
             reverse: bool = False) -> list[Tensor]:
    """Unidirectional pass over a (B, n, d) tensor; outputs in input order.

    Rows whose ``mask`` entry is False carry their state through that step
    unchanged, so right-padded positions never disturb a real prefix and a
    reverse pass starts cleanly at each row's last real element.
    """
    if sequence.ndim != 3:
        raise ShapeError(f"run_lstm: expected (B, n, d), got {sequence.shape}")
    batch, n, d = sequence.shape
    if n == 0:
        raise ValueError("run_lstm: empty sequence")
    if d != params.input_dim:
        raise ShapeError(f"run_lstm: feature dim {d} != LSTM input dim {params.input_dim}")
    proj = linear(sequence, params.W_x, params.b)
    h, c = zero_state(batch, params.hidden)
    outputs: list[Tensor | None] = [None] * n
    order = range(n - 1, -1, -1) if reverse else range(n)
    for i in order:
        _, h_new, c_new = lstm_step(None, h, c, params, x_proj=take(proj, (slice(None), i)))
        m = None if mask is None else mask[:, i]
        h = masked_update(m, h_new, h)
        c = masked_update(m, c_new, c)
        outputs[i] = h
    return outputs


def bilstm_run(sequence, fwd: LstmParams, bwd: LstmParams,
               mask: np.ndarray | None = None) -> list[Tensor]:
    """Bidirectional pass; output ``t`` is ``[forward_t, backward_t]`` of dim 2h.

    ``sequence`` is either a (B, n, d) tensor or a list of (B, d) tensors.
    """
    if isinstance(sequence, (list, tuple)):
        if not sequence:
            raise ValueError("bilstm_run: empty sequence")
        sequence = stack(sequence, axis=1)
    forward = run_lstm(sequence, fwd, mask)
    backward = run_lstm(sequence, bwd, mask, reverse=True)
    return [concat([a, b], axis=-1) for a, b in zip(forward, backward)]


def bilstm_encode(sequence: Tensor, fwd: LstmParams, bwd: LstmParams,
                  mask: np.ndarray | None = None) -> Tensor:
    """Same as :func:`bilstm_run` but returns the stacked (B, n, 2h) tensor."""
    forward = stack(run_lstm(sequence, fwd, mask), axis=1)
    backward = stack(run_lstm(sequence, bwd, mask, reverse=True), axis=1)
    return concat([forward, backward], axis=-1)
