"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .model import EOS, PAD, HacaConfig, Model
from .tensor import Tape, Tensor
from .training import cross_entropy_loss


class NondeterministicFunction(RuntimeError):
    pass


@dataclass
class ParamCheck:
    name: str
    size: int
    max_rel_error: float
    max_abs_error: float
    flagged: list[tuple[int, ...]] = field(default_factory=list)


@dataclass
class GradcheckReport:
    tolerance: float
    step: float
    checks: list[ParamCheck]

    @property
    def ok(self) -> bool:
        return all(c.max_rel_error < self.tolerance for c in self.checks)

    @property
    def worst(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            mark = "ok" if c.max_rel_error < self.tolerance else "FAIL"
            out.append(f"{c.name:<48s} n={c.size:<6d} max_rel={c.max_rel_error:.3e} {mark}")
        return out


def _raw(result):
    return np.asarray(result.data if isinstance(result, Tensor) else result)[()]


def _value(result) -> float:
    return float(_raw(result))


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    return np.abs(g_ad - g_fd) / np.maximum(1e-8, np.abs(g_ad) + np.abs(g_fd))


def finite_difference_check(
    f: Callable[[], Tensor | float],
    params: Mapping[str, Tensor] | list[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    extended: bool = True,
) -> GradcheckReport:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``f`` takes no arguments and reads the current parameter values, so it
    must be deterministic; two evaluations are compared bitwise first.

    With ``extended`` the perturbed evaluations run on ``np.longdouble``
    copies of the parameters.  Round-off in ``f`` then sits near 1e-19
    instead of 1e-16, which keeps the difference quotient meaningful for
    gradient entries far below one.
    """
    if not isinstance(params, Mapping):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}

    first, second = _value(f()), _value(f())
    if first != second and not (np.isnan(first) and np.isnan(second)):
        raise NondeterministicFunction(
            f"f returned {first!r} then {second!r}; disable dropout and sampling")

    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = f()
        if not isinstance(loss, Tensor) or loss._tape is None:
            analytic = {name: np.zeros_like(p.data) for name, p in params.items()}
        else:
            tape.backward(loss)
            analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                        for name, p in params.items()}
    for p in params.values():
        p.grad = None

    originals = {name: p.data for name, p in params.items()}
    if extended:
        for p in params.values():
            p.data = p.data.astype(np.longdouble)
    try:
        checks = [_check_one(f, name, p, analytic[name], step, tolerance)
                  for name, p in params.items()]
    finally:
        for name, p in params.items():
            p.data = originals[name]
    return GradcheckReport(tolerance=tolerance, step=step, checks=checks)


def _check_one(f, name: str, p: Tensor, analytic: np.ndarray, step: float,
               tolerance: float) -> ParamCheck:
    flat = p.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = _raw(f())
        flat[i] = orig - step
        down = _raw(f())
        flat[i] = orig
        numeric[i] = (up - down) / (2.0 * step)
    numeric = numeric.reshape(p.shape)
    rel = relative_error(analytic, numeric)
    flagged = [tuple(int(j) for j in ix) for ix in np.argwhere(rel >= tolerance)]
    return ParamCheck(
        name=name,
        size=flat.size,
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        max_abs_error=float(np.abs(analytic - numeric).max()) if rel.size else 0.0,
        flagged=flagged,
    )


GRADCHECK_DIMS = dict(
    visual_dim=6, visual_low_hidden=4, visual_high_hidden=4, visual_chunk=3,
    audio_dim=4, audio_low_hidden=3, audio_high_hidden=3, audio_chunk=2,
    global_hidden=4, local_hidden=6, embed_dim=4, vocab_size=12, dropout=0.0,
)


def micro_gradcheck(variant: str = "haca", seed: int = 0, step: float = 1e-5,
                    tolerance: float = 1e-4, steps: int = 3) -> GradcheckReport:
    """Check the full training loss of a small model on a 2-sample, ``steps``-word batch."""
    config = HacaConfig.micro(variant=variant, **GRADCHECK_DIMS)
    model = Model(config, seed)
    rng = np.random.default_rng(seed + 1)
    features = {"visual": rng.uniform(-1, 1, (2, 6, config.visual_dim)),
                "audio": rng.uniform(-1, 1, (2, 4, config.audio_dim))}
    lengths = {"visual": np.array([6, 4]), "audio": np.array([4, 3])}
    targets = rng.integers(4, config.vocab_size, size=(2, steps))
    targets[0, -1] = EOS
    if steps > 1:
        targets[1, -2:] = [EOS, PAD]
    present = {m: features[m] for m in model.encoder_configs}

    def loss():
        outs = model.forward_teacher_forced(present, targets, lengths)
        return cross_entropy_loss(outs, targets)

    return finite_difference_check(loss, model.params, step, tolerance)
