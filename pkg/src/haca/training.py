"""Cross-entropy training with scheduled sampling, Adadelta, clipping and plateau decay."""

from __future__ import annotations

import ast
import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .data import Sample, make_batch, training_pairs
from .inference import decode_corpus, strip_eos
from .metrics import bleu4
from .model import PAD, HacaConfig, Model
from .tensor import Tape, Tensor, mul, pick, stack, tsum

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "val_loss", "val_bleu4", "lr", "teacher_forcing_prob"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 50
    lr: float = 1.0
    plateau_factor: float = 0.5
    plateau_patience: int = 4
    clip: float = 10.0
    tf_start: float = 1.0        # teacher-forcing probability at the first epoch
    tf_end: float = 0.75         # ... and at the last, linear in between
    rho: float = 0.95
    eps: float = 1e-6
    shuffle: bool = True
    seed: int = 0
    eval_beam: int = 1           # 1: greedy validation decoding

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("train: batch_size and max_epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("train: lr must be positive")
        if not 0 < self.plateau_factor <= 1:
            raise ValueError("train: plateau_factor must lie in (0, 1]")
        if self.plateau_patience < 1:
            raise ValueError("train: plateau_patience must be >= 1")
        if self.clip <= 0:
            raise ValueError("train: clip must be positive")
        for key in ("tf_start", "tf_end"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ValueError(f"train: {key} must lie in [0, 1]")
        if not 0.0 < self.rho < 1.0 or self.eps <= 0:
            raise ValueError("train: need 0 < rho < 1 and eps > 0")
        if self.eval_beam < 1:
            raise ValueError("train: eval_beam must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def teacher_forcing_prob(epoch: int, config: TrainConfig) -> float:
    """Linear schedule from ``tf_start`` at epoch 1 to ``tf_end`` at ``max_epochs``."""
    if config.max_epochs <= 1:
        return config.tf_start
    frac = min(max(epoch - 1, 0), config.max_epochs - 1) / (config.max_epochs - 1)
    return config.tf_start + (config.tf_end - config.tf_start) * frac


# ------------------------------------------------------------------- loss

def cross_entropy_loss(log_probs: Sequence[Tensor], targets: np.ndarray,
                       reduction: str = "token_mean") -> Tensor:
    """Negative log-likelihood of ``targets`` (B, T) under per-step log-probs.

    PAD targets are excluded.  ``token_mean`` divides the batch sum by the
    number of real target tokens; ``sum`` returns the plain sum.
    """
    targets = np.asarray(targets)
    if targets.ndim == 1:
        targets = targets[None]
    if len(log_probs) != targets.shape[1] or targets.shape[1] < 1:
        raise ValueError(f"loss: {len(log_probs)} steps for targets of shape {targets.shape}")
    vocab = log_probs[0].shape[-1]
    if targets.min() < 0 or targets.max() >= vocab:
        raise ValueError(f"loss: target id out of range [0, {vocab})")
    mask = targets != PAD
    count = int(mask.sum())
    if count == 0:
        raise ValueError("loss: no non-pad targets")
    picked = stack([pick(lp, targets[:, t]) for t, lp in enumerate(log_probs)], axis=1)
    total = tsum(mul(picked, mask.astype(np.float64)))
    scale = -1.0 / count if reduction == "token_mean" else -1.0
    if reduction not in ("token_mean", "sum"):
        raise ValueError(f"loss: unknown reduction {reduction!r}")
    return mul(total, scale)


# -------------------------------------------------------------- optimizer

def clip_gradients(grads, lo: float = -10.0, hi: float = 10.0):
    """Elementwise clamp of an array or a name -> array mapping."""
    if isinstance(grads, Mapping):
        return {k: np.clip(g, lo, hi) for k, g in grads.items()}
    return np.clip(grads, lo, hi)


@dataclass
class AdadeltaState:
    sq_grad: np.ndarray    # running E[g^2]
    sq_delta: np.ndarray   # running E[dx^2]


def adadelta_update(param: np.ndarray, grad: np.ndarray, state: AdadeltaState, lr: float,
                    rho: float = 0.95, eps: float = 1e-6) -> np.ndarray:
    """One Adadelta step in place; returns the applied (lr-scaled) update."""
    if not np.all(np.isfinite(grad)):
        raise TrainingDiverged("non-finite gradient passed to adadelta_update")
    state.sq_grad *= rho
    state.sq_grad += (1.0 - rho) * grad * grad
    delta = -np.sqrt(state.sq_delta + eps) / np.sqrt(state.sq_grad + eps) * grad
    state.sq_delta *= rho
    state.sq_delta += (1.0 - rho) * delta * delta
    step = lr * delta
    param += step
    return step


class Adadelta:
    def __init__(self, params: Mapping[str, Tensor], rho: float = 0.95, eps: float = 1e-6):
        self.params = params
        self.rho = rho
        self.eps = eps
        self.state = {n: AdadeltaState(np.zeros_like(p.data), np.zeros_like(p.data))
                      for n, p in params.items()}

    def step(self, grads: Mapping[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            adadelta_update(self.params[name].data, g, self.state[name], lr, self.rho, self.eps)

    def state_arrays(self) -> dict[str, dict[str, np.ndarray]]:
        return {"sq_grad": {n: s.sq_grad for n, s in self.state.items()},
                "sq_delta": {n: s.sq_delta for n, s in self.state.items()}}

    def load_arrays(self, arrays: Mapping[str, Mapping[str, np.ndarray]]) -> None:
        for name, s in self.state.items():
            s.sq_grad[...] = arrays["sq_grad"][name]
            s.sq_delta[...] = arrays["sq_delta"][name]


# -------------------------------------------------------------- lr plateau

def plateau_reductions(history: Sequence[float], patience: int = 4) -> list[bool]:
    """For each epoch, whether the plateau rule fires after it.

    The rule fires once ``patience`` consecutive epochs fail to surpass the
    best score so far; the wait counter restarts after each reduction.
    """
    fired = []
    best = -math.inf
    wait = 0
    for score in history:
        if score > best:
            best = score
            wait = 0
        else:
            wait += 1
        if wait >= patience:
            fired.append(True)
            wait = 0
        else:
            fired.append(False)
    return fired


def lr_plateau(history: Sequence[float], lr: float, patience: int = 4,
               factor: float = 0.5) -> float:
    """Learning rate to use after the last epoch of ``history``."""
    if not history:
        raise ValueError("lr_plateau: empty history")
    return lr * factor if plateau_reductions(history, patience)[-1] else lr


# ----------------------------------------------------------------- loop

@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_bleu4: float
    lr: float
    teacher_forcing_prob: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in METRICS_HEADER[1:]]


class Trainer:
    """Owns a model's parameters, optimizer state and generator for one run."""

    def __init__(self, model: Model, train: Sequence[Sample], val: Sequence[Sample],
                 config: TrainConfig, rng: np.random.Generator | None = None,
                 metrics_path: str | os.PathLike | None = None,
                 checkpoint_path: str | os.PathLike | None = None,
                 on_epoch: Callable[[EpochMetrics], None] | None = None):
        config.validate()
        if not train:
            raise ValueError("train: empty training set")
        self.model = model
        self.train_samples = list(train)
        self.val_samples = list(val)
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.optimizer = Adadelta(model.params, config.rho, config.eps)
        self.lr = config.lr
        self.epoch = 0
        self.history: list[EpochMetrics] = []
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.on_epoch = on_epoch
        self.modalities = list(model.encoder_configs)

    # ---------------------------------------------------------------- steps

    def batches(self, shuffle: bool | None = None) -> list[list[tuple[int, int]]]:
        pairs = training_pairs(self.train_samples)
        shuffle = self.config.shuffle if shuffle is None else shuffle
        order = self.rng.permutation(len(pairs)) if shuffle else np.arange(len(pairs))
        bs = self.config.batch_size
        return [[pairs[i] for i in order[k:k + bs]] for k in range(0, len(pairs), bs)]

    def train_batch(self, pairs: Sequence[tuple[int, int]], tf_prob: float) -> tuple[float, int]:
        samples = [self.train_samples[i] for i, _ in pairs]
        batch = make_batch(samples, self.modalities, [r for _, r in pairs],
                           max_steps=self.model.config.max_steps)
        model = self.model
        model.zero_grad()
        with Tape() as tape:
            outs = model.forward_teacher_forced(batch.features, batch.targets, batch.lengths,
                                                train=True, rng=self.rng,
                                                teacher_forcing=tf_prob)
            loss = cross_entropy_loss(outs, batch.targets)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"epoch {self.epoch}: non-finite loss {value} on batch {batch.ids[:4]}...")
            tape.backward(loss)
        grads = {}
        for name, p in model.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingDiverged(
                    f"epoch {self.epoch}: non-finite gradient for {name} on batch "
                    f"{batch.ids[:4]}...")
            grads[name] = g
        grads = clip_gradients(grads, -self.config.clip, self.config.clip)
        self.optimizer.step(grads, self.lr)
        model.zero_grad()
        return value, int(batch.mask.sum())

    def evaluate(self, samples: Sequence[Sample]) -> tuple[float, float]:
        """Teacher-forced token-mean loss and corpus BLEU-4 of decoded captions."""
        if not samples:
            return float("nan"), float("nan")
        total = tokens = 0.0
        bs = max(self.config.batch_size, 64)
        for start in range(0, len(samples), bs):
            chunk = samples[start:start + bs]
            batch = make_batch(chunk, self.modalities, max_steps=self.model.config.max_steps)
            outs = self.model.forward_teacher_forced(batch.features, batch.targets, batch.lengths)
            n = int(batch.mask.sum())
            total += float(cross_entropy_loss(outs, batch.targets).data) * n
            tokens += n
        hyps = decode_corpus(self.model, samples, self.config.eval_beam, bs)
        refs = [[strip_eos(r) for r in s.references] for s in samples]
        return total / tokens, bleu4(hyps, refs).bleu4

    def train_epoch(self) -> EpochMetrics:
        self.epoch += 1
        tf_prob = teacher_forcing_prob(self.epoch, self.config)
        lr_used = self.lr
        loss_sum = tok_sum = 0.0
        for pairs in self.batches():
            value, n = self.train_batch(pairs, tf_prob)
            loss_sum += value * n
            tok_sum += n
        val_loss, val_bleu = self.evaluate(self.val_samples)
        metrics = EpochMetrics(self.epoch, loss_sum / tok_sum, val_loss, val_bleu, lr_used, tf_prob)
        self.history.append(metrics)
        scores = [m.val_bleu4 for m in self.history]
        if not any(math.isnan(s) for s in scores):
            self.lr = lr_plateau(scores, self.lr, self.config.plateau_patience,
                                 self.config.plateau_factor)
        return metrics

    def run(self, epochs: int | None = None) -> list[EpochMetrics]:
        last = self.config.max_epochs if epochs is None else min(self.epoch + epochs,
                                                                 self.config.max_epochs)
        if self.metrics_path is not None and self.epoch == 0:
            self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.metrics_path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_HEADER)
        while self.epoch < last:
            m = self.train_epoch()
            log.info("epoch %d train_loss %.4f val_loss %.4f val_bleu4 %.4f lr %.4g tf %.3f",
                     m.epoch, m.train_loss, m.val_loss, m.val_bleu4, m.lr,
                     m.teacher_forcing_prob)
            if self.metrics_path is not None:
                with open(self.metrics_path, "a", newline="") as fh:
                    csv.writer(fh).writerow(m.row())
            if self.checkpoint_path is not None:
                save_checkpoint(self.checkpoint(), self.checkpoint_path)
            if self.on_epoch is not None:
                self.on_epoch(m)
        return self.history

    # ----------------------------------------------------------- persistence

    def checkpoint(self) -> Checkpoint:
        meta = {f"train.{k}": repr(v) for k, v in self.config.to_dict().items()}
        meta["lr"] = repr(self.lr)
        meta["history"] = ";".join(",".join(m.row()) for m in self.history)
        return Checkpoint(
            config={k: str(v) for k, v in self.model.config.to_dict().items()},
            params={n: p.data.copy() for n, p in self.model.params.items()},
            optimizer={k: {n: a.copy() for n, a in v.items()}
                       for k, v in self.optimizer.state_arrays().items()},
            rng_state=self.rng.bit_generator.state,
            epoch=self.epoch,
            meta=meta,
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, train: Sequence[Sample], val: Sequence[Sample],
                        config: TrainConfig | None = None, **kwargs) -> "Trainer":
        model = model_from_checkpoint(ckpt)
        if config is None:
            config = train_config_from_meta(ckpt.meta)
        rng = np.random.default_rng()
        if ckpt.rng_state is not None:
            rng.bit_generator.state = ckpt.rng_state
        trainer = cls(model, train, val, config, rng, **kwargs)
        if ckpt.optimizer:
            trainer.optimizer.load_arrays(ckpt.optimizer)
        trainer.epoch = ckpt.epoch
        trainer.lr = float(ckpt.meta.get("lr", config.lr))
        rows = [r for r in ckpt.meta.get("history", "").split(";") if r]
        for r in rows:
            vals = r.split(",")
            trainer.history.append(EpochMetrics(int(vals[0]), *(float(v) for v in vals[1:])))
        return trainer


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    config = HacaConfig.from_dict(ckpt.config)
    model = Model(config, 0)
    model.load_arrays(ckpt.params)
    return model


def train_config_from_meta(meta: Mapping[str, str]) -> TrainConfig:
    values = {k[6:]: ast.literal_eval(v) for k, v in meta.items() if k.startswith("train.")}
    return TrainConfig(**values)


def train(model: Model, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
          config: TrainConfig, rng: np.random.Generator | None = None, **kwargs) -> Trainer:
    """Run a full training loop and return the finished :class:`Trainer`."""
    trainer = Trainer(model, train_samples, val_samples, config, rng, **kwargs)
    trainer.run()
    return trainer
