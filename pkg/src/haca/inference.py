"""Greedy decoding and beam search.

Both work against a small stepping protocol so that hand-built toy models
can stand in for a trained network:

* ``init(inputs)`` -> state for a batch of rows, ``rows(state)`` -> its row count,
* ``step(state, words)`` -> ``(log_probs (rows, V) ndarray, state)``,
* ``select(state, rows)`` -> state restricted/reordered to ``rows``.

:class:`ModelStepper` adapts a :class:`~haca.model.Model`; inputs are a
``(features, lengths)`` pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Protocol, Sequence

import numpy as np

from .data import make_batch
from .decoder import take_memory
from .model import BOS, EOS


class Stepper(Protocol):
    def init(self, inputs) -> Any: ...

    def rows(self, state) -> int: ...

    def step(self, state, words: np.ndarray) -> tuple[np.ndarray, Any]: ...

    def select(self, state, rows: np.ndarray) -> Any: ...


class ModelStepper:
    def __init__(self, model, logs: list | None = None):
        self.model = model
        self.logs = logs

    def init(self, inputs):
        features, lengths = inputs
        state, memory, _ = self.model.start(features, lengths)
        return state, memory

    def rows(self, state) -> int:
        return state[0].prev_words.shape[0]

    def step(self, state, words):
        dec_state, memory = state
        step_logs = {} if self.logs is not None else None
        logp, dec_state = self.model.decode_step(dec_state, memory, words, logs=step_logs)
        if self.logs is not None:
            self.logs.append(step_logs)
        return logp.data, (dec_state, memory)

    def select(self, state, rows):
        dec_state, memory = state
        return dec_state.take_rows(rows), take_memory(memory, rows)


def _stepper(model) -> Stepper:
    return model if hasattr(model, "select") else ModelStepper(model)


def greedy_decode(model, inputs, max_steps: int = 16, return_scores: bool = False):
    """Argmax decoding of every row; sequences stop at EOS (excluded from the output).

    Ties go to the lowest token id.
    """
    stepper = _stepper(model)
    state = stepper.init(inputs)
    rows = stepper.rows(state)
    words = np.full(rows, BOS, dtype=np.int64)
    outputs: list[list[int]] = [[] for _ in range(rows)]
    scores = np.zeros(rows)
    done = np.zeros(rows, dtype=bool)
    for _ in range(max_steps):
        logp, state = stepper.step(state, words)
        words = logp.argmax(axis=-1)
        for r in np.flatnonzero(~done):
            scores[r] += logp[r, words[r]]
            if words[r] == EOS:
                done[r] = True
            else:
                outputs[r].append(int(words[r]))
        if done.all():
            break
    if return_scores:
        return outputs, scores
    return outputs


@dataclass(order=False)
class Hypothesis:
    tokens: list[int]
    score: float
    finished: bool = False
    step_logps: list[float] = field(default_factory=list)

    def sort_key(self):
        return (-self.score, tuple(self.tokens), len(self.tokens))

    def normalized_key(self):
        steps = len(self.tokens) + self.finished
        return (-self.score / max(steps, 1), tuple(self.tokens), len(self.tokens))


@dataclass
class BeamResult:
    best: Hypothesis
    nbest: list[Hypothesis]

    @property
    def tokens(self) -> list[int]:
        return self.best.tokens

    @property
    def score(self) -> float:
        return self.best.score


def beam_search(model, inputs, beam_size: int = 5, max_steps: int = 16,
                nbest: int = 1, length_normalize: bool = False) -> BeamResult:
    """Beam search over one input (a batch of one row).

    Each live hypothesis is expanded over the vocabulary and candidates are
    ranked by cumulative log-probability (ties: larger step log-prob, then
    lower token id, then earlier parent).  EOS candidates ranked within the
    top ``beam_size`` are set aside as finished; the next beam is the best
    ``beam_size`` non-EOS candidates.  Search ends when no live hypothesis
    can beat the best finished one, or after ``max_steps``.  Scores are not
    length-normalized unless ``length_normalize`` is set, in which case the
    final ranking (not the search itself) uses score per emitted token.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    stepper = _stepper(model)
    state = stepper.init(inputs)
    live = [Hypothesis([], 0.0)]
    words = np.array([BOS], dtype=np.int64)
    finished: list[Hypothesis] = []
    for _ in range(max_steps):
        logp, state = stepper.step(state, words)
        if logp.shape[0] != len(live):
            raise ValueError("beam_search: inputs must hold a single row")
        V = logp.shape[1]
        base = np.array([h.score for h in live])
        total = (base[:, None] + logp).ravel()
        parent = np.repeat(np.arange(len(live)), V)
        token = np.tile(np.arange(V), len(live))
        order = np.lexsort((parent, token, -logp.ravel(), -total))
        next_live, rows = [], []
        for rank, k in enumerate(order):
            p, tok = int(parent[k]), int(token[k])
            hyp = live[p]
            if tok == EOS:
                if rank < beam_size:
                    finished.append(Hypothesis(hyp.tokens, float(total[k]), True,
                                               hyp.step_logps + [float(logp[p, tok])]))
                continue
            if len(next_live) < beam_size:
                next_live.append(Hypothesis(hyp.tokens + [tok], float(total[k]), False,
                                            hyp.step_logps + [float(logp[p, tok])]))
                rows.append(p)
            if len(next_live) >= beam_size and rank >= beam_size - 1:
                break
        live = next_live
        if not live:
            break
        if finished and max(h.score for h in live) <= max(h.score for h in finished):
            break
        state = stepper.select(state, np.array(rows))
        words = np.array([h.tokens[-1] for h in live], dtype=np.int64)
    key = Hypothesis.normalized_key if length_normalize else Hypothesis.sort_key
    pool = sorted(finished or live, key=key)
    ranked = pool + (sorted(live, key=key) if finished else [])
    return BeamResult(pool[0], ranked[:max(nbest, 1)])


def format_nbest(result: BeamResult, vocab=None) -> list[str]:
    lines = []
    for h in result.nbest:
        toks = [vocab.token(t) for t in h.tokens] if vocab is not None else [str(t) for t in h.tokens]
        lines.append(f"{h.score!r}\t{' '.join(toks)}")
    return lines


def sequence_logprob(model, inputs, tokens: Sequence[int], finished: bool = True) -> float:
    """Re-score a token sequence (plus EOS when ``finished``) by stepping the model."""
    stepper = _stepper(model)
    state = stepper.init(inputs)
    words = np.array([BOS], dtype=np.int64)
    total = 0.0
    seq = list(tokens) + ([EOS] if finished else [])
    for tok in seq:
        logp, state = stepper.step(state, words)
        total += float(logp[0, tok])
        words = np.array([tok], dtype=np.int64)
    return total


def strip_eos(ref: Sequence[int]) -> list[int]:
    out = list(ref)
    return out[:out.index(EOS)] if EOS in out else out


def decode_corpus(model, samples, beam_size: int = 1, batch_size: int = 64) -> list[list[int]]:
    """Decode every sample: batched greedy when ``beam_size == 1``, else per-sample beam."""
    modalities = list(model.encoder_configs)
    max_steps = model.config.max_steps
    hyps: list[list[int]] = []
    if beam_size == 1:
        for start in range(0, len(samples), batch_size):
            batch = make_batch(samples[start:start + batch_size], modalities)
            hyps.extend(greedy_decode(model, (batch.features, batch.lengths), max_steps))
        return hyps
    for s in samples:
        batch = make_batch([s], modalities)
        hyps.append(beam_search(model, (batch.features, batch.lengths), beam_size,
                                max_steps).tokens)
    return hyps
