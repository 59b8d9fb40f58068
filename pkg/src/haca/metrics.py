"""Corpus BLEU-4 and token-level accuracies."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import RESERVED, make_batch
from .inference import decode_corpus, strip_eos

Tokens = Sequence


@dataclass
class EvalReport:
    bleu4: float = 0.0
    precisions: list[float] = field(default_factory=lambda: [0.0] * 4)
    brevity_penalty: float = 0.0
    token_accuracy: float | None = None
    audio_word_accuracy: float | None = None
    event_word_accuracy: float | None = None

    def csv_header(self) -> str:
        return "bleu4,p1,p2,p3,p4,brevity_penalty,token_accuracy,audio_word_accuracy,event_word_accuracy"

    def csv_row(self) -> str:
        def fmt(x):
            return "" if x is None else repr(float(x))
        vals = [self.bleu4, *self.precisions, self.brevity_penalty, self.token_accuracy,
                self.audio_word_accuracy, self.event_word_accuracy]
        return ",".join(fmt(v) for v in vals)

    def text(self) -> str:
        lines = [f"BLEU-4            {self.bleu4:.4f}",
                 "precisions        " + " ".join(f"{p:.4f}" for p in self.precisions),
                 f"brevity penalty   {self.brevity_penalty:.4f}"]
        for label, value in (("token accuracy", self.token_accuracy),
                             ("audio-word acc.", self.audio_word_accuracy),
                             ("event-word acc.", self.event_word_accuracy)):
            if value is not None:
                lines.append(f"{label:<18}{value:.4f}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return asdict(self)


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(hypotheses: Sequence[Tokens], references: Sequence[Sequence[Tokens]]) -> EvalReport:
    """Corpus BLEU with clipped n-gram counts and closest-length brevity penalty.

    No smoothing: a zero precision at any order gives BLEU 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError(
            f"bleu4: {len(hypotheses)} hypotheses but {len(references)} reference lists")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        if not refs:
            raise ValueError("bleu4: every hypothesis needs at least one reference")
        hyp = list(hyp)
        hyp_len += len(hyp)
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            counts = _ngrams(hyp, n)
            max_ref: Counter = Counter()
            for r in refs:
                for gram, c in _ngrams(list(r), n).items():
                    if c > max_ref[gram]:
                        max_ref[gram] = c
            matches[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        return EvalReport(0.0, precisions, 0.0)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) == 0.0:
        return EvalReport(0.0, precisions, bp)
    score = bp * math.exp(sum(math.log(p) for p in precisions) / 4)
    return EvalReport(score, precisions, bp)


def position_accuracy(hypotheses: Sequence[Tokens], references: Sequence[Tokens],
                      positions: slice) -> float:
    """Fraction of reference tokens in ``positions`` reproduced at the same index."""
    hits = total = 0
    for hyp, ref in zip(hypotheses, references):
        ref = list(ref)[positions]
        offset = positions.start or 0
        for i, tok in enumerate(ref):
            total += 1
            j = offset + i
            hits += j < len(hyp) and hyp[j] == tok
    if total == 0:
        raise ValueError("position_accuracy: no reference tokens in range")
    return hits / total


def token_accuracy(model, samples, batch_size: int = 64) -> float:
    """Teacher-forced next-token accuracy over non-pad targets (EOS included)."""
    if not samples:
        raise ValueError("token_accuracy: empty sample set")
    modalities = list(model.encoder_configs)
    hits = total = 0
    for start in range(0, len(samples), batch_size):
        batch = make_batch(samples[start:start + batch_size], modalities,
                           max_steps=model.config.max_steps)
        outs = model.forward_teacher_forced(batch.features, batch.targets, batch.lengths)
        pred = np.stack([o.data.argmax(axis=-1) for o in outs], axis=1)
        mask = batch.mask
        hits += int(((pred == batch.targets) & mask).sum())
        total += int(mask.sum())
    return hits / total


def class_accuracy(hypotheses: Sequence[Tokens], references: Sequence[Tokens],
                   word_ids) -> float | None:
    """Positional accuracy restricted to reference tokens drawn from ``word_ids``."""
    word_ids = set(word_ids)
    hits = total = 0
    for hyp, ref in zip(hypotheses, references):
        for j, tok in enumerate(ref):
            if tok in word_ids:
                total += 1
                hits += j < len(hyp) and hyp[j] == tok
    return hits / total if total else None


def evaluate(model, samples, vocab, beam_size: int = 5,
             batch_size: int = 64) -> tuple[EvalReport, list[list[int]]]:
    """Decode ``samples`` and score them; returns the report and the hypotheses.

    Audio words are the vocabulary entries named ``mod*``; every other
    non-reserved word counts as an event word.
    """
    if not samples:
        raise ValueError("evaluate: empty sample set")
    hyps = decode_corpus(model, samples, beam_size, batch_size)
    refs = [[strip_eos(r) for r in s.references] for s in samples]
    report = bleu4(hyps, refs)
    audio_ids = {vocab.id(w) for w in vocab.words if w.startswith("mod")}
    event_ids = set(range(len(RESERVED), len(vocab))) - audio_ids
    first = [r[0] for r in refs]
    report.audio_word_accuracy = class_accuracy(hyps, first, audio_ids)
    report.event_word_accuracy = class_accuracy(hyps, first, event_ids)
    report.token_accuracy = token_accuracy(model, samples, batch_size)
    return report, hyps
