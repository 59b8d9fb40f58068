"""Vocabulary, samples, batching, on-disk dataset formats, and the synthetic generator.

On disk a dataset is a directory holding

* ``manifest.tsv`` - header ``split<TAB>id<TAB><modality>...<TAB>captions`` then
  one row per sample; paths are relative to the manifest's directory;
* ``vocab.txt`` - one non-reserved token per line, id = line index + 4;
* feature files - first line ``n d``, then ``n`` rows of ``d`` floats;
* caption files - one whitespace-tokenized caption per line.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import BOS, EOS, PAD, UNK

RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
SPLITS = ("train", "val", "test")


class DataFormatError(ValueError):
    pass


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self._tokens: list[str] = list(RESERVED)
        self._ids: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for t in tokens:
            self.add(t)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    @property
    def words(self) -> list[str]:
        return self._tokens[len(RESERVED):]

    def add(self, token: str) -> int:
        if not token or any(ch.isspace() for ch in token):
            raise ValueError(f"vocabulary tokens must be non-empty and space-free: {token!r}")
        if token not in self._ids:
            self._ids[token] = len(self._tokens)
            self._tokens.append(token)
        return self._ids[token]

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise KeyError(f"unknown token {token!r}") from None

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens: Sequence[str], allow_unk: bool = False) -> list[int]:
        """Token ids with EOS appended."""
        if allow_unk:
            ids = [self._ids.get(t, UNK) for t in tokens]
        else:
            ids = [self.id(t) for t in tokens]
        return ids + [EOS]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Surface tokens up to the first EOS; PAD and BOS dropped."""
        out = []
        for i in ids:
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self._tokens[i])
        return out

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text("".join(f"{t}\n" for t in self.words))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Vocabulary":
        vocab = cls()
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            token = line.strip()
            if not token:
                raise DataFormatError(f"{path} line {lineno}: empty token")
            if token in vocab:
                raise DataFormatError(f"{path} line {lineno}: duplicate token {token!r}")
            vocab.add(token)
        return vocab


@dataclass
class ModalityStream:
    name: str
    features: np.ndarray  # (n, d)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"{self.name}: features must be a nonempty (n, d) array")

    @property
    def length(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class Sample:
    id: str
    streams: dict[str, ModalityStream]
    references: list[list[int]]        # EOS-terminated id sequences
    program: tuple | None = None       # latent (modifier, events) of synthetic samples

    def __post_init__(self):
        if not self.references:
            raise ValueError(f"sample {self.id}: needs at least one reference caption")


@dataclass
class Dataset:
    vocab: Vocabulary
    modalities: list[str]
    splits: dict[str, list[Sample]] = field(default_factory=dict)

    @property
    def train(self) -> list[Sample]:
        return self.splits.get("train", [])

    @property
    def val(self) -> list[Sample]:
        return self.splits.get("val", [])

    @property
    def test(self) -> list[Sample]:
        return self.splits.get("test", [])

    def feature_dims(self) -> dict[str, int]:
        for samples in self.splits.values():
            if samples:
                return {m: samples[0].streams[m].dim for m in self.modalities}
        return {}


@dataclass
class Batch:
    ids: list[str]
    features: dict[str, np.ndarray]   # (B, n_max, d), zero padded
    lengths: dict[str, np.ndarray]    # (B,)
    targets: np.ndarray               # (B, T), PAD after EOS

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def mask(self) -> np.ndarray:
        return self.targets != PAD


def make_batch(samples: Sequence[Sample], modalities: Sequence[str],
               ref_index: Sequence[int] | None = None, max_steps: int | None = None) -> Batch:
    """Pad a list of samples into one batch using reference ``ref_index[i]`` of each."""
    if not samples:
        raise ValueError("make_batch: no samples")
    if ref_index is None:
        ref_index = [0] * len(samples)
    features, lengths = {}, {}
    for m in modalities:
        seqs = [s.streams[m].features for s in samples]
        dims = {x.shape[1] for x in seqs}
        if len(dims) != 1:
            raise DataFormatError(f"modality {m}: mixed feature dims {sorted(dims)} in batch")
        n_max = max(x.shape[0] for x in seqs)
        arr = np.zeros((len(seqs), n_max, dims.pop()))
        for i, x in enumerate(seqs):
            arr[i, :x.shape[0]] = x
        features[m] = arr
        lengths[m] = np.array([x.shape[0] for x in seqs])
    refs = [list(s.references[r]) for s, r in zip(samples, ref_index)]
    if max_steps is not None:
        refs = [r[:max_steps] for r in refs]
    T = max(len(r) for r in refs)
    targets = np.full((len(refs), T), PAD, dtype=np.int64)
    for i, r in enumerate(refs):
        targets[i, :len(r)] = r
    return Batch([s.id for s in samples], features, lengths, targets)


def training_pairs(samples: Sequence[Sample]) -> list[tuple[int, int]]:
    """Every (sample index, reference index) pair."""
    return [(i, r) for i, s in enumerate(samples) for r in range(len(s.references))]


# ------------------------------------------------------------------ file io

def write_features(path: str | os.PathLike, features: np.ndarray) -> None:
    n, d = features.shape
    lines = [f"{n} {d}"]
    lines.extend(" ".join(repr(float(v)) for v in row) for row in features)
    Path(path).write_text("\n".join(lines) + "\n")


def read_features(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"feature file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines:
        raise DataFormatError(f"{path} line 1: missing 'n d' header")
    head = lines[0].split()
    try:
        n, d = (int(x) for x in head)
    except ValueError:
        raise DataFormatError(f"{path} line 1: header must be 'n d', got {lines[0]!r}") from None
    if n < 1 or d < 1:
        raise DataFormatError(f"{path} line 1: n and d must be positive")
    if len(lines) - 1 < n:
        raise DataFormatError(f"{path}: header promises {n} rows, found {len(lines) - 1}")
    out = np.empty((n, d))
    for i in range(n):
        parts = lines[i + 1].split()
        if len(parts) != d:
            raise DataFormatError(
                f"{path} line {i + 2}: expected {d} values (header dim), got {len(parts)}")
        try:
            out[i] = [float(p) for p in parts]
        except ValueError:
            raise DataFormatError(f"{path} line {i + 2}: non-numeric value") from None
    return out


def write_captions(path: str | os.PathLike, captions: Sequence[Sequence[str]]) -> None:
    Path(path).write_text("".join(" ".join(c) + "\n" for c in captions))


def read_captions(path: str | os.PathLike, vocab: Vocabulary) -> list[list[int]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"caption file not found: {path}")
    refs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        for t in tokens:
            if t not in vocab:
                raise DataFormatError(f"{path} line {lineno}: unknown token {t!r}")
        refs.append(vocab.encode(tokens))
    if not refs:
        raise DataFormatError(f"{path}: no captions")
    return refs


def save_dataset(dataset: Dataset, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "captions").mkdir(parents=True, exist_ok=True)
    dataset.vocab.save(out / "vocab.txt")
    rows = ["\t".join(["split", "id", *dataset.modalities, "captions"])]
    for split, samples in dataset.splits.items():
        for s in samples:
            paths = []
            for m in dataset.modalities:
                rel = f"features/{s.id}.{m}.txt"
                write_features(out / rel, s.streams[m].features)
                paths.append(rel)
            cap = f"captions/{s.id}.txt"
            write_captions(out / cap, [dataset.vocab.decode(r) for r in s.references])
            rows.append("\t".join([split, s.id, *paths, cap]))
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(rows) + "\n")
    return manifest


def load_dataset(manifest: str | os.PathLike, vocab_path: str | os.PathLike | None = None) -> Dataset:
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    root = manifest.parent
    vocab = Vocabulary.load(vocab_path or root / "vocab.txt")
    lines = manifest.read_text().splitlines()
    if not lines:
        raise DataFormatError(f"{manifest} line 1: empty manifest")
    header = lines[0].split("\t")
    if len(header) < 4 or header[:2] != ["split", "id"] or header[-1] != "captions":
        raise DataFormatError(
            f"{manifest} line 1: header must be split, id, <modalities...>, captions")
    modalities = header[2:-1]
    dataset = Dataset(vocab, modalities)
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != len(header):
            raise DataFormatError(
                f"{manifest} line {lineno}: expected {len(header)} columns, got {len(cols)}")
        split, sid = cols[0], cols[1]
        streams = {}
        for m, rel in zip(modalities, cols[2:-1]):
            streams[m] = ModalityStream(m, read_features(root / rel))
        refs = read_captions(root / cols[-1], vocab)
        dataset.splits.setdefault(split, []).append(Sample(sid, streams, refs))
    for split, samples in dataset.splits.items():
        for m in modalities:
            dims = {s.streams[m].dim for s in samples}
            if len(dims) > 1:
                raise DataFormatError(f"{manifest}: modality {m} has mixed dims {sorted(dims)}")
    return dataset


# ------------------------------------------------------------ synthetic data

@dataclass
class SynthConfig:
    """Generator settings for the audio/visual caption toy task.

    Each sample has 2-4 events shown only in the visual stream and one
    modifier heard only in the audio stream.  A sample's caption is the
    modifier word followed by its event words in order.  Adjacent events
    always differ, since back-to-back repeats would merge into one segment.
    """

    train: int = 512
    val: int = 128
    test: int = 128
    events: int = 4
    modifiers: int = 3
    visual_dim: int = 8
    audio_dim: int = 4
    sigma: float = 0.05
    min_events: int = 2
    max_events: int = 4
    min_segment: int = 2
    max_segment: int = 3
    min_audio: int = 3
    max_audio: int = 6

    def validate(self) -> None:
        if min(self.train, self.val, self.test) < 0 or self.train + self.val + self.test < 1:
            raise ValueError("synth: sample counts must be >= 0 and not all zero")
        if self.events < 1 or self.modifiers < 1:
            raise ValueError("synth: need at least one event and one modifier")
        if self.visual_dim < self.events:
            raise ValueError(
                f"synth: visual_dim {self.visual_dim} < events {self.events}; "
                "one-hot event patterns need one dimension per event")
        if self.audio_dim < self.modifiers:
            raise ValueError(
                f"synth: audio_dim {self.audio_dim} < modifiers {self.modifiers}")
        if not 1 <= self.min_events <= self.max_events:
            raise ValueError("synth: need 1 <= min_events <= max_events")
        if self.events < 2 and self.max_events > 1:
            raise ValueError("synth: several events per sample need at least 2 event types")
        if not 1 <= self.min_segment <= self.max_segment:
            raise ValueError("synth: need 1 <= min_segment <= max_segment")
        if not 1 <= self.min_audio <= self.max_audio:
            raise ValueError("synth: need 1 <= min_audio <= max_audio")
        if self.sigma < 0:
            raise ValueError("synth: sigma must be >= 0")

    @property
    def max_visual_len(self) -> int:
        return self.max_events * self.max_segment


def event_word(k: int) -> str:
    return f"event{k}"


def modifier_word(k: int) -> str:
    return f"mod{k}"


def synth_vocabulary(config: SynthConfig) -> Vocabulary:
    return Vocabulary([modifier_word(k) for k in range(config.modifiers)]
                      + [event_word(k) for k in range(config.events)])


def _render(pattern_ids: Sequence[int], durations: Sequence[int], dim: int, sigma: float,
            rng: np.random.Generator) -> np.ndarray:
    rows = []
    for pid, dur in zip(pattern_ids, durations):
        onehot = np.zeros(dim)
        onehot[pid] = 1.0
        rows.extend([onehot] * dur)
    x = np.array(rows)
    if sigma > 0:
        x = x + rng.normal(0.0, sigma, size=x.shape)
    return x


def _event_sequence(rng: np.random.Generator, k: int, n_events: int) -> tuple[int, ...]:
    seq = [int(rng.integers(0, n_events))]
    for _ in range(k - 1):
        seq.append((seq[-1] + 1 + int(rng.integers(0, n_events - 1))) % n_events)
    return tuple(seq)


def synth_dataset(config: SynthConfig, seed: int = 0) -> Dataset:
    """Generate train/val/test splits; splits avoid sharing latent programs where possible."""
    config.validate()
    rng = np.random.default_rng(seed)
    vocab = synth_vocabulary(config)
    owner: dict[tuple, str] = {}
    dataset = Dataset(vocab, ["visual", "audio"])
    for split in SPLITS:
        count = getattr(config, split)
        samples = []
        for i in range(count):
            modifier = int(rng.integers(0, config.modifiers))
            for _ in range(100):
                k = int(rng.integers(config.min_events, config.max_events + 1))
                program = (modifier, _event_sequence(rng, k, config.events))
                if owner.get(program, split) == split:
                    break
            owner.setdefault(program, split)
            modifier, events = program
            durations = rng.integers(config.min_segment, config.max_segment + 1, size=len(events))
            visual = _render(events, durations, config.visual_dim, config.sigma, rng)
            n_audio = int(rng.integers(config.min_audio, config.max_audio + 1))
            audio = _render([modifier], [n_audio], config.audio_dim, config.sigma, rng)
            words = [modifier_word(modifier)] + [event_word(e) for e in events]
            samples.append(Sample(
                f"{split}{i:05d}",
                {"visual": ModalityStream("visual", visual), "audio": ModalityStream("audio", audio)},
                [vocab.encode(words)],
                program,
            ))
        dataset.splits[split] = samples
    return dataset
