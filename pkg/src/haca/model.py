"""Model assembly: configuration, parameter construction, teacher-forced unroll."""

from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .attention import CrossModalParams, SoftAttentionParams
from .decoder import (DecoderParams, DecoderStack, DecoderState, Memory, ModelVariant,
                      decode_step)
from .encoder import EncodedModality, HierEncoderConfig, HierEncoderParams, encode
from .recurrent import LstmParams
from .tensor import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3


@dataclass
class HacaConfig:
    """Architecture hyperparameters.  Defaults are the full-size setting."""

    variant: str = "haca"
    visual_dim: int = 2048
    visual_low_hidden: int = 512
    visual_high_hidden: int = 256
    visual_chunk: int = 10
    visual_max_len: int = 50
    audio_dim: int = 128
    audio_low_hidden: int = 128
    audio_high_hidden: int = 64
    audio_chunk: int = 4
    audio_max_len: int = 20
    global_hidden: int = 256
    local_hidden: int = 1024
    embed_dim: int = 512
    attn_dim: int = 0            # 0: each attention uses its consumer's hidden dim
    vocab_size: int = 0
    max_steps: int = 16
    init_range: float = 0.08
    forget_bias: float = 1.0
    dropout: float = 0.5

    def __post_init__(self):
        self.variant = ModelVariant.parse(self.variant).value

    @classmethod
    def micro(cls, **overrides) -> "HacaConfig":
        """Desk-scale dimensions used by tests and the synthetic experiments."""
        base = dict(
            visual_dim=8, visual_low_hidden=8, visual_high_hidden=8, visual_chunk=3,
            visual_max_len=50, audio_dim=4, audio_low_hidden=4, audio_high_hidden=4,
            audio_chunk=2, audio_max_len=20, global_hidden=8, local_hidden=16, embed_dim=8,
            vocab_size=12, max_steps=16, dropout=0.0,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def small(cls, **overrides) -> "HacaConfig":
        """Micro layout widened for the synthetic learning experiments.

        The larger init range shortens the initial plateau in which the
        audio-to-output path carries almost no gradient.
        """
        base = dict(visual_low_hidden=16, visual_high_hidden=16, audio_low_hidden=8,
                    audio_high_hidden=8, global_hidden=16, local_hidden=32, embed_dim=16,
                    init_range=0.5)
        base.update(overrides)
        return cls.micro(**base)

    @property
    def model_variant(self) -> ModelVariant:
        return ModelVariant.parse(self.variant)

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name in ("variant", "attn_dim", "dropout", "forget_bias", "init_range"):
                continue
            if value < 1:
                raise ValueError(f"config: {f.name} must be positive, got {value}")
        if self.attn_dim < 0:
            raise ValueError("config: attn_dim must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"config: dropout must lie in [0, 1), got {self.dropout}")
        if self.init_range < 0:
            raise ValueError("config: init_range must be >= 0")

    def encoder_configs(self) -> list[HierEncoderConfig]:
        variant = self.model_variant
        out = []
        for name in variant.modalities:
            out.append(HierEncoderConfig(
                name=name,
                input_dim=getattr(self, f"{name}_dim"),
                low_hidden=getattr(self, f"{name}_low_hidden"),
                high_hidden=getattr(self, f"{name}_high_hidden"),
                chunk=getattr(self, f"{name}_chunk"),
                max_len=getattr(self, f"{name}_max_len"),
                hierarchical=variant.hierarchical,
            ))
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping) -> "HacaConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(values) - set(kinds)
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        parsed = {}
        for key, raw in values.items():
            default = getattr(cls(), key)
            parsed[key] = type(default)(raw) if not isinstance(default, str) else str(raw)
        return cls(**parsed)


class _ParamFactory:
    """Draws every parameter from one generator in a fixed registration order."""

    def __init__(self, rng: np.random.Generator, init_range: float, forget_bias: float):
        self.rng = rng
        self.r = init_range
        self.forget_bias = forget_bias
        self.params: dict[str, Tensor] = {}

    def tensor(self, name: str, shape: tuple[int, ...]) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name}")
        t = Tensor(self.rng.uniform(-self.r, self.r, size=shape), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def lstm(self, prefix: str, d_in: int, hidden: int) -> LstmParams:
        p = LstmParams(self.tensor(f"{prefix}.W_x", (4 * hidden, d_in)),
                       self.tensor(f"{prefix}.W_h", (4 * hidden, hidden)),
                       self.tensor(f"{prefix}.b", (4 * hidden,)))
        p.b.data[hidden:2 * hidden] = self.forget_bias
        return p

    def attention(self, prefix: str, d_feature: int, d_query: int, dim: int) -> SoftAttentionParams:
        return SoftAttentionParams(self.tensor(f"{prefix}.W_f", (dim, d_feature)),
                                   self.tensor(f"{prefix}.W_q", (dim, d_query)),
                                   self.tensor(f"{prefix}.v", (1, dim)))

    def fusion(self, prefix: str, names: list[str], dims: list[int], fusion_dim: int,
               d_query: int, attn_dim: int) -> CrossModalParams:
        projections = [self.tensor(f"{prefix}.W_{n}", (fusion_dim, d)) for n, d in zip(names, dims)]
        b = self.tensor(f"{prefix}.b", (fusion_dim,))
        scorer = self.attention(f"{prefix}.score", fusion_dim, d_query, attn_dim)
        return CrossModalParams(projections, b, scorer)


def _decoder_layout(variant: ModelVariant) -> list[tuple[str, list[str], bool]]:
    """(name, encoder sources, uses self-attention) for each decoder, in run order."""
    if variant is ModelVariant.HACA:
        return [("global", ["visual.high", "audio.high"], True),
                ("local", ["visual.low", "audio.low"], True)]
    if variant is ModelVariant.HACA_NO_ALIGN:
        return [("main", ["visual.high", "visual.low", "audio.high", "audio.low"], True)]
    if variant is ModelVariant.CM_ATT_VAD:
        return [("main", ["visual.low", "audio.low"], True)]
    if variant is ModelVariant.CM_ATT_VA:
        return [("main", ["visual.low", "audio.low"], False)]
    return [("main", ["visual.low"], False)]


class Model:
    """All parameters of one model variant plus the code paths that use them."""

    def __init__(self, config: HacaConfig, rng: np.random.Generator | int | None = 0):
        config.validate()
        self.config = config
        self.variant = config.model_variant
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        factory = _ParamFactory(rng, config.init_range, config.forget_bias)
        self.counters: Counter = Counter()

        self.encoder_configs = {c.name: c for c in config.encoder_configs()}
        self.encoders: dict[str, HierEncoderParams] = {}
        for name, ec in self.encoder_configs.items():
            prefix = f"encoder.{name}"
            low_fwd = factory.lstm(f"{prefix}.low.fwd", ec.input_dim, ec.low_hidden)
            low_bwd = factory.lstm(f"{prefix}.low.bwd", ec.input_dim, ec.low_hidden)
            if ec.hierarchical:
                attn = factory.attention(f"{prefix}.chunk_attn", ec.low_dim, ec.high_hidden,
                                         config.attn_dim or ec.high_hidden)
                high = factory.lstm(f"{prefix}.high", ec.low_dim, ec.high_hidden)
                self.encoders[name] = HierEncoderParams(low_fwd, low_bwd, attn, high)
            else:
                self.encoders[name] = HierEncoderParams(low_fwd, low_bwd)

        embedding = factory.tensor("embedding", (config.vocab_size, config.embed_dim))
        decoders = []
        layout = _decoder_layout(self.variant)
        for name, sources, use_self in layout:
            hidden = config.global_hidden if name == "global" else config.local_hidden
            attn_dim = config.attn_dim or hidden
            prefix = f"decoder.{name}"
            attns = {}
            dims = []
            for src in sources:
                modality, level = src.split(".")
                ec = self.encoder_configs[modality]
                dim = ec.high_hidden if level == "high" else ec.low_dim
                attns[src] = factory.attention(f"{prefix}.attn.{src.replace('.', '_')}",
                                               dim, hidden, attn_dim)
                dims.append(dim)
            self_attn = None
            if use_self:
                self_attn = factory.attention(f"{prefix}.self_attn", hidden, hidden, attn_dim)
            fusion = None
            if len(sources) + use_self > 1:
                names = [s.replace(".", "_") for s in sources] + (["decoder"] if use_self else [])
                fusion = factory.fusion(f"{prefix}.fusion", names,
                                        dims + ([hidden] if use_self else []),
                                        hidden, hidden, attn_dim)
                context_dim = hidden
            else:
                context_dim = dims[0]
            extra = config.global_hidden if name == "local" else 0
            lstm = factory.lstm(f"{prefix}.lstm", context_dim + config.embed_dim + extra, hidden)
            decoders.append(DecoderParams(name, sources, attns, lstm, self_attn, fusion))
        W_p = factory.tensor("proj.W_p", (config.vocab_size, decoders[-1].hidden))
        self.stack = DecoderStack(self.variant, decoders, embedding, W_p, config.dropout)
        self.params: dict[str, Tensor] = factory.params

    # ------------------------------------------------------------ bookkeeping

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def describe(self) -> str:
        width = max(len(n) for n in self.params)
        rows = [f"{'name':<{width}}  {'shape':<14} count"]
        for name, p in self.params.items():
            rows.append(f"{name:<{width}}  {str(p.shape):<14} {p.data.size}")
        rows.append(f"{'total':<{width}}  {'':<14} {self.num_params()}")
        return "\n".join(rows)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {p.shape}")
        for name, p in self.params.items():
            p.data[...] = arrays[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # ----------------------------------------------------------------- running

    def encode(self, features: Mapping[str, np.ndarray],
               lengths: Mapping[str, np.ndarray] | None = None) -> dict[str, EncodedModality]:
        out = {}
        for name, ec in self.encoder_configs.items():
            if name not in features:
                raise KeyError(f"missing modality stream {name!r}")
            enc = encode(features[name], ec, self.encoders[name],
                         None if lengths is None else lengths.get(name))
            self.counters[f"high_steps.{name}"] += enc.high_steps
            out[name] = enc
        return out

    def start(self, features, lengths=None) -> tuple[DecoderState, Memory, dict]:
        """Encode inputs and return the initial decoder state and attention memory."""
        encoded = self.encode(features, lengths)
        batch = next(iter(encoded.values())).batch
        return self.stack.initial_state(batch, BOS), self.stack.prepare_memory(encoded), encoded

    def decode_step(self, state: DecoderState, memory: Memory, w_prev=None, *, train=False,
                    rng=None, logs=None) -> tuple[Tensor, DecoderState]:
        return decode_step(self.stack, state, memory, w_prev, train=train, rng=rng, logs=logs)

    def forward_teacher_forced(self, features, targets: np.ndarray, lengths=None, *,
                               train: bool = False, rng: np.random.Generator | None = None,
                               teacher_forcing: float = 1.0,
                               logs: list | None = None) -> list[Tensor]:
        """Per-step next-word log-probabilities (B, |V|) for a (B, T) target batch.

        Step ``t`` is fed BOS for ``t = 1`` and otherwise the ground-truth word
        ``t - 1``, replaced row-wise by the model's own previous argmax with
        probability ``1 - teacher_forcing``.  Draw order per step: the
        sampling decisions, then dropout masks.
        """
        targets = np.asarray(targets)
        if targets.ndim == 1:
            targets = targets[None]
        state, memory, _ = self.start(features, lengths)
        outputs: list[Tensor] = []
        words = state.prev_words
        for t in range(targets.shape[1]):
            if t > 0:
                words = targets[:, t - 1]
                if teacher_forcing < 1.0:
                    words = scheduled_sample(words, outputs[-1].data.argmax(axis=-1),
                                             teacher_forcing, rng)
            step_logs = {} if logs is not None else None
            logp, state = self.decode_step(state, memory, words, train=train, rng=rng,
                                           logs=step_logs)
            if logs is not None:
                logs.append(step_logs)
            outputs.append(logp)
        return outputs


def scheduled_sample(truth: np.ndarray, predicted: np.ndarray, prob: float,
                     rng: np.random.Generator | None) -> np.ndarray:
    """Row-wise choice: ground truth with probability ``prob``, else the model's word."""
    if prob >= 1.0:
        return truth
    if prob <= 0.0:
        return predicted.astype(truth.dtype)
    if rng is None:
        raise ValueError("scheduled sampling needs a random generator")
    use_truth = rng.random(truth.shape[0]) < prob
    return np.where(use_truth, truth, predicted)


def build(config: HacaConfig, seed: np.random.Generator | int | None = 0) -> Model:
    return Model(config, seed)


