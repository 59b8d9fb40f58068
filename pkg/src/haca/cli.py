"""Command-line entry point: ``haca synth|train|eval|generate|gradcheck|compare|describe``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_run_config, parse_overrides
from .data import (DataFormatError, Dataset, SynthConfig, load_dataset, make_batch,
                   save_dataset, synth_dataset)
from .decoder import ModelVariant
from .gradcheck import micro_gradcheck
from .inference import ModelStepper, beam_search, format_nbest
from .metrics import evaluate
from .model import EOS, HacaConfig, Model
from .training import Trainer, TrainingDiverged, model_from_checkpoint

log = logging.getLogger("haca")

VARIANTS = [v.value for v in ModelVariant]


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _setup_logging(log_path: Path | None = None) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(message)s")
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_path, mode="a"))
    for h in handlers:
        h.setFormatter(fmt)
        root.addHandler(h)
    root.setLevel(logging.INFO)


def _run_config(args, extra: Sequence[str]) -> RunConfig:
    overrides = parse_overrides(extra)
    for key in ("variant", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "preset", None):
        overrides["preset"] = args.preset
    return load_run_config(getattr(args, "config", None), overrides)


def _fit_to_data(run: RunConfig, dataset: Dataset) -> HacaConfig:
    """Take vocabulary size and feature dims from the data unless set explicitly."""
    model = run.model
    found = {"vocab_size": len(dataset.vocab)}
    found.update({f"{m}_dim": d for m, d in dataset.feature_dims().items()})
    for key, value in found.items():
        if not hasattr(model, key):
            continue
        if key in run.explicit and getattr(model, key) != value:
            raise ConfigError(f"{key} = {getattr(model, key)} in config but the data has {value}")
        setattr(model, key, value)
    try:
        model.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return model


def _echo_config(run: RunConfig) -> None:
    log.info("effective configuration (seed %d):", run.train.seed)
    for line in run.lines():
        log.info("  %s", line)


def _load_data(path: str) -> Dataset:
    if not path:
        raise UsageError("--data is required")
    return load_dataset(path)


def _split(dataset: Dataset, name: str):
    if name not in ("train", "val", "test"):
        raise UsageError(f"unknown split {name!r}")
    samples = dataset.splits.get(name, [])
    if not samples:
        raise ValueError(f"split {name!r} is empty")
    return samples


def _checkpoint_model(path: str, config_path: str | None = None) -> Model:
    ckpt = load_checkpoint(path)
    model = model_from_checkpoint(ckpt)
    if config_path:
        run = load_run_config(config_path)
        given = run.model.to_dict()
        stored = model.config.to_dict()
        differ = sorted(k for k in given if k in run.explicit and given[k] != stored[k])
        if differ:
            detail = ", ".join(f"{k}: config {given[k]!r} vs checkpoint {stored[k]!r}"
                               for k in differ)
            raise ConfigError(f"checkpoint/config mismatch in {detail}")
    return model


# ----------------------------------------------------------------- commands

def cmd_synth(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {list(extra)}")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
    cfg = SynthConfig(events=args.events, modifiers=args.modifiers, sigma=args.sigma,
                      visual_dim=args.visual_dim, audio_dim=args.audio_dim)
    if args.samples is not None:
        held = args.samples // 8
        cfg.train, cfg.val, cfg.test = args.samples - 2 * held, held, held
    for split in ("train", "val", "test"):
        value = getattr(args, split)
        if value is not None:
            setattr(cfg, split, value)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    dataset = synth_dataset(cfg, args.seed)
    save_dataset(dataset, out)
    print(f"wrote {out}: train {len(dataset.train)}, val {len(dataset.val)}, "
          f"test {len(dataset.test)}, vocabulary {len(dataset.vocab)}")
    return 0


def _make_trainer(run: RunConfig, dataset: Dataset, out: Path, resume: str | None) -> Trainer:
    kwargs = dict(metrics_path=out / "metrics.csv", checkpoint_path=out / "checkpoint.bin")
    if resume:
        ckpt = load_checkpoint(resume)
        trainer = Trainer.from_checkpoint(ckpt, dataset.train, dataset.val, run.train, **kwargs)
        log.info("resumed from %s at epoch %d", resume, trainer.epoch)
        return trainer
    model_cfg = _fit_to_data(run, dataset)
    rng = np.random.default_rng(run.train.seed)
    model = Model(model_cfg, rng)
    log.info("model %s with %d parameters", model_cfg.variant, model.num_params())
    return Trainer(model, dataset.train, dataset.val, run.train, rng, **kwargs)


def cmd_train(args, extra) -> int:
    run = _run_config(args, extra)
    out = Path(args.out or run.run["out"] or "run")
    _setup_logging(out / "run.log")
    _echo_config(run)
    dataset = _load_data(args.data or run.run["data"])
    trainer = _make_trainer(run, dataset, out, args.resume or run.run["resume"] or None)
    trainer.run()
    last = trainer.history[-1] if trainer.history else None
    if last is not None:
        print(f"epoch {last.epoch}: train_loss {last.train_loss:.4f} val_loss {last.val_loss:.4f} "
              f"val_bleu4 {last.val_bleu4:.4f}")
    print(f"checkpoint {out / 'checkpoint.bin'}, metrics {out / 'metrics.csv'}")
    return 0


def cmd_eval(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {list(extra)}")
    model = _checkpoint_model(args.checkpoint, args.config)
    dataset = _load_data(args.data)
    samples = _split(dataset, args.split)
    report, hyps = evaluate(model, samples, dataset.vocab, args.beam)
    print(report.text())
    if args.csv:
        Path(args.csv).write_text(report.csv_header() + "\n" + report.csv_row() + "\n")
    if args.dump:
        lines = [f"{s.id}\t{' '.join(dataset.vocab.decode(h))}" for s, h in zip(samples, hyps)]
        Path(args.dump).write_text("\n".join(lines) + "\n")
    return 0


def _write_trace(path: Path, model: Model, batch, tokens: list[int]) -> None:
    logs: list[dict] = []
    stepper = ModelStepper(model, logs)
    state = stepper.init((batch.features, batch.lengths))
    words = np.array([1])
    for tok in tokens + [EOS]:
        _, state = stepper.step(state, words)
        words = np.array([tok])
    keys = list(logs[0])
    for step_logs in logs:
        for k in step_logs:
            if k not in keys:
                keys.append(k)
    header = ["step", "token"]
    widths = {}
    for k in keys:
        widths[k] = max(np.asarray(s[k]).shape[-1] if k in s else 0 for s in logs)
        header += [f"{k}[{j}]" for j in range(widths[k])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, (step_logs, tok) in enumerate(zip(logs, tokens + [EOS]), 1):
            row: list[object] = [t, tok]
            for k in keys:
                vals = np.asarray(step_logs.get(k, np.zeros((1, 0))))[0]
                row += [repr(float(v)) for v in vals] + [""] * (widths[k] - len(vals))
            w.writerow(row)


def cmd_generate(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {list(extra)}")
    if args.beam < 1 or args.nbest < 1:
        raise UsageError("--beam and --nbest must be >= 1")
    model = _checkpoint_model(args.checkpoint, args.config)
    dataset = _load_data(args.data)
    samples = _split(dataset, args.split)
    modalities = list(model.encoder_configs)
    max_steps = args.max_steps or model.config.max_steps
    trace_dir = Path(args.trace) if args.trace else None
    if trace_dir is not None:
        trace_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        batch = make_batch([s], modalities)
        result = beam_search(model, (batch.features, batch.lengths), args.beam, max_steps,
                             nbest=args.nbest, length_normalize=args.length_normalize)
        if args.nbest == 1:
            lines.append(f"{s.id}\t{' '.join(dataset.vocab.decode(result.tokens))}")
        else:
            for rank, line in enumerate(format_nbest(result, dataset.vocab), 1):
                lines.append(f"{s.id}\t{rank}\t{line}")
        if trace_dir is not None:
            _write_trace(trace_dir / f"{s.id}.csv", model, batch, result.tokens)
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments {list(extra)}")
    variants = VARIANTS if args.variant == "all" else [ModelVariant.parse(args.variant).value]
    ok = True
    for v in variants:
        report = micro_gradcheck(v, seed=args.seed, step=args.step, tolerance=args.tolerance)
        print(f"[{v}] worst relative error {report.worst:.3e} "
              f"({'pass' if report.ok else 'FAIL'} at tolerance {args.tolerance:g})")
        for line in report.lines():
            print("  " + line)
        ok &= report.ok
    return 0 if ok else 1


def cmd_compare(args, extra) -> int:
    run = _run_config(args, extra)
    out = Path(args.out or run.run["out"] or "compare")
    _setup_logging(out / "run.log")
    _echo_config(run)
    dataset = _load_data(args.data or run.run["data"])
    variants = [ModelVariant.parse(v).value for v in args.variants.split(",") if v]
    merged = []
    for v in variants:
        vrun = load_run_config(getattr(args, "config", None),
                               {**parse_overrides(extra), "variant": v,
                                "seed": str(run.train.seed),
                                **({"preset": args.preset} if args.preset else {})})
        trainer = _make_trainer(vrun, dataset, out / v, None)
        trainer.run()
        src = out / v / "metrics.csv"
        (out / f"{v}.csv").write_text(src.read_text())
        with open(src) as fh:
            rows = list(csv.reader(fh))
        merged += [[v] + r for r in rows[1:]]
        log.info("%s: final val_bleu4 %s", v, rows[-1][3] if len(rows) > 1 else "n/a")
    with open(out / "merged.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "epoch", "train_loss", "val_loss", "val_bleu4", "lr",
                    "teacher_forcing_prob"])
        w.writerows(merged)
    print(f"wrote {len(variants)} learning curves and {out / 'merged.csv'}")
    return 0


def cmd_describe(args, extra) -> int:
    run = _run_config(args, extra)
    model = run.model
    if not model.vocab_size:
        model.vocab_size = 12
    print(Model(model, run.train.seed).describe())
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="haca", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic audio/visual caption dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--samples", type=int, help="total samples; 1/8 each go to val and test")
    s.add_argument("--train", type=int)
    s.add_argument("--val", type=int)
    s.add_argument("--test", type=int)
    s.add_argument("--events", type=int, default=4)
    s.add_argument("--modifiers", type=int, default=3)
    s.add_argument("--sigma", type=float, default=0.05)
    s.add_argument("--visual-dim", type=int, default=8)
    s.add_argument("--audio-dim", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth)

    def run_flags(q, out_default=None):
        q.add_argument("--config", help="key = value configuration file")
        q.add_argument("--preset", choices=["full", "micro", "small"])
        q.add_argument("--data")
        q.add_argument("--out", default=out_default)
        q.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train one model (extra --key value pairs override config)")
    run_flags(t)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="decode a split and report BLEU-4")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.add_argument("--split", default="test")
    e.add_argument("--beam", type=int, default=5)
    e.add_argument("--csv", help="write the report as CSV")
    e.add_argument("--dump", help="write decoded captions (id<TAB>caption)")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate", help="caption a split with beam search")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--config", help="fail if it disagrees with the checkpoint")
    g.add_argument("--split", default="test")
    g.add_argument("--beam", type=int, default=5)
    g.add_argument("--nbest", type=int, default=1)
    g.add_argument("--max-steps", type=int, default=0)
    g.add_argument("--length-normalize", action="store_true",
                   help="rank final hypotheses by score per token")
    g.add_argument("--trace", help="directory for per-sample attention weight CSVs")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    c = sub.add_parser("gradcheck", help="finite-difference check of a micro model")
    c.add_argument("--variant", default="all", choices=["all"] + VARIANTS)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--step", type=float, default=1e-5)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("compare", help="train several variants on the same data and seed")
    run_flags(m)
    m.add_argument("--variants", default=",".join(VARIANTS))
    m.set_defaults(func=cmd_compare)

    d = sub.add_parser("describe", help="print the parameter table of a configuration")
    d.add_argument("--config")
    d.add_argument("--preset", choices=["full", "micro", "small"])
    d.add_argument("--variant", choices=VARIANTS)
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_describe)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if extra and args.command not in ("train", "compare", "describe"):
        parser.print_usage(sys.stderr)
        print(f"haca: error: unrecognized arguments: {' '.join(extra)}", file=sys.stderr)
        return 2
    try:
        return args.func(args, extra)
    except (UsageError, ConfigError) as exc:
        print(f"haca: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, CheckpointError, DataFormatError, FileNotFoundError,
            KeyError, ValueError) as exc:
        print(f"haca: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
