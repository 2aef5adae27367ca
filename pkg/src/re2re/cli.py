"""Command-line entry points: generate, pretrain, adapt, evaluate, trials, verify.

Exit codes: 0 success, 1 validation error, 2 I/O or file-format error,
3 property-suite failure.  Outputs are byte-identical for identical inputs;
timestamps only go to the ``run.log`` sidecar in the output directory.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import diffcore, synthdata, trainer, verify
from .report import MetricsReport
from .separator import CheckpointError, load_checkpoint, save_checkpoint
from .synthdata import CorpusSpec, Manifest, ManifestError, WavFormatError
from .trainer import ConfigError, TrainConfig

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_PROPERTY = 0, 1, 2, 3

log = logging.getLogger("re2re")

# flag name -> TrainConfig field
TRAIN_FLAGS = {"seed": "seed", "mode": "mode", "gamma": "gamma", "beta": "beta",
               "batch": "batch_size", "epochs": "epochs", "pretrain_epochs": "pretrain_epochs",
               "lr": "lr", "pretrain_lr": "pretrain_lr", "workers": "workers"}
CORPUS_FLAGS = {"domain": "domain", "seed": "seed", "noise_kind": "noise_kind",
                "snr_mean": "snr_mean_db", "snr_std": "snr_std_db",
                "num_utterances": "num_utterances", "num_eval": "num_eval",
                "chunk_seconds": "chunk_seconds", "sample_rate": "sample_rate"}


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return d


def _overrides(args, flags: dict) -> dict:
    return {field: getattr(args, flag) for flag, field in flags.items()
            if getattr(args, flag, None) is not None}


def train_config(args) -> TrainConfig:
    d = _read_config(args.config)
    d = dict(d.get("train", {k: v for k, v in d.items() if k != "corpus"}))
    d.update(_overrides(args, TRAIN_FLAGS))
    return TrainConfig.from_dict(d)


def corpus_spec(args) -> CorpusSpec:
    d = _read_config(args.config)
    d = dict(d.get("corpus", {k: v for k, v in d.items() if k != "train"}))
    d.update(_overrides(args, CORPUS_FLAGS))
    return CorpusSpec.from_dict(d)


@contextlib.contextmanager
def sidecar_log(out_dir: Path | None):
    """Timestamped log file next to the outputs (the only non-reproducible file)."""
    if out_dir is None:
        yield
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root = logging.getLogger("re2re")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    try:
        yield
    finally:
        root.removeHandler(handler)
        handler.close()


def emit_report(report: MetricsReport, out_dir: Path, name: str) -> None:
    path = report.write_csv(out_dir / f"{name}.csv")
    print(report.table())
    print(f"\nwrote {path}")


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    spec = corpus_spec(args)
    out = Path(args.out)
    with sidecar_log(out):
        log.info("generating %s", asdict(spec))
        manifest = synthdata.synthesize_corpus(spec, out, workers=args.workers or 0)
    print(f"wrote {len(manifest.records)} records to {manifest.path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = replace(train_config(args), mode="supervised")
    out = Path(args.out)
    with sidecar_log(out):
        ood = Manifest.load(args.ood)
        recs = sorted(ood.split("train"), key=lambda r: r.id)
        data = synthdata.load_arrays(ood, recs, with_references=True, workers=config.workers)
        ckpt = trainer.pretrain_supervised(config, data)
        meta = dict(ckpt.meta, train_config=config.recipe())
        path = save_checkpoint(out / "pretrained.npz", ckpt.config, ckpt.params,
                               ckpt.rng_state, meta)
    hist = ckpt.meta["history"]
    print(f"pretrained {len(hist)} epochs: loss {hist[0]:.4f} -> {hist[-1]:.4f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    config = train_config(args)
    if config.mode not in trainer.ADAPT_MODES:
        raise ConfigError(f"mode: adaptation needs one of {trainer.ADAPT_MODES}")
    out = Path(args.out)
    with sidecar_log(out):
        ckpt = load_checkpoint(args.checkpoint)
        config = replace(config, separator=ckpt.config)
        ind = Manifest.load(args.indomain)
        recs = sorted(ind.split("train"), key=lambda r: r.id)
        mixtures = synthdata.load_arrays(ind, recs, workers=config.workers)["mixture"]
        state = trainer.adapt(ckpt.params, mixtures, config)
        path = trainer.state_to_checkpoint(state, config, out / f"adapted_{config.mode}.npz")
    print(f"adapted with {config.mode} for {state.epoch} epochs ({state.steps} steps)")
    print(f"wrote {path}")
    return EXIT_OK


def _eval_data(manifest_dir, workers: int) -> dict:
    manifest = Manifest.load(manifest_dir)
    recs = sorted(manifest.split("eval"), key=lambda r: r.id)
    if not recs:
        raise ManifestError(f"{manifest.path}: no eval records")
    data = synthdata.load_arrays(manifest, recs, with_references=True, workers=workers)
    data["conditions"] = [r.condition for r in recs]
    return data


def cmd_evaluate(args) -> int:
    if (args.checkpoint is None) == (not args.identity):
        raise ConfigError("checkpoint: give exactly one of --checkpoint or --identity")
    out = Path(args.out)
    with sidecar_log(out):
        data = _eval_data(args.manifest, args.workers or 0)
        if args.identity:
            est, method = trainer.identity_estimator, args.method or "input"
        else:
            ckpt = load_checkpoint(args.checkpoint)
            est = trainer.model_estimator(ckpt.params, ckpt.config)
            method = args.method or ckpt.meta.get("stage", "model")
        result = trainer.evaluate(est, data, method)
    emit_report(result.report(), out, "metrics")
    return EXIT_OK


def cmd_trials(args) -> int:
    config = train_config(args)
    if args.n < 2:
        raise ConfigError("n: trials need at least 2 teacher seeds")
    out = Path(args.out)
    with sidecar_log(out):
        data = trainer.load_corpus_data(args.ood, args.indomain, workers=config.workers)
        seeds = range(config.seed, config.seed + args.n)
        report = trainer.multi_trial(config, data, seeds)
    emit_report(report, out, "trials")
    return EXIT_OK


def cmd_verify(args) -> int:
    ctx = diffcore.inject_gradient_fault(args.corrupt_op) if args.corrupt_op \
        else contextlib.nullcontext()
    with ctx:
        results = verify.run_suite(quick=args.quick, seed=args.seed or 0)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"\n{len(results) - len(failed)}/{len(results)} properties passed in {total:.1f} s")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_PROPERTY
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _train_flags(p: argparse.ArgumentParser, mode: bool = True) -> None:
    p.add_argument("--config", help="JSON run config (optional 'train' section)")
    p.add_argument("--seed", type=int)
    if mode:
        p.add_argument("--mode", choices=trainer.MODES)
    p.add_argument("--gamma", type=float, help="WMA weight for the teacher update")
    p.add_argument("--beta", type=float, help="Re2Re weight in the regularised loss")
    p.add_argument("--batch", type=int, help="batch size")
    p.add_argument("--epochs", type=int, help="adaptation epochs")
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--lr", type=float, help="adaptation learning rate")
    p.add_argument("--pretrain-lr", type=float, help="pre-training learning rate (default: --lr)")
    p.add_argument("--workers", type=int, help="parallel file readers (results do not change)")


class _Parser(argparse.ArgumentParser):
    """Bad flags are validation errors (exit 1), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="re2re", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesise a corpus")
    g.add_argument("--config", help="JSON corpus spec (optional 'corpus' section)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--domain", choices=synthdata.DOMAINS)
    g.add_argument("--noise-kind", choices=synthdata.NOISE_KINDS)
    g.add_argument("--snr-mean", type=float)
    g.add_argument("--snr-std", type=float)
    g.add_argument("--num-utterances", type=int)
    g.add_argument("--num-eval", type=int)
    g.add_argument("--chunk-seconds", type=float)
    g.add_argument("--sample-rate", type=int)
    g.add_argument("--workers", type=int)
    g.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="supervised pre-training on the OOD corpus")
    p.add_argument("--ood", required=True, help="OOD corpus directory")
    p.add_argument("--out", required=True)
    _train_flags(p, mode=False)
    p.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("adapt", help="teacher-student adaptation on in-domain mixtures")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--indomain", required=True, help="in-domain corpus directory")
    a.add_argument("--out", required=True)
    _train_flags(a)
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("evaluate", help="SI-SDR on a corpus eval split")
    e.add_argument("--manifest", required=True, help="corpus directory or manifest file")
    e.add_argument("--checkpoint")
    e.add_argument("--identity", action="store_true", help="score the unprocessed mixtures")
    e.add_argument("--method", help="row label in the report")
    e.add_argument("--out", required=True)
    e.add_argument("--workers", type=int)
    e.set_defaults(func=cmd_evaluate)

    t = sub.add_parser("trials", help="pretrain + adapt over several teacher seeds")
    t.add_argument("--ood", required=True)
    t.add_argument("--indomain", required=True)
    t.add_argument("--n", type=int, default=10, help="number of teacher seeds")
    t.add_argument("--out", required=True)
    _train_flags(t, mode=False)
    t.set_defaults(func=cmd_trials)

    v = sub.add_parser("verify", help="run the property suite")
    v.add_argument("--quick", action="store_true", help="fewer gradient points and pairs")
    v.add_argument("--seed", type=int)
    v.add_argument("--corrupt-op", choices=diffcore.OP_NAMES, help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ManifestError, CheckpointError, WavFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
