"""Command-line entry point.

Subcommands: generate-corpus, train, evaluate, stability, augment-sweep,
gradcheck. All experiment settings come from a JSON config file (--config);
a missing file option means defaults. The PEFTLAB_SEED environment variable
overrides the config seed. Exit codes: 0 success, 1 configuration or
contract error, 2 numerical abort during training.

Every command is deterministic: rerunning with the same config produces
byte-identical output files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import trainer
from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from .config import dumps, load_config
from .corpus import generate_task, write_jsonl
from .objective import ThetaSnapshot
from .peft import ConfigError, FreezePlan, apply_freeze, make_freeze_plan
from .trainer import NumericalAbort, RunConfig

METRICS_HEADER = ("run_id", "seed", "epoch", "split", "accuracy", "f1", "em",
                  "loss_task", "loss_align", "loss_reg", "loss_total")
STABILITY_HEADER = ("run_id", "seed", "final_dev_metric", "mean", "std", "score")
SWEEP_HEADER = ("run_id", "ratio", "delta", "accuracy", "f1", "em")

CHECKPOINT_FILE = "checkpoint.bin"
METRICS_FILE = "metrics.csv"
PLAN_FILE = "freeze_plan.txt"
CONFIG_FILE = "config.json"
MANIFEST_FILE = "manifest.json"


def run_id_for(config: RunConfig) -> str:
    """Stable id derived from the canonical config serialization."""
    return hashlib.sha256(dumps(config).encode("utf-8")).hexdigest()[:12]


def _load(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    env_seed = os.environ.get("PEFTLAB_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"PEFTLAB_SEED must be an integer, got {env_seed!r}")
        config = replace(config, seed=seed)
        if config.augmentation is not None:
            config = replace(config, augmentation=replace(config.augmentation, seed=seed))
    return config


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value) -> str:
    return repr(float(value))


def _metric_row(run_id: str, seed: int, record) -> list:
    m = record.metrics
    return [run_id, seed, record.epoch, record.split,
            _fmt(m.accuracy), _fmt(m.f1), _fmt(m.em),
            _fmt(m.losses.task), _fmt(m.losses.align),
            _fmt(m.losses.reg), _fmt(m.losses.total)]


# -- subcommands ----------------------------------------------------------------

def cmd_generate_corpus(args) -> int:
    config = _load(args)
    out = _outdir(args)
    splits = generate_task(config.task, config.split_spec(),
                           vocab_size=config.model.vocab_size, eta=config.eta)
    files = {}

    def emit(name, instances):
        write_jsonl(out / f"{name}.jsonl", instances)
        files[f"{name}.jsonl"] = len(instances)

    emit("source_train", splits.source_train)
    for name in ("target_train", "target_dev", "target_test"):
        instances = getattr(splits, name)
        emit(name, instances)
        # parallel source counterparts, rejoinable by pair_id
        emit(f"{name}_sources", [x.parallel for x in instances if x.parallel is not None])

    manifest = {
        "task": config.task,
        "seed": config.seed,
        "vocab_size": config.model.vocab_size,
        "eta": config.eta,
        "files": files,
        "sizes": {
            "source_train": len(splits.source_train),
            "target_train": len(splits.target_train),
            "target_dev": len(splits.target_dev),
            "target_test": len(splits.target_test),
        },
    }
    (out / MANIFEST_FILE).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _say(args, f"wrote {sum(files.values())} instances across {len(files)} files to {out}")
    return 0


def cmd_train(args) -> int:
    config = _load(args)
    out = _outdir(args)
    result = trainer.train(config)
    run_id = run_id_for(config)

    rows = [_metric_row(run_id, config.seed, rec) for rec in result.trace]
    _write_csv(out / METRICS_FILE, METRICS_HEADER, rows)

    snapshot = {name: result.snapshot[name] for name in sorted(result.snapshot.names())}
    save_checkpoint(out / CHECKPOINT_FILE, result.model.state_dict(), snapshot)
    (out / PLAN_FILE).write_text(result.plan.serialize() + "\n", encoding="utf-8")
    (out / CONFIG_FILE).write_text(dumps(config), encoding="utf-8")

    final = result.trace[-1].metrics
    _say(args, f"run {run_id}: test accuracy {final.accuracy:.4f}, f1 {final.f1:.4f}, "
               f"em {final.em:.4f} -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load(args)
    out = _outdir(args)
    ckpt_path = out / CHECKPOINT_FILE
    if not ckpt_path.exists():
        raise ConfigError(f"no checkpoint at {ckpt_path}; run train first")
    state, theta0 = load_checkpoint(ckpt_path)

    model = trainer.build_model(config)
    trainer.attach_modules(config, model)
    model.load_state_dict(state)
    plan = make_freeze_plan(model, config.freeze_mode)
    snapshot = ThetaSnapshot(theta0) if theta0 is not None else None

    reference = None
    if config.weights.lam > 0:
        # The backbone is frozen during transfer, so the saved state still
        # holds the pretrained backbone; theta0 restores the pretrained head.
        bare = trainer.build_model(config)
        bare_names = set(bare.parameters())
        ref_state = {name: state[name] for name in bare_names}
        if theta0 is not None:
            for name in bare_names & set(theta0):
                ref_state[name] = theta0[name]
        bare.load_state_dict(ref_state)
        apply_freeze(bare, FreezePlan([]))
        reference = bare

    splits = generate_task(config.task, config.split_spec(),
                           vocab_size=config.model.vocab_size, eta=config.eta)
    metrics = trainer.evaluate(model, splits.target_test, config.task, config.weights,
                               plan, snapshot, reference)
    run_id = run_id_for(config)
    record = trainer.EpochRecord(config.transfer_epochs, "test", metrics)
    _write_csv(out / "evaluate.csv", METRICS_HEADER,
               [_metric_row(run_id, config.seed, record)])
    _say(args, f"run {run_id}: test accuracy {metrics.accuracy:.4f}, f1 {metrics.f1:.4f}, "
               f"em {metrics.em:.4f}")
    return 0


def cmd_stability(args) -> int:
    config = _load(args)
    out = _outdir(args)
    seeds = _parse_seeds(args.seeds)
    report = trainer.stability(config, seeds)
    run_id = run_id_for(config)

    rows = [[run_id, seed, _fmt(value), "", "", ""]
            for seed, value in zip(seeds, report.values)]
    rows.append([run_id, "aggregate", "", _fmt(report.mean), _fmt(report.std),
                 _fmt(report.score)])
    _write_csv(out / "stability.csv", STABILITY_HEADER, rows)
    note = f" ({report.note})" if report.note else ""
    _say(args, f"run {run_id}: stability score {report.score:.4f} "
               f"over seeds {seeds}{note}")
    return 0


def cmd_augment_sweep(args) -> int:
    config = _load(args)
    out = _outdir(args)
    ratios = _parse_ratios(args.ratios)
    curve = trainer.augmentation_sweep(config, ratios, args.delta)
    run_id = run_id_for(config)

    rows = [[run_id, _fmt(rho), _fmt(args.delta),
             _fmt(m.accuracy), _fmt(m.f1), _fmt(m.em)] for rho, m in curve]
    _write_csv(out / "sweep.csv", SWEEP_HEADER, rows)
    best_rho, best = max(curve, key=lambda item: item[1].accuracy)
    _say(args, f"run {run_id}: best accuracy {best.accuracy:.4f} at ratio {best_rho:g} "
               f"(delta {args.delta:g})")
    return 0


def cmd_gradcheck(args) -> int:
    config = _load(args) if args.config else None
    report = trainer.gradient_check(config)
    _say(args, f"max relative gradient error: {report.max_error:.3e} "
               f"(tolerance {report.tolerance:.0e})")
    if not report.passed:
        failing = ", ".join(sorted(report.failing()))
        print(f"gradient check FAILED for: {failing}", file=sys.stderr)
        return 1
    _say(args, "gradient check passed")
    return 0


# -- argument plumbing ------------------------------------------------------------

def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}")


def _parse_ratios(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError(f"--ratios expects comma-separated floats, got {text!r}")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for numerical aborts
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="peftlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--out", default="runs", help="output directory (default: runs)")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
        p.set_defaults(func=func)
        return p

    add("generate-corpus", cmd_generate_corpus,
        help="write dataset splits and a manifest")
    add("train", cmd_train,
        help="pretrain on source, transfer to target; write checkpoint and metrics")
    add("evaluate", cmd_evaluate,
        help="evaluate a saved checkpoint on the target test split")

    p = add("stability", cmd_stability, help="rerun training across seeds and score spread")
    p.add_argument("--seeds", default="0,1,2,3,4",
                   help="comma-separated seeds (default: 0,1,2,3,4)")

    p = add("augment-sweep", cmd_augment_sweep,
            help="train across pseudo-data ratios at a fixed drift")
    p.add_argument("--ratios", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0",
                   help="comma-separated ratio grid including 0")
    p.add_argument("--delta", type=float, default=0.4,
                   help="distribution drift of the pseudo data (default: 0.4)")

    add("gradcheck", cmd_gradcheck,
        help="finite-difference check of every trainable gradient")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalAbort as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
