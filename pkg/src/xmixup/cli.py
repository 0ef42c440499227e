"""Command-line driver: data generation, training, evaluation, analysis, sweeps.

Configuration comes from three layers with increasing precedence: built-in
defaults, a flat ``key = value`` config file (sections via dotted keys, e.g.
``train.alpha``), and command-line flags. Every run echoes its fully resolved
configuration so results can be reproduced byte for byte.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .analysis import discrepancy_report
from .corpus import DatasetBundle, ToyLanguageSpec, gen_bundle, load_jsonl, save_jsonl
from .encoder import EncoderConfig
from .gradcheck import TOLERANCE, run_gradient_suite
from .harness import ablate, sweep_layer, write_rows_csv
from .losses import TaskKind
from .trainer import (TASK_ALPHA, TASK_SCHEDULE_K, TrainConfig, evaluate,
                      load_checkpoint, save_checkpoint, train)

logger = logging.getLogger("xmixup")

DEFAULTS: dict[str, object] = {
    "corpus.task": "classification",
    "corpus.train_size": 2000,
    "corpus.test_size": 400,
    "corpus.vocab_size": 50,
    "corpus.swap_rate": 0.1,
    "corpus.noise_rate": 0.1,
    "corpus.seed": 0,
    "encoder.num_layers": 2,
    "encoder.d_model": 32,
    "encoder.num_heads": 4,
    "encoder.ffn_dim": 64,
    "encoder.vocab_size": 50,
    "encoder.max_len": 24,
    "train.alpha": None,       # per-task default when unset
    "train.lambda0": 0.5,
    "train.mix_layer": 1,
    "train.schedule_k": None,  # per-task default when unset
    "train.learning_rate": 1e-3,
    "train.batch_size": 16,
    "train.epochs": 3,
    "train.seed": 0,
    "train.use_mixup": True,
    "train.mixup_inference": True,
    "train.scheduled_sampling": True,
    "train.mse_consistency": True,
    "train.kl_consistency": True,
    "train.constant_lambda": False,
}


class CliError(RuntimeError):
    pass


def _parse_value(text: str):
    text = text.strip()
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    if lowered in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip("\"'")


def read_config_file(path) -> dict[str, object]:
    values: dict[str, object] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            values[key.strip()] = _parse_value(value)
    return values


def resolve_config(file_path: str | None, flag_values: dict[str, object]) -> dict[str, object]:
    """defaults < config file < flags; unknown file keys are rejected."""
    resolved = dict(DEFAULTS)
    if file_path:
        for key, value in read_config_file(file_path).items():
            if key not in resolved:
                raise CliError(f"unknown config key {key!r}")
            resolved[key] = value
    for key, value in flag_values.items():
        if value is not None:
            resolved[key] = value
    task = TaskKind(resolved["corpus.task"])
    if resolved["train.alpha"] is None:
        resolved["train.alpha"] = TASK_ALPHA[task]
    if resolved["train.schedule_k"] is None:
        resolved["train.schedule_k"] = TASK_SCHEDULE_K[task]
    return resolved


def train_config_from(resolved: dict[str, object]) -> TrainConfig:
    encoder = EncoderConfig(
        num_layers=int(resolved["encoder.num_layers"]),
        d_model=int(resolved["encoder.d_model"]),
        num_heads=int(resolved["encoder.num_heads"]),
        ffn_dim=int(resolved["encoder.ffn_dim"]),
        vocab_size=int(resolved["encoder.vocab_size"]),
        max_len=int(resolved["encoder.max_len"]),
    )
    return TrainConfig(
        task=TaskKind(resolved["corpus.task"]),
        encoder=encoder,
        alpha=float(resolved["train.alpha"]),
        lambda0=float(resolved["train.lambda0"]),
        mix_layer=int(resolved["train.mix_layer"]),
        schedule_k=float(resolved["train.schedule_k"]),
        learning_rate=float(resolved["train.learning_rate"]),
        batch_size=int(resolved["train.batch_size"]),
        epochs=int(resolved["train.epochs"]),
        seed=int(resolved["train.seed"]),
        use_mixup=bool(resolved["train.use_mixup"]),
        mixup_inference=bool(resolved["train.mixup_inference"]),
        scheduled_sampling=bool(resolved["train.scheduled_sampling"]),
        mse_consistency=bool(resolved["train.mse_consistency"]),
        kl_consistency=bool(resolved["train.kl_consistency"]),
        constant_lambda=bool(resolved["train.constant_lambda"]),
    )


def toy_spec_from(resolved: dict[str, object]) -> ToyLanguageSpec:
    return ToyLanguageSpec(
        vocab_size=int(resolved["corpus.vocab_size"]),
        swap_rate=float(resolved["corpus.swap_rate"]),
        noise_rate=float(resolved["corpus.noise_rate"]),
        seed=int(resolved["corpus.seed"]),
    )


def write_resolved(resolved: dict[str, object], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {resolved[key]}" for key in sorted(resolved)]
    (out_dir / "resolved_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines:
        logger.debug("config: %s", line)


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--seed", type=int, help="master seed for all randomness")
    parser.add_argument("--out", help="output directory (or file for gen-data)")
    parser.add_argument("--alpha", type=float, help="task loss balance")
    parser.add_argument("--lambda0", type=float, help="mixup ratio ceiling")
    parser.add_argument("--mix-layer", type=int, dest="mix_layer")
    parser.add_argument("--schedule-k", type=float, dest="schedule_k")
    for toggle in ("mixup", "mixup-inference", "scheduled-sampling",
                   "mse-consistency", "kl-consistency"):
        parser.add_argument(f"--no-{toggle}", action="store_true",
                            dest=f"no_{toggle.replace('-', '_')}")
    parser.add_argument("--constant-lambda", action="store_true", dest="constant_lambda")


def _flag_values(args: argparse.Namespace) -> dict[str, object]:
    values: dict[str, object] = {
        "train.alpha": getattr(args, "alpha", None),
        "train.lambda0": getattr(args, "lambda0", None),
        "train.mix_layer": getattr(args, "mix_layer", None),
        "train.schedule_k": getattr(args, "schedule_k", None),
    }
    if getattr(args, "seed", None) is not None:
        values["train.seed"] = args.seed
        values["corpus.seed"] = args.seed
    for flag, key in (("no_mixup", "train.use_mixup"),
                      ("no_mixup_inference", "train.mixup_inference"),
                      ("no_scheduled_sampling", "train.scheduled_sampling"),
                      ("no_mse_consistency", "train.mse_consistency"),
                      ("no_kl_consistency", "train.kl_consistency")):
        if getattr(args, flag, False):
            values[key] = False
    if getattr(args, "constant_lambda", False):
        values["train.constant_lambda"] = True
    for attr, key in (("task", "corpus.task"), ("train_size", "corpus.train_size"),
                      ("test_size", "corpus.test_size"), ("vocab_size", "corpus.vocab_size"),
                      ("noise", "corpus.noise_rate"), ("swap", "corpus.swap_rate")):
        if getattr(args, attr, None) is not None:
            values[key] = getattr(args, attr)
    return values


def _load_bundle(path: str) -> DatasetBundle:
    bundle = load_jsonl(path)
    if not bundle.train and not bundle.test:
        raise CliError(f"dataset {path} is empty")
    return bundle


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xmixup",
                                     description="cross-lingual manifold mixup laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic parallel bundle")
    p.add_argument("--task", choices=[t.value for t in TaskKind])
    p.add_argument("--train-size", type=int, dest="train_size")
    p.add_argument("--test-size", type=int, dest="test_size")
    p.add_argument("--vocab-size", type=int, dest="vocab_size")
    p.add_argument("--noise", type=float)
    p.add_argument("--swap", type=float)
    _add_common_flags(p)

    p = sub.add_parser("train", help="train a model on a JSONL bundle")
    p.add_argument("--data", required=True)
    _add_common_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a JSONL bundle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    _add_common_flags(p)

    p = sub.add_parser("analyze", help="emit representation discrepancy CSVs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    _add_common_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--rounds", type=int, default=1)
    _add_common_flags(p)

    p = sub.add_parser("sweep-layer", help="mixup layer sweep with baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--layers", required=True, help="comma-separated layer list")
    _add_common_flags(p)

    p = sub.add_parser("ablate", help="run the full ablation table")
    p.add_argument("--data", required=True)
    _add_common_flags(p)
    return parser


def dispatch(argv) -> int:
    """Run one subcommand; returns the process exit code."""
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}.get(
        os.environ.get("X_MIXUP_LOG", "info"), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _run(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _run(args: argparse.Namespace) -> int:
    resolved = resolve_config(getattr(args, "config", None), _flag_values(args))
    command = args.command

    if command == "gen-data":
        out = Path(args.out or "bundle.jsonl")
        spec = toy_spec_from(resolved)
        bundle = gen_bundle(TaskKind(resolved["corpus.task"]),
                            (int(resolved["corpus.train_size"]), int(resolved["corpus.test_size"])),
                            spec, int(resolved["corpus.seed"]))
        out.parent.mkdir(parents=True, exist_ok=True)
        save_jsonl(bundle, out)
        print(f"wrote {len(bundle.train)} train / {len(bundle.test)} test examples to {out}")
        return 0

    if command == "gradcheck":
        errors = run_gradient_suite(seed=int(resolved["train.seed"]),
                                    rounds=max(1, int(args.rounds)))
        worst = max(errors.values())
        for name in sorted(errors):
            logger.info("gradcheck %-14s max rel err %.3e", name, errors[name])
        print(f"max relative error: {worst:.6e}")
        return 0 if worst <= TOLERANCE else 1

    out_dir = Path(args.out or "xmixup-run")

    if command == "train":
        bundle = _load_bundle(args.data)
        config = train_config_from(resolved)
        write_resolved(resolved, out_dir)
        result = train(config, bundle, run_id=f"seed{config.seed}")
        result.write_metrics_csv(out_dir / "metrics.csv")
        save_checkpoint(out_dir / "checkpoint.json", result.model,
                        optimizer=result.optimizer, step=result.step)
        metric = result.metrics[-1]["eval_metric"] if result.metrics else None
        print(f"final eval metric: {metric}")
        return 0

    if command == "eval":
        model, _, _ = load_checkpoint(args.checkpoint)
        bundle = _load_bundle(args.data)
        metrics = evaluate(model, bundle.test)
        for name in sorted(metrics):
            print(f"{name} = {metrics[name]!r}")
        return 0

    if command == "analyze":
        model, _, _ = load_checkpoint(args.checkpoint)
        bundle = _load_bundle(args.data)
        report = discrepancy_report(model, bundle.test)
        paths = report.write_csv(out_dir)
        for name in sorted(paths):
            print(f"wrote {paths[name]}")
        return 0

    if command == "sweep-layer":
        bundle = _load_bundle(args.data)
        config = train_config_from(resolved)
        write_resolved(resolved, out_dir)
        layers = [int(x) for x in str(args.layers).split(",") if x.strip()]
        rows = sweep_layer(config, layers, bundle)
        write_rows_csv(rows, out_dir / "sweep.csv")
        print(f"wrote {out_dir / 'sweep.csv'}")
        return 0

    if command == "ablate":
        bundle = _load_bundle(args.data)
        config = train_config_from(resolved)
        write_resolved(resolved, out_dir)
        rows = ablate(config, bundle)
        write_rows_csv(rows, out_dir / "ablation.csv")
        print(f"wrote {out_dir / 'ablation.csv'}")
        return 0

    raise CliError(f"unknown command {command!r}")


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
