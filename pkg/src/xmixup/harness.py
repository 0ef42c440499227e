"""Ablation and layer-sweep harnesses: one controlled train+eval per row."""

from __future__ import annotations

import csv
from dataclasses import replace
from typing import Callable, Sequence

from .corpus import DatasetBundle
from .trainer import PRIMARY_METRIC, TrainConfig, evaluate, train

# row name -> config surgery; every toggle row of the ablation table
ABLATION_ROWS: tuple[tuple[str, Callable[[TrainConfig], TrainConfig]], ...] = (
    ("full", lambda c: c),
    ("w/o mixup", lambda c: replace(c, use_mixup=False, mixup_inference=False)),
    ("w/o mixup inference", lambda c: replace(c, mixup_inference=False)),
    ("w/o scheduled sampling", lambda c: replace(c, scheduled_sampling=False)),
    ("w/o consistency", lambda c: replace(c, mse_consistency=False, kl_consistency=False)),
    ("lambda=lambda0", lambda c: replace(c, constant_lambda=True)),
    ("w/o mse consistency", lambda c: replace(c, mse_consistency=False)),
    ("w/o kl consistency", lambda c: replace(c, kl_consistency=False)),
)


def ablation_config(base: TrainConfig, row: str) -> TrainConfig:
    for name, surgery in ABLATION_ROWS:
        if name == row:
            return surgery(base)
    raise KeyError(row)


def ablate(base_config: TrainConfig, bundle: DatasetBundle) -> list[dict]:
    """Train and evaluate every ablation row on the shared seed."""
    rows = []
    for name, surgery in ABLATION_ROWS:
        config = surgery(base_config)
        result = train(config, bundle, run_id=name)
        metrics = evaluate(result.model, bundle.test)
        row = {"row": name, **metrics}
        row["metric"] = metrics.get(PRIMARY_METRIC[config.task])
        rows.append(row)
    return rows


def sweep_layer(base_config: TrainConfig, layers: Sequence[int],
                bundle: DatasetBundle) -> list[dict]:
    """Per-mixup-layer metrics plus the no-mixup baseline, identical seeds."""
    for layer in layers:
        if not (1 <= layer <= base_config.encoder.num_layers):
            raise ValueError(f"layer {layer} outside [1, {base_config.encoder.num_layers}]")
    rows = []
    for layer in layers:
        config = replace(base_config, mix_layer=layer)
        result = train(config, bundle, run_id=f"layer={layer}")
        metrics = evaluate(result.model, bundle.test)
        rows.append({"row": f"layer={layer}", "metric": metrics.get(PRIMARY_METRIC[config.task]), **metrics})
    baseline = replace(base_config, use_mixup=False, mixup_inference=False)
    result = train(baseline, bundle, run_id="baseline")
    metrics = evaluate(result.model, bundle.test)
    rows.append({"row": "baseline", "metric": metrics.get(PRIMARY_METRIC[baseline.task]), **metrics})
    return rows


def write_rows_csv(rows: list[dict], path) -> None:
    if not rows:
        raise ValueError("no rows to write")
    columns = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in (row.get(c) for c in columns)])
