"""Representation-discrepancy toolkit: linear CKA, Spearman, centroids, PCA, transfer gap.

All functions operate on plain numpy matrices of sequence representations
(one row per example, rows aligned across languages for parallel data).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .encoder import encode_pair, encode_single, sequence_representation
from .validation import check_matrix


class AnalysisError(ValueError):
    pass


def cka(x, y) -> float:
    """Linear centered kernel alignment between row-aligned representations.

    Columns are centered internally; the score is ||Y'X||_F^2 over
    ||X'X||_F * ||Y'Y||_F, which is 1 exactly when the two representations
    agree up to orthogonal transforms and isotropic scaling.
    """
    x = check_matrix(x, "x", min_rows=2)
    y = check_matrix(y, "y", min_rows=2)
    if x.shape[0] != y.shape[0]:
        raise AnalysisError("x and y must have the same number of rows")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    denom_x = np.linalg.norm(xc.T @ xc)
    denom_y = np.linalg.norm(yc.T @ yc)
    if denom_x == 0.0 or denom_y == 0.0:
        raise AnalysisError("zero-variance input (all rows equal)")
    num = np.linalg.norm(yc.T @ xc) ** 2
    return float(num / (denom_x * denom_y))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # ties share the mean rank
        i = j + 1
    return ranks


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Rank correlation: Pearson correlation of average ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise AnalysisError("inputs must be equal-length sequences")
    if a.size < 2:
        raise AnalysisError("need at least 2 observations")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise AnalysisError("rank correlation undefined for a constant sequence")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra @ rb) / np.sqrt((ra @ ra) * (rb @ rb)))


def language_centroid(reps) -> np.ndarray:
    """Column mean of one language's representation matrix."""
    reps = check_matrix(reps, "reps", min_rows=1)
    return reps.mean(axis=0)


def _pca_decompose(reps: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    centered = reps - reps.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (reps.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    # sign convention: the largest-magnitude loading of each direction is positive
    for j in range(eigvecs.shape[1]):
        pivot = np.argmax(np.abs(eigvecs[:, j]))
        if eigvecs[pivot, j] < 0:
            eigvecs[:, j] = -eigvecs[:, j]
    return centered, eigvals, eigvecs


def pca_project(reps, k: int) -> np.ndarray:
    """Coordinates on the top-k principal directions (descending variance)."""
    reps = check_matrix(reps, "reps", min_rows=2)
    n, d = reps.shape
    if not (1 <= k <= min(n, d)):
        raise AnalysisError(f"k must lie in [1, {min(n, d)}]")
    centered, eigvals, eigvecs = _pca_decompose(reps)
    tol = max(eigvals[0], 0.0) * 1e-12
    rank = int(np.sum(eigvals > tol))
    if k > rank:
        raise AnalysisError(f"k={k} exceeds rank {rank}")
    return centered @ eigvecs[:, :k]


def pca_explained_variance(reps, k: int) -> np.ndarray:
    """Fraction of total variance captured by each of the top-k directions."""
    reps = check_matrix(reps, "reps", min_rows=2)
    _, eigvals, _ = _pca_decompose(reps)
    total = eigvals.sum()
    if total <= 0:
        raise AnalysisError("zero-variance input")
    return eigvals[:k] / total


def transfer_gap(scores: Mapping[str, float], source: str) -> float:
    """Source score minus the mean score over all non-source languages."""
    if source not in scores:
        raise AnalysisError(f"source language {source!r} not in scores")
    targets = [v for k, v in scores.items() if k != source]
    if not targets:
        raise AnalysisError("no target languages")
    return float(scores[source]) - float(np.mean(targets))


# ---------------------------------------------------------------------------
# end-to-end report


@dataclass
class DiscrepancyReport:
    """Per-language-pair CKA, centroids, and 2-D PCA coordinates, with and
    without the mixup pathway active."""

    cka_rows: list[dict] = field(default_factory=list)
    centroid_rows: list[dict] = field(default_factory=list)
    pca_rows: list[dict] = field(default_factory=list)

    def cka_value(self, pair: str, mode: str) -> float:
        for row in self.cka_rows:
            if row["pair"] == pair and row["mode"] == mode:
                return row["cka"]
        raise KeyError((pair, mode))

    def write_csv(self, out_dir) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {}
        specs = (
            ("cka", self.cka_rows, ("pair", "mode", "cka")),
            ("centroids", self.centroid_rows, None),
            ("pca", self.pca_rows, None),
        )
        for name, rows, columns in specs:
            path = out_dir / f"{name}.csv"
            cols = columns or (list(rows[0].keys()) if rows else [])
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(cols)
                for row in rows:
                    writer.writerow([repr(v) if isinstance(v, float) else v for v in (row[c] for c in cols)])
            paths[name] = path
        return paths


def representation_table(model, examples, with_mixup: bool) -> dict[str, np.ndarray]:
    """Pooled last-layer representations per language stream over parallel examples."""
    config = model.config
    reps: dict[str, list[np.ndarray]] = {"src": [], "tgt": []}
    mix = config.mixup_config() if with_mixup else None
    for ex in examples:
        if mix is not None:
            h_s, h_t, _ = encode_pair(ex.src_tokens, ex.tgt_tokens, config.encoder,
                                      model.params, mix)
        else:
            h_s = encode_single(ex.src_tokens, config.encoder, model.params)
            h_t = encode_single(ex.tgt_tokens, config.encoder, model.params)
        reps["src"].append(sequence_representation(h_s).data[0])
        reps["tgt"].append(sequence_representation(h_t).data[0])
    return {lang: np.array(rows) for lang, rows in reps.items()}


def discrepancy_report(model, examples, pca_dims: int = 2) -> DiscrepancyReport:
    """CKA + centroid + PCA summary of the source/target representation gap.

    Raw mode encodes each stream independently; mixed mode runs the mixup
    pathway (when the model trains with it) so both views are emitted.
    """
    if not examples:
        raise AnalysisError("no examples to analyze")
    report = DiscrepancyReport()
    modes = [("raw", False)]
    if model.config.use_mixup:
        modes.append(("mixed", True))
    for mode_name, with_mixup in modes:
        table = representation_table(model, examples, with_mixup=with_mixup)
        report.cka_rows.append({
            "pair": "src-tgt", "mode": mode_name,
            "cka": cka(table["src"], table["tgt"]),
        })
        for lang, reps in table.items():
            centroid = language_centroid(reps)
            row = {"language": lang, "mode": mode_name}
            row.update({f"c{i}": float(v) for i, v in enumerate(centroid)})
            report.centroid_rows.append(row)
        stacked = np.vstack([table["src"], table["tgt"]])
        k = min(pca_dims, min(stacked.shape) - 1)
        coords = pca_project(stacked, k)
        n = len(examples)
        for i in range(stacked.shape[0]):
            row = {"index": i % n, "language": "src" if i < n else "tgt", "mode": mode_name}
            row.update({f"pc{j + 1}": float(coords[i, j]) for j in range(k)})
            report.pca_rows.append(row)
    return report
