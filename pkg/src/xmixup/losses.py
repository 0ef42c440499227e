"""Task and consistency losses composing the dual-stream training objective.

Total objective: alpha * task_S + (1 - alpha) * task_T + MSE + KL, where the
MSE ties the two streams' pooled representations together and the KL term
(classification only, source as reference) ties their predictions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ObjectiveError(ValueError):
    pass


class TaskKind(str, enum.Enum):
    CLASSIFICATION = "classification"
    STRUCTURED = "structured"
    SPAN = "span"


@dataclass
class LossBreakdown:
    task_s: float
    task_t: float
    mse: float
    kl: float
    total: float
    alpha: float
    loss: Tensor  # the differentiable total

    def recompose(self) -> float:
        return self.alpha * self.task_s + (1.0 - self.alpha) * self.task_t + self.mse + self.kl


def _check_prob_row(p: Tensor, name: str, tol: float = 1e-6) -> None:
    total = float(p.data.sum())
    if abs(total - 1.0) > tol:
        raise ObjectiveError(f"{name} must sum to 1 (got {total!r})")


def classification_loss(p: Tensor, y) -> Tensor:
    """Cross-entropy -sum(y * log p) for a single probability row.

    ``p`` and ``y`` are 1 x C rows (soft labels allowed). Zero probabilities
    under a supported label are floored at 1e-12 inside the log.
    """
    p = ad.as_tensor(p)
    y = ad.as_tensor(y).detach()
    if p.shape != y.shape:
        raise ObjectiveError(f"shape mismatch: {p.shape} vs {y.shape}")
    _check_prob_row(p, "p")
    _check_prob_row(y, "y")
    return ad.mul(ad.sum_all(ad.mul(y, ad.log_clamped(p))), -1.0)


def token_level_loss(probs: Tensor, labels, mask: np.ndarray | None = None) -> Tensor:
    """Summed per-token cross-entropy over unmasked rows.

    ``labels`` may be soft rows; masked rows contribute exactly zero. Span
    tasks call this once per boundary distribution and add the results.
    """
    probs = ad.as_tensor(probs)
    labels = ad.as_tensor(labels).detach()
    if probs.shape != labels.shape:
        raise ObjectiveError(f"shape mismatch: {probs.shape} vs {labels.shape}")
    n = probs.shape[0]
    m = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != (n,):
        raise ObjectiveError("mask length mismatch")
    row_sums = probs.data.sum(axis=1)
    if np.any(np.abs(row_sums[m] - 1.0) > 1e-6):
        raise ObjectiveError("unmasked probability rows must sum to 1")
    keep = Tensor(m.astype(np.float64)[:, None])
    ce = ad.mul(ad.mul(labels, ad.log_clamped(probs)), keep)
    return ad.mul(ad.sum_all(ce), -1.0)


def pseudo_labels(source_probs: Tensor) -> Tensor:
    """Detached copy of source-stream predictions used as soft targets.

    Detachment is the contract: the target-stream loss built on these labels
    must carry no gradient back into the source task head.
    """
    source_probs = ad.as_tensor(source_probs)
    row_sums = source_probs.data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ObjectiveError("pseudo-label rows must sum to 1")
    return source_probs.detach()


def consistency_loss(r_s: Tensor, r_t: Tensor, p_s: Tensor | None, p_t: Tensor | None,
                     kind: TaskKind) -> tuple[Tensor, Tensor]:
    """(representation MSE, prediction KL); the KL exists only for classification."""
    r_s, r_t = ad.as_tensor(r_s), ad.as_tensor(r_t)
    if r_s.shape != r_t.shape:
        raise ObjectiveError(f"representation shape mismatch: {r_s.shape} vs {r_t.shape}")
    diff = ad.sub(r_s, r_t)
    mse = ad.mean_all(ad.mul(diff, diff))
    if kind == TaskKind.CLASSIFICATION:
        if p_s is None or p_t is None:
            raise ObjectiveError("classification consistency needs both probability rows")
        kl = kl_divergence(p_s, p_t)
    else:
        if p_s is not None or p_t is not None:
            raise ObjectiveError("prediction consistency only exists for classification")
        kl = Tensor(0.0)
    return mse, kl


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) with floored logs; exactly zero when p equals q."""
    p, q = ad.as_tensor(p), ad.as_tensor(q)
    if p.shape != q.shape:
        raise ObjectiveError(f"shape mismatch: {p.shape} vs {q.shape}")
    log_ratio = ad.sub(ad.log_clamped(p), ad.log_clamped(q))
    return ad.sum_all(ad.mul(p, log_ratio))


def total_loss(task_s: Tensor, task_t: Tensor, mse: Tensor, kl: Tensor,
               alpha: float, kind: TaskKind) -> LossBreakdown:
    """Balanced task loss plus unweighted consistency terms."""
    if not (0.0 <= alpha <= 1.0):
        raise ObjectiveError("alpha must lie in [0, 1]")
    if kind != TaskKind.CLASSIFICATION and abs(float(kl.data)) > 0.0:
        raise ObjectiveError("KL consistency only exists for classification")
    task_s, task_t = ad.as_tensor(task_s), ad.as_tensor(task_t)
    mse, kl = ad.as_tensor(mse), ad.as_tensor(kl)
    weighted = ad.add(ad.mul(task_s, alpha), ad.mul(task_t, 1.0 - alpha))
    loss = ad.add(ad.add(weighted, mse), kl)
    return LossBreakdown(
        task_s=float(task_s.data),
        task_t=float(task_t.data),
        mse=float(mse.data),
        kl=float(kl.data),
        total=float(loss.data),
        alpha=alpha,
        loss=loss,
    )


def one_hot(index: int, width: int) -> np.ndarray:
    if not (0 <= index < width):
        raise ObjectiveError(f"label {index} outside [0, {width})")
    row = np.zeros((1, width))
    row[0, index] = 1.0
    return row
