"""Input validation helpers shared by the analysis toolkit and the estimator."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .corpus import ParallelExample
from .losses import TaskKind


class ValidationError(ValueError):
    pass


def check_matrix(x, name: str = "X", min_rows: int = 1) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] < min_rows:
        raise ValidationError(f"{name} needs at least {min_rows} rows")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_examples(examples: Sequence[ParallelExample], task: TaskKind,
                   require_bt: bool = False, vocab_size: int | None = None,
                   max_len: int | None = None) -> list[ParallelExample]:
    """Structural checks on a list of parallel examples for the given task."""
    out = list(examples)
    if not out:
        raise ValidationError("empty example list")
    for i, ex in enumerate(out):
        if not isinstance(ex, ParallelExample):
            raise ValidationError(f"examples[{i}] is not a ParallelExample")
        for side, toks in (("src", ex.src_tokens), ("tgt", ex.tgt_tokens)):
            if not toks:
                raise ValidationError(f"examples[{i}].{side} is empty")
            if max_len is not None and len(toks) > max_len:
                raise ValidationError(f"examples[{i}].{side} longer than max_len={max_len}")
            if vocab_size is not None and any(t < 0 or t >= vocab_size for t in toks):
                raise ValidationError(f"examples[{i}].{side} has token ids outside the vocabulary")
        if require_bt and ex.back_translated_src is None:
            raise ValidationError(f"examples[{i}] lacks a back-translated source")
        if task == TaskKind.CLASSIFICATION:
            if not isinstance(ex.label, (int, np.integer)):
                raise ValidationError(f"examples[{i}].label must be a class id")
        elif not isinstance(ex.label, dict):
            raise ValidationError(f"examples[{i}].label must map streams to labels")
    return out
