"""Cross-attention manifold mixup: quality-gated interpolation of parallel streams.

The target stream pulls information from the source stream via cross
attention, an attention-entropy statistic estimates how well the two
sequences align (lower entropy = sharper alignment = better translation),
and a learned sigmoid gate turns that statistic into the per-instance mixup
ratio. Scheduled sampling decides, per example, whether the source side is
the real sentence or its back-translation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class MixupError(ValueError):
    pass


@dataclass(frozen=True)
class MixupConfig:
    lambda0: float = 0.5        # ceiling of the mixup ratio
    mix_layer: int = 1
    schedule_k: float = 1000.0  # scheduled-sampling decay rate
    constant_lambda: bool = False

    def __post_init__(self):
        if not (0.0 < self.lambda0 <= 1.0):
            raise MixupError("lambda0 must be in (0, 1]")
        if self.schedule_k < 1.0:
            raise MixupError("schedule_k must be >= 1")


@dataclass
class AttentionStats:
    """Alignment matrix plus its two directional entropies."""

    attn: Tensor          # row-stochastic, target queries over source keys
    entropy_fwd: Tensor   # scalar, mean row entropy of attn
    entropy_bwd: Tensor   # scalar, same with query/key roles swapped


def cross_attention(h_t: Tensor, h_s: Tensor, attn_params, num_heads: int,
                    src_mask: np.ndarray | None = None) -> Tensor:
    """Target-as-query attention over source keys/values, shared projections."""
    from .encoder import multi_head_attention

    if h_s.shape[0] == 0:
        raise MixupError("empty source sequence")
    return multi_head_attention(h_t, h_s, h_s, attn_params, num_heads, key_mask=src_mask)


def _directional_entropy(q: Tensor, k: Tensor, q_mask, k_mask, scale: float) -> tuple[Tensor, Tensor]:
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), scale)
    attn = ad.softmax_rows(scores, col_mask=k_mask)
    plogp = ad.mul(attn, ad.log_clamped(attn))
    n_rows = int(q_mask.sum())
    if n_rows == 0:
        raise MixupError("no unmasked rows for attention entropy")
    row_weights = Tensor(q_mask.astype(np.float64)[:, None])
    ent = ad.mul(ad.sum_all(ad.mul(plogp, row_weights)), -1.0 / n_rows)
    return attn, ent


def attention_entropy(h_t: Tensor, h_s: Tensor, mask_t=None, mask_s=None,
                      n_scale: float = 1.0) -> AttentionStats:
    """Two-way attention entropies between target and source hidden states.

    Forward: softmax over source keys for each target query, entropy averaged
    over unmasked queries. Backward: recomputed with the roles swapped (not a
    matrix transpose, which would not be row-stochastic).
    """
    if n_scale <= 0:
        raise MixupError("n_scale must be positive")
    h_t, h_s = ad.as_tensor(h_t), ad.as_tensor(h_s)
    m_t = np.ones(h_t.shape[0], dtype=bool) if mask_t is None else np.asarray(mask_t, dtype=bool)
    m_s = np.ones(h_s.shape[0], dtype=bool) if mask_s is None else np.asarray(mask_s, dtype=bool)
    scale = 1.0 / math.sqrt(n_scale)
    attn, ent_fwd = _directional_entropy(h_t, h_s, m_t, m_s, scale)
    _, ent_bwd = _directional_entropy(h_s, h_t, m_s, m_t, scale)
    return AttentionStats(attn=attn, entropy_fwd=ent_fwd, entropy_bwd=ent_bwd)


def mixup_ratio(stats: AttentionStats, w: Tensor, b: Tensor, lambda0: float) -> Tensor:
    """lambda = lambda0 * sigmoid((H_fwd + H_bwd) * w + b), strictly in (0, lambda0).

    ``w`` and ``b`` are trainable scalars; gradients flow through them and
    through the entropies into the hidden states.
    """
    gate = ad.sigmoid(ad.add(ad.mul(ad.add(stats.entropy_fwd, stats.entropy_bwd), w), b))
    return ad.mul(gate, lambda0)


def manifold_mix(h_t: Tensor, h_ts: Tensor, lam, gain: Tensor, bias: Tensor,
                 residual: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """LN(lam * h_ts + (1 - lam) * h_t), optionally with a residual folded in.

    The layer norm here doubles as the sub-layer norm when the encoder passes
    the pre-sub-layer stream as ``residual``; standalone callers get the bare
    interpolation + LN.
    """
    h_t, h_ts = ad.as_tensor(h_t), ad.as_tensor(h_ts)
    if h_t.shape != h_ts.shape:
        raise MixupError(f"shape mismatch: {h_t.shape} vs {h_ts.shape}")
    lam = ad.as_tensor(lam)
    mixed = ad.add(ad.mul(h_ts, lam), ad.mul(h_t, ad.sub(1.0, lam)))
    if residual is not None:
        mixed = ad.add(residual, mixed)
    return ad.layer_norm(mixed, gain, bias, eps=eps)


def sampling_threshold(step: int, k: float) -> float:
    """Inverse sigmoid decay k / (k + e^(step/k)); strictly decreasing in step."""
    if k < 1.0:
        raise MixupError("k must be >= 1")
    if step < 0:
        raise MixupError("step must be non-negative")
    x = step / k
    if x > 700.0:  # e^x overflows float64; the threshold is 0 to machine precision
        return 0.0
    return k / (k + math.exp(x))


class SampledSource(NamedTuple):
    tokens: list[int]
    is_real: bool


def sample_source(example, p_star: float, u: float) -> SampledSource:
    """Pick the real source sentence iff ``u <= p_star``, else its back-translation.

    Pure given the uniform draw ``u``; the caller owns the RNG stream.
    """
    if u <= p_star:
        return SampledSource(list(example.src_tokens), True)
    if example.back_translated_src is None:
        raise MixupError("back-translated source required but missing")
    return SampledSource(list(example.back_translated_src), False)
