"""Miniature post-LN transformer encoder with a dual-stream mixup hook.

The encoder runs two weight-shared streams over a parallel sentence pair. At
one configurable layer the target stream's attention output is interpolated
with a cross-attention view of the source stream before the feed-forward
sub-layer; everywhere else both streams behave like independent encoders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    d_model: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    vocab_size: int = 50
    max_len: int = 24

    def __post_init__(self):
        if self.num_layers < 1:
            raise EncoderError("num_layers must be >= 1")
        if self.d_model % self.num_heads != 0:
            raise EncoderError("d_model must be divisible by num_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


@dataclass
class HiddenStates:
    """Per-layer activations for one sequence: [embeddings, layer 1, ..., layer L]."""

    layers: list[Tensor]
    mask: np.ndarray  # bool, True at attendable positions

    @property
    def last(self) -> Tensor:
        return self.layers[-1]


def init_params(
    config: EncoderConfig,
    rng: np.random.Generator,
    head_sizes: dict[str, int] | None = None,
    init_scale: float = 0.02,
) -> dict[str, Tensor]:
    """Fresh trainable parameters: embeddings, per-layer blocks, mixup gate, heads.

    ``head_sizes`` maps head name to output width, e.g. ``{"cls": 2}`` adds
    ``head.cls.w`` / ``head.cls.b``. Iteration order of the returned dict is
    fixed, which keeps optimizer updates deterministic.
    """
    d, f = config.d_model, config.ffn_dim

    def w(*shape):
        return Tensor(rng.normal(0.0, init_scale, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params: dict[str, Tensor] = {
        "tok_emb": w(config.vocab_size, d),
        "pos_emb": w(config.max_len, d),
    }
    for layer in range(1, config.num_layers + 1):
        p = f"layers.{layer}"
        params[f"{p}.attn.wq"] = w(d, d)
        params[f"{p}.attn.wk"] = w(d, d)
        params[f"{p}.attn.wv"] = w(d, d)
        params[f"{p}.attn.wo"] = w(d, d)
        params[f"{p}.ln1.gain"] = ones(d)
        params[f"{p}.ln1.bias"] = zeros(d)
        params[f"{p}.ffn.w1"] = w(d, f)
        params[f"{p}.ffn.b1"] = zeros(f)
        params[f"{p}.ffn.w2"] = w(f, d)
        params[f"{p}.ffn.b2"] = zeros(d)
        params[f"{p}.ln2.gain"] = ones(d)
        params[f"{p}.ln2.bias"] = zeros(d)
    # scalar gate of the translation-quality mixup ratio; zero init keeps the
    # initial ratio at half its ceiling
    params["mix.w"] = zeros()
    params["mix.b"] = zeros()
    for name, width in (head_sizes or {}).items():
        params[f"head.{name}.w"] = w(d, width)
        params[f"head.{name}.b"] = zeros(width)
    return params


def attention_params(params: dict[str, Tensor], layer: int) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    p = f"layers.{layer}"
    return (params[f"{p}.attn.wq"], params[f"{p}.attn.wk"],
            params[f"{p}.attn.wv"], params[f"{p}.attn.wo"])


def multi_head_attention(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    weights: tuple[Tensor, Tensor, Tensor, Tensor],
    num_heads: int,
    key_mask: np.ndarray | None = None,
) -> Tensor:
    """Concat(head_1..h) @ Wo with scaled dot-product heads.

    Masked key positions are excluded from every head's softmax and therefore
    contribute exactly zero weight.
    """
    wq, wk, wv, wo = weights
    if k_in.shape[0] != v_in.shape[0]:
        raise EncoderError("key/value row count mismatch")
    d_model = wq.shape[0]
    if q_in.shape[1] != d_model or k_in.shape[1] != d_model:
        raise EncoderError("query/key width must equal d_model")
    if d_model % num_heads != 0:
        raise EncoderError("d_model must be divisible by num_heads")
    head_dim = d_model // num_heads
    scale = 1.0 / np.sqrt(head_dim)

    q = ad.split_heads(ad.matmul(q_in, wq), num_heads)
    k = ad.split_heads(ad.matmul(k_in, wk), num_heads)
    v = ad.split_heads(ad.matmul(v_in, wv), num_heads)
    scores = ad.mul(ad.bmm(q, k, transpose_b=True), scale)
    attn = ad.softmax_last(scores, mask=key_mask)
    return ad.matmul(ad.merge_heads(ad.bmm(attn, v)), wo)


def _embed(tokens: np.ndarray, config: EncoderConfig, params: dict[str, Tensor]) -> Tensor:
    if tokens.size == 0:
        raise EncoderError("empty token sequence")
    if tokens.size > config.max_len:
        raise EncoderError(f"sequence length {tokens.size} exceeds max_len {config.max_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise EncoderError("token id out of vocabulary")
    tok = ad.gather_rows(params["tok_emb"], tokens)
    pos = ad.gather_rows(params["pos_emb"], np.arange(tokens.size))
    return ad.add(tok, pos)


def _ffn(x: Tensor, params: dict[str, Tensor], layer: int) -> Tensor:
    p = f"layers.{layer}"
    hidden = ad.tanh(ad.add(ad.matmul(x, params[f"{p}.ffn.w1"]), params[f"{p}.ffn.b1"]))
    return ad.add(ad.matmul(hidden, params[f"{p}.ffn.w2"]), params[f"{p}.ffn.b2"])


def _ln(x: Tensor, params: dict[str, Tensor], layer: int, which: str) -> Tensor:
    p = f"layers.{layer}.{which}"
    return ad.layer_norm(x, params[f"{p}.gain"], params[f"{p}.bias"])


def _check_tokens(tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim != 1:
        raise EncoderError("tokens must be a flat id sequence")
    return arr


def _full_mask(n: int, mask) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.shape != (n,):
        raise EncoderError("mask length mismatch")
    return m


def encode_single(
    tokens,
    config: EncoderConfig,
    params: dict[str, Tensor],
    mask: np.ndarray | None = None,
) -> HiddenStates:
    """Standard single-stream encoding: attention + FFN sub-layers, post-LN."""
    ids = _check_tokens(tokens)
    m = _full_mask(ids.size, mask)
    x = _embed(ids, config, params)
    states = [x]
    for layer in range(1, config.num_layers + 1):
        attn = multi_head_attention(x, x, x, attention_params(params, layer),
                                    config.num_heads, key_mask=m)
        x = _ln(ad.add(x, attn), params, layer, "ln1")
        x = _ln(ad.add(x, _ffn(x, params, layer)), params, layer, "ln2")
        states.append(x)
    return HiddenStates(states, m)


def encode_pair(
    src_tokens,
    tgt_tokens,
    config: EncoderConfig,
    params: dict[str, Tensor],
    mix,
    src_mask: np.ndarray | None = None,
    tgt_mask: np.ndarray | None = None,
) -> tuple[HiddenStates, HiddenStates, Tensor | None]:
    """Dual-stream encoding with target-side manifold mixup at one layer.

    ``mix`` is a :class:`xmixup.mixup.MixupConfig` or None. With None the two
    streams are completely independent and the result is bit-identical to two
    :func:`encode_single` calls. Returns (source states, mixed target states,
    mixup ratio); the ratio is None when mixing is disabled.
    """
    from . import mixup as mx  # late import; mixup builds on this module

    if mix is None:
        return (encode_single(src_tokens, config, params, src_mask),
                encode_single(tgt_tokens, config, params, tgt_mask),
                None)
    if not (1 <= mix.mix_layer <= config.num_layers):
        raise EncoderError(f"mix_layer {mix.mix_layer} outside [1, {config.num_layers}]")

    src_ids = _check_tokens(src_tokens)
    tgt_ids = _check_tokens(tgt_tokens)
    m_s = _full_mask(src_ids.size, src_mask)
    m_t = _full_mask(tgt_ids.size, tgt_mask)
    x_s = _embed(src_ids, config, params)
    x_t = _embed(tgt_ids, config, params)
    states_s, states_t = [x_s], [x_t]
    lam: Tensor | None = None

    for layer in range(1, config.num_layers + 1):
        attn_w = attention_params(params, layer)
        a_s = multi_head_attention(x_s, x_s, x_s, attn_w, config.num_heads, key_mask=m_s)
        a_t = multi_head_attention(x_t, x_t, x_t, attn_w, config.num_heads, key_mask=m_t)
        if layer == mix.mix_layer:
            # target queries read the source stream through the same
            # projections as self-attention (weight sharing by identity)
            cross = mx.cross_attention(a_t, a_s, attn_w, config.num_heads, src_mask=m_s)
            if mix.constant_lambda:
                lam = Tensor(mix.lambda0)
            else:
                stats = mx.attention_entropy(a_t, a_s, mask_t=m_t, mask_s=m_s,
                                             n_scale=config.d_model)
                lam = mx.mixup_ratio(stats, params["mix.w"], params["mix.b"], mix.lambda0)
            p = f"layers.{layer}.ln1"
            x_t = mx.manifold_mix(a_t, cross, lam,
                                  params[f"{p}.gain"], params[f"{p}.bias"],
                                  residual=x_t)
        else:
            x_t = _ln(ad.add(x_t, a_t), params, layer, "ln1")
        x_s = _ln(ad.add(x_s, a_s), params, layer, "ln1")
        x_s = _ln(ad.add(x_s, _ffn(x_s, params, layer)), params, layer, "ln2")
        x_t = _ln(ad.add(x_t, _ffn(x_t, params, layer)), params, layer, "ln2")
        states_s.append(x_s)
        states_t.append(x_t)
    return HiddenStates(states_s, m_s), HiddenStates(states_t, m_t), lam


def sequence_representation(states: HiddenStates) -> Tensor:
    """Mean of the last layer over unmasked positions, as a 1 x d_model row."""
    mask = states.mask
    count = int(mask.sum())
    if count == 0:
        raise EncoderError("all positions masked")
    weights = (mask.astype(np.float64) / count)[None, :]
    return ad.matmul(Tensor(weights), states.last)
