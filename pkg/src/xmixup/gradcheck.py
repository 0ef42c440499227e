"""Finite-difference verification battery for every differentiable operation.

Each check builds a scalar probe loss from one operation (or the full
dual-stream objective), differentiates it with the tape, and compares against
the central-difference oracle coordinate by coordinate.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor, backward, finite_diff_grad, max_rel_error
from .corpus import ParallelExample
from .encoder import EncoderConfig, init_params, multi_head_attention
from .losses import TaskKind, one_hot
from .mixup import attention_entropy, manifold_mix, mixup_ratio
from .trainer import TrainConfig, example_loss

TOLERANCE = 1e-4


def _probe(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape)


def _check(build_loss, theta: dict[str, np.ndarray]) -> float:
    """Max guarded relative error between taped and finite-difference gradients."""
    params = {name: Tensor(v, requires_grad=True) for name, v in theta.items()}
    tape = GradTape()
    with tape:
        loss = build_loss(params)
    analytic = backward(tape, loss, params)

    def f(values):
        frozen = {name: Tensor(v) for name, v in values.items()}
        return float(build_loss(frozen).data)

    numeric = finite_diff_grad(f, theta)
    return max_rel_error(analytic, numeric)


def _weighted(x: Tensor, weights: np.ndarray) -> Tensor:
    # random fixed weights turn any output into a scalar probe
    return ad.sum_all(ad.mul(x, Tensor(weights)))


def check_elementwise(rng) -> float:
    x = _probe(rng, (3, 4))
    y = _probe(rng, (3, 4))
    w = _probe(rng, (3, 4))

    def build(p):
        mixed = ad.add(ad.mul(p["x"], p["y"]), ad.sub(p["x"], ad.mul(p["y"], 0.3)))
        return _weighted(ad.tanh(mixed), w)

    return _check(build, {"x": x, "y": y})


def check_matmul_chain(rng) -> float:
    a = _probe(rng, (3, 4))
    b = _probe(rng, (4, 2))
    w = _probe(rng, (3, 2))

    def build(p):
        return _weighted(ad.sigmoid(ad.matmul(p["a"], p["b"])), w)

    return _check(build, {"a": a, "b": b})


def check_structural(rng) -> float:
    table = _probe(rng, (5, 4))
    w = _probe(rng, (3, 4))
    ids = np.array([1, 4, 2])

    def build(p):
        rows = ad.gather_rows(p["table"], ids)
        left = ad.slice_cols(rows, 0, 2)
        right = ad.slice_cols(rows, 2, 4)
        return _weighted(ad.concat_cols([right, left]), w)

    return _check(build, {"table": table})


def check_softmax(rng) -> float:
    x = _probe(rng, (3, 5))
    w = _probe(rng, (3, 5))
    mask = np.array([True, True, False, True, True])

    def build(p):
        return ad.add(_weighted(ad.softmax_rows(p["x"]), w),
                      _weighted(ad.softmax_rows(p["x"], col_mask=mask), w))

    return _check(build, {"x": x})


def check_log_reductions(rng) -> float:
    x = np.abs(_probe(rng, (3, 4))) + 0.1

    def build(p):
        return ad.add(ad.mean_all(ad.log_clamped(p["x"])), ad.sum_all(ad.mul(p["x"], p["x"])))

    return _check(build, {"x": x})


def check_layer_norm(rng) -> float:
    x = _probe(rng, (3, 6))
    gain = 1.0 + 0.1 * _probe(rng, 6)
    bias = 0.1 * _probe(rng, 6)
    w = _probe(rng, (3, 6))

    def build(p):
        return _weighted(ad.layer_norm(p["x"], p["gain"], p["bias"]), w)

    return _check(build, {"x": x, "gain": gain, "bias": bias})


def check_attention(rng) -> float:
    d, heads, n = 4, 2, 3
    theta = {
        "q": _probe(rng, (n, d)), "kv": _probe(rng, (n, d)),
        "wq": _probe(rng, (d, d)), "wk": _probe(rng, (d, d)),
        "wv": _probe(rng, (d, d)), "wo": _probe(rng, (d, d)),
    }
    w = _probe(rng, (n, d))

    def build(p):
        weights = (p["wq"], p["wk"], p["wv"], p["wo"])
        self_attn = multi_head_attention(p["q"], p["q"], p["q"], weights, heads)
        cross = multi_head_attention(p["q"], p["kv"], p["kv"], weights, heads)
        return ad.add(_weighted(self_attn, w), _weighted(cross, w))

    return _check(build, theta)


def check_mixup_gate(rng) -> float:
    # the probe loss is the mixup ratio itself: gradients must flow through
    # both entropies into the hidden states and into the gate scalars
    theta = {
        "ht": _probe(rng, (3, 4)), "hs": _probe(rng, (2, 4)),
        "w": _probe(rng, ()), "b": _probe(rng, ()),
    }

    def build(p):
        stats = attention_entropy(p["ht"], p["hs"], n_scale=4.0)
        return mixup_ratio(stats, p["w"], p["b"], lambda0=0.5)

    return _check(build, theta)


def check_manifold_mix(rng) -> float:
    theta = {
        "ht": _probe(rng, (3, 4)), "hts": _probe(rng, (3, 4)),
        "lam_w": _probe(rng, ()), "gain": 1.0 + 0.1 * _probe(rng, 4),
        "bias": 0.1 * _probe(rng, 4), "residual": _probe(rng, (3, 4)),
    }
    w = _probe(rng, (3, 4))

    def build(p):
        lam = ad.mul(ad.sigmoid(p["lam_w"]), 0.5)
        mixed = manifold_mix(p["ht"], p["hts"], lam, p["gain"], p["bias"],
                             residual=p["residual"])
        return _weighted(mixed, w)

    return _check(build, theta)


def check_losses(rng) -> float:
    from .losses import classification_loss, consistency_loss, token_level_loss, total_loss

    c, n = 3, 4
    theta = {
        "logit_p": _probe(rng, (1, c)), "logit_q": _probe(rng, (1, c)),
        "tok_logits": _probe(rng, (n, c)),
        "rs": _probe(rng, (1, 5)), "rt": _probe(rng, (1, 5)),
    }
    y = one_hot(1, c)
    tags = np.zeros((n, c))
    tags[np.arange(n), np.array([0, 2, 1, 0])] = 1.0
    mask = np.array([True, True, False, True])

    def build(p):
        probs_p = ad.softmax_rows(p["logit_p"])
        probs_q = ad.softmax_rows(p["logit_q"])
        task_s = classification_loss(probs_p, y)
        task_t = token_level_loss(ad.softmax_rows(p["tok_logits"]), tags, mask=mask)
        mse, kl = consistency_loss(p["rs"], p["rt"], probs_p, probs_q,
                                   TaskKind.CLASSIFICATION)
        return total_loss(task_s, ad.mul(task_t, 0.25), mse, kl, alpha=0.4,
                          kind=TaskKind.CLASSIFICATION).loss

    return _check(build, theta)


def _toy_setup(rng):
    enc = EncoderConfig(num_layers=2, d_model=4, num_heads=2, ffn_dim=6,
                        vocab_size=8, max_len=6)
    config = TrainConfig(task=TaskKind.CLASSIFICATION, encoder=enc, alpha=0.4,
                         lambda0=0.5, mix_layer=1, batch_size=1, epochs=1, seed=0)
    params = init_params(enc, rng, head_sizes={"cls": 2})
    # non-degenerate gate so its gradient path is exercised
    params["mix.w"] = Tensor(np.asarray(0.3), requires_grad=True)
    params["mix.b"] = Tensor(np.asarray(-0.1), requires_grad=True)
    example = ParallelExample(src_tokens=[1, 5, 2], tgt_tokens=[3, 6, 4, 2],
                              back_translated_src=[2, 5, 1], label=1,
                              src_is_real=True, tgt_is_real=False)
    return config, params, example


def check_composite_objective(rng) -> float:
    """Full dual-stream objective on a 2-layer toy model versus finite differences."""
    config, params, example = _toy_setup(rng)
    theta = {name: np.array(p.data) for name, p in params.items()}

    def build(p):
        breakdown, _ = example_loss(config, p, example, example.src_tokens, "src",
                                    num_classes=2)
        return breakdown.loss

    return _check(build, theta)


ALL_CHECKS = (
    ("elementwise", check_elementwise),
    ("matmul", check_matmul_chain),
    ("structural", check_structural),
    ("softmax", check_softmax),
    ("log_reductions", check_log_reductions),
    ("layer_norm", check_layer_norm),
    ("attention", check_attention),
    ("mixup_gate", check_mixup_gate),
    ("manifold_mix", check_manifold_mix),
    ("losses", check_losses),
    ("composite", check_composite_objective),
)


def run_gradient_suite(seed: int = 0, rounds: int = 1) -> dict[str, float]:
    """Worst relative error per check over ``rounds`` seeded repetitions."""
    worst: dict[str, float] = {}
    for r in range(rounds):
        rng = np.random.default_rng(np.random.SeedSequence((seed, r)))
        for name, fn in ALL_CHECKS:
            err = fn(rng)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
