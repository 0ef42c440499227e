"""Training loop, inference, evaluation, and checkpointing.

A training step encodes each parallel example (dual-stream with mixup, or two
independent streams when mixup is off), assembles the balanced task +
consistency objective, and applies one Adam update on the batch-mean loss.
With every toggle off the loop degenerates exactly to plain translate-train:
alpha-weighted supervised training on the source and target renderings with
single-stream inference.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor, backward
from .corpus import DROPPED_TAG, DatasetBundle, ParallelExample, iter_batches
from .encoder import (EncoderConfig, HiddenStates, encode_pair, encode_single,
                      init_params, sequence_representation)
from .losses import (LossBreakdown, TaskKind, classification_loss, kl_divergence,
                     one_hot, pseudo_labels, token_level_loss, total_loss)
from .mixup import MixupConfig, sample_source, sampling_threshold

logger = logging.getLogger("xmixup")

METRIC_COLUMNS = ("run_id", "epoch", "loss_total", "loss_task_S", "loss_task_T",
                  "loss_mse", "loss_kl", "lambda_mean", "p_star", "eval_metric")

PRIMARY_METRIC = {
    TaskKind.CLASSIFICATION: "accuracy",
    TaskKind.STRUCTURED: "f1",
    TaskKind.SPAN: "f1",
}

TASK_ALPHA = {TaskKind.CLASSIFICATION: 0.4, TaskKind.STRUCTURED: 0.8, TaskKind.SPAN: 0.2}
TASK_SCHEDULE_K = {TaskKind.CLASSIFICATION: 1000.0, TaskKind.STRUCTURED: 1000.0, TaskKind.SPAN: 2000.0}


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    task: TaskKind = TaskKind.CLASSIFICATION
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    alpha: float = 0.4
    lambda0: float = 0.5
    mix_layer: int = 1
    schedule_k: float = 1000.0
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 3
    seed: int = 0
    use_mixup: bool = True
    mixup_inference: bool = True
    scheduled_sampling: bool = True
    mse_consistency: bool = True
    kl_consistency: bool = True
    constant_lambda: bool = False

    def mixup_config(self) -> MixupConfig | None:
        if not self.use_mixup:
            return None
        return MixupConfig(lambda0=self.lambda0, mix_layer=self.mix_layer,
                           schedule_k=self.schedule_k, constant_lambda=self.constant_lambda)


def default_config(task: TaskKind | str = TaskKind.CLASSIFICATION, **overrides) -> TrainConfig:
    """Per-task defaults: alpha 0.4/0.8/0.2 and decay rate 1000/1000/2000."""
    task = TaskKind(task)
    base = TrainConfig(task=task, alpha=TASK_ALPHA[task], schedule_k=TASK_SCHEDULE_K[task])
    return replace(base, **overrides) if overrides else base


@dataclass
class Model:
    config: TrainConfig
    params: dict[str, Tensor]


@dataclass
class EpochStats:
    lambda_values: list[float] = field(default_factory=list)

    @property
    def lambda_mean(self) -> float | None:
        return float(np.mean(self.lambda_values)) if self.lambda_values else None

    @property
    def lambda_min(self) -> float | None:
        return float(np.min(self.lambda_values)) if self.lambda_values else None

    @property
    def lambda_max(self) -> float | None:
        return float(np.max(self.lambda_values)) if self.lambda_values else None


@dataclass
class TrainResult:
    model: Model
    metrics: list[dict]
    p_star_trace: list[float]
    lambda_stats: list[EpochStats]
    optimizer: "Adam"
    step: int

    def write_metrics_csv(self, path) -> None:
        write_metrics_csv(self.metrics, path)


def write_metrics_csv(rows: list[dict], path) -> None:
    """Fixed column order, repr-formatted floats; byte-stable across reruns."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([_format_cell(row.get(col)) for col in METRIC_COLUMNS])


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Adam:
    """Plain Adam; parameters are replaced (never mutated) on each step."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, grads: dict[str, Tensor]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name in self.params:
            g = grads[name].data
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            new_data = self.params[name].data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.params[name] = Tensor(new_data, requires_grad=True)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.array(state["m"][k], dtype=np.float64).reshape(self.m[k].shape)
            self.v[k] = np.array(state["v"][k], dtype=np.float64).reshape(self.v[k].shape)


def head_sizes(task: TaskKind, num_classes: int) -> dict[str, int]:
    if task == TaskKind.CLASSIFICATION:
        return {"cls": num_classes}
    if task == TaskKind.STRUCTURED:
        return {"tok": num_classes}
    return {"span": 2}


def init_model(config: TrainConfig, num_classes: int) -> Model:
    init_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(3)[0])
    params = init_params(config.encoder, init_rng,
                         head_sizes=head_sizes(config.task, num_classes))
    return Model(config=config, params=params)


# ---------------------------------------------------------------------------
# task heads


def class_probs(params: dict[str, Tensor], rep: Tensor) -> Tensor:
    logits = ad.add(ad.matmul(rep, params["head.cls.w"]), params["head.cls.b"])
    return ad.softmax_rows(logits)


def token_probs(params: dict[str, Tensor], states: HiddenStates) -> Tensor:
    logits = ad.add(ad.matmul(states.last, params["head.tok.w"]), params["head.tok.b"])
    return ad.softmax_rows(logits)


def span_probs(params: dict[str, Tensor], states: HiddenStates) -> tuple[Tensor, Tensor]:
    logits = ad.add(ad.matmul(states.last, params["head.span.w"]), params["head.span.b"])
    start = ad.softmax_rows(ad.transpose(ad.slice_cols(logits, 0, 1)), col_mask=states.mask)
    end = ad.softmax_rows(ad.transpose(ad.slice_cols(logits, 1, 2)), col_mask=states.mask)
    return start, end


def _tag_rows(tags: list[int], num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """One-hot rows plus a validity mask; dropped tags are masked out."""
    n = len(tags)
    rows = np.zeros((n, num_classes))
    valid = np.zeros(n, dtype=bool)
    for i, t in enumerate(tags):
        if t == DROPPED_TAG:
            continue
        rows[i, t] = 1.0
        valid[i] = True
    return rows, valid


# ---------------------------------------------------------------------------
# per-example loss


def example_loss(config: TrainConfig, params: dict[str, Tensor], example: ParallelExample,
                 src_tokens: list[int], src_variant: str, num_classes: int) -> tuple[LossBreakdown, float | None]:
    """Loss breakdown for one parallel example; returns (breakdown, mixup ratio)."""
    mix = config.mixup_config()
    h_s, h_t, lam = encode_pair(src_tokens, example.tgt_tokens, config.encoder, params, mix)
    r_s = sequence_representation(h_s)
    r_t = sequence_representation(h_t)

    p_s_row = p_t_row = None
    if config.task == TaskKind.CLASSIFICATION:
        y = one_hot(int(example.label), num_classes)
        p_s_row = class_probs(params, r_s)
        p_t_row = class_probs(params, r_t)
        task_s = classification_loss(p_s_row, y)
        task_t = classification_loss(p_t_row, y)
    elif config.task == TaskKind.STRUCTURED:
        probs_s = token_probs(params, h_s)
        probs_t = token_probs(params, h_t)
        rows, valid = _tag_rows(example.label[src_variant], num_classes)
        task_s = token_level_loss(probs_s, rows, mask=valid)
        # no gold token labels on the target side: the source stream's
        # predictions become detached soft targets, position-aligned
        task_t = token_level_loss(probs_t, pseudo_labels(probs_s))
    else:
        start_s, end_s = span_probs(params, h_s)
        start_t, end_t = span_probs(params, h_t)
        s_lab = example.label[src_variant]
        t_lab = example.label["tgt"]
        n_src, n_tgt = len(src_tokens), len(example.tgt_tokens)
        task_s = ad.add(classification_loss(start_s, one_hot(s_lab[0], n_src)),
                        classification_loss(end_s, one_hot(s_lab[1], n_src)))
        task_t = ad.add(classification_loss(start_t, one_hot(t_lab[0], n_tgt)),
                        classification_loss(end_t, one_hot(t_lab[1], n_tgt)))

    # the consistency terms tie the two streams of the mixup pathway together;
    # without mixup the loop degenerates to plain translate-train
    if config.use_mixup and config.mse_consistency:
        diff = ad.sub(r_s, r_t)
        mse = ad.mean_all(ad.mul(diff, diff))
    else:
        mse = Tensor(0.0)
    if config.use_mixup and config.kl_consistency and config.task == TaskKind.CLASSIFICATION:
        kl = kl_divergence(p_s_row, p_t_row)
    else:
        kl = Tensor(0.0)

    breakdown = total_loss(task_s, task_t, mse, kl, config.alpha, config.task)
    return breakdown, (None if lam is None else float(lam.data))


def train(config: TrainConfig, bundle: DatasetBundle, run_id: str = "run") -> TrainResult:
    """Train a fresh model; deterministic given (config, bundle).

    Per step: sample each example's source side per the decay schedule,
    encode, assemble the loss breakdown, and take one Adam step on the batch
    mean. Logs one metrics row per epoch.
    """
    if bundle.task is not None and bundle.task != config.task:
        raise TrainingError(f"bundle task {bundle.task} != config task {config.task}")
    num_classes = bundle.num_classes()
    seq = np.random.SeedSequence(config.seed)
    _, shuffle_rng, sample_rng = (np.random.default_rng(s) for s in seq.spawn(3))
    model = init_model(config, num_classes)
    params = model.params
    opt = Adam(params, lr=config.learning_rate)

    sampling_active = config.use_mixup and config.scheduled_sampling
    rows: list[dict] = []
    p_star_trace: list[float] = []
    lambda_stats: list[EpochStats] = []
    step = 0

    for epoch in range(config.epochs):
        sums = {"total": 0.0, "task_s": 0.0, "task_t": 0.0, "mse": 0.0, "kl": 0.0}
        count = 0
        stats = EpochStats()
        last_p_star: float | None = None
        for batch in iter_batches(bundle.train, config.batch_size, rng=shuffle_rng):
            p_star = sampling_threshold(step, config.schedule_k) if sampling_active else None
            if p_star is not None:
                p_star_trace.append(p_star)
                last_p_star = p_star
            tape = GradTape()
            try:
                with tape:
                    batch_sum = None
                    for example in batch:
                        if sampling_active:
                            drawn = sample_source(example, p_star, float(sample_rng.random()))
                            src_tokens, variant = drawn.tokens, ("src" if drawn.is_real else "bt_src")
                        else:
                            src_tokens, variant = list(example.src_tokens), "src"
                        breakdown, lam = example_loss(config, params, example,
                                                      src_tokens, variant, num_classes)
                        if lam is not None:
                            stats.lambda_values.append(lam)
                        sums["total"] += breakdown.total
                        sums["task_s"] += breakdown.task_s
                        sums["task_t"] += breakdown.task_t
                        sums["mse"] += breakdown.mse
                        sums["kl"] += breakdown.kl
                        count += 1
                        batch_sum = breakdown.loss if batch_sum is None else ad.add(batch_sum, breakdown.loss)
                    batch_loss = ad.mul(batch_sum, 1.0 / len(batch))
            except ad.AutodiffError as exc:
                # inputs were validated up front: a non-finite value appearing
                # mid-step means the optimization itself blew up
                raise TrainingDiverged(step) from exc
            if not np.isfinite(batch_loss.data):
                raise TrainingDiverged(step)
            grads = backward(tape, batch_loss, params)
            opt.step(grads)
            step += 1
        metric = evaluate(Model(config, params), bundle.test)
        primary = metric.get(PRIMARY_METRIC[config.task]) if metric else None
        rows.append({
            "run_id": run_id,
            "epoch": epoch,
            "loss_total": sums["total"] / count if count else None,
            "loss_task_S": sums["task_s"] / count if count else None,
            "loss_task_T": sums["task_t"] / count if count else None,
            "loss_mse": sums["mse"] / count if count else None,
            "loss_kl": sums["kl"] / count if count else None,
            "lambda_mean": stats.lambda_mean,
            "p_star": last_p_star,
            "eval_metric": primary,
        })
        lambda_stats.append(stats)
        logger.info("epoch %d: loss=%.6f eval=%s", epoch,
                    rows[-1]["loss_total"] or float("nan"), primary)

    return TrainResult(model=Model(config, params), metrics=rows,
                       p_star_trace=p_star_trace, lambda_stats=lambda_stats,
                       optimizer=opt, step=step)


# ---------------------------------------------------------------------------
# inference


def _mixup_active(config: TrainConfig) -> bool:
    return config.use_mixup and config.mixup_inference


def _encode_for_inference(model: Model, tgt_tokens, src_tokens):
    config = model.config
    if _mixup_active(config):
        if src_tokens is None:
            raise InferenceError("translate-test source required for mixup inference")
        h_s, h_t, _ = encode_pair(src_tokens, tgt_tokens, config.encoder,
                                  model.params, config.mixup_config())
        return h_s, h_t
    return None, encode_single(tgt_tokens, config.encoder, model.params)


def infer_classification(model: Model, tgt_tokens, src_tokens=None) -> tuple[int, np.ndarray]:
    """Predict a class; with mixup inference the final distribution is the
    mean of the source-stream and target-stream predictions."""
    h_s, h_t = _encode_for_inference(model, tgt_tokens, src_tokens)
    p_t = class_probs(model.params, sequence_representation(h_t)).data[0]
    if h_s is not None:
        p_s = class_probs(model.params, sequence_representation(h_s)).data[0]
        p_final = 0.5 * (p_s + p_t)
    else:
        p_final = p_t
    return int(np.argmax(p_final)), p_final  # argmax ties break to the lowest index


def infer_token(model: Model, tgt_tokens, src_tokens=None) -> list[int]:
    """Per-token argmax tags from the target stream only."""
    _, h_t = _encode_for_inference(model, tgt_tokens, src_tokens)
    probs = token_probs(model.params, h_t).data
    keep = h_t.mask
    return [int(np.argmax(row)) for row, m in zip(probs, keep) if m]


def infer_span(model: Model, tgt_tokens, src_tokens=None) -> tuple[int, int]:
    """Most probable valid (start <= end) span from the target stream."""
    _, h_t = _encode_for_inference(model, tgt_tokens, src_tokens)
    start, end = span_probs(model.params, h_t)
    p_start, p_end = start.data[0], end.data[0]
    best, best_score = (0, 0), -1.0
    for s in range(len(p_start)):
        if not h_t.mask[s]:
            continue
        for e in range(s, len(p_end)):
            if not h_t.mask[e]:
                continue
            score = p_start[s] * p_end[e]
            if score > best_score:
                best, best_score = (s, e), score
    return best


def evaluate(model: Model, examples: list[ParallelExample]) -> dict[str, float]:
    """Task metric on test-style examples: accuracy, token F1, or span EM/F1."""
    if not examples:
        return {}
    task = model.config.task
    if task == TaskKind.CLASSIFICATION:
        hits = 0
        for ex in examples:
            pred, _ = infer_classification(model, ex.tgt_tokens, ex.src_tokens)
            hits += int(pred == int(ex.label))
        return {"accuracy": hits / len(examples)}
    if task == TaskKind.STRUCTURED:
        tp = fp = fn = 0
        for ex in examples:
            pred = infer_token(model, ex.tgt_tokens, ex.src_tokens)
            gold = ex.label["tgt"]
            for p, g in zip(pred, gold):
                if g == DROPPED_TAG:
                    continue
                if p == 1 and g == 1:
                    tp += 1
                elif p == 1:
                    fp += 1
                elif g == 1:
                    fn += 1
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        return {"f1": f1}
    em = 0
    f1_sum = 0.0
    for ex in examples:
        s, e = infer_span(model, ex.tgt_tokens, ex.src_tokens)
        gs, ge = ex.label["tgt"]
        em += int(s == gs and e == ge)
        pred_set = set(range(s, e + 1))
        gold_set = set(range(gs, ge + 1))
        overlap = len(pred_set & gold_set)
        f1_sum += 2 * overlap / (len(pred_set) + len(gold_set)) if overlap else 0.0
    return {"em": em / len(examples), "f1": f1_sum / len(examples)}


# ---------------------------------------------------------------------------
# checkpointing


def _config_to_dict(config: TrainConfig) -> dict:
    enc = config.encoder
    return {
        "task": config.task.value,
        "encoder": {
            "num_layers": enc.num_layers, "d_model": enc.d_model,
            "num_heads": enc.num_heads, "ffn_dim": enc.ffn_dim,
            "vocab_size": enc.vocab_size, "max_len": enc.max_len,
        },
        "alpha": config.alpha, "lambda0": config.lambda0,
        "mix_layer": config.mix_layer, "schedule_k": config.schedule_k,
        "learning_rate": config.learning_rate, "batch_size": config.batch_size,
        "epochs": config.epochs, "seed": config.seed,
        "use_mixup": config.use_mixup, "mixup_inference": config.mixup_inference,
        "scheduled_sampling": config.scheduled_sampling,
        "mse_consistency": config.mse_consistency,
        "kl_consistency": config.kl_consistency,
        "constant_lambda": config.constant_lambda,
    }


def config_from_dict(data: dict) -> TrainConfig:
    enc = EncoderConfig(**data["encoder"])
    fields = {k: v for k, v in data.items() if k not in ("task", "encoder")}
    return TrainConfig(task=TaskKind(data["task"]), encoder=enc, **fields)


def save_checkpoint(path, model: Model, optimizer: Adam | None = None, step: int = 0) -> None:
    """JSON manifest: config snapshot, step, named arrays as shape + row-major values.

    Values are serialized through repr, which round-trips float64 exactly.
    """
    payload = {
        "config": _config_to_dict(model.config),
        "step": step,
        "params": {
            name: {"shape": list(p.data.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in model.params.items()
        },
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple[Model, dict | None, int]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    config = config_from_dict(payload["config"])
    params = {
        name: Tensor(np.array(entry["data"], dtype=np.float64).reshape(entry["shape"]),
                     requires_grad=True)
        for name, entry in payload["params"].items()
    }
    return Model(config=config, params=params), payload.get("optimizer"), int(payload["step"])
