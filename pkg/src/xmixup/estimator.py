"""Scikit-learn style front door for the dual-stream model.

``XMixupModel`` exposes fit/predict/predict_proba/score over lists of
:class:`~xmixup.corpus.ParallelExample` (or a :class:`DatasetBundle`), so the
trainer composes with the usual ecosystem tooling (``clone``, ``get_params``,
grid search over the mixup hyperparameters).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .corpus import DatasetBundle, ParallelExample
from .encoder import EncoderConfig
from .losses import TaskKind
from .trainer import (PRIMARY_METRIC, TASK_ALPHA, TASK_SCHEDULE_K, TrainConfig,
                      evaluate, infer_classification, infer_span, infer_token, train)
from .validation import ValidationError, check_examples


class XMixupModel(BaseEstimator):
    """Cross-lingual classifier/tagger/span extractor with manifold mixup.

    Parameters mirror the training configuration; ``alpha`` and
    ``schedule_k`` default to the per-task values when left as None.
    """

    def __init__(self, task="classification", num_layers=2, d_model=32, num_heads=4,
                 ffn_dim=64, vocab_size=50, max_len=24, alpha=None, lambda0=0.5,
                 mix_layer=1, schedule_k=None, learning_rate=1e-3, batch_size=16,
                 epochs=3, seed=0, use_mixup=True, mixup_inference=True,
                 scheduled_sampling=True, mse_consistency=True, kl_consistency=True,
                 constant_lambda=False):
        self.task = task
        self.num_layers = num_layers
        self.d_model = d_model
        self.num_heads = num_heads
        self.ffn_dim = ffn_dim
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.alpha = alpha
        self.lambda0 = lambda0
        self.mix_layer = mix_layer
        self.schedule_k = schedule_k
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.use_mixup = use_mixup
        self.mixup_inference = mixup_inference
        self.scheduled_sampling = scheduled_sampling
        self.mse_consistency = mse_consistency
        self.kl_consistency = kl_consistency
        self.constant_lambda = constant_lambda

    def _train_config(self) -> TrainConfig:
        task = TaskKind(self.task)
        encoder = EncoderConfig(num_layers=self.num_layers, d_model=self.d_model,
                                num_heads=self.num_heads, ffn_dim=self.ffn_dim,
                                vocab_size=self.vocab_size, max_len=self.max_len)
        return TrainConfig(
            task=task, encoder=encoder,
            alpha=TASK_ALPHA[task] if self.alpha is None else self.alpha,
            lambda0=self.lambda0, mix_layer=self.mix_layer,
            schedule_k=TASK_SCHEDULE_K[task] if self.schedule_k is None else self.schedule_k,
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            epochs=self.epochs, seed=self.seed, use_mixup=self.use_mixup,
            mixup_inference=self.mixup_inference,
            scheduled_sampling=self.scheduled_sampling,
            mse_consistency=self.mse_consistency,
            kl_consistency=self.kl_consistency,
            constant_lambda=self.constant_lambda,
        )

    def fit(self, X, y=None):
        """Train on parallel examples (a DatasetBundle or a list of training pairs)."""
        config = self._train_config()
        if isinstance(X, DatasetBundle):
            bundle = X
        else:
            examples = check_examples(X, config.task,
                                      require_bt=config.use_mixup and config.scheduled_sampling,
                                      vocab_size=config.encoder.vocab_size,
                                      max_len=config.encoder.max_len)
            bundle = DatasetBundle(task=config.task, train=examples, test=[])
        result = train(config, bundle)
        self.config_ = config
        self.model_ = result.model
        self.history_ = result.metrics
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise ValidationError("estimator is not fitted; call fit first")

    @staticmethod
    def _as_examples(X) -> list[ParallelExample]:
        return X.test if isinstance(X, DatasetBundle) else list(X)

    def predict(self, X):
        """Labels for test-style examples: class ids, tag lists, or span pairs."""
        self._require_fitted()
        task = self.config_.task
        out = []
        for ex in self._as_examples(X):
            if task == TaskKind.CLASSIFICATION:
                out.append(infer_classification(self.model_, ex.tgt_tokens, ex.src_tokens)[0])
            elif task == TaskKind.STRUCTURED:
                out.append(infer_token(self.model_, ex.tgt_tokens, ex.src_tokens))
            else:
                out.append(infer_span(self.model_, ex.tgt_tokens, ex.src_tokens))
        return out

    def predict_proba(self, X) -> np.ndarray:
        self._require_fitted()
        if self.config_.task != TaskKind.CLASSIFICATION:
            raise ValidationError("predict_proba is only defined for classification")
        rows = [infer_classification(self.model_, ex.tgt_tokens, ex.src_tokens)[1]
                for ex in self._as_examples(X)]
        return np.array(rows)

    def score(self, X, y=None) -> float:
        """Primary task metric (accuracy or F1) on test-style examples."""
        self._require_fitted()
        metrics = evaluate(self.model_, self._as_examples(X))
        return metrics[PRIMARY_METRIC[self.config_.task]]
