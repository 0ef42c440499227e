"""Desk-scale cross-lingual transfer laboratory with cross-attention manifold mixup."""

from .autodiff import GradTape, Tensor, backward, finite_diff_grad
from .corpus import (DatasetBundle, ParallelExample, ToyLanguageSpec, gen_bundle,
                     iter_batches, load_jsonl, save_jsonl, translate)
from .encoder import (EncoderConfig, HiddenStates, encode_pair, encode_single,
                      init_params, multi_head_attention, sequence_representation)
from .estimator import XMixupModel
from .losses import (LossBreakdown, TaskKind, classification_loss, consistency_loss,
                     pseudo_labels, token_level_loss, total_loss)
from .mixup import (AttentionStats, MixupConfig, attention_entropy, cross_attention,
                    manifold_mix, mixup_ratio, sample_source, sampling_threshold)
from .trainer import (Adam, Model, TrainConfig, TrainResult, default_config, evaluate,
                      infer_classification, infer_span, infer_token, load_checkpoint,
                      save_checkpoint, train)
from .analysis import (cka, discrepancy_report, language_centroid, pca_project,
                       spearman, transfer_gap)

__version__ = "0.1.0"

__all__ = [
    "Adam", "AttentionStats", "DatasetBundle", "EncoderConfig", "GradTape",
    "HiddenStates", "LossBreakdown", "MixupConfig", "Model", "ParallelExample",
    "TaskKind", "Tensor", "ToyLanguageSpec", "TrainConfig", "TrainResult",
    "XMixupModel", "attention_entropy", "backward", "cka", "classification_loss",
    "consistency_loss", "cross_attention", "default_config", "discrepancy_report",
    "encode_pair", "encode_single", "evaluate", "finite_diff_grad", "gen_bundle",
    "infer_classification", "infer_span", "infer_token", "init_params",
    "iter_batches", "language_centroid", "load_checkpoint", "load_jsonl",
    "manifold_mix", "mixup_ratio", "multi_head_attention", "pca_project",
    "pseudo_labels", "sample_source", "sampling_threshold", "save_checkpoint",
    "save_jsonl", "sequence_representation", "spearman", "token_level_loss",
    "total_loss", "train", "transfer_gap", "translate",
]
