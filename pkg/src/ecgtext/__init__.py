"""Contrastive masked ECG-text pretraining and evaluation."""

from .corpus import (EcgSignal, PairedExample, SynthConfig, TextReport,
                     TokenSequence, Vocabulary, generate_examples,
                     generate_synthetic_corpus, load_dataset, merge_reports,
                     preprocess_text, save_dataset, tokenize)
from .masking import MaskConfig, MaskSpec, input_dropout_mask, mlm_mask, random_lead_mask
from .model import ModelConfig, PretrainModel
from .objectives import (LossBreakdown, LossWeights, PairLabels, ets_loss,
                         etm_loss, mem_loss, mlm_loss, total_loss)
from .trainer import (OptimizerConfig, ScheduleConfig, Trainer, TrainerConfig,
                      load_checkpoint, pretrain, save_checkpoint, tri_stage_lr)

__version__ = "0.1.0"

__all__ = [
    "EcgSignal", "PairedExample", "SynthConfig", "TextReport", "TokenSequence",
    "Vocabulary", "generate_examples", "generate_synthetic_corpus", "load_dataset",
    "merge_reports", "preprocess_text", "save_dataset", "tokenize",
    "MaskConfig", "MaskSpec", "input_dropout_mask", "mlm_mask", "random_lead_mask",
    "ModelConfig", "PretrainModel",
    "LossBreakdown", "LossWeights", "PairLabels", "ets_loss", "etm_loss",
    "mem_loss", "mlm_loss", "total_loss",
    "OptimizerConfig", "ScheduleConfig", "Trainer", "TrainerConfig",
    "load_checkpoint", "pretrain", "save_checkpoint", "tri_stage_lr",
    "__version__",
]
