"""Retrieval-augmented missing-modality emotion classification."""
from .dataset import (Corpus, EmotionLabel, Sample, ScaleTier, SyntheticConfig,
                      generate_synthetic, split_corpus)
from .encoder import Checkpoint, TrainConfig, pretrain_full_modality
from .evaluation import (EvalConfig, RunGrid, cross_validate, emit_report, run_ablations,
                         unweighted_accuracy, weighted_accuracy)
from .pipeline import CompletionConfig, MissingCondition, parse_condition, predict, train_missing
from .vecstore import AlignedStore, ModalityStore, build_store, search_topk

__version__ = "0.1.0"
