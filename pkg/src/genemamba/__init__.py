"""Bidirectional selective state-space models over rank-tokenized single-cell data."""

from genemamba.bimamba import GeneMamba, ModelConfig, build_model, make_batch
from genemamba.corpus import TokenizedDataset, Vocabulary, preprocess
from genemamba.tdigest import TDigest
from genemamba.trainer import TrainConfig, Trainer, finetune_classifier

__version__ = "0.1.0"

__all__ = [
    "GeneMamba",
    "ModelConfig",
    "TDigest",
    "TokenizedDataset",
    "TrainConfig",
    "Trainer",
    "Vocabulary",
    "build_model",
    "finetune_classifier",
    "make_batch",
    "preprocess",
]
