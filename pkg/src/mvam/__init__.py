"""Pools token features into several learned sub-embeddings for caption and image retrieval."""

from .head import TokenFeatures, encode_attn, encode_cls, encode_mvam
from .losses import LossConfig, contrastive_loss, diversity_base, diversity_sqrt, total_loss
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "LossConfig",
    "TokenFeatures",
    "TrainConfig",
    "contrastive_loss",
    "diversity_base",
    "diversity_sqrt",
    "encode_attn",
    "encode_cls",
    "encode_mvam",
    "load_checkpoint",
    "save_checkpoint",
    "total_loss",
    "train",
]
