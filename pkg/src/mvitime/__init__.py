"""Contrastive pre-training of a 1D MobileViT for single-channel EEG sleep staging."""

from .augment import AugmentConfig, crop_resize, make_views, permute
from .contrastive import nt_xent, nt_xent_loss, pca_fit
from .eval import confusion_matrix, evaluate, metrics
from .ingest import EpochDataset, SleepStage
from .model import ModelConfig, MViTime, build_model, tiny_config, xs_config
from .train import TrainConfig, combine_backbones, finetune, pretrain_cross_subject, pretrain_self

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "EpochDataset", "MViTime", "ModelConfig", "SleepStage", "TrainConfig",
    "build_model", "combine_backbones", "confusion_matrix", "crop_resize", "evaluate", "finetune",
    "make_views", "metrics", "nt_xent", "nt_xent_loss", "pca_fit", "permute", "pretrain_cross_subject",
    "pretrain_self", "tiny_config", "xs_config",
]
