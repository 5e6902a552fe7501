"""Supervised-contrastive and hybrid-loss training for environmental sound classification."""

from .audio_io import Dataset, DatasetManifest, WaveSample, load_manifest, load_wav, normalize, resample_linear
from .augmentation import AugmentConfig
from .dsp import LogMelSpectrogram, StftConfig, log_mel
from .losses import LossConfig, cross_entropy, hybrid, sup_contrastive
from .nn import ModelConfig
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "Dataset",
    "DatasetManifest",
    "LogMelSpectrogram",
    "LossConfig",
    "ModelConfig",
    "StftConfig",
    "TrainConfig",
    "WaveSample",
    "cross_entropy",
    "hybrid",
    "load_checkpoint",
    "load_manifest",
    "load_wav",
    "log_mel",
    "normalize",
    "resample_linear",
    "save_checkpoint",
    "sup_contrastive",
    "train",
]
