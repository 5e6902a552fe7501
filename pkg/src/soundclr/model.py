"""A trained network bundled with the feature settings it was trained on."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .audio_io import WaveSample
from .augmentation import AugmentConfig, featurize_eval
from .dsp import StftConfig


@dataclass
class SoundCLRModel:
    params: nn.ParamSet
    config: nn.ModelConfig
    stft: StftConfig
    augment: AugmentConfig
    chunk: int = 64

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def dtype(self):
        return self.params["cls.weight"].dtype

    def features(self, waves: list[WaveSample]) -> np.ndarray:
        return np.stack([featurize_eval(w, self.augment, self.stft) for w in waves]).astype(self.dtype)

    def forward_features(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(logits, representations) for a feature batch, computed in chunks."""
        logits, reps = [], []
        for i in range(0, len(X), self.chunk):
            out = nn.forward(self.params, self.config, X[i : i + self.chunk])
            logits.append(out.logits)
            reps.append(out.h)
        return np.concatenate(logits), np.concatenate(reps)

    def predict_logits(self, waves: list[WaveSample]) -> np.ndarray:
        return self.forward_features(self.features(waves))[0]

    def represent(self, waves: list[WaveSample]) -> np.ndarray:
        return self.forward_features(self.features(waves))[1]
