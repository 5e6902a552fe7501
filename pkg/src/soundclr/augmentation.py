"""Wave- and spectrogram-stage augmentations and the fixed pipeline order.

Randomness always comes from an explicit ``numpy.random.Generator``
(PCG64). :func:`substream` derives independent, reproducible streams from
a seed plus integer keys such as (epoch, batch, position).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp
from .audio_io import WaveSample, interpolate_at


def substream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


@dataclass(frozen=True)
class AugmentConfig:
    scale_min: float = 1 / 1.25
    scale_max: float = 1.25
    silence_threshold: float = 1e-4
    target_len: int = 220500
    freq_mask_width: int = 32  # F
    time_mask_width: int = 32  # T
    freq_masks: int = 2  # f
    time_masks: int = 1  # t
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.scale_min <= self.scale_max:
            raise ValueError(f"need 0 < scale_min <= scale_max, got [{self.scale_min}, {self.scale_max}]")
        if self.silence_threshold < 0:
            raise ValueError("silence_threshold must be >= 0")
        if self.target_len <= 0:
            raise ValueError(f"target_len must be positive, got {self.target_len}")
        for name in ("freq_mask_width", "time_mask_width", "freq_masks", "time_masks"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


# ---------------------------------------------------------------------------
# Wave stage
# ---------------------------------------------------------------------------


def trim_silence(w: WaveSample, threshold: float) -> WaveSample:
    """Drop leading and trailing samples with |x| < threshold."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    x = np.asarray(w.samples)
    loud = np.flatnonzero(np.abs(x) >= threshold)
    if loud.size == 0:
        return w.with_samples(np.zeros(1))
    return w.with_samples(x[loud[0] : loud[-1] + 1])


def scale_by(w: WaveSample, s: float) -> WaveSample:
    """Resample by factor ``s``: output[i] is the input read at position i * s."""
    if s == 1.0:
        return w
    n_out = max(1, int(round(len(w) / s)))
    return w.with_samples(interpolate_at(w.samples, np.arange(n_out) * s))


def random_scale(w: WaveSample, cfg: AugmentConfig, rng: np.random.Generator) -> WaveSample:
    s = rng.uniform(cfg.scale_min, cfg.scale_max)
    return scale_by(w, s)


def fit_length(w: WaveSample, target_len: int, rng: np.random.Generator) -> WaveSample:
    """Random zero-padding or random crop to exactly ``target_len`` samples."""
    if target_len <= 0:
        raise ValueError("target_len must be positive")
    x = np.asarray(w.samples)
    n = len(x)
    if n == target_len:
        return w
    if n < target_len:
        front = int(rng.integers(0, target_len - n + 1))
        out = np.zeros(target_len, dtype=x.dtype)
        out[front : front + n] = x
        return w.with_samples(out)
    start = int(rng.integers(0, n - target_len + 1))
    return w.with_samples(x[start : start + target_len].copy())


def center_fit(w: WaveSample, target_len: int) -> WaveSample:
    """Deterministic counterpart of :func:`fit_length` used at evaluation time."""
    x = np.asarray(w.samples)
    n = len(x)
    if n == target_len:
        return w
    if n < target_len:
        front = (target_len - n) // 2
        out = np.zeros(target_len, dtype=x.dtype)
        out[front : front + n] = x
        return w.with_samples(out)
    start = (n - target_len) // 2
    return w.with_samples(x[start : start + target_len].copy())


# ---------------------------------------------------------------------------
# Spectrogram stage
# ---------------------------------------------------------------------------


def draw_masks(n_mels: int, n_frames: int, cfg: AugmentConfig, rng: np.random.Generator):
    """Draw (row slices, column slices) for the masks.

    Draw order: for each frequency mask its width then its start, then the
    same for each time mask. Widths are uniform integers in [0, F] / [0, T].
    """
    if cfg.freq_masks and cfg.freq_mask_width > n_mels:
        raise ValueError(f"frequency mask width F={cfg.freq_mask_width} exceeds {n_mels} mel bins")
    if cfg.time_masks and cfg.time_mask_width > n_frames:
        raise ValueError(f"time mask width T={cfg.time_mask_width} exceeds {n_frames} frames")
    rows, cols = [], []
    for _ in range(cfg.freq_masks):
        width = int(rng.integers(0, cfg.freq_mask_width + 1))
        start = int(rng.integers(0, n_mels - width + 1))
        rows.append((start, start + width))
    for _ in range(cfg.time_masks):
        width = int(rng.integers(0, cfg.time_mask_width + 1))
        start = int(rng.integers(0, n_frames - width + 1))
        cols.append((start, start + width))
    return rows, cols


def mask_spectrogram(
    spec: dsp.LogMelSpectrogram, cfg: AugmentConfig, rng: np.random.Generator
) -> dsp.LogMelSpectrogram:
    """Zero out f frequency bands and t time spans (masks may overlap)."""
    values = spec.values.copy()
    rows, cols = draw_masks(*values.shape, cfg, rng)
    for lo, hi in rows:
        values[lo:hi, :] = 0.0
    for lo, hi in cols:
        values[:, lo:hi] = 0.0
    return dsp.LogMelSpectrogram(values, spec.config, spec.sample_rate)


def triplicate(spec: dsp.LogMelSpectrogram | np.ndarray) -> np.ndarray:
    values = spec.values if isinstance(spec, dsp.LogMelSpectrogram) else np.asarray(spec)
    return np.repeat(values[None, :, :], 3, axis=0)


# ---------------------------------------------------------------------------
# Pipelines
# ---------------------------------------------------------------------------


class Stages:
    """The callables a pipeline run goes through; tests swap these for stubs."""

    trim = staticmethod(trim_silence)
    scale = staticmethod(random_scale)
    fit = staticmethod(fit_length)
    featurize = staticmethod(dsp.log_mel)
    mask = staticmethod(mask_spectrogram)
    triplicate = staticmethod(triplicate)


def augment(
    w: WaveSample,
    aug: AugmentConfig,
    stft: dsp.StftConfig,
    rng: np.random.Generator,
    stages: type[Stages] = Stages,
) -> np.ndarray:
    """Training pipeline: trim, scale, fit, log-mel, mask, triplicate -> [3, M, L]."""
    w = stages.trim(w, aug.silence_threshold)
    w = stages.scale(w, aug, rng)
    w = stages.fit(w, aug.target_len, rng)
    spec = stages.featurize(w, stft)
    spec = stages.mask(spec, aug, rng)
    return stages.triplicate(spec)


def featurize_eval(w: WaveSample, aug: AugmentConfig, stft: dsp.StftConfig) -> np.ndarray:
    """Augmentation-free pipeline: centered fit, log-mel, triplicate."""
    return triplicate(dsp.log_mel(center_fit(w, aug.target_len), stft))
