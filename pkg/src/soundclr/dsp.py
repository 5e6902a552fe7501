"""Power STFT, HTK mel filterbank and log-mel features."""

from __future__ import annotations

import functools
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import WaveSample

LOG_FLOOR = 1e-6

CACHE_MAGIC = b"SCLRFEAT"
CACHE_VERSION = 1


class EmptyFilterWarning(UserWarning):
    """A mel triangle falls between two FFT bins and has no support."""


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 1024
    hop: int = 512
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float | None = None  # None means sample_rate / 2
    standardize: bool = False

    def __post_init__(self):
        if self.window_len < 2 or self.window_len & (self.window_len - 1):
            raise ValueError(f"window_len must be a power of two, got {self.window_len}")
        if self.hop < 1:
            raise ValueError(f"hop must be >= 1, got {self.hop}")
        if self.n_mels < 1:
            raise ValueError(f"n_mels must be >= 1, got {self.n_mels}")
        if self.fmin < 0:
            raise ValueError(f"fmin must be >= 0, got {self.fmin}")

    @property
    def n_bins(self) -> int:
        return self.window_len // 2 + 1

    def band(self, sample_rate: int) -> tuple[float, float]:
        fmax = sample_rate / 2 if self.fmax is None else self.fmax
        if not 0 <= self.fmin < fmax <= sample_rate / 2:
            raise ValueError(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got [{self.fmin}, {fmax}]")
        return self.fmin, fmax

    def n_frames(self, signal_len: int) -> int:
        if signal_len < self.window_len:
            raise ValueError(f"signal of {signal_len} samples is shorter than one window ({self.window_len})")
        return 1 + (signal_len - self.window_len) // self.hop


@dataclass(frozen=True)
class LogMelSpectrogram:
    values: np.ndarray  # [n_mels, n_frames]
    config: StftConfig
    sample_rate: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def hamming(n: int) -> np.ndarray:
    """Symmetric Hamming window, 0.54 - 0.46 cos(2 pi k / (n - 1))."""
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


def frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Frames as a strided view of shape [n_frames, window_len]; tail samples are dropped."""
    n_frames = cfg.n_frames(len(x))
    view = np.lib.stride_tricks.sliding_window_view(x, cfg.window_len)
    return view[:: cfg.hop][:n_frames]


def stft_power(w: WaveSample | np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Squared-magnitude STFT, shape [window_len/2 + 1, n_frames]."""
    x = np.asarray(w.samples if isinstance(w, WaveSample) else w, dtype=np.float64)
    frames = frame_signal(x, cfg) * hamming(cfg.window_len)
    spec = np.fft.rfft(frames, axis=1)
    return (spec.real**2 + spec.imag**2).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_points(cfg: StftConfig, sample_rate: int) -> np.ndarray:
    """The n_mels + 2 band edges in Hz; filter i peaks at entry i + 1."""
    fmin, fmax = cfg.band(sample_rate)
    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), cfg.n_mels + 2)
    return mel_to_hz(mels)


@functools.lru_cache(maxsize=16)
def _filterbank_cached(cfg: StftConfig, sample_rate: int) -> tuple[np.ndarray, tuple[int, ...]]:
    n_bins = cfg.n_bins
    if cfg.n_mels + 2 > n_bins:
        raise ValueError(f"n_mels={cfg.n_mels} too large for {n_bins} FFT bins")
    edges = mel_points(cfg, sample_rate)
    freqs = np.arange(n_bins) * sample_rate / cfg.window_len
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb, tuple(np.flatnonzero(fb.sum(axis=1) == 0).tolist())


def mel_filterbank(cfg: StftConfig, sample_rate: int) -> np.ndarray:
    """Unnormalized triangular filters [n_mels, n_bins] with HTK mel-spaced peaks.

    Raises ``ValueError`` when there are fewer FFT bins than band edges. A
    triangle narrower than the bin spacing yields an all-zero row and an
    :class:`EmptyFilterWarning` instead of an error.
    """
    fb, empty = _filterbank_cached(cfg, int(sample_rate))
    if empty:
        warnings.warn(
            f"{len(empty)} mel filter(s) {list(empty[:8])} contain no FFT bin "
            f"(n_mels={cfg.n_mels}, window_len={cfg.window_len}, sr={sample_rate})",
            EmptyFilterWarning,
            stacklevel=2,
        )
    return fb


def log_mel(w: WaveSample, cfg: StftConfig) -> LogMelSpectrogram:
    power = stft_power(w, cfg)
    values = np.log(mel_filterbank(cfg, w.sample_rate) @ power + LOG_FLOOR)
    if cfg.standardize:
        values = standardize(values)
    return LogMelSpectrogram(values, cfg, w.sample_rate)


def standardize(values: np.ndarray) -> np.ndarray:
    """Per-spectrogram zero mean, unit variance (constant grids map to zero)."""
    centered = values - values.mean()
    std = centered.std()
    return centered / std if std > 0 else centered


# ---------------------------------------------------------------------------
# Feature cache: 16-byte magic/version, two uint32 dims, float32 row-major
# ---------------------------------------------------------------------------


def write_feature_cache(path: str | Path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError(f"feature cache holds 2-D grids, got shape {values.shape}")
    header = CACHE_MAGIC + struct.pack("<Q", CACHE_VERSION) + struct.pack("<II", *values.shape)
    Path(path).write_bytes(header + values.tobytes())


def read_feature_cache(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 24 or data[:8] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    (version,) = struct.unpack_from("<Q", data, 8)
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    rows, cols = struct.unpack_from("<II", data, 16)
    if len(data) != 24 + 4 * rows * cols:
        raise ValueError(f"{path}: payload length does not match dims {rows}x{cols}")
    return np.frombuffer(data, dtype="<f4", offset=24).reshape(rows, cols).copy()
