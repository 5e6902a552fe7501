"""Deterministic synthetic sound corpus for desk-scale end-to-end runs."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import Dataset, DatasetManifest, ManifestEntry, WaveSample, normalize, save_wav, write_manifest
from .augmentation import substream

FREQ_JITTER = 0.05
AMP_RANGE = (0.5, 1.0)


@dataclass(frozen=True)
class ClassSpec:
    """One class generator: ``tone`` (f0), ``chord`` (f0, f1), ``chirp`` (f0 -> f1) or ``noise`` (band [f0, f1])."""

    name: str
    kind: str
    freqs: tuple[float, ...]

    def __post_init__(self):
        need = {"tone": 1, "chord": 2, "chirp": 2, "noise": 2}
        if self.kind not in need:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if len(self.freqs) != need[self.kind]:
            raise ValueError(f"{self.kind} needs {need[self.kind]} frequencies, got {len(self.freqs)}")
        object.__setattr__(self, "freqs", tuple(float(f) for f in self.freqs))


def default_classes() -> tuple[ClassSpec, ...]:
    return (
        ClassSpec("tone_440", "tone", (440.0,)),
        ClassSpec("chord_880_1320", "chord", (880.0, 1320.0)),
        ClassSpec("chirp_200_2000", "chirp", (200.0, 2000.0)),
        ClassSpec("noise_3k_6k", "noise", (3000.0, 6000.0)),
    )


@dataclass(frozen=True)
class SynthSpec:
    classes: tuple[ClassSpec, ...] = field(default_factory=default_classes)
    samples_per_class: int = 40
    clip_seconds: float = 2.0
    sample_rate: int = 22050
    folds: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "classes", tuple(c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes)
        )
        if not self.classes:
            raise ValueError("need at least one class")
        if self.folds < 1 or self.samples_per_class < self.folds:
            raise ValueError(f"samples_per_class ({self.samples_per_class}) must be >= folds ({self.folds}) >= 1")
        nyquist = self.sample_rate / 2
        for c in self.classes:
            top = max(c.freqs) * (1 + FREQ_JITTER)
            if top >= nyquist:
                raise ValueError(f"class {c.name!r}: {top:.1f} Hz (with jitter) aliases at {self.sample_rate} Hz")

    @property
    def clip_len(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))


def _render(cls: ClassSpec, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    jitter = rng.uniform(1 - FREQ_JITTER, 1 + FREQ_JITTER, size=len(cls.freqs))
    f = np.array(cls.freqs) * jitter
    if cls.kind == "tone":
        x = np.sin(2 * np.pi * f[0] * t + rng.uniform(0, 2 * np.pi))
    elif cls.kind == "chord":
        phases = rng.uniform(0, 2 * np.pi, size=2)
        x = 0.5 * (np.sin(2 * np.pi * f[0] * t + phases[0]) + np.sin(2 * np.pi * f[1] * t + phases[1]))
    elif cls.kind == "chirp":
        duration = n / sr
        phase = 2 * np.pi * (f[0] * t + 0.5 * (f[1] - f[0]) / duration * t * t)
        x = np.sin(phase + rng.uniform(0, 2 * np.pi))
    else:
        spectrum = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1 / sr)
        lo, hi = np.sort(f)
        spectrum[(freqs < lo) | (freqs > hi)] = 0
        x = np.fft.irfft(spectrum, n)
        x /= np.max(np.abs(x))
    return rng.uniform(*AMP_RANGE) * x


def generate(spec: SynthSpec = SynthSpec(), normalized: bool = True) -> tuple[Dataset, DatasetManifest]:
    """Render every clip; sample j of each class goes to fold (j mod K) + 1.

    With ``normalized`` the waves are peak-normalized as ingestion would do;
    otherwise they keep their jittered amplitude in [0.5, 1].
    """
    samples, folds, entries = [], [], []
    for label, cls in enumerate(spec.classes):
        for j in range(spec.samples_per_class):
            rng = substream(spec.seed, label, j)
            x = _render(cls, spec.clip_len, spec.sample_rate, rng)
            name = f"{cls.name}_{j:04d}.wav"
            fold = j % spec.folds + 1
            w = WaveSample(x, spec.sample_rate, label, name)
            samples.append(normalize(w) if normalized else w)
            folds.append(fold)
            entries.append(ManifestEntry(name, fold, label, cls.name))
    names = [c.name for c in spec.classes]
    data = Dataset(samples, np.array(folds), len(spec.classes), names)
    manifest = DatasetManifest(tuple(entries), len(spec.classes), spec.folds)
    return data, manifest


def dump(spec: SynthSpec, out_dir: str | Path, encoding: str = "pcm16") -> Path:
    """Write the corpus as WAV files plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data, manifest = generate(spec, normalized=False)
    for w in data.samples:
        save_wav(out_dir / w.source_id, w.samples, w.sample_rate, encoding)
    path = out_dir / "manifest.csv"
    write_manifest(path, list(manifest.entries))
    return path
