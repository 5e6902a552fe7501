"""Waveform ingestion: WAV decoding, peak normalization, resampling, manifests.

All functions here are pure; nothing is cached at module level.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CANONICAL_RATE = 44100

_FORMAT_PCM = 0x0001
_FORMAT_FLOAT = 0x0003
_FORMAT_EXTENSIBLE = 0xFFFE

MANIFEST_COLUMNS = ("filename", "fold", "target", "category")


class AudioFormatError(ValueError):
    """Raised for unreadable or unsupported audio files."""


class ManifestError(ValueError):
    """Raised for malformed dataset manifests."""


@dataclass(frozen=True)
class WaveSample:
    """Mono signal with its sample rate and class label."""

    samples: np.ndarray
    sample_rate: int
    label: int = 0
    source_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if np.asarray(self.samples).size == 0:
            raise ValueError("WaveSample must contain at least one sample")

    def __len__(self) -> int:
        return len(self.samples)

    def with_samples(self, samples: np.ndarray, sample_rate: int | None = None) -> "WaveSample":
        return replace(
            self,
            samples=samples,
            sample_rate=self.sample_rate if sample_rate is None else sample_rate,
        )


@dataclass(frozen=True)
class ManifestEntry:
    filename: str
    fold: int
    label: int
    category: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    num_classes: int
    num_folds: int
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if not 1 <= e.fold <= self.num_folds:
                raise ManifestError(f"fold {e.fold} of {e.filename!r} outside [1, {self.num_folds}]")
            if not 0 <= e.label < self.num_classes:
                raise ManifestError(f"target {e.label} of {e.filename!r} outside [0, {self.num_classes})")
            if e.filename in seen:
                raise ManifestError(f"duplicate filename {e.filename!r}")
            seen.add(e.filename)

    def fold_entries(self, fold: int) -> list[ManifestEntry]:
        return [e for e in self.entries if e.fold == fold]

    def class_names(self) -> list[str]:
        names = [""] * self.num_classes
        for e in self.entries:
            names[e.label] = names[e.label] or e.category
        return names


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------


def _iter_chunks(data: bytes, start: int):
    pos = start
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = pos + 8
        if body + size > len(data):
            raise AudioFormatError(f"chunk {cid!r} truncated")
        yield cid, data[body : body + size]
        pos = body + size + (size & 1)


def load_wav(path: str | Path, label: int = 0, source_id: str | None = None) -> WaveSample:
    """Decode a PCM16 or float32 RIFF/WAVE file to a mono WaveSample.

    Stereo is reduced by the per-sample channel mean. PCM16 maps ``v`` to
    ``v / 32768``. No peak normalization is applied.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise AudioFormatError(f"cannot read {path}: {exc}") from exc
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError(f"{path} is not a RIFF/WAVE file")

    fmt = None
    payload = None
    for cid, body in _iter_chunks(data, 12):
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            payload = body
    if fmt is None or payload is None:
        raise AudioFormatError(f"{path}: missing fmt or data chunk")
    if len(fmt) < 16:
        raise AudioFormatError(f"{path}: fmt chunk too short")

    tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == _FORMAT_EXTENSIBLE:
        if len(fmt) < 26:
            raise AudioFormatError(f"{path}: extensible fmt chunk too short")
        (tag,) = struct.unpack_from("<H", fmt, 24)
    if channels not in (1, 2):
        raise AudioFormatError(f"{path}: {channels} channels unsupported")
    if tag == _FORMAT_PCM and bits == 16:
        dtype = np.dtype("<i2")
        scale = 1.0 / 32768.0
    elif tag == _FORMAT_FLOAT and bits == 32:
        dtype = np.dtype("<f4")
        scale = 1.0
    else:
        raise AudioFormatError(f"{path}: encoding tag={tag} bits={bits} unsupported")
    if rate <= 0:
        raise AudioFormatError(f"{path}: invalid sample rate {rate}")

    frame_bytes = dtype.itemsize * channels
    n_frames = len(payload) // frame_bytes
    if n_frames == 0:
        raise AudioFormatError(f"{path}: zero-length audio")
    raw = np.frombuffer(payload[: n_frames * frame_bytes], dtype=dtype).astype(np.float64) * scale
    mono = raw.reshape(n_frames, channels).mean(axis=1)
    return WaveSample(mono, int(rate), label, source_id if source_id is not None else path.name)


def save_wav(path: str | Path, samples: np.ndarray, sample_rate: int, encoding: str = "pcm16") -> None:
    """Write mono audio as PCM16 (``round(x * 32768)``, clipped) or float32."""
    x = np.asarray(samples, dtype=np.float64)
    if encoding == "pcm16":
        pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        tag, bits = _FORMAT_PCM, 16
    elif encoding == "float32":
        pcm = x.astype("<f4")
        tag, bits = _FORMAT_FLOAT, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    payload = pcm.tobytes()
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, sample_rate, sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------------------
# Signal helpers
# ---------------------------------------------------------------------------


def normalize(w: WaveSample) -> WaveSample:
    """Scale so that max |x| = 1. Silence is returned unchanged."""
    x = np.asarray(w.samples, dtype=np.float64)
    peak = np.max(np.abs(x))
    if peak == 0:
        return w
    return w.with_samples(x / peak)


def interpolate_at(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Linear interpolation of ``x`` at fractional indices; clamps past the end."""
    x = np.asarray(x, dtype=np.float64)
    last = len(x) - 1
    pos = np.minimum(positions, last)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, last)
    frac = pos - lo
    return x[lo] + frac * (x[hi] - x[lo])


def resample_linear(w: WaveSample, target_rate: int) -> WaveSample:
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return w
    n_out = max(1, int(round(len(w) * target_rate / w.sample_rate)))
    step = w.sample_rate / target_rate
    out = interpolate_at(w.samples, np.arange(n_out) * step)
    return w.with_samples(out, sample_rate=target_rate)


def load_standardized(path: str | Path, label: int = 0, rate: int = CANONICAL_RATE) -> WaveSample:
    """Load, resample to the canonical rate and peak-normalize."""
    return normalize(resample_linear(load_wav(path, label), rate))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def _parse_int(value: str, column: str, row: int) -> int:
    try:
        return int(value.strip())
    except (ValueError, AttributeError):
        raise ManifestError(f"row {row}: column {column!r} is not an integer: {value!r}") from None


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse an ESC-50 style metadata CSV (filename, fold, target, category)."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"{path}: missing column(s) {', '.join(missing)}")
        entries = []
        for i, row in enumerate(reader, start=2):
            entries.append(
                ManifestEntry(
                    filename=row["filename"].strip(),
                    fold=_parse_int(row["fold"], "fold", i),
                    label=_parse_int(row["target"], "target", i),
                    category=(row["category"] or "").strip(),
                )
            )
    if not entries:
        raise ManifestError(f"{path}: no entries")
    num_classes = max(e.label for e in entries) + 1
    num_folds = max(e.fold for e in entries)
    return DatasetManifest(tuple(entries), num_classes, num_folds, root=path.parent)


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for e in entries:
            writer.writerow([e.filename, e.fold, e.label, e.category])


# ---------------------------------------------------------------------------
# In-memory datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Normalized waves with labels and fold assignments (folds are 1-based)."""

    samples: list[WaveSample]
    folds: np.ndarray
    num_classes: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.folds = np.asarray(self.folds, dtype=np.int64)
        if len(self.samples) != len(self.folds):
            raise ValueError("samples and folds differ in length")
        if not self.class_names:
            self.class_names = [str(c) for c in range(self.num_classes)]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def num_folds(self) -> int:
        return int(self.folds.max()) if len(self.folds) else 0

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset([self.samples[i] for i in indices], self.folds[indices], self.num_classes, self.class_names)

    def split(self, val_fold: int | None) -> tuple["Dataset", "Dataset | None"]:
        if val_fold is None:
            return self, None
        if val_fold not in set(self.folds.tolist()):
            raise ValueError(f"validation fold {val_fold} not present")
        return self.subset(np.flatnonzero(self.folds != val_fold)), self.subset(np.flatnonzero(self.folds == val_fold))


def load_dataset(manifest: DatasetManifest, audio_root: str | Path | None = None, rate: int = CANONICAL_RATE) -> Dataset:
    """Load every manifest entry through :func:`load_standardized`."""
    root = Path(audio_root) if audio_root is not None else (manifest.root or Path("."))
    samples = [load_standardized(root / e.filename, e.label, rate) for e in manifest.entries]
    return Dataset(samples, [e.fold for e in manifest.entries], manifest.num_classes, manifest.class_names())
