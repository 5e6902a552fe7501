"""Metrics, fold cross-validation, softmax ensembles, noise sweeps, margins.

Models are duck-typed: anything with ``predict_logits(waves)`` (and
``represent(waves)`` for margins) and ``num_classes`` works, which is how
the tests plug in oracle stubs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import Dataset, WaveSample
from .augmentation import substream
from .nn import log_softmax, softmax

DEFAULT_SIGMAS = (1e-4, 5e-4, 1e-3)


@dataclass
class Metrics:
    accuracy: float
    per_class_accuracy: np.ndarray
    mean_loss: float
    confusion: np.ndarray  # rows: true class, columns: predicted

    def as_row(self) -> dict:
        return {"accuracy": self.accuracy, "mean_loss": self.mean_loss}


@dataclass
class MarginStats:
    intra: float
    inter: float

    @property
    def margin(self) -> float:
        return self.intra - self.inter


def metrics_from_logits(logits: np.ndarray, labels, num_classes: int) -> Metrics:
    """Accuracy with lowest-index argmax tie-breaking, plus mean cross-entropy."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty slice")
    if logits.shape != (len(labels), num_classes):
        raise ValueError(f"logits shape {logits.shape} does not match {len(labels)} x {num_classes}")
    pred = np.argmax(logits, axis=1)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.diag(confusion) / support
    loss = -log_softmax(np.asarray(logits, dtype=np.float64))[np.arange(len(labels)), labels]
    return Metrics(
        accuracy=float(np.trace(confusion) / len(labels)),
        per_class_accuracy=per_class,
        mean_loss=float(loss.mean()),
        confusion=confusion,
    )


def evaluate(model, samples: list[WaveSample]) -> Metrics:
    """Deterministic, augmentation-free evaluation of ``model`` on ``samples``."""
    if not samples:
        raise ValueError("cannot evaluate an empty slice")
    labels = np.array([s.label for s in samples])
    logits = np.asarray(model.predict_logits(samples), dtype=np.float64)
    return metrics_from_logits(logits, labels, model.num_classes)


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


@dataclass
class CVResult:
    folds: list[int]
    metrics: list[Metrics]
    results: list  # trainer.TrainResult per fold

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([m.accuracy for m in self.metrics])

    @property
    def mean(self) -> float:
        return float(self.accuracies.mean())

    @property
    def std(self) -> float:
        """Sample standard deviation (ddof=1); 0 for a single fold."""
        acc = self.accuracies
        return float(acc.std(ddof=1)) if len(acc) > 1 else 0.0

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fold", "accuracy", "mean_loss"])
            for fold, m in zip(self.folds, self.metrics):
                writer.writerow([fold, repr(m.accuracy), repr(m.mean_loss)])
            writer.writerow(["mean", repr(self.mean), ""])
            writer.writerow(["std", repr(self.std), ""])


def cross_validate(data: Dataset, cfg, folds=None, on_fold=None) -> CVResult:
    """Train on all-but-one fold and validate on the held-out one, for every fold.

    Each fold's reported metrics come from its best checkpoint.
    """
    from .trainer import train

    folds = sorted(set(data.folds.tolist())) if folds is None else list(folds)
    contrastive = cfg.scheme != "ce" and not (cfg.scheme == "hybrid" and cfg.loss.alpha == 0)
    metrics, results = [], []
    for k in folds:
        train_part, val_part = data.split(k)
        if contrastive:
            present = set(train_part.labels.tolist())
            missing = [c for c in range(data.num_classes) if c not in present]
            if missing:
                raise ValueError(f"fold {k}: training split lacks class(es) {missing}")
        res = train(data, cfg, val_fold=k)
        m = evaluate(res.best.model(), val_part.samples)
        metrics.append(m)
        results.append(res)
        if on_fold is not None:
            on_fold(k, m, res)
    return CVResult(folds, metrics, results)


# ---------------------------------------------------------------------------
# Ensembles, noise, margins
# ---------------------------------------------------------------------------


def ensemble_predict(models: list, samples: list[WaveSample]) -> tuple[np.ndarray, np.ndarray]:
    """Unweighted mean of member softmax outputs; returns (probabilities, argmax)."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    sizes = {m.num_classes for m in models}
    if len(sizes) != 1:
        raise ValueError(f"ensemble members disagree on class count: {sorted(sizes)}")
    probs = np.mean([softmax(np.asarray(m.predict_logits(samples), dtype=np.float64)) for m in models], axis=0)
    return probs, np.argmax(probs, axis=1)


class Ensemble:
    """Adapter so an ensemble can be passed wherever a single model is expected."""

    def __init__(self, models: list):
        if not models:
            raise ValueError("ensemble needs at least one model")
        self.models = list(models)
        self.num_classes = self.models[0].num_classes

    def predict_logits(self, samples):
        probs, _ = ensemble_predict(self.models, samples)
        # log of averaged probabilities; softmax of it gives the averaged probabilities back
        with np.errstate(divide="ignore"):
            return np.log(probs)


def add_noise(w: WaveSample, sigma: float, rng: np.random.Generator) -> WaveSample:
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return w
    return w.with_samples(np.asarray(w.samples) + rng.normal(0.0, sigma, size=len(w)))


def noise_sweep(model, samples: list[WaveSample], sigmas=DEFAULT_SIGMAS, seed: int = 0) -> list[tuple[float, float]]:
    """Accuracy after adding white Gaussian noise to each (normalized) test wave.

    The noise for sample j at sweep position i comes from stream (seed, i, j).
    """
    out = []
    for i, sigma in enumerate(sigmas):
        noisy = [add_noise(w, sigma, substream(seed, i, j)) for j, w in enumerate(samples)]
        out.append((float(sigma), evaluate(model, noisy).accuracy))
    return out


def write_noise_sweep(rows, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sigma", "accuracy"])
        for sigma, acc in rows:
            writer.writerow([repr(sigma), repr(acc)])


def margin_from_vectors(h: np.ndarray, labels) -> MarginStats:
    """Mean cosine similarity over same-label pairs and over different-label pairs."""
    labels = np.asarray(labels)
    if len(set(labels.tolist())) < 2:
        raise ValueError("margin statistics need at least two classes")
    u = h / np.linalg.norm(h, axis=1, keepdims=True)
    sim = np.clip(u @ u.T, -1.0, 1.0)
    iu = np.triu_indices(len(labels), k=1)
    same = (labels[:, None] == labels[None, :])[iu]
    pairs = sim[iu]
    if not same.any():
        raise ValueError("no same-label pairs: every class has a single sample")
    return MarginStats(float(pairs[same].mean()), float(pairs[~same].mean()))


def margin_stats(model, samples: list[WaveSample]) -> MarginStats:
    h = np.asarray(model.represent(samples), dtype=np.float64)
    return margin_from_vectors(h, [s.label for s in samples])


def write_margins(stats: MarginStats, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["intra", "inter", "margin"])
        writer.writerow([repr(stats.intra), repr(stats.inter), repr(stats.margin)])


def write_metrics(metrics: Metrics, path: str | Path, class_names=None) -> None:
    names = class_names or [str(c) for c in range(len(metrics.per_class_accuracy))]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "accuracy", "support"])
        support = metrics.confusion.sum(axis=1)
        for name, acc, n in zip(names, metrics.per_class_accuracy, support):
            writer.writerow([name, repr(float(acc)), int(n)])
        writer.writerow(["overall", repr(metrics.accuracy), int(support.sum())])
        writer.writerow(["mean_loss", repr(metrics.mean_loss), ""])
