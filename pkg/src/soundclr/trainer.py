"""Training schemes (ce, two_stage_contrastive, hybrid), Adam, schedule, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .audio_io import Dataset
from .augmentation import AugmentConfig, augment, substream
from .dsp import StftConfig
from .evaluation import Metrics, metrics_from_logits
from .losses import LossConfig, cross_entropy, hybrid, sup_contrastive
from .model import SoundCLRModel

log = logging.getLogger(__name__)

SCHEMES = ("ce", "two_stage_contrastive", "hybrid")
SAMPLERS = ("stratified", "shuffle")

CKPT_MAGIC = b"SCKP0001"
CKPT_VERSION = 1


class NumericError(ArithmeticError):
    """Non-finite loss or gradient during training."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    scheme: str = "hybrid"
    epochs: int = 100
    stage1_epochs: int | None = None  # two-stage only; default 70% of epochs
    stage2_lr_scale: float = 1.0  # two-stage only; multiplies lr_at() in the classifier stage
    batch_size: int = 128
    base_lr: float = 5e-4
    decay_factor: float = 0.98
    warmup_epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sampler: str = "stratified"
    dtype: str = "float32"
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    model: nn.ModelConfig = field(default_factory=nn.ModelConfig)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.warmup_epochs < 0 or self.base_lr <= 0 or self.stage2_lr_scale <= 0:
            raise ValueError("warmup_epochs must be >= 0 and base_lr > 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.scheme == "two_stage_contrastive":
            s1 = self.stage1_split
            if not 1 <= s1 < self.epochs:
                raise ValueError(f"two-stage training needs 1 <= stage1_epochs < epochs, got {s1}/{self.epochs}")

    @property
    def stage1_split(self) -> int:
        if self.stage1_epochs is not None:
            return self.stage1_epochs
        return max(1, int(round(0.7 * self.epochs)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["conv_channels"] = list(self.model.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"loss": LossConfig, "augment": AugmentConfig, "stft": StftConfig, "model": nn.ModelConfig}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = _build(typ, d[key])
        return _build(cls, d)


def _build(typ, d: dict):
    known = {f.name for f in fields(typ)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {typ.__name__} field(s): {', '.join(sorted(unknown))}")
    return typ(**d)


# ---------------------------------------------------------------------------
# Schedule and optimizer
# ---------------------------------------------------------------------------


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then exponential decay per epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    return cfg.base_lr * cfg.decay_factor ** (epoch - cfg.warmup_epochs)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: nn.ParamSet) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state: OptimizerState, lr: float, names=None, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    names = list(params) if names is None else list(names)
    for k in names:
        if not np.all(np.isfinite(grads[k])):
            raise NumericError(f"non-finite gradient for parameter {k!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k in names:
        g = grads[k]
        p = params[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def stratified_batches(labels, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Class-stratified batches: every class in a batch has at least two members.

    Each batch picks C' = min(#classes with >= 2 samples, batch_size // 2)
    classes at random and splits batch_size evenly among them. Samples are
    drawn without replacement from per-class shuffled queues that refill
    when too short for the next request.
    """
    labels = np.asarray(labels)
    n = len(labels)
    classes, counts = np.unique(labels, return_counts=True)
    eligible = classes[counts >= 2]
    if eligible.size == 0:
        raise ValueError("stratified sampling needs a class with at least two samples")
    members = {c: np.flatnonzero(labels == c) for c in eligible}
    queues = {c: list(rng.permutation(members[c])) for c in eligible}
    k = min(eligible.size, max(1, batch_size // 2))
    base, extra = divmod(batch_size, k)
    batches = []
    for _ in range(math.ceil(n / batch_size)):
        chosen = rng.choice(eligible, size=k, replace=False)
        batch = []
        for j, c in enumerate(chosen):
            want = min(base + (j < extra), members[c].size)
            if len(queues[c]) < want:
                queues[c] = list(rng.permutation(members[c]))
            batch.extend(queues[c][:want])
            del queues[c][:want]
        batches.append(np.array(batch, dtype=np.int64))
    return batches


def make_batches(labels, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    rng = substream(cfg.seed, epoch, 0)
    if cfg.sampler == "stratified":
        return stratified_batches(labels, cfg.batch_size, rng)
    return shuffled_batches(len(labels), cfg.batch_size, rng)


def worker_threads() -> int:
    n = int(os.environ.get("SOUNDCLR_THREADS", "1") or 1)
    if n == 0:
        return os.cpu_count() or 1
    return max(1, n)


def featurize_batch(data: Dataset, idx: np.ndarray, cfg: TrainConfig, epoch: int, batch: int) -> np.ndarray:
    """Augmented features; sample at position j uses stream (seed, epoch, batch, j)."""

    def one(j):
        rng = substream(cfg.seed, epoch, batch + 1, j)
        return augment(data.samples[idx[j]], cfg.augment, cfg.stft, rng)

    threads = worker_threads()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            feats = list(pool.map(one, range(len(idx))))
    else:
        feats = [one(j) for j in range(len(idx))]
    return np.stack(feats).astype(cfg.dtype)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    params: nn.ParamSet
    opt_state: OptimizerState
    epoch: int
    best: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def metrics(self) -> dict:
        return self.history[-1] if self.history else {}

    @property
    def rng_state(self) -> dict:
        nxt = substream(self.config.seed, self.epoch + 1, 0)
        return {
            "algorithm": "PCG64",
            "seed": self.config.seed,
            "next_epoch": self.epoch + 1,
            "next_batch_stream": nxt.bit_generator.state["state"],
        }

    def model(self) -> SoundCLRModel:
        c = self.config
        return SoundCLRModel(self.params, c.model, c.stft, c.augment)

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            OptimizerState(
                {k: v.copy() for k, v in self.opt_state.m.items()},
                {k: v.copy() for k, v in self.opt_state.v.items()},
                self.opt_state.step,
            ),
            self.epoch,
            dict(self.best),
            [dict(r) for r in self.history],
        )


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write the SCKP0001 container: magic, u64 header length, JSON header, payload."""
    tensors = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"adam_m/{k}", v) for k, v in ckpt.opt_state.m.items()]
    tensors += [(f"adam_v/{k}", v) for k, v in ckpt.opt_state.v.items()]
    records, chunks, offset = [], [], 0
    for name, arr in tensors:
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        records.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": "SCKP1",
        "version": CKPT_VERSION,
        "epoch": ckpt.epoch,
        "adam_step": ckpt.opt_state.step,
        "config": ckpt.config.to_dict(),
        "rng": ckpt.rng_state,
        "best": _jsonable(ckpt.best),
        "history": _jsonable(ckpt.history),
        "tensors": records,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks))


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if data[:4] != CKPT_MAGIC[:4]:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: unsupported checkpoint version {data[4:8]!r}")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    if 16 + hlen > len(data):
        raise CheckpointError(f"{path}: corrupted header length")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = memoryview(data)[16 + hlen :]
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for rec in header["tensors"]:
        dtype = np.dtype(rec["dtype"])
        end = rec["offset"] + rec["length"]
        if end > len(payload) or rec["length"] != dtype.itemsize * math.prod(rec["shape"]):
            raise CheckpointError(f"{path}: corrupted length for tensor {rec['name']}")
        arr = np.frombuffer(payload[rec["offset"] : end], dtype=dtype).reshape(rec["shape"])
        group, name = rec["name"].split("/", 1)
        groups[group][name] = arr.astype(dtype.newbyteorder("="))
    expected = sum(r["length"] for r in header["tensors"])
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header lists {expected}")
    return Checkpoint(
        TrainConfig.from_dict(header["config"]),
        groups["param"],
        OptimizerState(groups["adam_m"], groups["adam_v"], header["adam_step"]),
        header["epoch"],
        header.get("best") or {},
        [_restore_row(r) for r in header.get("history") or []],
    )


def _restore_row(row: dict) -> dict:
    return {k: float("nan") if v is None else v for k, v in row.items()}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    history: list[dict]

    def write_metrics(self, path: str | Path) -> None:
        write_history(self.history, path)


def write_history(history: list[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in history:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRIC_COLUMNS])


def stage_of(epoch: int, cfg: TrainConfig) -> str:
    if cfg.scheme != "two_stage_contrastive":
        return cfg.scheme
    return "contrastive" if epoch < cfg.stage1_split else "classifier"


def trainable_names(cfg: TrainConfig, stage: str) -> list[str]:
    names = list(cfg.model.param_shapes())
    if stage == "ce":
        return [k for k in names if not k.startswith("proj.")]
    if stage == "contrastive":
        return [k for k in names if not k.startswith("cls.")]
    if stage == "classifier":
        return [k for k in names if k.startswith("cls.")]
    return names


def train_step(params, cfg: TrainConfig, X: np.ndarray, y: np.ndarray, stage: str):
    """Loss value, logits and parameter gradients for one batch."""
    out = nn.forward(params, cfg.model, X)
    logits = out.logits.astype(np.float64)
    grad_logits = grad_z = None
    if stage in ("ce", "classifier"):
        res = cross_entropy(logits, y)
        value, grad_logits = res.value, res.grad
    elif stage == "contrastive":
        res = sup_contrastive(out.z.astype(np.float64), y, cfg.loss)
        value, grad_z = res.value, res.grad
    else:
        res = hybrid(logits, out.z.astype(np.float64), y, cfg.loss)
        value, grad_logits, grad_z = res.value, res.grad_logits, res.grad_z
    if not math.isfinite(value):
        raise NumericError(f"non-finite {stage} loss")
    dt = X.dtype
    grads = nn.backward(
        params,
        cfg.model,
        out,
        grad_logits=None if grad_logits is None else grad_logits.astype(dt),
        grad_z=None if grad_z is None else grad_z.astype(dt),
        train_encoder=stage != "classifier",
    )
    return value, logits, grads


def _better(val: Metrics, best: dict) -> bool:
    if not best:
        return True
    if val.accuracy != best["val_acc"]:
        return val.accuracy > best["val_acc"]
    return val.mean_loss < best["val_loss"]


def train(
    data: Dataset,
    cfg: TrainConfig,
    val_fold: int | None = None,
    resume: Checkpoint | None = None,
    epoch_hook: Callable[[Checkpoint], None] | None = None,
) -> TrainResult:
    """Train one model; the validation fold (if any) selects the best checkpoint.

    Augmentations are redrawn every epoch from streams keyed by
    (seed, epoch, batch, position), so a run is a pure function of
    (data, cfg); ``resume`` continues from the epoch after the checkpoint.
    """
    cfg = replace(cfg, model=replace(cfg.model, num_classes=data.num_classes))
    train_set, val_set = data.split(val_fold)
    if len(train_set) == 0:
        raise ValueError("empty training set")
    y_all = train_set.labels

    if resume is None:
        params = nn.init_params(cfg.model, substream(cfg.seed, 2**32 - 1), dtype=np.dtype(cfg.dtype))
        state = OptimizerState.zeros_like(params)
        start, best_info, best_ckpt, history = 0, {}, None, []
    else:
        ck = resume.copy()
        params, state, start, best_info = ck.params, ck.opt_state, ck.epoch + 1, dict(ck.best)
        best_ckpt, history = None, ck.history

    model = SoundCLRModel(params, cfg.model, cfg.stft, cfg.augment)
    X_val = model.features(val_set.samples) if val_set is not None and len(val_set) else None

    last = None
    for epoch in range(start, cfg.epochs):
        stage = stage_of(epoch, cfg)
        if epoch > 0 and stage == "classifier" and stage_of(epoch - 1, cfg) == "contrastive":
            state = OptimizerState.zeros_like(params)
        names = trainable_names(cfg, stage)
        lr = lr_at(epoch, cfg) * (cfg.stage2_lr_scale if stage == "classifier" else 1.0)
        total_loss = 0.0
        correct = 0
        seen = 0
        for b, idx in enumerate(make_batches(y_all, cfg, epoch)):
            X = featurize_batch(train_set, idx, cfg, epoch, b)
            y = y_all[idx]
            value, logits, grads = train_step(params, cfg, X, y, stage)
            adam_step(params, grads, state, lr, names, cfg.beta1, cfg.beta2, cfg.adam_eps)
            total_loss += value * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
            seen += len(idx)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": total_loss / seen,
            "train_acc": correct / seen,
            "val_loss": float("nan"),
            "val_acc": float("nan"),
        }
        val_metrics = None
        if X_val is not None:
            logits, _ = model.forward_features(X_val)
            val_metrics = metrics_from_logits(logits.astype(np.float64), val_set.labels, cfg.model.num_classes)
            row["val_loss"], row["val_acc"] = val_metrics.mean_loss, val_metrics.accuracy
        history.append(row)
        log.info("epoch %d %s lr=%.3g loss=%.4f acc=%.3f val_acc=%s", epoch, stage, lr, row["train_loss"], row["train_acc"], row["val_acc"])

        improved = val_metrics is None or _better(val_metrics, best_info)
        if improved:
            best_info = {"epoch": epoch, "val_acc": row["val_acc"], "val_loss": row["val_loss"]}
        last = Checkpoint(cfg, params, state, epoch, dict(best_info), history).copy()
        if improved:
            best_ckpt = last
        if epoch_hook is not None:
            epoch_hook(last)

    if last is None:
        raise ValueError(f"nothing to train: start epoch {start} >= epochs {cfg.epochs}")
    if best_ckpt is None:
        # resumed run that never improved on the stored best
        best_ckpt = last
    return TrainResult(best_ckpt, last, history)
