"""``soundclr`` command line: train, eval, featurize, gradcheck, synth.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
failure (non-finite loss or a failed gradient check).

A run config is one JSON file with nested sections::

    {"train": {...TrainConfig scalars...}, "loss": {...}, "augment": {...},
     "stft": {...}, "model": {...},
     "data": {"manifest": "meta.csv"} or {"synthetic": {...SynthSpec...}},
     "out": "runs/hybrid", "resume": null}

Flags override the file; the merged result is written to
``config.resolved.json`` in the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import gradcheck, synth
from .audio_io import AudioFormatError, Dataset, ManifestError, load_dataset, load_manifest, load_standardized
from .dsp import StftConfig, log_mel, write_feature_cache
from .evaluation import (
    DEFAULT_SIGMAS,
    Ensemble,
    cross_validate,
    evaluate,
    margin_stats,
    noise_sweep,
    write_margins,
    write_metrics,
    write_noise_sweep,
)
from .trainer import CheckpointError, NumericError, TrainConfig, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

NESTED = ("loss", "augment", "stft", "model")

log = logging.getLogger("soundclr")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class DataConfig:
    manifest: str | None = None
    audio_root: str | None = None
    synthetic: dict | None = None  # SynthSpec fields; {} selects the default corpus
    sample_rate: int = 44100
    val_fold: int | None = None
    cross_validate: bool = False

    def validate(self) -> None:
        if (self.manifest is None) == (self.synthetic is None):
            raise ConfigError("data: set exactly one of 'manifest' or 'synthetic'")
        if self.cross_validate and self.val_fold is not None:
            raise ConfigError("data: 'cross_validate' and 'val_fold' are mutually exclusive")
        if self.sample_rate <= 0:
            raise ConfigError(f"data: sample_rate must be positive, got {self.sample_rate}")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=lambda: DataConfig(synthetic={}))
    out: str = "runs/latest"
    resume: str | None = None

    def to_dict(self) -> dict:
        t = self.train.to_dict()
        d = {"train": {k: v for k, v in t.items() if k not in NESTED}}
        d.update({k: t[k] for k in NESTED})
        d["data"] = asdict(self.data)
        d["out"] = self.out
        d["resume"] = self.resume
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"train", "data", "out", "resume", *NESTED}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        train_d = dict(d.get("train") or {})
        for key in NESTED:
            if key in train_d:
                raise ConfigError(f"section '{key}' belongs at the top level, not under 'train'")
            if d.get(key) is not None:
                train_d[key] = d[key]
        data_d = d.get("data") or {}
        names = {f.name for f in fields(DataConfig)}
        if set(data_d) - names:
            raise ConfigError(f"unknown data field(s): {', '.join(sorted(set(data_d) - names))}")
        data = DataConfig(**data_d) if data_d else DataConfig(synthetic={})
        data.validate()
        try:
            tc = TrainConfig.from_dict(train_d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(tc, data, d.get("out") or "runs/latest", d.get("resume"))


# flag dest -> (section, key); section None means top level
TRAIN_FLAGS = {
    "scheme": ("train", "scheme"),
    "epochs": ("train", "epochs"),
    "stage1_epochs": ("train", "stage1_epochs"),
    "stage2_lr_scale": ("train", "stage2_lr_scale"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "base_lr"),
    "decay": ("train", "decay_factor"),
    "warmup": ("train", "warmup_epochs"),
    "sampler": ("train", "sampler"),
    "dtype": ("train", "dtype"),
    "seed": ("train", "seed"),
    "alpha": ("loss", "alpha"),
    "tau": ("loss", "tau"),
    "self_in_numerator": ("loss", "self_in_numerator"),
    "target_len": ("augment", "target_len"),
    "n_mels": ("stft", "n_mels"),
    "manifest": ("data", "manifest"),
    "audio_root": ("data", "audio_root"),
    "sample_rate": ("data", "sample_rate"),
    "val_fold": ("data", "val_fold"),
    "cv": ("data", "cross_validate"),
    "out": (None, "out"),
    "resume": (None, "resume"),
}


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return d


def resolve(args: argparse.Namespace, flags: dict = TRAIN_FLAGS) -> RunConfig:
    """Merge the config file with explicitly given flags (flags win)."""
    d = read_config(getattr(args, "config", None))
    d = {k: (dict(v) if isinstance(v, dict) else v) for k, v in d.items()}
    for dest, (section, key) in flags.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section is None:
            d[key] = value
            continue
        d.setdefault(section, {})
        if d[section] is None:
            d[section] = {}
        d[section][key] = value
    data = d.get("data") or {}
    if getattr(args, "manifest", None) is not None:
        data.pop("synthetic", None)
    if getattr(args, "synthetic", False):
        data.pop("manifest", None)
        data.setdefault("synthetic", {})
    if data:
        d["data"] = data
    return RunConfig.from_dict(d)


def write_resolved(cfg: RunConfig, out: Path) -> None:
    text = json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
    (out / "config.resolved.json").write_text(text + "\n", encoding="utf-8")


def load_data(data: DataConfig) -> Dataset:
    if data.synthetic is not None:
        try:
            spec = synth.SynthSpec(**data.synthetic)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"data.synthetic: {exc}") from exc
        return synth.generate(spec)[0]
    try:
        manifest = load_manifest(data.manifest)
        return load_dataset(manifest, data.audio_root, data.sample_rate)
    except (ManifestError, AudioFormatError) as exc:
        raise DataError(str(exc)) from exc


def _check_threads() -> None:
    raw = os.environ.get("SOUNDCLR_THREADS")
    if raw is None or raw == "":
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SOUNDCLR_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError(f"SOUNDCLR_THREADS must be >= 0, got {n}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    _check_threads()
    cfg = resolve(args)
    data = load_data(cfg.data)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)

    if cfg.data.cross_validate:

        def on_fold(k, metrics, res):
            fold_dir = out / f"fold{k}"
            fold_dir.mkdir(exist_ok=True)
            save_checkpoint(res.best, fold_dir / "best.sckp")
            res.write_metrics(fold_dir / "metrics.csv")
            print(f"fold {k}: accuracy {metrics.accuracy:.4f} (best epoch {res.best.epoch})")

        try:
            cv = cross_validate(data, cfg.train, on_fold=on_fold)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        cv.write_csv(out / "metrics.csv")
        print(f"{cfg.train.scheme}: mean accuracy {cv.mean:.4f} +/- {cv.std:.4f} over folds {cv.folds}")
        return EXIT_OK

    resume = None
    if cfg.resume is not None:
        try:
            resume = load_checkpoint(cfg.resume)
        except (OSError, CheckpointError) as exc:
            raise DataError(f"cannot resume from {cfg.resume}: {exc}") from exc

    def save_last(ck):
        save_checkpoint(ck, out / "last.sckp")

    try:
        res = train(data, cfg.train, val_fold=cfg.data.val_fold, resume=resume, epoch_hook=save_last)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    save_checkpoint(res.best, out / "best.sckp")
    res.write_metrics(out / "metrics.csv")
    best = res.best.best
    print(f"best epoch {best.get('epoch')}: val_acc {best.get('val_acc')} val_loss {best.get('val_loss')}")
    return EXIT_OK


def _load_models(args):
    if (args.checkpoint is None) == (args.ensemble is None):
        raise ConfigError("eval: give exactly one of --checkpoint or --ensemble")
    if args.checkpoint is not None:
        paths = [Path(args.checkpoint)]
    else:
        root = Path(args.ensemble)
        if not root.is_dir():
            raise DataError(f"ensemble directory {root} does not exist")
        paths = sorted(p for p in root.rglob("*.sckp") if p.name != "last.sckp")
        if not paths:
            raise DataError(f"no checkpoints in {root}")
    try:
        return [load_checkpoint(p).model() for p in paths], paths
    except (OSError, CheckpointError) as exc:
        raise DataError(str(exc)) from exc


EVAL_FLAGS = {k: TRAIN_FLAGS[k] for k in ("manifest", "audio_root", "sample_rate")}


def cmd_eval(args) -> int:
    models, paths = _load_models(args)
    cfg = resolve(args, EVAL_FLAGS)
    data = load_data(cfg.data)
    if args.fold is not None:
        try:
            _, data = data.split(args.fold)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    for m, p in zip(models, paths):
        if m.num_classes != data.num_classes:
            raise DataError(f"{p} predicts {m.num_classes} classes but the dataset has {data.num_classes}")
    model = models[0] if len(models) == 1 else Ensemble(models)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    metrics = evaluate(model, data.samples)
    write_metrics(metrics, out / "metrics.csv", data.class_names)
    width = max(len(n) for n in data.class_names)
    print(f"{'class':<{width}}  accuracy")
    for name, acc in zip(data.class_names, metrics.per_class_accuracy):
        print(f"{name:<{width}}  {acc:.4f}")
    print(f"{'overall':<{width}}  {metrics.accuracy:.4f}  (n={len(data)}, models={len(models)})")

    if args.noise_sweep is not None:
        sigmas = args.noise_sweep or list(DEFAULT_SIGMAS)
        rows = noise_sweep(model, data.samples, sigmas, seed=args.seed)
        write_noise_sweep(rows, out / "noise_sweep.csv")
        for sigma, acc in rows:
            print(f"sigma {sigma:g}: accuracy {acc:.4f}")
    if args.margins:
        if len(models) != 1:
            raise ConfigError("--margins needs a single checkpoint")
        stats = margin_stats(model, data.samples)
        write_margins(stats, out / "margins.csv")
        print(f"margin {stats.margin:.4f} (intra {stats.intra:.4f}, inter {stats.inter:.4f})")
    return EXIT_OK


def cmd_featurize(args) -> int:
    cfg = read_config(args.config)
    try:
        stft = StftConfig(**(cfg.get("stft") or {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"stft: {exc}") from exc
    try:
        manifest = load_manifest(args.manifest)
    except ManifestError as exc:
        raise DataError(str(exc)) from exc
    root = Path(args.audio_root) if args.audio_root else manifest.root
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for e in manifest.entries:
        try:
            w = load_standardized(root / e.filename, e.label, args.sample_rate)
            values = log_mel(w, stft).values
        except (AudioFormatError, ValueError) as exc:
            raise DataError(f"{e.filename}: {exc}") from exc
        write_feature_cache(out / (Path(e.filename).stem + ".feat"), values)
    print(f"wrote {len(manifest.entries)} feature files to {out}")
    return EXIT_OK


def cmd_gradcheck(args, checks=None) -> int:
    report = gradcheck.run_suite(checks, instances=args.instances, seed=args.seed)
    print(report.table())
    if not report.passed:
        failed = [r.name for r in report.reports if not r.passed]
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(args) -> int:
    spec_d = dict((read_config(args.config).get("data") or {}).get("synthetic") or {})
    for key in ("samples_per_class", "seed", "sample_rate", "folds"):
        if getattr(args, key) is not None:
            spec_d[key] = getattr(args, key)
    try:
        spec = synth.SynthSpec(**spec_d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    path = synth.dump(spec, args.out, args.encoding)
    print(f"wrote {len(spec.classes) * spec.samples_per_class} clips and {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _sigma(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"noise sigma must be >= 0, got {v}")
    return v


class _Parser(argparse.ArgumentParser):
    """Usage errors are config errors (exit 1); argparse's own code 2 is reserved for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="soundclr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model or cross-validate over folds")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--out", help="output directory")
    t.add_argument("--scheme", choices=("ce", "two_stage_contrastive", "hybrid"))
    t.add_argument("--alpha", type=float, help="contrastive weight in the hybrid loss")
    t.add_argument("--tau", type=float, help="contrastive temperature")
    t.add_argument("--self-in-numerator", action="store_const", const=True, default=None)
    t.add_argument("--epochs", type=int)
    t.add_argument("--stage1-epochs", type=int)
    t.add_argument("--stage2-lr-scale", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float, help="base learning rate")
    t.add_argument("--decay", type=float, help="per-epoch learning-rate decay factor")
    t.add_argument("--warmup", type=int, help="warmup epochs")
    t.add_argument("--sampler", choices=("stratified", "shuffle"))
    t.add_argument("--dtype", choices=("float32", "float64"))
    t.add_argument("--seed", type=int)
    t.add_argument("--target-len", type=int, help="clip length in samples after pad/crop")
    t.add_argument("--n-mels", type=int)
    _add_data_flags(t)
    t.add_argument("--val-fold", type=int)
    t.add_argument("--cv", action="store_const", const=True, default=None, help="cross-validate over all folds")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or an ensemble")
    e.add_argument("--checkpoint")
    e.add_argument("--ensemble", help="directory; every *.sckp except last.sckp is a member")
    e.add_argument("--config", help="JSON run config supplying the data section")
    _add_data_flags(e)
    e.add_argument("--fold", type=int, help="evaluate on this fold only")
    e.add_argument("--noise-sweep", nargs="*", type=_sigma, metavar="SIGMA")
    e.add_argument("--margins", action="store_true")
    e.add_argument("--seed", type=int, default=0, help="noise seed")
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("featurize", help="write log-mel feature caches for a manifest")
    f.add_argument("--manifest", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--audio-root")
    f.add_argument("--sample-rate", type=int, default=44100)
    f.add_argument("--config", help="JSON run config supplying the stft section")
    f.set_defaults(func=cmd_featurize)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write the synthetic corpus as WAV files plus manifest.csv")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON run config supplying data.synthetic")
    s.add_argument("--samples-per-class", type=int)
    s.add_argument("--sample-rate", type=int)
    s.add_argument("--folds", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--encoding", choices=("pcm16", "float32"), default="pcm16")
    s.set_defaults(func=cmd_synth)
    return p


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--manifest", help="dataset manifest CSV")
    src.add_argument("--synthetic", action="store_true", help="use the built-in synthetic corpus")
    p.add_argument("--audio-root", help="directory holding the manifest's audio files")
    p.add_argument("--sample-rate", type=int, help="rate audio is resampled to on load")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
