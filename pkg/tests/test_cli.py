import csv
import json

import numpy as np
import pytest

from soundclr import cli, gradcheck, nn
from soundclr.dsp import StftConfig, read_feature_cache
from soundclr.trainer import NumericError, load_checkpoint

SMALL_DATA = {"synthetic": {"samples_per_class": 8, "clip_seconds": 1.0, "folds": 2}, "val_fold": 2}


def write_config(path, **sections):
    cfg = {
        "train": {"scheme": "ce", "epochs": 3, "batch_size": 8, "seed": 5, "warmup_epochs": 1},
        "augment": {"target_len": 22050},
        "data": SMALL_DATA,
    }
    cfg.update(sections)
    path.write_text(json.dumps(cfg))
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = write_config(root / "run.json")
    out = root / "run"
    code = cli.main(["train", "--config", str(config), "--scheme", "hybrid", "--alpha", "0.5", "--out", str(out)])
    assert code == 0
    return config, out


# --- train ----------------------------------------------------------------


def test_train_happy_path(trained):
    _, out = trained
    for name in ("best.sckp", "last.sckp", "metrics.csv", "config.resolved.json"):
        assert (out / name).is_file()
    rows = read_rows(out / "metrics.csv")
    assert rows[0] == ["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"] and len(rows) == 4
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["train"]["scheme"] == "hybrid" and resolved["loss"]["alpha"] == 0.5
    assert resolved["train"]["epochs"] == 3
    assert load_checkpoint(out / "last.sckp").epoch == 2


def test_resolved_snapshot_reproduces_run(trained, tmp_path):
    _, out = trained
    snapshot = json.loads((out / "config.resolved.json").read_text())
    snapshot["out"] = str(tmp_path / "again")
    (tmp_path / "snap.json").write_text(json.dumps(snapshot))
    assert cli.main(["train", "--config", str(tmp_path / "snap.json")]) == 0
    assert (tmp_path / "again" / "best.sckp").read_bytes() == (out / "best.sckp").read_bytes()


def test_flags_override_config(tmp_path):
    config = write_config(tmp_path / "c.json")
    args = cli.build_parser().parse_args(["train", "--config", str(config), "--epochs", "7", "--tau", "0.2", "--n-mels", "64"])
    cfg = cli.resolve(args)
    assert cfg.train.epochs == 7 and cfg.train.loss.tau == 0.2 and cfg.train.stft.n_mels == 64
    assert cfg.train.batch_size == 8


def test_every_train_flag_has_a_config_key():
    parser = cli.build_parser()
    train_parser = parser._subparsers._group_actions[0].choices["train"]
    dests = {a.dest for a in train_parser._actions} - {"help", "config", "synthetic"}
    assert dests <= set(cli.TRAIN_FLAGS)


def test_bad_alpha_exits_1(tmp_path, capsys):
    config = write_config(tmp_path / "c.json")
    assert cli.main(["train", "--config", str(config), "--alpha", "1.5", "--out", str(tmp_path / "o")]) == 1
    assert "alpha must lie in [0, 1]" in capsys.readouterr().err


def test_unknown_section_and_usage_errors_exit_1(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"trian": {}}))
    assert cli.main(["train", "--config", str(tmp_path / "bad.json")]) == 1
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--scheme", "triplet"])
    assert exc.value.code == 1


def test_missing_manifest_exits_2(tmp_path, capsys):
    code = cli.main(["train", "--manifest", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "data error" in capsys.readouterr().err


def test_numeric_failure_exits_3(tmp_path, monkeypatch):
    def explode(*a, **k):
        raise NumericError("non-finite hybrid loss")

    monkeypatch.setattr(cli, "train", explode)
    config = write_config(tmp_path / "c.json")
    assert cli.main(["train", "--config", str(config), "--out", str(tmp_path / "o")]) == 3


def test_thread_variable_is_validated(tmp_path, monkeypatch):
    monkeypatch.setenv("SOUNDCLR_THREADS", "many")
    assert cli.main(["train", "--config", str(write_config(tmp_path / "c.json"))]) == 1


def test_cross_validation_mode(tmp_path):
    data = dict(SMALL_DATA, val_fold=None, cross_validate=True)
    config = write_config(tmp_path / "c.json", data=data)
    assert cli.main(["train", "--config", str(config), "--epochs", "1", "--out", str(tmp_path / "cv")]) == 0
    rows = read_rows(tmp_path / "cv" / "metrics.csv")
    assert [r[0] for r in rows] == ["fold", "1", "2", "mean", "std"]
    assert (tmp_path / "cv" / "fold1" / "best.sckp").is_file() and (tmp_path / "cv" / "fold2" / "metrics.csv").is_file()


# --- eval -----------------------------------------------------------------


def test_eval_matches_best_epoch(trained, tmp_path):
    config, out = trained
    code = cli.main(["eval", "--checkpoint", str(out / "best.sckp"), "--config", str(config), "--fold", "2", "--out", str(tmp_path)])
    assert code == 0
    overall = next(r for r in read_rows(tmp_path / "metrics.csv") if r[0] == "overall")
    assert float(overall[1]) == load_checkpoint(out / "best.sckp").best["val_acc"]


def test_ensemble_of_one_equals_single(trained, tmp_path):
    config, out = trained
    single, ens = tmp_path / "single", tmp_path / "ens"
    base = ["--config", str(config), "--fold", "2"]
    assert cli.main(["eval", "--checkpoint", str(out / "best.sckp"), *base, "--out", str(single)]) == 0
    assert cli.main(["eval", "--ensemble", str(out), *base, "--out", str(ens)]) == 0  # last.sckp is skipped
    assert (single / "metrics.csv").read_bytes() == (ens / "metrics.csv").read_bytes()


def test_ensemble_of_two(trained, tmp_path):
    config, out = trained
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        (tmp_path / name / "best.sckp").write_bytes((out / "best.sckp").read_bytes())
    assert cli.main(["eval", "--ensemble", str(tmp_path), "--config", str(config), "--out", str(tmp_path / "o")]) == 0
    assert cli.main(["eval", "--ensemble", str(tmp_path / "empty"), "--config", str(config)]) == 2


def test_noise_sweep_and_margins(trained, tmp_path):
    config, out = trained
    args = ["eval", "--checkpoint", str(out / "best.sckp"), "--config", str(config), "--out", str(tmp_path)]
    assert cli.main([*args, "--noise-sweep", "--margins"]) == 0
    rows = read_rows(tmp_path / "noise_sweep.csv")
    assert rows[0] == ["sigma", "accuracy"] and [float(r[0]) for r in rows[1:]] == [1e-4, 5e-4, 1e-3]
    assert read_rows(tmp_path / "margins.csv")[0] == ["intra", "inter", "margin"]

    assert cli.main([*args, "--noise-sweep", "0", "1e-3"]) == 0
    rows = read_rows(tmp_path / "noise_sweep.csv")
    overall = next(r for r in read_rows(tmp_path / "metrics.csv") if r[0] == "overall")
    assert len(rows) == 3 and rows[1][1] == overall[1]


def test_eval_class_count_mismatch_exits_2(trained, tmp_path):
    _, out = trained
    three = {"classes": [{"name": f"t{i}", "kind": "tone", "freqs": [300.0 * (i + 1)]} for i in range(3)], "samples_per_class": 2, "folds": 1, "clip_seconds": 1.0}
    config = write_config(tmp_path / "c.json", data={"synthetic": three})
    assert cli.main(["eval", "--checkpoint", str(out / "best.sckp"), "--config", str(config), "--out", str(tmp_path)]) == 2


def test_eval_needs_exactly_one_model_source(trained):
    config, out = trained
    assert cli.main(["eval", "--config", str(config)]) == 1
    assert cli.main(["eval", "--checkpoint", str(out / "missing.sckp"), "--config", str(config)]) == 2


# --- synth and featurize --------------------------------------------------


@pytest.fixture(scope="module")
def dumped(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--out", str(root)]) == 0
    return root


def test_synth_dump(dumped):
    assert len(list(dumped.glob("*.wav"))) == 160
    assert len((dumped / "manifest.csv").read_text().splitlines()) == 161


@pytest.mark.filterwarnings("ignore::soundclr.dsp.EmptyFilterWarning")
def test_featurize_is_idempotent_and_shaped(dumped, tmp_path):
    out = tmp_path / "feat"
    manifest = str(dumped / "manifest.csv")
    assert cli.main(["featurize", "--manifest", manifest, "--out", str(out)]) == 0
    files = sorted(out.glob("*.feat"))
    assert len(files) == 160
    first = {f.name: f.read_bytes() for f in files}
    assert cli.main(["featurize", "--manifest", manifest, "--out", str(out)]) == 0
    assert {f.name: f.read_bytes() for f in sorted(out.glob("*.feat"))} == first
    frames = StftConfig().n_frames(2 * 44100)  # 2 s clips resampled to 44.1 kHz
    for f in files[:: 40]:
        assert read_feature_cache(f).shape == (128, frames)


def test_featurize_unreadable_audio_exits_2(dumped, tmp_path):
    broken = tmp_path / "audio"
    broken.mkdir()
    (broken / "manifest.csv").write_text((dumped / "manifest.csv").read_text())
    for w in list(dumped.glob("*.wav"))[:3]:
        (broken / w.name).write_bytes(b"RIFF0000junk")
    code = cli.main(["featurize", "--manifest", str(broken / "manifest.csv"), "--out", str(tmp_path / "o")])
    assert code == 2


# --- gradcheck ------------------------------------------------------------


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck", "--instances", "3"]) == 0
    table = capsys.readouterr().out
    names = list(gradcheck.default_checks())
    for name in names:
        assert sum(line.split()[0] == name for line in table.splitlines() if line.strip()) == 1


def test_injected_backward_bug_exits_3(monkeypatch, capsys):
    real = gradcheck.default_checks

    def with_bug():
        checks = real()
        bad = gradcheck.broken(nn.OPS["dense"])
        checks["dense"] = lambda r, h: gradcheck._check_op(bad, r, h)
        return checks

    monkeypatch.setattr(gradcheck, "default_checks", with_bug)
    assert cli.main(["gradcheck", "--instances", "2"]) == 3
    assert "dense" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::soundclr.dsp.EmptyFilterWarning")
def test_feature_cache_values_match_library(dumped, tmp_path):
    from soundclr.audio_io import load_standardized
    from soundclr.dsp import log_mel

    out = tmp_path / "feat"
    manifest = dumped / "manifest.csv"
    cli.main(["featurize", "--manifest", str(manifest), "--out", str(out)])
    name = sorted(dumped.glob("*.wav"))[0]
    expected = log_mel(load_standardized(name), StftConfig()).values
    assert np.array_equal(read_feature_cache(out / (name.stem + ".feat")), expected.astype(np.float32))
