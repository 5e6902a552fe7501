import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from soundclr import nn, synth
from soundclr import trainer as trainer_mod
from soundclr.audio_io import WaveSample
from soundclr.augmentation import AugmentConfig, featurize_eval, substream
from soundclr.dsp import StftConfig
from soundclr.evaluation import (
    DEFAULT_SIGMAS,
    Ensemble,
    cross_validate,
    ensemble_predict,
    evaluate,
    margin_from_vectors,
    margin_stats,
    metrics_from_logits,
    noise_sweep,
    write_noise_sweep,
)
from soundclr.model import SoundCLRModel
from soundclr.trainer import TrainConfig


class Stub:
    """Model whose logits are a function of each wave's label (or of its samples)."""

    def __init__(self, num_classes, fn):
        self.num_classes = num_classes
        self.fn = fn

    def predict_logits(self, waves):
        return np.array([self.fn(w) for w in waves], dtype=np.float64)


def labelled(labels, n=16):
    return [WaveSample(np.full(n, 0.1 * (i + 1)), 8000, int(y)) for i, y in enumerate(labels)]


def oracle(c):
    return Stub(c, lambda w: np.eye(c)[w.label])


# --- evaluate -------------------------------------------------------------


def test_oracle_model_is_perfect():
    waves = labelled(np.repeat(np.arange(4), 3))
    m = evaluate(oracle(4), waves)
    assert m.accuracy == 1.0
    assert np.array_equal(m.confusion, 3 * np.eye(4, dtype=int))
    assert np.all(m.per_class_accuracy == 1.0)


def test_constant_logits_pick_first_class():
    waves = labelled(np.repeat(np.arange(10), 2))
    m = evaluate(Stub(10, lambda w: np.zeros(10)), waves)
    assert m.accuracy == pytest.approx(0.1)
    assert m.confusion[:, 0].sum() == 20
    assert m.mean_loss == pytest.approx(np.log(10))


@given(st.integers(0, 2**32 - 1))
def test_confusion_identities(seed):
    rng = np.random.default_rng(seed)
    n, c = int(rng.integers(1, 40)), int(rng.integers(2, 6))
    labels = rng.integers(0, c, n)
    logits = rng.standard_normal((n, c))
    m = metrics_from_logits(logits, labels, c)
    assert m.accuracy == np.trace(m.confusion) / n
    assert np.array_equal(m.confusion.sum(axis=1), np.bincount(labels, minlength=c))
    assert m.confusion.sum() == n


def test_empty_slice_is_an_error():
    with pytest.raises(ValueError, match="empty"):
        evaluate(oracle(2), [])


def test_class_count_mismatch():
    with pytest.raises(ValueError, match="does not match"):
        metrics_from_logits(np.zeros((2, 3)), [0, 1], 4)


def test_real_model_evaluation_is_deterministic(small_corpus):
    cfg = nn.ModelConfig(num_classes=4)
    model = SoundCLRModel(nn.init_params(cfg, substream(0)), cfg, StftConfig(), AugmentConfig(target_len=22050))
    a, b = evaluate(model, small_corpus.samples), evaluate(model, small_corpus.samples)
    assert a.accuracy == b.accuracy and a.mean_loss == b.mean_loss
    assert np.array_equal(a.confusion, b.confusion)
    x = featurize_eval(small_corpus.samples[0], model.augment, model.stft)
    assert np.array_equal(model.features(small_corpus.samples[:1])[0], x.astype(np.float32))


# --- cross-validation -----------------------------------------------------


@pytest.fixture(scope="module")
def five_fold():
    spec = synth.SynthSpec(samples_per_class=5, clip_seconds=1.0, folds=5)
    return synth.generate(spec)[0]


def cv_config():
    return TrainConfig(scheme="hybrid", epochs=1, batch_size=8, seed=1, augment=AugmentConfig(target_len=22050))


def test_five_fold_runs_each_fold_once(five_fold, monkeypatch):
    calls = []
    real = trainer_mod.train

    def spy(data, cfg, val_fold=None, **kw):
        calls.append(val_fold)
        return real(data, cfg, val_fold=val_fold, **kw)

    monkeypatch.setattr(trainer_mod, "train", spy)
    res = cross_validate(five_fold, cv_config())
    assert calls == [1, 2, 3, 4, 5]
    assert res.folds == [1, 2, 3, 4, 5] and len(res.metrics) == 5
    assert abs(res.mean - sum(res.accuracies.tolist()) / 5) <= 1e-12
    assert res.std == pytest.approx(np.std(res.accuracies, ddof=1))
    for k, m in zip(res.folds, res.metrics):
        assert m.confusion.sum() == 4  # one clip per class per fold

    again = cross_validate(five_fold, cv_config())
    assert np.array_equal(again.accuracies, res.accuracies)


def test_cv_csv(five_fold, tmp_path):
    res = cross_validate(five_fold, cv_config(), folds=[2, 4])
    res.write_csv(tmp_path / "cv.csv")
    rows = list(csv.reader((tmp_path / "cv.csv").open()))
    assert rows[0] == ["fold", "accuracy", "mean_loss"]
    assert [r[0] for r in rows[1:]] == ["2", "4", "mean", "std"]
    assert float(rows[3][1]) == res.mean


def test_contrastive_cv_needs_every_class_in_training(small_corpus):
    keep = [i for i, s in enumerate(small_corpus.samples) if s.label != 3 or small_corpus.folds[i] == 1]
    from soundclr.audio_io import Dataset

    lopsided = Dataset([small_corpus.samples[i] for i in keep], small_corpus.folds[keep], 4)
    with pytest.raises(ValueError, match="lacks class"):
        cross_validate(lopsided, cv_config(), folds=[1])


# --- ensembles ------------------------------------------------------------


def test_ensemble_of_copies_equals_member():
    rng = np.random.default_rng(0)
    table = {i: rng.standard_normal(5) for i in range(12)}
    model = Stub(5, lambda w: table[int(round(w.samples[0] * 10)) - 1])
    waves = labelled(rng.integers(0, 5, 12))
    probs, pred = ensemble_predict([model] * 5, waves)
    assert np.allclose(probs, nn.softmax(model.predict_logits(waves)), rtol=0, atol=1e-15)
    assert np.array_equal(pred, np.argmax(model.predict_logits(waves), axis=1))
    assert evaluate(Ensemble([model] * 5), waves).accuracy == evaluate(model, waves).accuracy


def test_opposed_members_average_to_half():
    big = 800.0
    a = Stub(2, lambda w: np.array([big, 0.0]))
    b = Stub(2, lambda w: np.array([0.0, big]))
    probs, pred = ensemble_predict([a, b], labelled([1]))
    assert probs.tolist() == [[0.5, 0.5]] and pred.tolist() == [0]


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_ensemble_rows_are_distributions(seed, members):
    rng = np.random.default_rng(seed)
    models = [Stub(4, lambda w, s=rng.standard_normal(4) * 5: s * w.samples[0]) for _ in range(members)]
    probs, _ = ensemble_predict(models, labelled(np.zeros(6, dtype=int)))
    assert np.max(np.abs(probs.sum(axis=1) - 1)) <= 1e-12


def test_ensemble_errors():
    with pytest.raises(ValueError):
        ensemble_predict([], labelled([0]))
    with pytest.raises(ValueError, match="class count"):
        ensemble_predict([oracle(2), oracle(3)], labelled([0]))


# --- noise sweep ----------------------------------------------------------


class EnergyModel:
    """Predicts class 1 when the wave's mean square exceeds a threshold."""

    num_classes = 2

    def predict_logits(self, waves):
        return np.array([[0.0, 1.0] if np.mean(w.samples**2) > 1e-7 else [1.0, 0.0] for w in waves])


def noise_waves(n=30):
    rng = np.random.default_rng(2)
    return [WaveSample(np.zeros(200) if i % 2 else 1e-3 * rng.standard_normal(200), 8000, 1 - i % 2) for i in range(n)]


def test_zero_sigma_is_clean_accuracy():
    waves = noise_waves()
    rows = noise_sweep(EnergyModel(), waves, [0.0])
    assert rows == [(0.0, evaluate(EnergyModel(), waves).accuracy)]


def test_sweep_shape_and_determinism(tmp_path):
    waves = noise_waves()
    assert DEFAULT_SIGMAS == (1e-4, 5e-4, 1e-3)
    a = noise_sweep(EnergyModel(), waves, seed=5)
    assert [s for s, _ in a] == list(DEFAULT_SIGMAS)
    assert a == noise_sweep(EnergyModel(), waves, seed=5)
    assert a[-1][1] < 1.0  # loud noise fools the energy detector on silent clips
    write_noise_sweep(a, tmp_path / "n.csv")
    assert len((tmp_path / "n.csv").read_text().splitlines()) == 4


def test_negative_sigma():
    with pytest.raises(ValueError):
        noise_sweep(EnergyModel(), noise_waves(), [-1e-4])


# --- margins --------------------------------------------------------------


def test_identical_representations_have_zero_margin():
    s = margin_from_vectors(np.tile([0.6, 0.8], (6, 1)), [0, 0, 1, 1, 2, 2])
    assert s.intra == pytest.approx(1) and s.inter == pytest.approx(1) and s.margin == pytest.approx(0, abs=1e-15)


def test_orthogonal_classes_have_unit_margin():
    h = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    s = margin_from_vectors(h, [0, 0, 1, 1])
    assert (s.intra, s.inter, s.margin) == (1.0, 0.0, 1.0)


def test_margin_errors():
    with pytest.raises(ValueError, match="two classes"):
        margin_from_vectors(np.eye(3), [1, 1, 1])
    with pytest.raises(ValueError, match="same-label"):
        margin_from_vectors(np.eye(3), [0, 1, 2])
    margin_from_vectors(np.eye(3), [0, 0, 1])  # singleton class just adds no intra pairs


@given(st.integers(0, 2**32 - 1))
def test_margin_is_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    h = rng.standard_normal((10, 6))
    y = rng.permutation([0, 0, 1, 1, 2, 2, 0, 1, 2, 2])
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    a, b = margin_from_vectors(h, y), margin_from_vectors(h @ q, y)
    assert abs(a.margin - b.margin) < 1e-12
    assert -1 <= a.inter <= 1 and -1 <= a.intra <= 1


def untrained(seed):
    cfg = desk_model()
    return SoundCLRModel(nn.init_params(cfg, substream(seed, 2**32 - 1)), cfg, StftConfig(), AugmentConfig(target_len=44100))


def desk_model():
    return nn.ModelConfig(num_classes=4)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_untrained_margin_is_near_zero(corpus, seed):
    assert abs(margin_stats(untrained(seed), corpus.samples).margin) < 0.2


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_hybrid_training_widens_margin(corpus, full_run, seed):
    trained = margin_stats(full_run("hybrid", seed).last.model(), corpus.samples).margin
    assert trained > margin_stats(untrained(seed), corpus.samples).margin
