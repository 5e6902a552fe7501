import numpy as np
import pytest

from oracles import nearest_centroid_accuracy
from soundclr import synth
from soundclr.audio_io import load_dataset, load_manifest
from soundclr.dsp import StftConfig, log_mel


def test_default_corpus_counts(corpus):
    assert len(corpus) == 160 and corpus.num_classes == 4
    assert np.bincount(corpus.folds)[1:].tolist() == [40, 40, 40, 40]
    for k in range(1, 5):
        assert np.bincount(corpus.labels[corpus.folds == k]).tolist() == [10, 10, 10, 10]
    assert {len(s) for s in corpus.samples} == {44100}
    assert {s.sample_rate for s in corpus.samples} == {22050}
    assert corpus.class_names == ["tone_440", "chord_880_1320", "chirp_200_2000", "noise_3k_6k"]


def test_generation_is_bit_identical():
    spec = synth.SynthSpec(samples_per_class=4, clip_seconds=0.5, folds=2, seed=9)
    a, b = synth.generate(spec)[0], synth.generate(spec)[0]
    assert all(np.array_equal(x.samples, y.samples) for x, y in zip(a.samples, b.samples))
    c = synth.generate(synth.SynthSpec(samples_per_class=4, clip_seconds=0.5, folds=2, seed=10))[0]
    assert not np.array_equal(a.samples[0].samples, c.samples[0].samples)


def test_raw_amplitudes_within_jitter_range():
    data, _ = synth.generate(synth.SynthSpec(samples_per_class=6, clip_seconds=0.5), normalized=False)
    peaks = np.array([np.max(np.abs(s.samples)) for s in data.samples])
    assert np.all(peaks <= 1.0) and np.all(peaks >= 0.5 * 0.9)


def test_normalized_corpus_peaks_at_one(corpus):
    assert all(np.max(np.abs(s.samples)) == pytest.approx(1.0) for s in corpus.samples)


def test_tone_frequency_within_jitter():
    data, _ = synth.generate(synth.SynthSpec(samples_per_class=5, clip_seconds=1.0, folds=1))
    for s in data.samples[:5]:
        spectrum = np.abs(np.fft.rfft(s.samples))
        peak = np.argmax(spectrum) * s.sample_rate / len(s)
        assert 440 * 0.95 - 1 <= peak <= 440 * 1.05 + 1


def test_noise_band_energy_stays_in_band():
    data, _ = synth.generate(synth.SynthSpec(samples_per_class=3, clip_seconds=1.0, folds=1))
    for s in data.samples[9:12]:
        power = np.abs(np.fft.rfft(s.samples)) ** 2
        f = np.fft.rfftfreq(len(s), 1 / s.sample_rate)
        assert power[(f >= 3000 * 0.95) & (f <= 6000 * 1.05)].sum() / power.sum() > 0.999


@pytest.mark.parametrize(
    "kw, match",
    [
        (dict(sample_rate=8000), "aliases"),
        (dict(samples_per_class=3, folds=4), "folds"),
        (dict(folds=0), "folds"),
    ],
)
def test_spec_validation(kw, match):
    with pytest.raises(ValueError, match=match):
        synth.SynthSpec(**kw)


def test_class_spec_validation():
    with pytest.raises(ValueError):
        synth.ClassSpec("x", "square", (100.0,))
    with pytest.raises(ValueError):
        synth.ClassSpec("x", "chord", (100.0,))


def test_nearest_centroid_separates_default_corpus(corpus):
    feats = np.stack([log_mel(s, StftConfig()).values.mean(axis=1) for s in corpus.samples])
    assert nearest_centroid_accuracy(feats, corpus.labels, corpus.folds) >= 0.9


def test_dump_round_trips_through_ingestion(tmp_path):
    spec = synth.SynthSpec(samples_per_class=4, clip_seconds=0.25, folds=2)
    path = synth.dump(spec, tmp_path, encoding="float32")
    manifest = load_manifest(path)
    assert len(manifest.entries) == 16 and manifest.num_folds == 2
    loaded = load_dataset(manifest, tmp_path, rate=22050)
    ref, _ = synth.generate(spec)
    assert np.array_equal(loaded.labels, ref.labels) and np.array_equal(loaded.folds, ref.folds)
    for a, b in zip(loaded.samples, ref.samples):
        assert np.allclose(a.samples, b.samples, atol=1e-6)


def test_pcm16_dump_is_close(tmp_path):
    spec = synth.SynthSpec(samples_per_class=2, clip_seconds=0.25, folds=1)
    path = synth.dump(spec, tmp_path)
    loaded = load_dataset(load_manifest(path), tmp_path, rate=22050)
    ref, _ = synth.generate(spec)
    for a, b in zip(loaded.samples, ref.samples):
        assert np.max(np.abs(a.samples - b.samples)) < 1e-3
