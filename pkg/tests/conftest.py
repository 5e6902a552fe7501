import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

from soundclr import synth  # noqa: E402
from soundclr.augmentation import AugmentConfig  # noqa: E402
from soundclr.trainer import TrainConfig, train  # noqa: E402

DESK_AUGMENT = AugmentConfig(target_len=44100)


def desk_config(scheme: str = "hybrid", seed: int = 0, **overrides) -> TrainConfig:
    """The desk protocol: synthetic corpus, batch 32, 30 epochs, default optimizer settings."""
    kw = dict(scheme=scheme, epochs=30, batch_size=32, seed=seed, augment=DESK_AUGMENT)
    if scheme == "two_stage_contrastive":
        kw["stage2_lr_scale"] = 10.0
    kw.update(overrides)
    return TrainConfig(**kw)


@pytest.fixture(scope="session")
def corpus():
    return synth.generate()[0]


@pytest.fixture(scope="session")
def small_corpus():
    spec = synth.SynthSpec(samples_per_class=8, clip_seconds=1.0, folds=2)
    return synth.generate(spec)[0]


_runs = {}


@pytest.fixture(scope="session")
def full_run(corpus):
    """Trained on the whole default corpus (no validation fold); cached per (scheme, seed)."""

    def get(scheme: str, seed: int):
        key = (scheme, seed)
        if key not in _runs:
            _runs[key] = train(corpus, desk_config(scheme, seed))
        return _runs[key]

    return get


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
