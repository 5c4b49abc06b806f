import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small GSD1 dataset for fast end-to-end tests."""
    from geossl.synthdata import SynthConfig, generate, load_dataset

    path = tmp_path_factory.mktemp("tiny") / "ds"
    cfg = SynthConfig(n_locations=320, height=8, width=8, timestamps=2, seed=3)
    generate(cfg, path)
    return load_dataset(path)


# ------------------------------------------------------------------ desk-scale experiments

ACCEPT_EPOCHS = 20
ACCEPT_SEEDS = (0, 1, 2, 3, 4)
BLOCKED_SEEDS = (0, 1, 2)
# eight Voronoi regions are caps of roughly 9200 km across; two of them span ~18000 km
ACCEPT_D_MAX = 18000.0
ACCEPT_EPSILON = 0.008


def accept_losses():
    from geossl.losses import LossConfig

    return {
        "baseline": LossConfig(alpha=1.0, geo_kind="none", d_max=ACCEPT_D_MAX),
        "georank": LossConfig(alpha=0.48, geo_kind="rank", d_max=ACCEPT_D_MAX, epsilon=ACCEPT_EPSILON),
        "geobasic": LossConfig(alpha=0.48, geo_kind="basic", d_max=ACCEPT_D_MAX),
    }


class ExperimentCache:
    """Lazily trains (variant, seed) runs on one dataset and keeps the reports."""

    def __init__(self, ds, epochs):
        self.ds, self.epochs, self.reports = ds, epochs, {}

    def run(self, variant: str, seed: int):
        from geossl.harness import RunConfig, pretrain

        key = (variant, seed)
        if key not in self.reports:
            cfg = RunConfig(dataset=str(self.ds.path), loss=accept_losses()[variant], epochs=self.epochs, seed=seed)
            self.reports[key] = pretrain(cfg, self.ds)[1]
        return self.reports[key]

    def runs(self, variant: str, seeds):
        return [self.run(variant, s) for s in seeds]


def _synth(tmp_path_factory, name, **kw):
    from geossl.synthdata import SynthConfig, generate, load_dataset

    path = tmp_path_factory.mktemp(name) / "ds"
    generate(SynthConfig(**kw), path)
    return load_dataset(path)


@pytest.fixture(scope="session")
def desk_experiments(tmp_path_factory):
    """Default synthetic world (N=4096, 5 classes, random split)."""
    return ExperimentCache(_synth(tmp_path_factory, "default"), ACCEPT_EPOCHS)


@pytest.fixture(scope="session")
def blocked_experiments(tmp_path_factory):
    return ExperimentCache(_synth(tmp_path_factory, "blocked", split="blocked"), ACCEPT_EPOCHS)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance_log.RESULTS):
        passed, detail = acceptance_log.RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {n:>2}: {detail}")
