import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from artikin import synth
from artikin.deform import FitConfig, fit

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE = {}

DRAWER_SEEDS = (0, 1, 2, 3, 4)
DRAWER_GAUSSIANS = 300


def record_acceptance(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def storage2():
    return synth.generate_scene(synth.preset("storage2", seed=0))


@pytest.fixture(scope="session")
def storage3():
    return synth.generate_scene(synth.preset("storage3", seed=0))


@pytest.fixture(scope="session")
def slider2():
    return synth.generate_scene(synth.preset("slider2", seed=0))


@pytest.fixture(scope="session")
def small_storage2():
    return synth.generate_scene(synth.preset("storage2", seed=3, total_gaussians=400))


@pytest.fixture(scope="session")
def drawer_fits():
    """One deformation fit per seed on the single-drawer scene, shared by tests."""
    out = {}
    for seed in DRAWER_SEEDS:
        bundle = synth.generate_scene(synth.preset("drawer", seed=seed,
                                                   total_gaussians=DRAWER_GAUSSIANS))
        out[seed] = (bundle, fit(bundle, FitConfig(seed=seed)))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
