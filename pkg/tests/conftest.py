import numpy as np
import pytest
from hypothesis import settings

from emns.core import Dataset
from emns.synth import SynthEmnsConfig, collect_dataset

settings.register_profile("emns", deadline=None, max_examples=50)
settings.load_profile("emns")


@pytest.fixture(scope="session")
def small_dataset():
    """60 current vectors on the default 119-sensor grid."""
    return collect_dataset(60, SynthEmnsConfig(seed=3))


@pytest.fixture(scope="session")
def linear_cfg():
    return SynthEmnsConfig(saturation=False, coupling=np.eye(8), seed=5)


def make_dataset(n_cv=12, n_sensors=5, n_coils=8, seed=0):
    rng = np.random.default_rng(seed)
    sensors = {s: rng.uniform(-0.1, 0.1, 3) for s in range(n_sensors)}
    cv = np.repeat(np.arange(n_cv), n_sensors)
    sid = np.tile(np.arange(n_sensors), n_cv)
    pos = np.array([sensors[s] for s in sid])
    cur = np.repeat(rng.uniform(-35, 35, (n_cv, n_coils)) * 0.5, n_sensors, axis=0)
    fld = rng.normal(0, 0.05, (n_cv * n_sensors, 3))
    return Dataset(cv, sid, pos, cur, fld, sensors, "test")


# one line per acceptance criterion, printed in the terminal summary
_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str):
        _CRITERIA[number] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
