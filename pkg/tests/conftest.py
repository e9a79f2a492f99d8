import os
from importlib import resources

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERIA = []


@pytest.fixture
def record_criterion():
    """Collect one summary line per acceptance criterion."""
    def _record(number, passed, detail):
        _CRITERIA.append((number, bool(passed), detail))
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(_CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_paths():
    root = resources.files("bayesda").joinpath("data")
    return {k: str(root.joinpath(f"toy_{k}.tsv")) for k in ("counts", "labels", "taxonomy", "truth")}
