import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lmcyclegan.synth import SynthParams, write_synth_dataset

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("quick", deadline=None, max_examples=15)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """Synthetic dataset at S=32, 24 faces per domain."""
    root = tmp_path_factory.mktemp("synth32")
    write_synth_dataset(root, 24, SynthParams(size=32, seed=3), force=True)
    return root


@pytest.fixture(scope="session")
def data64(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth64")
    write_synth_dataset(root, 12, SynthParams(size=64, seed=5), force=True)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
