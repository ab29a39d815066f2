import numpy as np
import pytest

from spad.model import CAEConfig


def pytest_runtest_logreport(report):
    # One visible PASS/FAIL line per acceptance criterion.
    if report.when == "call" and "test_acceptance" in report.nodeid:
        outcome = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        name = report.nodeid.split("::")[-1]
        print(f"\n[ACCEPTANCE] {name}: {outcome}", flush=True)


@pytest.fixture
def tiny_arch():
    """Small 16x16 RGB architecture for fast training tests."""
    return CAEConfig(input_side=16, in_channels=3, widths=(8, 16), strides=(2, 2))


@pytest.fixture
def toy_images():
    rng = np.random.default_rng(410)
    return rng.uniform(0.0, 1.0, size=(20, 16, 16, 3)).astype(np.float32)
