import math

import numpy as np
import pytest

from eyesynth import fixtures
from eyesynth.data import load_manifest

ACCEPTANCE_RESULTS: dict[str, str] = {}


@pytest.fixture(scope="session")
def tiny_sets(tmp_path_factory):
    """8 synthetic (gaze-labeled) and 8 real (unlabeled) 128x128 eye images."""
    root = tmp_path_factory.mktemp("tiny")
    fixtures.make_gaze_set(root / "syn", 8, "synthetic", seed=11)
    fixtures.make_gaze_set(root / "real", 8, "real", seed=12, labeled=False)
    return load_manifest(root / "syn" / "manifest.txt"), load_manifest(root / "real" / "manifest.txt")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[0])):
        terminalreporter.write_line(f"{ACCEPTANCE_RESULTS[key]}  criterion {key}")


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / math.sqrt(float(v @ v))
