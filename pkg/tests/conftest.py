import os

# single-threaded BLAS keeps reductions in a fixed order and timings honest
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import settings  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def random_face(rng, size=100.0, center=(200.0, 200.0), angle=None, jitter=0.03):
    """Plausible raw 68-point face: canonical template, jitter, random similarity pose."""
    from prnface.harness.data import canonical_face

    pts = canonical_face() + rng.normal(0.0, jitter, size=(68, 2))
    angle = rng.uniform(-np.pi, np.pi) if angle is None else angle
    c, s = np.cos(angle), np.sin(angle)
    return size * pts @ np.array([[c, s], [-s, c]]) + np.asarray(center)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
