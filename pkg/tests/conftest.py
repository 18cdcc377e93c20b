import numpy as np
import pytest

from edsslads.classifier import CNNClassifier
from edsslads.detector import NNRDetector
from edsslads.phantom import gen_ill_spectrum, noisy_draws, synth_phase_spectra

SMALL_P = 256

# (criterion, passed, detail) lines printed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number, passed, detail in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(
                f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
            )


@pytest.fixture(scope="session")
def small_library():
    return synth_phase_spectra(2, 24, SMALL_P, seed=3)


@pytest.fixture(scope="session")
def small_models(small_library):
    """Detector and classifier fitted on a short 2-phase library."""
    train, held = small_library.split(12, 12)
    X, y = train.labelled()
    det = NNRDetector(n_iter=600, seed=1).fit(X)
    valid, _ = noisy_draws(held, 500, seed=5)
    det.calibrate(valid, gen_ill_spectrum(SMALL_P, size=500, seed=6))
    cls = CNNClassifier(n_iter=150, seed=1).fit(X, y)
    return det, cls


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
