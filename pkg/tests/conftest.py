import numpy as np
import pytest

from ultrasonic_backdoor.minidata import generate_mini_dataset


@pytest.fixture(scope="session")
def mini_root(tmp_path_factory):
    """10 classes x 10 one-second clips plus one 0.8 s clip per class."""
    root = tmp_path_factory.mktemp("mini")
    generate_mini_dataset(root, n_per_class=10, seed=3, n_short_per_class=1)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def dft_magnitudes(x, sample_rate, freqs):
    """Direct DFT magnitude at each requested frequency (no FFT)."""
    n = np.arange(len(x))
    basis = np.exp(-2j * np.pi * np.outer(freqs, n) / sample_rate)
    return np.abs(basis @ x)


# Acceptance criteria report one line each at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
