import numpy as np
import pytest
from hypothesis import settings

from rvqdiff.diffusion import Vocab
from rvqdiff.oracle import ToyDistribution
from rvqdiff.synth import SynthConfig, enumerate_toy_distribution

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def two_seq_toy():
    """Uniform over the two grids AA and BB (n_real=2, one level, length 2)."""
    return ToyDistribution(np.array([[[0, 0]], [[1, 1]]]), np.array([0.5, 0.5]), Vocab(2))


@pytest.fixture(scope="session")
def toy4_family():
    """Generator restricted to n_real=4, L=2, d=3 (4096 states)."""
    return enumerate_toy_distribution(SynthConfig(n_real=4, levels=2, length=3))


@pytest.fixture(scope="session")
def toy64_family():
    """Generator restricted to n_real=2, L=2, d=3 (64 states)."""
    return enumerate_toy_distribution(SynthConfig(n_real=2, levels=2, length=3))


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one acceptance line (shown in the terminal summary) and assert it."""

    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
        request.config.stash[_ACCEPTANCE].append((number, line))
        print(line)
        assert ok, line

    return record
