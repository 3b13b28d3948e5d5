import numpy as np
import pytest

from smsframes.features import SynthConfig, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """Manifest path of 40 short synthetic videos."""
    out = tmp_path_factory.mktemp("synth")
    cfg = SynthConfig(num_videos=40, classes=4, frames_per_video=12, dim=8, informative_per_video=2,
                      noise_sigma=0.3, seed=5)
    return generate_synthetic(cfg, out)


_criteria = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, passed, detail)``."""
    def record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {detail}"
        _criteria.append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_criteria):
            terminalreporter.write_line(line)
