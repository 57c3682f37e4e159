import numpy as np
import pytest

from xalign.ingest import synth_dataset

ACCEPTANCE_LINES: list[str] = []


class AcceptanceRecorder:
    """Record one PASS/FAIL (or SKIP) line per acceptance criterion."""

    def __call__(self, name: str, ok: bool, detail: str = ""):
        self._line("PASS" if ok else "FAIL", name, detail)
        assert ok, f"{name}: {detail}"

    def skip(self, name: str, reason: str):
        self._line("SKIP", name, reason)
        pytest.skip(reason)

    @staticmethod
    def _line(status, name, detail):
        line = f"{status}  {name}  {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)


@pytest.fixture
def acceptance():
    return AcceptanceRecorder()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_store():
    """Low-dimensional synthetic store for fast unit tests."""
    return synth_dataset(160, latent_dim=4, noise_sigma=0.1, seed=3, spectral_dim=16, text_dim=32)


@pytest.fixture(scope="session")
def synth_store_noise0():
    return synth_dataset(256, latent_dim=8, noise_sigma=0.0, seed=1)
