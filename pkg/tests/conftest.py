import os

import numpy as np
import pytest
import torch

from diffmatch.backend.toy import ToyBackend

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool | None, detail: str) -> str:
    status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
    line = f"criterion {number:2d}: {status}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture(scope="session")
def toy():
    return ToyBackend()


@pytest.fixture(scope="session")
def toy64():
    """Double-precision toy backend for gradient checks."""
    return ToyBackend(grid=(4, 4), n_tokens=6, embed_dim=16, input_size=32, dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cache_env(tmp_path, monkeypatch):
    monkeypatch.setenv("DIFFMATCH_CACHE", str(tmp_path / "cache"))
    return tmp_path / "cache"


def env_path(name: str):
    value = os.environ.get(name)
    return value if value and os.path.exists(value) else None
