import hashlib
from pathlib import Path

import numpy as np
import pytest

from cvclab import nnvf
from cvclab.bench import ExperimentConfig, symmetric_2gmm
from cvclab.bench.runner import ensure_checkpoint
from cvclab.bench.config import to_ini
from cvclab.oracle import OracleField


@pytest.fixture(scope="session")
def sym_model():
    """Two classes at +-(2, 0), sigma 0.5."""
    return symmetric_2gmm(d=2, sep=4.0, sigma=0.5)


@pytest.fixture(scope="session")
def sym_field(sym_model):
    return OracleField(sym_model)


@pytest.fixture(scope="session")
def learned_checkpoint(request):
    """Default-config checkpoint, trained once and kept in the pytest cache."""
    cfg = ExperimentConfig()
    source = Path(nnvf.__file__).read_bytes()
    key = hashlib.sha256(to_ini(cfg).encode() + source).hexdigest()[:12]
    path = request.config.cache.mkdir("cvclab") / f"checkpoint-{key}.json"
    return ensure_checkpoint(cfg, path)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one acceptance line; the assertion stays with the caller."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        _CRITERIA.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
