import numpy as np
import pytest

from docparsenet.model import ModelConfig, build
from docparsenet.tensor import Tensor

TINY_CHANNELS = (2, 2, 2, 2, 2, 4)


def rand(shape, seed=0, scale=1.0, dtype=np.float64, requires_grad=False):
    data = np.random.default_rng(seed).uniform(-scale, scale, size=shape).astype(dtype)
    return Tensor(data, requires_grad=requires_grad)


def weighted_sum(t, seed=123):
    """Scalar probe with a fixed random weighting so every output coordinate matters."""
    from docparsenet.tensor import mul, sum_all

    w = np.random.default_rng(seed).uniform(-1, 1, size=t.shape).astype(t.dtype)
    return sum_all(mul(t, Tensor(w)))


def tiny_config(**changes):
    base = dict(channels=TINY_CHANNELS, crop=(32, 32), heads=2, dtype="float64", dropout=0.0)
    base.update(changes)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def default_model():
    return build(ModelConfig())


@pytest.fixture
def tiny_model():
    return build(tiny_config())


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

ACCEPTANCE_RESULTS = []


class criterion:
    """Context manager recording the outcome of one acceptance criterion."""

    def __init__(self, name):
        self.name = name
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            ACCEPTANCE_RESULTS.append(("PASS", self.name, self.detail))
        else:
            msg = self.detail or f"{exc_type.__name__}: {exc}"
            ACCEPTANCE_RESULTS.append(("FAIL", self.name, msg.splitlines()[0] if msg else ""))
        return False


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for status, name, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{status}  {name}: {detail}")
