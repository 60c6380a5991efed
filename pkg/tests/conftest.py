import sys

import numpy as np
import pytest

from flearn.tensor import Parameter, Tensor, mul, tsum


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def weighted_sum(out: Tensor, seed: int) -> Tensor:
    """sum(out * W) for a W fixed by ``seed``, so every output element matters."""
    w = Tensor(np.random.default_rng(seed).standard_normal(out.shape))
    return tsum(mul(out, w))


def param(rng, *shape, name="p"):
    return Parameter(rng.standard_normal(shape), name)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[cid])
