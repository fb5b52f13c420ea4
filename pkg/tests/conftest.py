import numpy as np
import pytest

from adfq.tensor_ops import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def assert_bit_equal(a, b):
    __tracebackhide__ = True
    a = np.asarray(a)
    b = np.asarray(b)
    assert a.shape == b.shape, f"shape {a.shape} != {b.shape}"
    assert np.array_equal(a, b), "arrays differ bitwise"
