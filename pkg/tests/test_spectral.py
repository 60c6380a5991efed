import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from flearn.spectral import (
    ComplexPair, dft2, dft2_bruteforce, fft2_array, idft2, ifft2_array, magnitude,
)
from flearn.tensor import Parameter, ShapeError, Tensor, add, finite_diff_check, mul, tsum

from conftest import weighted_sum


@pytest.mark.parametrize("n", [2, 4, 8, 16])
def test_matches_bruteforce(rng, n):
    f = Tensor(rng.standard_normal((3, n, n)))
    fast, slow = dft2(f), dft2_bruteforce(f)
    assert np.max(np.abs(fast.to_complex() - slow.to_complex())) < 1e-10


@pytest.mark.parametrize("shape", [(4, 8), (3, 5), (6, 16), (1, 1), (12, 7)])
def test_rectangular_and_non_power_of_two(rng, shape):
    f = Tensor(rng.standard_normal((2,) + shape))
    assert np.max(np.abs(dft2(f).to_complex() - dft2_bruteforce(f).to_complex())) < 1e-10


def test_roundtrip_128(rng):
    f = rng.standard_normal((4, 128, 128))
    back = idft2(dft2(Tensor(f))).to_complex()
    assert np.max(np.abs(back - f)) < 1e-9


def test_parseval_128(rng):
    f = rng.standard_normal((4, 128, 128))
    spec = dft2(Tensor(f)).to_complex()
    lhs = np.sum(f ** 2)
    rhs = np.sum(np.abs(spec) ** 2) / (128 * 128)
    assert abs(lhs - rhs) / lhs < 1e-8


def test_dc_at_origin_and_unshifted():
    f = np.zeros((1, 8, 8))
    f[0, 0, 0] = 1.0
    np.testing.assert_allclose(fft2_array(f), np.ones((1, 8, 8)), atol=1e-15)
    spec = fft2_array(np.ones((1, 8, 8)))
    assert spec[0, 0, 0] == pytest.approx(64)
    assert np.max(np.abs(spec.ravel()[1:])) < 1e-12


def test_independent_numpy_crosscheck(rng):
    a = rng.standard_normal((2, 32, 64)) + 1j * rng.standard_normal((2, 32, 64))
    np.testing.assert_allclose(fft2_array(a), np.fft.fft2(a), atol=1e-10)
    np.testing.assert_allclose(ifft2_array(a), np.fft.ifft2(a), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.sampled_from([1, 2, 4, 8, 16, 3, 6]),
                                    st.sampled_from([1, 2, 4, 8, 16, 5])),
              elements=st.floats(-1e3, 1e3)))
def test_roundtrip_property(f):
    back = ifft2_array(fft2_array(f))
    assert np.max(np.abs(back - f), initial=0) <= 1e-9 * max(1.0, np.max(np.abs(f), initial=0))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_linearity(seed, a, b):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((2, 8, 8)), r.standard_normal((2, 8, 8))
    np.testing.assert_allclose(fft2_array(a * x + b * y), a * fft2_array(x) + b * fft2_array(y),
                               atol=1e-9)


def test_dft2_grad(rng):
    f = Parameter(rng.standard_normal((2, 8, 8)), "f")
    fixed = 5

    def loss():
        s = dft2(f)
        return add(weighted_sum(s.real, fixed), weighted_sum(mul(s.imag, s.imag), fixed))

    assert finite_diff_check(loss, f) < 1e-4


def test_idft2_grad_both_parts(rng):
    re = Parameter(rng.standard_normal((2, 8, 4)), "re")
    im = Parameter(rng.standard_normal((2, 8, 4)), "im")
    fixed = 6

    def loss():
        out = idft2(ComplexPair(re, im))
        return add(weighted_sum(out.real, fixed), weighted_sum(out.imag, fixed))

    assert max(finite_diff_check(loss, re), finite_diff_check(loss, im)) < 1e-4


def test_magnitude_grad(rng):
    re = Parameter(rng.standard_normal((1, 4, 4)), "re")
    im = Parameter(rng.standard_normal((1, 4, 4)), "im")
    fixed = 7
    loss = lambda: weighted_sum(magnitude(ComplexPair(re, im)), fixed)  # noqa: E731
    assert max(finite_diff_check(loss, re), finite_diff_check(loss, im)) < 1e-4


def test_magnitude_at_zero_is_finite():
    re = Parameter(np.zeros((1, 2, 2)), "re")
    im = Parameter(np.zeros((1, 2, 2)), "im")
    out = magnitude(ComplexPair(re, im))
    tsum(out).backward()
    assert np.all(out.data == 0) and np.all(np.isfinite(re.grad)) and np.all(re.grad == 0)


def test_full_spectral_chain_grad(rng):
    # dft2 -> scale each part -> idft2 -> magnitude, the F-Learn data path
    f = Parameter(rng.standard_normal((2, 8, 8)), "f")
    wr = Tensor(rng.standard_normal((2, 8, 8)))
    wi = Tensor(rng.standard_normal((2, 8, 8)))
    fixed = 8

    def loss():
        s = dft2(f)
        return weighted_sum(magnitude(idft2(ComplexPair(mul(s.real, wr), mul(s.imag, wi)))), fixed)

    assert finite_diff_check(loss, f) < 1e-4


def test_shape_errors():
    with pytest.raises(ShapeError):
        ComplexPair(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        dft2(Tensor(np.zeros(4)))


def test_suite_speed(rng):
    t0 = time.perf_counter()
    for n in (2, 4, 8, 16):
        f = Tensor(rng.standard_normal((1, n, n)))
        dft2(f), dft2_bruteforce(f)
    f = rng.standard_normal((4, 128, 128))
    idft2(dft2(Tensor(f)))
    assert time.perf_counter() - t0 < 5.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.sampled_from([2, 4, 8, 16]),
                                    st.sampled_from([2, 4, 8, 16])),
              elements=st.floats(0, 1e3)))
def test_identity_pipeline_returns_nonnegative_input(f):
    # dft2 -> idft2 -> magnitude with nothing in between is |f|, i.e. f for f >= 0
    out = magnitude(idft2(dft2(Tensor(f)))).data
    assert np.max(np.abs(out - f), initial=0) < 1e-9 * max(1.0, np.max(f, initial=0))
