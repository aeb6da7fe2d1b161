import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from blendscore.kernels import (
    AffineKernel,
    forward_sample,
    log_transition_density,
    noise_variance,
    ou_kernel,
    phi,
    tsi_prefactor,
    ve_kernel,
    vp_kernel,
)

LN2 = np.log(2.0)
times = st.floats(0.0, 20.0, allow_nan=False)


def test_phi_values():
    k = ou_kernel(2)
    assert phi(k, 0.0) == 1.0
    assert phi(k, LN2) == pytest.approx(0.5, rel=1e-15)
    assert phi(ve_kernel(2), 3.7) == 1.0


def test_negative_time_rejected():
    for fn in (phi, noise_variance, tsi_prefactor):
        with pytest.raises(ValueError):
            fn(ou_kernel(1), -1e-3)


def test_noise_variance_values():
    k = ou_kernel(1)
    assert noise_variance(k, 0.0) == 0.0
    assert noise_variance(k, 50.0) == pytest.approx(1.0, abs=1e-15)
    assert noise_variance(k, 0.5 * LN2) == pytest.approx(0.5, rel=1e-14)


def test_vp_and_ve_piecewise_integrals():
    # beta = 1 on [0, 1), 3 afterwards: int_0^2 beta = 4
    vp = vp_kernel(1, ((0.0, 1.0), (1.0, 3.0)))
    assert phi(vp, 2.0) == pytest.approx(np.exp(-2.0), rel=1e-14)
    assert noise_variance(vp, 2.0) == pytest.approx(1 - np.exp(-4.0), rel=1e-14)
    # g = 2 then 1: int g^2 over [0, 1.5] = 4 * 1 + 1 * 0.5
    ve = ve_kernel(1, ((0.0, 2.0), (1.0, 1.0)))
    assert noise_variance(ve, 1.5) == pytest.approx(4.5, rel=1e-14)


def test_tsi_prefactor_values():
    assert tsi_prefactor(ou_kernel(1), 0.0) == 1.0
    assert tsi_prefactor(ou_kernel(1), 1.0) == pytest.approx(np.e, rel=1e-15)
    assert tsi_prefactor(vp_kernel(1, ((0.0, 2.0),)), 1.0) == pytest.approx(np.e, rel=1e-14)
    assert tsi_prefactor(ve_kernel(1), 5.0) == 1.0


def test_forward_sample_examples():
    k = ou_kernel(2)
    x0 = np.array([0.3, -1.2])
    z = np.array([0.7, 0.1])
    assert np.array_equal(forward_sample(k, x0, 0.0, z), x0)
    np.testing.assert_allclose(forward_sample(k, [1.0, 0.0], LN2, np.zeros(2)), [0.5, 0.0], rtol=1e-15)
    np.testing.assert_allclose(forward_sample(k, np.zeros(2), 40.0, z), z, rtol=1e-15)
    with pytest.raises(ValueError):
        forward_sample(k, np.zeros(3), 0.1, np.zeros(3))


def test_log_transition_density_examples():
    k = ou_kernel(3)
    x0 = np.array([0.2, 0.5, -1.0])
    t = 0.4
    expect = -1.5 * np.log(2 * np.pi * (1 - np.exp(-2 * t)))
    assert log_transition_density(k, np.exp(-t) * x0, x0, t) == pytest.approx(expect, rel=1e-14)
    t1 = 40.0  # sigma_t^2 = 1 to double precision
    assert log_transition_density(ou_kernel(1), [1.0], [0.0], t1) == pytest.approx(
        -0.5 - 0.5 * np.log(2 * np.pi), rel=1e-14)
    th = 0.5 * LN2
    assert log_transition_density(ou_kernel(2), [1.0, 1.0], [0.0, 0.0], th) == pytest.approx(
        -2.0 - np.log(np.pi), rel=1e-14)
    with pytest.raises(ValueError):
        log_transition_density(k, x0, x0, 0.0)


def test_log_transition_density_matches_scipy(rng):
    k = ou_kernel(4)
    for t in (0.01, 0.3, 2.0):
        x0 = rng.standard_normal(4)
        y = rng.standard_normal(4)
        ref = multivariate_normal(np.exp(-t) * x0, (1 - np.exp(-2 * t)) * np.eye(4)).logpdf(y)
        assert log_transition_density(k, y, x0, t) == pytest.approx(ref, rel=1e-12)


@given(times)
def test_prefactor_times_phi_is_one(t):
    for k in (ou_kernel(1), vp_kernel(1, ((0.0, 0.5), (2.0, 1.5))), ve_kernel(1)):
        assert tsi_prefactor(k, t) * phi(k, t) == pytest.approx(1.0, rel=1e-13)


@given(times, times)
def test_noise_variance_monotone(t1, t2):
    lo, hi = sorted((t1, t2))
    for k in (ou_kernel(1), vp_kernel(1, ((0.0, 0.5), (2.0, 1.5))), ve_kernel(1, ((0.0, 1.0), (1.0, 0.2)))):
        assert noise_variance(k, lo) <= noise_variance(k, hi)


def test_gradient_semigroup_consistency():
    # 1-D grid density: d/dy log p_t(y) equals e^t E[s0(X0) | y]
    x = np.linspace(-8, 8, 8001)
    dx = x[1] - x[0]
    p0 = 0.3 * np.exp(-0.5 * (x + 1.5) ** 2 / 0.2) / np.sqrt(0.2) + 0.7 * np.exp(-0.5 * (x - 1) ** 2 / 0.5) / np.sqrt(0.5)
    s0 = np.gradient(np.log(p0), dx)
    t = 0.3
    k = ou_kernel(1)
    for y in (-1.0, 0.2, 1.4):
        def logpt(yy):
            return np.log(np.sum(p0 * np.exp(log_transition_density(k, [[yy]], x[:, None], t))) * dx)
        h = 1e-4
        fd = (logpt(y + h) - logpt(y - h)) / (2 * h)
        w = p0 * np.exp(log_transition_density(k, [[y]], x[:, None], t))
        tsi = np.exp(t) * np.sum(w * s0) / np.sum(w)
        assert fd == pytest.approx(tsi, rel=1e-4, abs=1e-4)


def test_kernel_serialization_and_validation():
    k = vp_kernel(3, ((0.0, 1.0), (0.5, 2.0)))
    assert AffineKernel.from_dict(k.to_dict()) == k
    with pytest.raises(ValueError):
        AffineKernel("xx", 2)
    with pytest.raises(ValueError):
        AffineKernel("ou", 0)
