import numpy as np
import pytest

from blendscore.estimators import exact_score_fn
from blendscore.kernels import ou_kernel
from blendscore.metrics import mmd, rbf
from blendscore.presets import bimodal2d
from blendscore.sampler import (
    CountingScore,
    SamplerConfig,
    SamplerError,
    TimeGrid,
    heun_pc_step,
    make_time_grid,
    mala_sample,
    reverse_sample,
    sample,
)
from blendscore.snis import ReferenceBank
from blendscore.targets import gmm_sample, gmm_score


def test_time_grid_examples():
    g = make_time_grid(5e-4, 1.5, 30)
    assert g.knots[0] == 1.5 and g.knots[-1] == 5e-4 and g.knots.size == 31
    g = make_time_grid(0.01, 1.0, 2)
    assert g.knots[1] == pytest.approx(np.sqrt(0.01), rel=1e-14)
    np.testing.assert_array_equal(make_time_grid(1.0, 3.0, 2, "linear").knots, [3.0, 2.0, 1.0])
    with pytest.raises(ValueError):
        make_time_grid(0.0, 1.0, 10)
    with pytest.raises(ValueError):
        make_time_grid(0.1, 1.0, 1)
    with pytest.raises(ValueError):
        TimeGrid(np.array([1.0, 2.0]))


def test_heun_limit_and_hand_values():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((4, 3))
    out = heun_pc_step(lambda v, t: -v, y, 1.0 + 1e-12, 1.0, np.zeros_like(y))
    np.testing.assert_allclose(out, y, atol=1e-8)
    z = rng.standard_normal(y.shape)
    out = heun_pc_step(lambda v, t: -v, y, 1.0 + 1e-12, 1.0, z)
    np.testing.assert_allclose(out, y, atol=1e-5)
    zero = lambda v, t: np.zeros_like(v)  # noqa: E731
    # reverse OU drift is +(y + 2 s): y=1, delta=0.1 gives predictor 1.1 and corrector 1.105
    out = heun_pc_step(zero, np.array([[1.0]]), 0.2, 0.1, np.zeros((1, 1)))
    assert out[0, 0] == pytest.approx(1.105, abs=1e-14)
    with pytest.raises(ValueError):
        heun_pc_step(zero, np.array([[1.0]]), 0.1, 0.2, np.zeros((1, 1)))


def test_heun_shares_noise_between_stages():
    seen = []

    def fn(v, t):
        seen.append(v.copy())
        return np.zeros_like(v)

    z = np.array([[0.5]])
    heun_pc_step(fn, np.array([[0.0]]), 0.5, 0.3, z)
    # predictor point is y + delta f + sqrt(2 delta) z
    assert seen[1][0, 0] == pytest.approx(np.sqrt(0.4) * 0.5, rel=1e-14)


def test_nfe_and_determinism(rng):
    k = ou_kernel(2)
    bank = ReferenceBank(rng.standard_normal((200, 2)), None)
    cfg = SamplerConfig(n_particles=50, grid=make_time_grid(1e-3, 1.0, 10), kind="tweedie", seed=4)
    a, b = sample(bank, k, cfg), sample(bank, k, cfg)
    assert a.nfe == 2 * 10 * 50
    assert np.array_equal(a.samples, b.samples)
    counted = CountingScore(lambda v, t: -v)
    reverse_sample(counted, np.zeros((7, 2)), make_time_grid(0.1, 1.0, 5), np.random.default_rng(0))
    assert counted.nfe == 2 * 5 * 7


def test_non_finite_score_aborts():
    def bad(v, t):
        out = -v.copy()
        out[3] = np.nan
        return out

    with pytest.raises(SamplerError) as info:
        reverse_sample(bad, np.zeros((5, 2)), make_time_grid(0.1, 1.0, 4), np.random.default_rng(0))
    assert info.value.particle == 3 and info.value.step == 0


def test_diagnostics_stream(rng):
    x = rng.standard_normal((300, 2))
    bank = ReferenceBank(x, -x)
    cfg = SamplerConfig(n_particles=20, grid=make_time_grid(1e-2, 1.0, 5), seed=1, diagnostics=True)
    res = sample(bank, ou_kernel(2), cfg)
    assert len(res.diagnostics) == 10
    for rec in res.diagnostics:
        assert rec["lambda"].shape == (20,)
        assert np.all((rec["lambda"] >= 0) & (rec["lambda"] <= 1))


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(n_particles=0)


def test_stationary_target_tweedie():
    k = ou_kernel(3)
    bank = ReferenceBank(np.random.default_rng(0).standard_normal((4000, 3)))
    cfg = SamplerConfig(n_particles=2000, grid=make_time_grid(5e-4, 1.5, 30), kind="tweedie", seed=1)
    out = sample(bank, k, cfg).samples
    assert np.linalg.norm(out.mean(0)) <= 0.1
    # Tweedie transports onto the empirical bank law, so compare against its covariance
    assert np.linalg.norm(np.cov(out.T) - np.cov(bank.points.T)) <= 0.1
    assert np.linalg.norm(np.cov(out.T) - np.eye(3)) <= 0.15


def test_exact_score_sampler_reaches_floor():
    g = bimodal2d()
    k = ou_kernel(2)
    rng = np.random.default_rng(0)
    score = exact_score_fn(g, k)
    out = reverse_sample(score, rng.standard_normal((4000, 2)), make_time_grid(5e-4, 1.5, 60), rng)
    a, b = gmm_sample(g, 4000, rng), gmm_sample(g, 4000, rng)
    ks = rbf(0.5)
    assert mmd(out, a, ks) <= 2.0 * mmd(a, b, ks)


def test_blend_beats_tweedie_on_bimodal():
    g = bimodal2d()
    k = ou_kernel(2)
    ks = rbf(0.5)
    wins = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = gmm_sample(g, 1000, rng)
        bank = ReferenceBank(x, gmm_score(g, x))
        exact = gmm_sample(g, 2000, rng)
        res = {}
        for kind in ("blend", "tweedie"):
            cfg = SamplerConfig(n_particles=500, kind=kind, seed=100 + seed)
            res[kind] = mmd(sample(bank, k, cfg).samples, exact, ks)
        wins += res["blend"] <= res["tweedie"]
    assert wins >= 6


def test_mala_gaussian_moments():
    rng = np.random.default_rng(0)
    res = mala_sample(lambda x: -0.5 * np.sum(x**2, 1), lambda x: -x, np.zeros(1), 20000, 2000, 0.5, rng)
    assert res.chain.shape == (18000, 1)
    assert abs(res.chain.mean()) <= 0.05
    assert 0.9 <= res.chain.var() <= 1.1


def test_mala_small_step_and_symmetry():
    rng = np.random.default_rng(1)
    res = mala_sample(lambda x: -0.5 * np.sum(x**2, 1), lambda x: -x, np.zeros(1), 1001, 1, 1e-6, rng)
    assert res.acceptance_rate >= 0.99
    lp = lambda x: np.logaddexp(-0.5 * np.sum((x - 1) ** 2, 1), -0.5 * np.sum((x + 1) ** 2, 1))  # noqa: E731

    def grad(x):
        a = np.exp(-0.5 * np.sum((x - 1) ** 2, 1))
        b = np.exp(-0.5 * np.sum((x + 1) ** 2, 1))
        return (-(x - 1) * a[:, None] - (x + 1) * b[:, None]) / (a + b)[:, None]

    res = mala_sample(lp, grad, np.zeros((64, 1)), 3000, 500, 0.8, np.random.default_rng(2))
    assert abs(res.chain.mean()) <= 0.1


def test_mala_adaptation_and_errors():
    rng = np.random.default_rng(3)
    res = mala_sample(lambda x: -0.5 * np.sum(x**2, 1), lambda x: -x, np.zeros((16, 2)), 2000, 1000, 5.0,
                      rng, target_accept=0.57)
    assert 0.4 <= res.acceptance_rate <= 0.75
    with pytest.raises(ValueError):
        mala_sample(lambda x: -0.5 * np.sum(x**2, 1), lambda x: -x, np.zeros(1), 10, 10, 0.1, rng)
    with pytest.raises(ValueError):
        mala_sample(lambda x: np.full(x.shape[0], np.nan), lambda x: x, np.zeros(1), 10, 1, 0.1, rng)
