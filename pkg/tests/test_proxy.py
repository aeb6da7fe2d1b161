import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blendscore.estimators import estimate_score
from blendscore.kernels import ou_kernel
from blendscore.proxy import (
    ProxyConfig,
    ProxyModel,
    anchor_score,
    anchor_scores,
    bank_with_proxy,
    fit_proxy,
    kmix_score,
    knn_indices,
    lowrank_logdet,
    woodbury_solve,
)


@pytest.mark.xfail(strict=True, reason="per-anchor noise ~ sqrt(d+2)/(h sqrt(k)) dominates at k=50")
def test_gaussian_anchor_fidelity_per_anchor():
    x = np.random.default_rng(0).standard_normal((5000, 2))
    s = anchor_scores(fit_proxy(x, k=50))
    err = np.linalg.norm(s + x, axis=1).mean()
    assert err <= 0.15 * np.linalg.norm(x, axis=1).mean()


def test_gaussian_anchor_fidelity_systematic():
    # the linear trend of the proxy recovers the oracle score -x
    x = np.random.default_rng(0).standard_normal((5000, 2))
    s = anchor_scores(fit_proxy(x, k=50))
    B = np.linalg.lstsq(x, s, rcond=None)[0]
    assert np.linalg.norm(B + np.eye(2)) / np.sqrt(2) <= 0.15
    assert np.linalg.norm((s + x).mean(axis=0)) <= 0.05


def test_two_cluster_neighbours_stay_local(rng):
    a = rng.standard_normal((60, 2))
    b = rng.standard_normal((60, 2)) + 100.0
    nbr = knn_indices(np.vstack([a, b]), 20)
    assert np.all(nbr[:60] < 60) and np.all(nbr[60:] >= 60)


def test_knn_excludes_self_and_rejects_bad_k(rng):
    x = rng.standard_normal((30, 3))
    nbr = knn_indices(x, 5)
    assert not np.any(nbr == np.arange(30)[:, None])
    with pytest.raises(ValueError):
        knn_indices(x, 30)
    with pytest.raises(ValueError):
        fit_proxy(x, k=1)
    with pytest.raises(ValueError):
        fit_proxy(x, k=5, kind="lrd", r=6)
    with pytest.raises(ValueError):
        fit_proxy(x, k=5, kind="full")


def test_degenerate_inputs_stay_positive():
    x = np.zeros((20, 2))
    for kind in ("diag", "lrd"):
        m = fit_proxy(x, k=4, kind=kind, ridge_gamma=0.0)
        assert np.all(m.variances > 0)
        assert np.all(np.isfinite(anchor_scores(m)))
    x = np.tile([[1.0, 2.0]], (10, 1))
    x[::2] += [0.5, 0.0]
    m = fit_proxy(x, k=3, ridge_gamma=0.0)
    assert np.all(m.variances > 0)


def test_anchor_score_examples():
    anchors = np.array([[0.0, 0.0], [1.0, 1.0]])
    m = ProxyModel(anchors, np.array([[0.0, 0.0], [3.0, 1.0]]), "diag", np.full((2, 2), 2.0), 1)
    np.testing.assert_array_equal(anchor_score(m, 0), [0.0, 0.0])
    np.testing.assert_allclose(anchor_score(m, 1), [1.0, 0.0])
    with pytest.raises(IndexError):
        anchor_score(m, 2)


def test_lrd_rank1_matches_dense(rng):
    d = 5
    D = rng.uniform(0.5, 2.0, d)
    V = np.linalg.qr(rng.standard_normal((d, 1)))[0]
    lam = np.array([3.0])
    anchors = rng.standard_normal((1, d))
    mu = rng.standard_normal((1, d))
    m = ProxyModel(anchors, mu, "lrd", D[None], 2, V=V[None], lam=lam[None])
    S = np.diag(D) + (V * lam) @ V.T
    np.testing.assert_allclose(anchor_score(m, 0), np.linalg.solve(S, mu[0] - anchors[0]), atol=1e-10)


def test_woodbury_vs_dense_random():
    rng = np.random.default_rng(11)
    for _ in range(100):
        d = int(rng.integers(1, 17))
        r = int(rng.integers(1, min(4, d) + 1))
        D = rng.uniform(0.1, 3.0, d)
        V = rng.standard_normal((d, r))
        lam = rng.uniform(0.0, 5.0, r)
        b = rng.standard_normal(d)
        S = np.diag(D) + (V * lam) @ V.T
        assert np.max(np.abs(woodbury_solve(D, V, lam, b) - np.linalg.solve(S, b))) <= 1e-8
        assert lowrank_logdet(D, V, lam) == pytest.approx(np.linalg.slogdet(S)[1], abs=1e-9)


def _mixture_logpdf(m, idx, x):
    out = []
    for i in idx:
        if m.kind == "diag":
            S = np.diag(m.variances[i])
        else:
            S = np.diag(m.variances[i]) + (m.V[i] * m.lam[i]) @ m.V[i].T
        r = x - m.mu[i]
        out.append(-0.5 * r @ np.linalg.solve(S, r) - 0.5 * np.linalg.slogdet(2 * np.pi * S)[1])
    out = np.array(out)
    return np.log(np.mean(np.exp(out - out.max()))) + out.max()


@pytest.mark.parametrize("kind", ["diag", "lrd"])
def test_kmix_matches_finite_differences(kind):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 2))
    mu = x + 0.3 * rng.standard_normal((3, 2))
    var = rng.uniform(0.5, 1.5, (3, 2))
    if kind == "diag":
        m = ProxyModel(x, mu, "diag", var, 2)
    else:
        V = np.stack([np.linalg.qr(rng.standard_normal((2, 1)))[0] for _ in range(3)])
        m = ProxyModel(x, mu, "lrd", var, 2, V=V, lam=rng.uniform(0.2, 1.0, (3, 1)))
    q = np.array([0.2, -0.4])
    h = 1e-5
    fd = np.array([(_mixture_logpdf(m, range(3), q + h * e) - _mixture_logpdf(m, range(3), q - h * e)) / (2 * h)
                   for e in np.eye(2)])
    got = kmix_score(m, q, 3)
    assert np.linalg.norm(got - fd) <= 1e-5 * np.linalg.norm(fd)


def test_kmix_single_and_duplicates(rng):
    x = rng.standard_normal((40, 2))
    m = fit_proxy(x, k=6)
    q = rng.standard_normal(2)
    i = int(np.argmin(np.sum((x - q) ** 2, 1)))
    np.testing.assert_allclose(kmix_score(m, q, 1), (m.mu[i] - q) / m.variances[i], rtol=1e-12)
    dup = ProxyModel(np.tile(x[:1], (5, 1)), np.tile(m.mu[:1], (5, 1)), "diag", np.tile(m.variances[:1], (5, 1)), 6)
    np.testing.assert_allclose(kmix_score(dup, q, 5), kmix_score(dup, q, 1), rtol=1e-12)
    with pytest.raises(ValueError):
        kmix_score(m, q, 0)
    assert kmix_score(m, rng.standard_normal((7, 2)), 4).shape == (7, 2)


@settings(max_examples=20)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["diag", "lrd"]))
def test_scores_permutation_invariant(seed, kind):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((60, 3))
    perm = rng.permutation(60)
    a = anchor_scores(fit_proxy(x, k=8, kind=kind, r=2))
    b = anchor_scores(fit_proxy(x[perm], k=8, kind=kind, r=2))
    np.testing.assert_allclose(b, a[perm], rtol=1e-9, atol=1e-12)
    q = rng.standard_normal(3)
    np.testing.assert_allclose(kmix_score(fit_proxy(x[perm], k=8, kind=kind, r=2), q, 5),
                               kmix_score(fit_proxy(x, k=8, kind=kind, r=2), q, 5), rtol=1e-9, atol=1e-12)


@settings(max_examples=20)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["diag", "lrd"]))
def test_fitted_model_invariants(seed, kind):
    x = np.random.default_rng(seed).standard_normal((50, 4))
    m = fit_proxy(x, k=7, kind=kind)
    assert np.all(m.variances > 0)
    if kind == "lrd":
        assert np.all(m.lam >= 0)
    assert np.all(np.isfinite(anchor_scores(m)))


def test_bank_with_proxy_tsi_gaussian():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5000, 2))
    bank = bank_with_proxy(x, ProxyConfig(k=50))
    assert np.all(np.isfinite(bank.scores))
    y = np.array([0.7, -0.4])
    est = estimate_score(bank, ou_kernel(2), y, 0.3, "tsi")
    assert np.linalg.norm(est.score + y) <= 0.25


@pytest.mark.parametrize("cfg", [ProxyConfig(), ProxyConfig(kind="lrd", r=2), ProxyConfig(score_mode="kmix")])
def test_bank_with_proxy_deterministic(cfg):
    x = np.random.default_rng(9).standard_normal((300, 3))
    a, b = bank_with_proxy(x, cfg), bank_with_proxy(x, cfg)
    assert np.array_equal(a.scores, b.scores)
    bank, model = bank_with_proxy(x, cfg, return_model=True)
    assert model.anchors.shape == x.shape
    with pytest.raises(ValueError):
        bank_with_proxy(x, ProxyConfig(score_mode="other"))


def test_consistency_trend():
    errs = []
    for n in (1000, 4000, 16000):
        k = int(round(0.5 * n ** (4 / 6)))
        x = np.random.default_rng(n).standard_normal((n, 2))
        errs.append(np.linalg.norm(anchor_scores(fit_proxy(x, k=k)) + x, axis=1).mean())
    assert errs[1] <= 1.1 * errs[0] and errs[2] <= 1.1 * errs[1]
