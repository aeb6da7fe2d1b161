"""Tweedie, TSI and variance-optimally blended nonparametric score estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import mean_offset, noise_variance, phi, tsi_prefactor
from .snis import (
    _log_prior_weights,
    _shifted_loglik,
    _weighted_second_moments,
    batch_partition,
    median_of_means,
    normalize_log_weights,
)
from .targets import gmm_diffused, gmm_score

__all__ = [
    "ScoreEstimate",
    "ESTIMATOR_KINDS",
    "ESS_FRACTION",
    "MIN_TIME",
    "tweedie_contributions",
    "tsi_contributions",
    "estimate_score",
    "lambda_star",
    "lambda_star_raw",
    "blended_objective",
    "gaussian_error_pair",
    "variance_time_factors",
    "exact_score_fn",
]

ESTIMATOR_KINDS = ("tweedie", "tsi", "blend")
ESS_FRACTION = 0.05
MIN_TIME = 1e-12

# caps the (chunk, N_ref) weight matrices
_CHUNK_ELEMS = 4_000_000


@dataclass
class ScoreEstimate:
    """Score estimate with per-query diagnostics.

    Arrays carry a leading query axis when the estimate was computed for a
    batch of points.
    """

    score: np.ndarray
    lam: np.ndarray | float
    sigma_T2: np.ndarray | float
    sigma_C2: np.ndarray | float
    cov: np.ndarray | float
    ess: np.ndarray | float
    ess_collapsed: np.ndarray | bool

    def records(self, t):
        """Diagnostics as JSON-ready dicts, one per query."""
        cols = [np.atleast_1d(v) for v in
                (self.ess, self.lam, self.sigma_T2, self.sigma_C2, self.cov, self.ess_collapsed)]
        return [{"t": float(t), "ess": float(e), "lambda": float(l), "sigma_T2": float(st),
                 "sigma_C2": float(sc), "cov": float(c), "ess_collapsed": bool(f)}
                for e, l, st, sc, c, f in zip(*cols)]


def _check_t(t):
    t = float(t)
    if not t > MIN_TIME:
        raise ValueError(f"score queries need t > {MIN_TIME}, got {t}")
    return t


def tweedie_contributions(bank, kernel, y, t):
    """Per-particle Tweedie signals ``-(y - Phi x0^i - m) / sigma_t^2``, shape (N_ref, d)."""
    t = _check_t(t)
    y = np.asarray(y, dtype=float)
    resid = y - phi(kernel, t) * bank.points - mean_offset(kernel, t)
    return -resid / noise_variance(kernel, t)


def tsi_contributions(bank, kernel, t):
    """Per-particle TSI signals ``Phi^{-T} s0(x0^i)``, shape (N_ref, d)."""
    if bank.scores is None:
        raise ValueError("TSI needs reference scores")
    if float(t) < 0:
        raise ValueError("time must be >= 0")
    return tsi_prefactor(kernel, t) * bank.scores


def lambda_star_raw(sigma_T2, sigma_C2, cov):
    """Unconstrained minimizer ``(sigma_C^2 - cov) / (sigma_T^2 + sigma_C^2 - 2 cov)``."""
    return (np.asarray(sigma_C2) - cov) / (np.asarray(sigma_T2) + sigma_C2 - 2.0 * np.asarray(cov))


def lambda_star(sigma_T2, sigma_C2, cov, eps_den=1e-12):
    """Variance-optimal blend weight clamped to [0, 1].

    Falls back to ``sigma_C^2 / (sigma_T^2 + sigma_C^2)`` when the quadratic
    is nearly flat and to 0.5 when both variances vanish.
    """
    sT = np.asarray(sigma_T2, dtype=float)
    sC = np.asarray(sigma_C2, dtype=float)
    c = np.asarray(cov, dtype=float)
    sT, sC, c = np.broadcast_arrays(sT, sC, c)
    den = sT + sC - 2.0 * c
    tol = eps_den * (sT + sC + 1.0)
    flat = np.abs(den) < tol
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(flat, 0.0, (sC - c) / np.where(flat, 1.0, den))
        tot = sT + sC
        fallback = np.where(tot > 0, sC / np.where(tot > 0, tot, 1.0), 0.5)
    lam = np.clip(np.where(flat, fallback, raw), 0.0, 1.0)
    return float(lam) if lam.ndim == 0 else lam


def blended_objective(lam, sigma_T2, sigma_C2, cov):
    """Error variance of ``lam * Tweedie + (1 - lam) * TSI``."""
    lam = np.asarray(lam, dtype=float)
    return lam**2 * sigma_T2 + (1.0 - lam) ** 2 * sigma_C2 + 2.0 * lam * (1.0 - lam) * cov


def _log_weights(bank, kernel, Y, t, weight_mode):
    logw, _ = _log_prior_weights(bank, kernel, Y, t)
    if weight_mode == "posterior":
        logw = logw + _shifted_loglik(bank)
    elif weight_mode != "prior":
        raise ValueError(f"unknown weight mode {weight_mode!r}")
    return logw


def _estimate_batch(bank, kernel, Y, t, kind, weight_mode, ess_floor):
    """Estimates for a (M, d) batch against a single bank; returns dict of arrays."""
    M, d = Y.shape
    N = bank.size
    f = phi(kernel, t)
    var = noise_variance(kernel, t)
    m_t = mean_offset(kernel, t)
    need_a = kind in ("tsi", "blend")
    if need_a and bank.scores is None:
        raise ValueError(f"{kind} estimator needs reference scores")
    a = tsi_contributions(bank, kernel, t) if need_a else None
    if kind == "blend":
        norms = (np.sum(a * a, axis=1), bank.sq_norms, np.sum(a * bank.points, axis=1))

    out = {k: np.empty(M) for k in ("lam", "sigma_T2", "sigma_C2", "cov", "ess")}
    out["score"] = np.empty((M, d))
    chunk = max(1, _CHUNK_ELEMS // N)
    for lo in range(0, M, chunk):
        sl = slice(lo, min(M, lo + chunk))
        Yc = Y[sl]
        w, _ = normalize_log_weights(_log_weights(bank, kernel, Yc, t, weight_mode))
        out["ess"][sl] = 1.0 / np.sum(w * w, axis=1)
        if kind == "blend":
            num_c, num_x2, num_ax, s2, s_tsi, x_bar = _weighted_second_moments(
                w, a, bank.points, *norms)
        else:
            x_bar = w @ bank.points
        s_twd = -(Yc - f * x_bar - m_t) / var
        if kind == "tweedie":
            out["score"][sl] = s_twd
            out["lam"][sl] = 1.0
            out["sigma_T2"][sl] = out["sigma_C2"][sl] = out["cov"][sl] = np.nan
            continue
        if kind == "tsi":
            out["score"][sl] = w @ a
            out["lam"][sl] = 0.0
            out["sigma_T2"][sl] = out["sigma_C2"][sl] = out["cov"][sl] = np.nan
            continue
        # Tweedie deviations are (Phi / sigma^2) (x0^i - x_bar)
        scale = f / var
        denom = 1.0 - s2
        ok = denom > 1e-15
        safe = np.where(ok, denom, 1.0)
        sC = np.where(ok, num_c / safe, 0.0)
        sT = np.where(ok, scale**2 * num_x2 / safe, 0.0)
        cv = np.where(ok, scale * num_ax / safe, 0.0)
        lam = lambda_star(sT, sC, cv)
        out["score"][sl] = lam[:, None] * s_twd + (1.0 - lam)[:, None] * s_tsi
        out["lam"][sl], out["sigma_T2"][sl], out["sigma_C2"][sl], out["cov"][sl] = lam, sT, sC, cv
    floor = ESS_FRACTION * N if ess_floor is None else ess_floor
    out["ess_collapsed"] = out["ess"] < floor
    return out


def estimate_score(bank, kernel, y, t, kind="blend", weight_mode="prior", *,
                   ess_floor=None, n_batches=1, rng=None):
    """Nonparametric score estimate at ``(y, t)``.

    Parameters
    ----------
    bank : ReferenceBank
    kernel : AffineKernel
    y : array_like, shape (d,) or (M, d)
    t : float
    kind : {"tweedie", "tsi", "blend"}
    weight_mode : {"prior", "posterior"}
        ``posterior`` tilts the weights by ``bank.log_likelihoods``; the
        bank's score column must then already hold posterior scores.
    ess_floor : float, optional
        ESS below which ``ess_collapsed`` is flagged; ``0.05 * N_ref`` by default.
    n_batches : int
        Median-of-means over this many disjoint sub-banks (1 disables it).
    rng : numpy.random.Generator
        Required when ``n_batches > 1`` to shuffle the bank once.

    Returns
    -------
    ScoreEstimate
    """
    t = _check_t(t)
    if kind not in ESTIMATOR_KINDS:
        raise ValueError(f"unknown estimator kind {kind!r}")
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    if Y.shape[1] != bank.dim:
        raise ValueError(f"query dimension {Y.shape[1]} != bank dimension {bank.dim}")

    if n_batches == 1:
        res = _estimate_batch(bank, kernel, Y, t, kind, weight_mode, ess_floor)
    else:
        if rng is None:
            raise ValueError("median-of-means needs an rng for the bank shuffle")
        blocks = batch_partition(bank.size, n_batches, rng)
        parts = [_estimate_batch(bank.subset(idx), kernel, Y, t, kind, weight_mode,
                                 None if ess_floor is None else ess_floor / n_batches)
                 for idx in blocks]
        res = {k: median_of_means([p[k] for p in parts]) for k in parts[0] if k != "ess_collapsed"}
        res["ess_collapsed"] = np.any([p["ess_collapsed"] for p in parts], axis=0)

    if single:
        return ScoreEstimate(res["score"][0], float(res["lam"][0]), float(res["sigma_T2"][0]),
                             float(res["sigma_C2"][0]), float(res["cov"][0]),
                             float(res["ess"][0]), bool(res["ess_collapsed"][0]))
    return ScoreEstimate(res["score"], res["lam"], res["sigma_T2"], res["sigma_C2"],
                         res["cov"], res["ess"], res["ess_collapsed"])


def gaussian_error_pair(gmm, bank, kernel, y, t):
    """Tweedie and TSI errors against the exact diffused score for a Gaussian target.

    Returns ``(eps_T, eps_C)``; with ``Delta`` the SNIS posterior-mean error,
    ``eps_T = e^{-t} Delta / sigma_t^2`` and ``eps_C = -e^t Sigma^{-1} Delta``.
    """
    if gmm.n_components != 1:
        raise ValueError("exact anticorrelation holds for a single Gaussian only")
    if kernel.variant != "ou":
        raise ValueError("gaussian_error_pair assumes the OU kernel")
    exact = gmm_score(gmm_diffused(gmm, kernel, t), y)
    eps_T = estimate_score(bank, kernel, y, t, "tweedie").score - exact
    eps_C = estimate_score(bank, kernel, y, t, "tsi").score - exact
    return eps_T, eps_C


def variance_time_factors(t):
    """``(e^{2t}, e^{-2t} / (1 - e^{-2t})^2)`` for TSI and Tweedie respectively."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("time must be > 0")
    tsi = np.exp(2.0 * t)
    twd = np.exp(-2.0 * t) / np.expm1(-2.0 * t) ** 2
    if tsi.ndim == 0:
        return float(tsi), float(twd)
    return tsi, twd


def exact_score_fn(gmm, kernel):
    """``(y, t) -> grad log p_t(y)`` for a mixture under OU diffusion."""
    def score(y, t):
        return gmm_score(gmm_diffused(gmm, kernel, t), y)
    return score
