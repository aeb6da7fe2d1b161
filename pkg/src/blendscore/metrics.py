"""Sample-quality and score-error diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estimators import ESS_FRACTION, ScoreEstimate, estimate_score
from .kernels import forward_sample

__all__ = [
    "KernelSpec",
    "rbf",
    "imq",
    "median_heuristic",
    "mmd2",
    "mmd",
    "imq_kernel_terms",
    "ksd2",
    "NoValidTimesError",
    "score_rmse",
    "error_correlation_curve",
    "rmse_alpha",
    "forward_error",
    "mmd_floor_ratio",
    "regime_mmd_bandwidth",
    "ksd_bandwidth_grid",
]


@dataclass(frozen=True)
class KernelSpec:
    """``family="rbf"`` averages over ``bandwidths``; ``family="imq"`` is ``(c^2 + r^2)^beta``."""

    family: str = "rbf"
    bandwidths: tuple = (1.0,)
    c: float = 1.0
    beta: float = -0.5

    def __post_init__(self):
        if self.family == "rbf":
            bw = tuple(float(s) for s in np.atleast_1d(self.bandwidths))
            if not bw or any(s <= 0 for s in bw):
                raise ValueError("RBF bandwidths must be positive")
            object.__setattr__(self, "bandwidths", bw)
        elif self.family == "imq":
            if not self.c > 0:
                raise ValueError("IMQ needs c > 0")
            if not self.beta < 0:
                raise ValueError("IMQ needs beta < 0")
        else:
            raise ValueError(f"unknown kernel family {self.family!r}")


def rbf(*bandwidths):
    return KernelSpec("rbf", tuple(bandwidths))


def imq(c=1.0, beta=-0.5):
    return KernelSpec("imq", c=c, beta=beta)


def regime_mmd_bandwidth(d):
    """Gaussian-kernel bandwidth ``0.5 * sqrt(d / 2)`` used for the regime sweep."""
    return 0.5 * np.sqrt(d / 2.0)


def ksd_bandwidth_grid(n=10):
    return tuple(np.linspace(0.1, 1.0, n))


def _sqdist(X, Y):
    D = np.sum(X**2, 1)[:, None] + np.sum(Y**2, 1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(D, 0.0)


def median_heuristic(X, Y=None, multipliers=(0.5, 1.0, 2.0), subsample=1024, rng=None):
    """RBF spec with bandwidths ``multiplier * median pairwise distance``."""
    Z = np.atleast_2d(X) if Y is None else np.vstack([X, Y])
    if Z.shape[0] > subsample:
        rng = rng or np.random.default_rng(0)
        Z = Z[rng.choice(Z.shape[0], subsample, replace=False)]
    D = np.sqrt(_sqdist(Z, Z))
    med = float(np.median(D[np.triu_indices_from(D, k=1)]))
    if med <= 0:
        raise ValueError("median pairwise distance is zero")
    return KernelSpec("rbf", tuple(m * med for m in multipliers))


def _gram(X, Y, kspec):
    D = _sqdist(X, Y)
    if kspec.family == "rbf":
        return np.mean([np.exp(-D / (2.0 * s**2)) for s in kspec.bandwidths], axis=0)
    return (kspec.c**2 + D) ** kspec.beta


def mmd2(X, Y, kspec):
    """Biased (V-statistic) squared MMD; averaged over bandwidths for multiscale RBF."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X is Y or (X.shape == Y.shape and np.array_equal(X, Y)):
        return 0.0
    val = _gram(X, X, kspec).mean() + _gram(Y, Y, kspec).mean() - 2.0 * _gram(X, Y, kspec).mean()
    return float(max(val, 0.0))


def mmd(X, Y, kspec):
    return float(np.sqrt(mmd2(X, Y, kspec)))


def imq_kernel_terms(x, xp, c, beta):
    """IMQ kernel value, ``grad_x k``, ``grad_x' k`` and ``tr(grad_x grad_x' k)``.

    ``x`` is ``(n, d)`` and ``xp`` is ``(m, d)``; gradients are ``(n, m, d)``.
    """
    diff = x[:, None, :] - xp[None, :, :]
    r2 = np.sum(diff**2, axis=2)
    base = c**2 + r2
    k = base**beta
    gx = 2.0 * beta * (base ** (beta - 1.0))[..., None] * diff
    d = x.shape[1]
    tr = -2.0 * beta * base ** (beta - 2.0) * (d * base + 2.0 * (beta - 1.0) * r2)
    return k, gx, -gx, tr


def _rbf_kernel_terms(x, xp, s):
    diff = x[:, None, :] - xp[None, :, :]
    r2 = np.sum(diff**2, axis=2)
    k = np.exp(-r2 / (2.0 * s**2))
    gx = -(k / s**2)[..., None] * diff
    d = x.shape[1]
    tr = k * (d / s**2 - r2 / s**4)
    return k, gx, -gx, tr


def ksd2(X, score_fn, kspec=None, unbiased=False, block=512):
    """Squared kernel Stein discrepancy of samples ``X`` against a target score.

    V-statistic by default; ``unbiased`` drops the diagonal (U-statistic).
    """
    kspec = kspec or imq()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    S = np.atleast_2d(score_fn(X))
    n = X.shape[0]
    total = 0.0
    for lo in range(0, n, block):
        Xi, Si = X[lo:lo + block], S[lo:lo + block]
        if kspec.family == "imq":
            U = _stein_pair(Xi, Si, X, S, imq_kernel_terms(Xi, X, kspec.c, kspec.beta))
        else:
            U = np.mean([_stein_pair(Xi, Si, X, S, _rbf_kernel_terms(Xi, X, s))
                         for s in kspec.bandwidths], axis=0)
        if unbiased:
            rows = np.arange(Xi.shape[0])
            U[rows, lo + rows] = 0.0
        total += U.sum()
    if unbiased:
        if n < 2:
            raise ValueError("U-statistic needs at least two samples")
        return float(total / (n * (n - 1)))
    return float(total / n**2)


def _stein_pair(Xi, Si, X, S, terms):
    k, gx, gxp, tr = terms
    return (k * (Si @ S.T)
            + np.einsum("id,ijd->ij", Si, gxp)
            + np.einsum("jd,ijd->ij", S, gx)
            + tr)


class NoValidTimesError(RuntimeError):
    """Every time knot was removed by the ESS filter."""


def _unpack(est):
    if isinstance(est, ScoreEstimate):
        return np.atleast_2d(est.score), np.atleast_1d(est.ess)
    return np.atleast_2d(est), None


@dataclass
class TimeCurve:
    """Per-knot values plus ESS bookkeeping; ``kept`` marks knots surviving the filter."""

    t: np.ndarray
    value: np.ndarray
    ess_mean: np.ndarray
    kept: np.ndarray
    n_kept_queries: np.ndarray = field(default=None)

    def rows(self):
        return [(float(a), float(b), float(c), bool(k))
                for a, b, c, k in zip(self.t, self.value, self.ess_mean, self.kept)]


def _ess_mask(ess, floor):
    if ess is None or floor is None:
        return None
    return ess >= floor


def score_rmse(estimator_fn, exact_fn, target_sampler, kernel, times, n_eval, rng,
               ess_floor=None, min_kept=1, return_curve=False):
    """Time-averaged score RMSE along a set of knots.

    Parameters
    ----------
    estimator_fn : callable ``(y, t) -> ScoreEstimate | ndarray``
        Returning a :class:`ScoreEstimate` enables ESS filtering.
    exact_fn : callable ``(y, t) -> ndarray``
    target_sampler : callable ``(n, rng) -> (n, d)`` drawing from ``p_0``
    times : iterable of float
    ess_floor : float, optional
        Queries with ESS below this value are dropped; a knot is kept when at
        least ``min_kept`` queries survive.

    Raises
    ------
    NoValidTimesError
        If no knot survives the filter.
    """
    times = np.asarray(getattr(times, "knots", times), dtype=float)
    mse, ess_mean, kept, nk = [], [], [], []
    for t in times:
        x0 = target_sampler(n_eval, rng)
        y = forward_sample(kernel, x0, t, rng.standard_normal(x0.shape))
        s_hat, ess = _unpack(estimator_fn(y, t))
        err = np.sum((s_hat - exact_fn(y, t)) ** 2, axis=1)
        mask = _ess_mask(ess, ess_floor)
        if mask is not None:
            err = err[mask]
        ok = err.size >= min_kept
        mse.append(err.mean() if ok else np.nan)
        ess_mean.append(np.nan if ess is None else float(np.mean(ess)))
        kept.append(ok)
        nk.append(err.size)
    kept = np.array(kept)
    if not kept.any():
        raise NoValidTimesError("no valid time points after ESS filtering")
    value = float(np.sqrt(np.nanmean(np.array(mse)[kept])))
    if return_curve:
        return value, TimeCurve(times, np.sqrt(np.array(mse)), np.array(ess_mean), kept, np.array(nk))
    return value


def error_correlation_curve(bank_factory, kernel, target, times, n_queries, n_batches, rng,
                            ess_fraction=ESS_FRACTION, min_kept=10, exact_fn=None):
    """Correlation of Tweedie and TSI errors against the exact score, per knot.

    For each of ``n_batches`` independent banks, queries ``y ~ p_t`` are drawn
    fresh; queries whose ESS falls below ``ess_fraction * N_ref`` are dropped.
    ``rho(t) = E<e_T, e_C> / sqrt(E|e_T|^2 E|e_C|^2)`` pooled over the kept
    queries of every batch.
    """
    from .estimators import exact_score_fn
    from .targets import gmm_sample

    exact_fn = exact_fn or exact_score_fn(target, kernel)
    times = np.asarray(getattr(times, "knots", times), dtype=float)
    sums = np.zeros((times.size, 3))
    ess_sum = np.zeros(times.size)
    n_seen = np.zeros(times.size)
    n_kept = np.zeros(times.size, dtype=int)
    for _ in range(n_batches):
        bank = bank_factory(rng)
        floor = ess_fraction * bank.size
        for j, t in enumerate(times):
            x0 = gmm_sample(target, n_queries, rng)
            y = forward_sample(kernel, x0, t, rng.standard_normal(x0.shape))
            s = exact_fn(y, t)
            twd = estimate_score(bank, kernel, y, t, "tweedie")
            tsi = estimate_score(bank, kernel, y, t, "tsi")
            eT, eC = twd.score - s, tsi.score - s
            keep = twd.ess >= floor
            sums[j] += [np.sum(eT[keep] * eC[keep]), np.sum(eT[keep] ** 2), np.sum(eC[keep] ** 2)]
            ess_sum[j] += twd.ess.sum()
            n_seen[j] += twd.ess.size
            n_kept[j] += int(keep.sum())
    kept = n_kept >= min_kept
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = sums[:, 0] / np.sqrt(sums[:, 1] * sums[:, 2])
    rho = np.where(kept, rho, np.nan)
    if not kept.any():
        raise NoValidTimesError("no valid time points after ESS filtering")
    return TimeCurve(times, rho, ess_sum / n_seen, kept, n_kept)


def correlation_from_errors(eps_T, eps_C):
    """Pooled ``E<e_T, e_C> / sqrt(E|e_T|^2 E|e_C|^2)`` over rows."""
    eps_T = np.atleast_2d(eps_T)
    eps_C = np.atleast_2d(eps_C)
    return float(np.sum(eps_T * eps_C) / np.sqrt(np.sum(eps_T**2) * np.sum(eps_C**2)))


def rmse_alpha(samples, alpha_star):
    """``||mean(samples) - alpha_star|| / sqrt(q)``."""
    samples = np.atleast_2d(samples)
    alpha_star = np.asarray(alpha_star, dtype=float)
    return float(np.linalg.norm(samples.mean(axis=0) - alpha_star) / np.sqrt(alpha_star.size))


def forward_error(F_fn, alpha_bar, y_clean):
    """Relative data misfit ``||F(alpha_bar) - y_clean|| / ||y_clean||``."""
    y_clean = np.asarray(y_clean, dtype=float)
    nrm = np.linalg.norm(y_clean)
    if nrm == 0:
        raise ValueError("clean observation has zero norm")
    return float(np.linalg.norm(np.asarray(F_fn(alpha_bar)) - y_clean) / nrm)


def mmd_floor_ratio(generated, exact_a, exact_b, kspec):
    """``log(MMD(generated, exact_a) / MMD(exact_a, exact_b))``."""
    floor = mmd(exact_a, exact_b, kspec)
    if floor <= 0:
        raise ValueError("MMD floor is zero")
    return float(np.log(mmd(generated, exact_a, kspec) / floor))
