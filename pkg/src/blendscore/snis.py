"""Self-normalized importance weights over a fixed reference bank.

Every routine here accepts either a single query point ``y`` of shape
``(d,)`` or a batch ``(M, d)``.  Batched weights are ``(M, N_ref)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import mean_offset, noise_variance, phi

__all__ = [
    "ReferenceBank",
    "WeightSet",
    "DegenerateWeightsError",
    "normalize_log_weights",
    "prior_weights",
    "posterior_weights",
    "ess",
    "snis_mean",
    "plugin_moments",
    "median_of_means",
    "batch_partition",
]


class DegenerateWeightsError(ArithmeticError):
    """All importance weights underflowed, or the plug-in moments are undefined."""


@dataclass(frozen=True)
class ReferenceBank:
    """Reference particles ``x0^i`` with optional clean scores and log-likelihoods.

    For posterior sampling the ``scores`` column is expected to hold the
    tilted scores ``s0 + grad log L`` (see :func:`tilt_bank`).
    """

    points: np.ndarray
    scores: np.ndarray | None = None
    log_likelihoods: np.ndarray | None = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] < 1:
            raise ValueError("reference bank needs at least one particle")
        object.__setattr__(self, "points", pts)
        if self.scores is not None:
            sc = np.atleast_2d(np.asarray(self.scores, dtype=float))
            if sc.shape != pts.shape:
                raise ValueError(f"scores shape {sc.shape} != points shape {pts.shape}")
            object.__setattr__(self, "scores", sc)
        if self.log_likelihoods is not None:
            ll = np.asarray(self.log_likelihoods, dtype=float).reshape(-1)
            if ll.shape != (pts.shape[0],):
                raise ValueError("log_likelihoods must have one entry per particle")
            object.__setattr__(self, "log_likelihoods", ll)

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def sq_norms(self):
        """Cached squared row norms of ``points``."""
        try:
            return self._sq_norms
        except AttributeError:
            val = np.sum(self.points**2, axis=1)
            object.__setattr__(self, "_sq_norms", val)
            return val

    def subset(self, idx):
        return ReferenceBank(
            self.points[idx],
            None if self.scores is None else self.scores[idx],
            None if self.log_likelihoods is None else self.log_likelihoods[idx],
        )


def tilt_bank(bank, log_likelihood, grad_log_likelihood=None):
    """Attach likelihood values (and, when given, add likelihood gradients to the scores)."""
    ll = np.asarray(log_likelihood(bank.points), dtype=float)
    scores = bank.scores
    if grad_log_likelihood is not None:
        if scores is None:
            raise ValueError("tilting scores requires a bank with prior scores")
        scores = scores + grad_log_likelihood(bank.points)
    return ReferenceBank(bank.points, scores, ll)


@dataclass(frozen=True)
class WeightSet:
    normalized_weights: np.ndarray
    log_normalizer: np.ndarray | float
    ess: np.ndarray | float


def normalize_log_weights(logw):
    """Max-shifted normalization along the last axis.

    Returns ``(weights, log_normalizer)``.  Raises
    :class:`DegenerateWeightsError` if a row has no finite log-weight.
    """
    logw = np.asarray(logw, dtype=float)
    a = np.max(logw, axis=-1, keepdims=True)
    if not np.all(np.isfinite(a)):
        raise DegenerateWeightsError("every importance weight underflowed")
    w = np.subtract(logw, a)
    np.exp(w, out=w)
    s = np.sum(w, axis=-1, keepdims=True)
    w /= s
    return w, (a + np.log(s))[..., 0]


def _make(logw, single):
    w, lz = normalize_log_weights(logw)
    e = 1.0 / np.sum(w**2, axis=-1)
    if single:
        return WeightSet(w[0], float(lz[0]), float(e[0]))
    return WeightSet(w, lz, e)


def _log_prior_weights(bank, kernel, y, t):
    """``(M, N)`` log transition densities, expanded so the cross term is one GEMM."""
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    Y = np.atleast_2d(y)
    if Y.shape[1] != bank.dim or kernel.dim != bank.dim:
        raise ValueError("dimension mismatch between query, bank and kernel")
    if not float(t) > 0:
        raise ValueError(f"time must be > 0, got {t}")
    f = phi(kernel, t)
    var = noise_variance(kernel, t)
    Yc = Y - mean_offset(kernel, t)
    # -|y - f x|^2 / (2 var), built in place on the GEMM output
    logw = Yc @ bank.points.T
    logw *= 2.0 * f
    logw -= f**2 * bank.sq_norms[None, :]
    logw -= np.sum(Yc**2, axis=1)[:, None]
    np.minimum(logw, 0.0, out=logw)
    logw *= 0.5 / var
    logw -= 0.5 * bank.dim * np.log(2.0 * np.pi * var)
    return logw, single


def prior_weights(bank, kernel, y, t):
    """Weights ``w_i proportional to p_{t|0}(y | x0^i)``."""
    logw, single = _log_prior_weights(bank, kernel, y, t)
    return _make(logw, single)


def _shifted_loglik(bank):
    if bank.log_likelihoods is None:
        raise ValueError("posterior weights need bank.log_likelihoods")
    ll = bank.log_likelihoods
    top = np.max(ll)
    if not np.isfinite(top):
        raise DegenerateWeightsError("likelihood vanishes on every reference particle")
    # shifting by the max keeps a constant likelihood exactly neutral
    return ll - top


def posterior_weights(bank, kernel, y, t):
    """Likelihood-tilted weights ``alpha_i proportional to p_{t|0}(y | x0^i) L(x0^i)``."""
    logw, single = _log_prior_weights(bank, kernel, y, t)
    return _make(logw + _shifted_loglik(bank), single)


def ess(weights):
    """Effective sample size ``1 / sum w_i^2``."""
    w = weights.normalized_weights if isinstance(weights, WeightSet) else np.asarray(weights)
    return 1.0 / np.sum(w**2, axis=-1)


def snis_mean(weights, values):
    """``sum_i w_i v_i``; ``values`` is ``(N_ref, d)`` or ``(M, N_ref, d)``."""
    w = weights.normalized_weights if isinstance(weights, WeightSet) else np.asarray(weights)
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        return w @ values
    return np.einsum("...n,...nd->...d", w, values)


def _weighted_second_moments(w, a, b, a_sq=None, b_sq=None, ab=None):
    """Batched plug-in numerators ``sum w^2 <da, da>`` etc. and ``sum w^2``.

    ``w`` is (M, N); ``a`` and ``b`` are (N, d).  Centered sums are expanded
    into matrix products so no (M, N, d) temporary is built; the row norms
    ``a_sq``, ``b_sq`` and inner products ``ab`` may be passed precomputed.
    """
    a_sq = np.sum(a * a, axis=1) if a_sq is None else a_sq
    b_sq = np.sum(b * b, axis=1) if b_sq is None else b_sq
    ab = np.sum(a * b, axis=1) if ab is None else ab
    d = a.shape[1]
    ab_cols = np.hstack([a, b])
    w2 = w * w
    s2 = w2.sum(axis=-1)
    first = w @ ab_cols
    second = w2 @ np.column_stack([ab_cols, a_sq, b_sq, ab])
    a_bar, b_bar = first[:, :d], first[:, d:]
    w2a, w2b = second[:, :d], second[:, d:2 * d]
    num_c = second[:, 2 * d] - 2.0 * np.sum(a_bar * w2a, 1) + s2 * np.sum(a_bar**2, 1)
    num_t = second[:, 2 * d + 1] - 2.0 * np.sum(b_bar * w2b, 1) + s2 * np.sum(b_bar**2, 1)
    num_x = (second[:, 2 * d + 2] - np.sum(a_bar * w2b, 1) - np.sum(b_bar * w2a, 1)
             + s2 * np.sum(a_bar * b_bar, 1))
    num_c = np.maximum(num_c, 0.0)
    num_t = np.maximum(num_t, 0.0)
    # cancellation can break Cauchy-Schwarz when one weight dominates
    bound = np.sqrt(num_c * num_t)
    num_x = np.clip(num_x, -bound, bound)
    return num_c, num_t, num_x, s2, a_bar, b_bar


def plugin_moments(weights, a, b):
    """SNIS plug-in ``(sigma_C^2, sigma_T^2, cov)`` for TSI signals ``a`` and Tweedie signals ``b``.

    ``cov`` is the raw weighted inner product, not a correlation.
    """
    w = weights.normalized_weights if isinstance(weights, WeightSet) else np.asarray(weights)
    single = w.ndim == 1
    W = np.atleast_2d(w)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    num_c, num_t, num_x, s2, _, _ = _weighted_second_moments(W, a, b)
    denom = 1.0 - s2
    if np.any(denom <= 1e-15):
        raise DegenerateWeightsError("plug-in moments undefined: ESS collapsed to 1")
    out = (num_c / denom, num_t / denom, num_x / denom)
    if single:
        return tuple(float(v[0]) for v in out)
    return out


def median_of_means(batch_estimates):
    """Coordinate-wise median over the leading (batch) axis."""
    est = np.asarray(batch_estimates, dtype=float)
    if est.shape[0] < 1:
        raise ValueError("need at least one batch")
    return np.median(est, axis=0)


def batch_partition(n, n_batches, rng):
    """Shuffle ``range(n)`` once, then cut into ``n_batches`` contiguous blocks."""
    if not 1 <= n_batches <= n:
        raise ValueError("need 1 <= n_batches <= n")
    perm = rng.permutation(n)
    return np.array_split(perm, n_batches)
