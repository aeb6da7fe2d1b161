"""Analytic targets: Gaussian mixtures, linear-Gaussian likelihoods and their
closed-form diffused and posterior laws."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import logsumexp

from .kernels import AffineKernel, noise_variance, phi

__all__ = [
    "GaussianMixture",
    "LinearGaussianLikelihood",
    "SpectralGmmConfig",
    "gaussian",
    "gmm_log_density",
    "gmm_score",
    "gmm_sample",
    "gmm_diffused",
    "conjugate_posterior",
    "posterior_score_exact",
    "spectral_gmm",
    "helix_gmm",
    "signal_scale",
    "gmm_to_json",
    "gmm_from_json",
]

_LOG2PI = np.log(2.0 * np.pi)


class GaussianMixture:
    """Finite Gaussian mixture with cached Cholesky factors.

    Parameters
    ----------
    weights : array_like, shape (K,)
    means : array_like, shape (K, d)
    covariances : array_like, shape (K, d) or (K, d, d)
        Diagonal variances or full SPD matrices.
    """

    def __init__(self, weights, means, covariances):
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        mu = np.atleast_2d(np.asarray(means, dtype=float))
        cov = np.asarray(covariances, dtype=float)
        K, d = mu.shape
        if w.shape != (K,):
            raise ValueError("weights and means disagree on component count")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector")
        if cov.shape == (K, d):
            if np.any(cov <= 0):
                raise ValueError("diagonal variances must be positive")
            self.diagonal = True
            cov = np.einsum("ki,ij->kij", cov, np.eye(d))
        elif cov.shape == (K, d, d):
            self.diagonal = False
        else:
            raise ValueError(f"covariances must have shape {(K, d)} or {(K, d, d)}")
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariances must be symmetric positive definite") from exc
        self.weights = w
        self.means = mu
        self.covariances = cov
        self.chol = chol
        self.precisions = np.array([cho_solve((L, True), np.eye(d)) for L in chol])
        self.log_dets = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def component_log_densities(self, x):
        """Per-component ``log w_k + log N(x; mu_k, Sigma_k)``, shape (n, K)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got {x.shape[-1]}")
        out = np.empty((x.shape[0], self.n_components))
        for k in range(self.n_components):
            z = solve_triangular(self.chol[k], (x - self.means[k]).T, lower=True)
            out[:, k] = -0.5 * np.sum(z**2, axis=0)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return out + logw - 0.5 * (self.dim * _LOG2PI + self.log_dets)


def gaussian(mean, cov):
    """Single-component mixture."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0:
        cov = cov * np.ones_like(mean)
    return GaussianMixture([1.0], mean[None], cov[None])


def _as_batch(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != d:
        raise ValueError(f"expected points of dimension {d}, got {x.shape[-1]}")
    return x, single


def gmm_log_density(gmm, x):
    """Mixture log-density via log-sum-exp; scalar for a single point."""
    x, single = _as_batch(x, gmm.dim)
    val = logsumexp(gmm.component_log_densities(x), axis=1)
    return float(val[0]) if single else val


def gmm_score(gmm, x):
    """Gradient of the mixture log-density."""
    x, single = _as_batch(x, gmm.dim)
    logc = gmm.component_log_densities(x)
    resp = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
    diff = gmm.means[None, :, :] - x[:, None, :]  # (n, K, d)
    comp = np.einsum("kij,nkj->nki", gmm.precisions, diff)
    out = np.einsum("nk,nki->ni", resp, comp)
    return out[0] if single else out


def gmm_sample(gmm, n, rng):
    """Draw ``n`` i.i.d. points: categorical component, then Cholesky-colored noise."""
    comp = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    z = rng.standard_normal((n, gmm.dim))
    return gmm.means[comp] + np.einsum("nij,nj->ni", gmm.chol[comp], z)


def gmm_diffused(gmm, kernel, t):
    """Law of ``X_t`` when ``X_0 ~ gmm`` under an OU kernel."""
    if kernel.variant != "ou":
        raise ValueError("gmm_diffused supports the OU kernel only")
    if t < 0:
        raise ValueError("time must be >= 0")
    if t == 0:
        return gmm
    a = phi(kernel, t)
    var = noise_variance(kernel, t)
    cov = a**2 * gmm.covariances + var * np.eye(gmm.dim)
    return GaussianMixture(gmm.weights, a * gmm.means, cov)


@dataclass(frozen=True)
class LinearGaussianLikelihood:
    """``y_obs | x ~ N(A x, sigma^2 I)``."""

    A: np.ndarray
    sigma: float
    y_obs: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        y = np.atleast_1d(np.asarray(self.y_obs, dtype=float))
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if y.shape != (A.shape[0],):
            raise ValueError("y_obs does not match the rows of A")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "y_obs", y)
        object.__setattr__(self, "sigma", float(self.sigma))

    def log_likelihood(self, x):
        x = np.atleast_2d(x)
        r = self.y_obs - x @ self.A.T
        m = self.A.shape[0]
        return (-0.5 * np.sum(r**2, axis=1) / self.sigma**2
                - 0.5 * m * (_LOG2PI + 2.0 * np.log(self.sigma)))

    def grad_log_likelihood(self, x):
        x = np.atleast_2d(x)
        return (self.y_obs - x @ self.A.T) @ self.A / self.sigma**2


def conjugate_posterior(gmm_prior, lik):
    """Exact mixture posterior for a linear-Gaussian likelihood."""
    A, s2, y = lik.A, lik.sigma**2, lik.y_obs
    m = A.shape[0]
    AtA = A.T @ A / s2
    Aty = A.T @ y / s2
    means, covs, logev = [], [], []
    for k in range(gmm_prior.n_components):
        prec = gmm_prior.precisions[k] + AtA
        try:
            L = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"posterior precision of component {k} is singular") from exc
        cov = cho_solve((L, True), np.eye(gmm_prior.dim))
        mean = cov @ (gmm_prior.precisions[k] @ gmm_prior.means[k] + Aty)
        # marginal evidence N(y; A mu_k, A S_k A^T + s2 I)
        S = A @ gmm_prior.covariances[k] @ A.T + s2 * np.eye(m)
        Ls = np.linalg.cholesky(S)
        r = solve_triangular(Ls, y - A @ gmm_prior.means[k], lower=True)
        logev.append(-0.5 * r @ r - np.log(np.diag(Ls)).sum() - 0.5 * m * _LOG2PI)
        means.append(mean)
        covs.append(cov)
    with np.errstate(divide="ignore"):
        logw = np.log(gmm_prior.weights) + np.array(logev)
    w = np.exp(logw - logsumexp(logw))
    w /= w.sum()
    return GaussianMixture(w, np.array(means), np.array(covs))


def posterior_score_exact(gmm_prior, lik, x):
    """Prior score plus the likelihood gradient ``A^T (y - A x) / sigma^2``."""
    x = np.asarray(x, dtype=float)
    g = lik.grad_log_likelihood(x)
    return gmm_score(gmm_prior, x) + (g[0] if x.ndim == 1 else g)


@dataclass(frozen=True)
class SpectralGmmConfig:
    d: int
    K_mix: int = 64
    radius: float = 2.0
    eigen_decay: float = 2.0
    seed: int = 0
    scale: float = 1.0

    def __post_init__(self):
        if self.d < 1 or self.K_mix < 1 or not self.radius > 0 or not self.scale > 0:
            raise ValueError("invalid spectral GMM configuration")


def spectral_gmm(config):
    """Equal-weight mixture with means on a sphere and power-law diagonal covariance."""
    rng = np.random.default_rng(config.seed)
    g = rng.standard_normal((config.K_mix, config.d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    means = config.radius * g
    eig = config.scale * np.arange(1, config.d + 1, dtype=float) ** (-config.eigen_decay)
    cov = np.tile(eig, (config.K_mix, 1))
    return GaussianMixture(np.full(config.K_mix, 1.0 / config.K_mix), means, cov)


def helix_gmm(d=9, K=64, radius=1.0, pitch=0.25, turns=2.0, tube_scale=0.02,
              eigen_decay=2.0, seed=0):
    """Mixture whose means trace a 3D helix embedded in ``R^d`` by a random isometry.

    Components are elongated along the local helix tangent
    (variance ``tube_scale``) and thinner in the remaining directions, with
    a power-law spectrum.
    """
    if d < 3:
        raise ValueError("helix embedding needs d >= 3")
    rng = np.random.default_rng(seed)
    theta = np.linspace(0.0, 2.0 * np.pi * turns, K)
    curve = np.stack([radius * np.cos(theta), radius * np.sin(theta),
                      pitch * theta - pitch * theta.mean()], axis=1)
    tangent = np.stack([-radius * np.sin(theta), radius * np.cos(theta),
                        np.full(K, pitch)], axis=1)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    embed = Q[:, :3]
    means = curve @ embed.T
    tang = tangent @ embed.T
    spec = tube_scale * np.arange(1, d + 1, dtype=float) ** (-eigen_decay)
    covs = []
    for k in range(K):
        # orthonormal frame whose first axis is the tangent
        B, _ = np.linalg.qr(np.column_stack([tang[k], Q[:, 1:]]))
        covs.append((B * spec) @ B.T)
    return GaussianMixture(np.full(K, 1.0 / K), means, np.array(covs))


def signal_scale(gmm_prior, A, n_mc, rng):
    """Monte Carlo estimate of ``sqrt(E ||A x||^2)`` under the prior."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    x = gmm_sample(gmm_prior, n_mc, rng)
    Ax = x @ np.atleast_2d(A).T
    return float(np.sqrt(np.mean(np.sum(Ax**2, axis=1))))


def gmm_to_json(gmm, **extra):
    doc = {"weights": gmm.weights.tolist(), "means": gmm.means.tolist()}
    if gmm.diagonal:
        doc["covariance"] = {"kind": "diag",
                             "values": np.diagonal(gmm.covariances, axis1=1, axis2=2).tolist()}
    else:
        doc["covariance"] = {"kind": "full", "values": gmm.covariances.tolist()}
    doc.update(extra)
    return json.dumps(doc)


def gmm_from_json(text):
    doc = json.loads(text) if isinstance(text, str) else text
    return GaussianMixture(doc["weights"], doc["means"], doc["covariance"]["values"])
