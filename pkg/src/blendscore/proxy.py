"""Data-only local Gaussian score proxies.

Each reference point (anchor) gets a kernel-weighted Gaussian fitted to its
``k`` nearest neighbours; the anchor score is ``Sigma_i^{-1} (mu_i - x_i)``.
Two covariance families are available: ``diag`` (per-coordinate variance
plus a ridge) and ``lrd`` (rank-``r`` principal part plus a diagonal tail,
inverted with the Woodbury identity).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .snis import ReferenceBank

__all__ = [
    "ProxyConfig",
    "ProxyModel",
    "knn_indices",
    "fit_proxy",
    "anchor_score",
    "anchor_scores",
    "woodbury_solve",
    "lowrank_logdet",
    "kmix_score",
    "bank_with_proxy",
]

_LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class ProxyConfig:
    kind: str = "diag"
    k: int = 16
    r: int | None = None
    ridge_gamma: float = 1e-2
    tail_floor: float = 1e-3
    score_mode: str = "anchor"
    k_mix: int = 8


@dataclass(frozen=True)
class ProxyModel:
    """Fitted per-anchor Gaussians.

    ``variances`` is ``(N, d)`` for ``diag`` (ridge already added) and the
    diagonal tail for ``lrd``; ``V`` ``(N, d, r)`` and ``lam`` ``(N, r)``
    are only set for ``lrd``.
    """

    anchors: np.ndarray
    mu: np.ndarray
    kind: str
    variances: np.ndarray
    k: int
    V: np.ndarray | None = None
    lam: np.ndarray | None = None

    @property
    def r(self):
        return 0 if self.V is None else self.V.shape[2]


def knn_indices(points, k, block=1024):
    """Exact ``k`` nearest neighbours of every point, excluding the point itself.

    Brute force with blocked distance evaluation; neighbours are sorted by
    distance with index order breaking ties.
    """
    X = np.asarray(points, dtype=float)
    n = X.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < N_ref, got k={k}, N_ref={n}")
    sq = np.sum(X**2, axis=1)
    out = np.empty((n, k), dtype=np.int64)
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        D = sq[lo:hi, None] + sq[None, :] - 2.0 * X[lo:hi] @ X.T
        D[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        part = np.argpartition(D, k - 1, axis=1)[:, :k]
        dsel = np.take_along_axis(D, part, axis=1)
        order = np.lexsort((part, dsel), axis=1)
        out[lo:hi] = np.take_along_axis(part, order, axis=1)
    return out


def _diameter(X):
    return float(np.linalg.norm(X.max(axis=0) - X.min(axis=0)))


def fit_proxy(points, k=16, kind="diag", r=None, ridge_gamma=1e-2, tail_floor=1e-3):
    """Fit local Gaussians at every anchor.

    Parameters
    ----------
    points : array_like, shape (N, d)
    k : int
        Neighbour count, ``2 <= k < N``.
    kind : {"diag", "lrd"}
    r : int, optional
        Rank for ``lrd``; ``min(8, d)`` by default and at most ``min(k, d)``.
    ridge_gamma : float
        ``diag`` ridge ``tau_i = gamma * mean_l v_{i,l}``.
    tail_floor : float
        ``lrd`` tail variances are clipped below at ``tail_floor`` times the
        mean retained eigenvalue.
    """
    X = np.asarray(points, dtype=float)
    n, d = X.shape
    if k < 2:
        raise ValueError("k must be >= 2")
    if kind not in ("diag", "lrd"):
        raise ValueError(f"unknown proxy kind {kind!r}")
    if kind == "lrd":
        r = min(8, d) if r is None else int(r)
        if not 1 <= r <= min(k, d):
            raise ValueError("rank must satisfy 1 <= r <= min(k, d)")
    nbr = knn_indices(X, k)
    diff = X[nbr] - X[:, None, :]  # (n, k, d)
    dist2 = np.sum(diff**2, axis=2)
    eps = np.finfo(float).eps
    scale = max(_diameter(X), 1.0)
    h2 = np.maximum(dist2.max(axis=1), (eps * scale) ** 2)
    logk = -dist2 / (2.0 * h2[:, None])
    w = np.exp(logk - logk.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    mu = np.einsum("nk,nkd->nd", w, X[nbr])
    resid = X[nbr] - mu[:, None, :]
    # absolute floor keeping every variance strictly positive on degenerate clouds
    var_floor = (np.sqrt(eps) * scale) ** 2

    if kind == "diag":
        v = np.einsum("nk,nkd->nd", w, resid**2)
        tau = ridge_gamma * v.mean(axis=1, keepdims=True)
        var = np.maximum(v + tau, var_floor)
        return ProxyModel(X, mu, "diag", var, k)

    M = np.sqrt(w)[:, :, None] * resid
    C = np.einsum("nki,nkj->nij", M, M)
    evals, evecs = np.linalg.eigh(C)
    lam = np.clip(evals[:, ::-1][:, :r], 0.0, None)
    V = evecs[:, :, ::-1][:, :, :r]
    lowrank_diag = np.einsum("ndr,nr->nd", V**2, lam)
    tail = np.diagonal(C, axis1=1, axis2=2) - lowrank_diag
    floor = np.maximum(tail_floor * lam.mean(axis=1, keepdims=True), var_floor)
    tail = np.maximum(tail, floor)
    return ProxyModel(X, mu, "lrd", tail, k, V=V, lam=lam)


def woodbury_solve(D, V, lam, rhs):
    """Solve ``(diag(D) + V diag(lam) V^T) x = rhs``.

    Written with ``Lambda^{1/2}`` so that zero eigenvalues need no inverse:
    ``D^{-1} - D^{-1} U (I + U^T D^{-1} U)^{-1} U^T D^{-1}`` with ``U = V Lambda^{1/2}``.
    Supports a leading batch axis on every argument.
    """
    D = np.asarray(D, dtype=float)
    U = np.asarray(V, dtype=float) * np.sqrt(np.asarray(lam, dtype=float))[..., None, :]
    rhs = np.asarray(rhs, dtype=float)
    Dinv_rhs = rhs / D
    DinvU = U / D[..., :, None]
    r = U.shape[-1]
    cap = np.eye(r) + np.swapaxes(U, -1, -2) @ DinvU
    inner = np.linalg.solve(cap, (np.swapaxes(U, -1, -2) @ Dinv_rhs[..., None]))[..., 0]
    return Dinv_rhs - (DinvU @ inner[..., None])[..., 0]


def lowrank_logdet(D, V, lam):
    """``log det(diag(D) + V diag(lam) V^T)`` via the matrix-determinant lemma."""
    D = np.asarray(D, dtype=float)
    U = np.asarray(V, dtype=float) * np.sqrt(np.asarray(lam, dtype=float))[..., None, :]
    cap = np.eye(U.shape[-1]) + np.swapaxes(U, -1, -2) @ (U / D[..., :, None])
    return np.sum(np.log(D), axis=-1) + np.linalg.slogdet(cap)[1]


def _precision_apply(model, idx, vec):
    if model.kind == "diag":
        return vec / model.variances[idx]
    return woodbury_solve(model.variances[idx], model.V[idx], model.lam[idx], vec)


def anchor_score(model, i):
    """``Sigma_i^{-1} (mu_i - x_i)`` for anchor ``i``."""
    if not 0 <= i < model.anchors.shape[0]:
        raise IndexError(f"anchor index {i} out of range")
    return _precision_apply(model, i, model.mu[i] - model.anchors[i])


def anchor_scores(model):
    idx = np.arange(model.anchors.shape[0])
    return _precision_apply(model, idx, model.mu - model.anchors)


def _component_logdet(model, idx):
    if model.kind == "diag":
        return np.sum(np.log(model.variances[idx]), axis=-1)
    return lowrank_logdet(model.variances[idx], model.V[idx], model.lam[idx])


def kmix_score(model, x, k_mix):
    """Score of the mixture of the ``k_mix`` anchor Gaussians nearest to ``x``.

    Component priors are uniform.  ``x`` may be ``(d,)`` or ``(M, d)``.
    """
    n = model.anchors.shape[0]
    if not 1 <= k_mix <= n:
        raise ValueError("need 1 <= k_mix <= N_ref")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    d = X.shape[1]
    D2 = (np.sum(X**2, axis=1)[:, None] + np.sum(model.anchors**2, axis=1)[None, :]
          - 2.0 * X @ model.anchors.T)
    if k_mix < n:
        sel = np.argpartition(D2, k_mix - 1, axis=1)[:, :k_mix]
    else:
        sel = np.broadcast_to(np.arange(n), (X.shape[0], n))
    delta = model.mu[sel] - X[:, None, :]  # (M, k_mix, d)
    prec_delta = _precision_apply(model, sel, delta)
    quad = np.sum(delta * prec_delta, axis=2)
    logdet = _component_logdet(model, sel)
    ell = -np.log(k_mix) - 0.5 * quad - 0.5 * (d * _LOG2PI + logdet)
    wt = np.exp(ell - logsumexp(ell, axis=1, keepdims=True))
    out = np.einsum("mk,mkd->md", wt, prec_delta)
    return out[0] if single else out


def bank_with_proxy(points, proxy_config=None, log_likelihoods=None, return_model=False):
    """Reference bank whose score column holds proxy scores.

    With ``return_model`` the fitted :class:`ProxyModel` is returned too.
    """
    cfg = proxy_config or ProxyConfig()
    if cfg.score_mode not in ("anchor", "kmix"):
        raise ValueError(f"unknown proxy score mode {cfg.score_mode!r}")
    model = fit_proxy(points, cfg.k, cfg.kind, cfg.r, cfg.ridge_gamma, cfg.tail_floor)
    if cfg.score_mode == "anchor":
        scores = anchor_scores(model)
    else:
        scores = kmix_score(model, model.anchors, cfg.k_mix)
    bank = ReferenceBank(model.anchors, scores, log_likelihoods)
    return (bank, model) if return_model else bank
