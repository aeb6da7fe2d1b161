"""Reverse-time OU sampling with a Heun predictor-corrector, and a MALA reference sampler."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .estimators import blended_objective, estimate_score

__all__ = [
    "TimeGrid",
    "SamplerConfig",
    "SamplerError",
    "SampleResult",
    "CountingScore",
    "make_time_grid",
    "heun_pc_step",
    "reverse_sample",
    "sample",
    "MalaResult",
    "mala_sample",
]

TIME_GRID_PRESETS = {
    "main": (5e-4, 1.5),
    "sweep": (3e-4, 2.5),
}


class SamplerError(RuntimeError):
    """A trajectory produced non-finite values."""

    def __init__(self, message, particle=None, step=None):
        super().__init__(message)
        self.particle = particle
        self.step = step


@dataclass(frozen=True)
class TimeGrid:
    """Strictly decreasing knots ``t_K = t_max > ... > t_0 = t_min > 0``."""

    knots: np.ndarray
    spacing: str = "log"

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        if k.ndim != 1 or k.size < 2:
            raise ValueError("a time grid needs at least two knots")
        if np.any(k <= 0) or np.any(np.diff(k) >= 0):
            raise ValueError("knots must be positive and strictly decreasing")
        object.__setattr__(self, "knots", k)

    @property
    def n_steps(self):
        return self.knots.size - 1

    @property
    def t_max(self):
        return float(self.knots[0])

    @property
    def t_min(self):
        return float(self.knots[-1])


def make_time_grid(t_min, t_max, K, spacing="log"):
    """``K + 1`` knots from ``t_max`` down to ``t_min``."""
    if not 0 < t_min < t_max:
        raise ValueError("need 0 < t_min < t_max")
    if K < 2:
        raise ValueError("need K >= 2")
    if spacing == "log":
        knots = np.geomspace(t_max, t_min, K + 1)
    elif spacing == "linear":
        knots = np.linspace(t_max, t_min, K + 1)
    else:
        raise ValueError(f"unknown spacing {spacing!r}")
    knots[0], knots[-1] = t_max, t_min
    return TimeGrid(knots, spacing)


class CountingScore:
    """Wraps a batched score function and counts per-point evaluations (NFE)."""

    def __init__(self, fn):
        self.fn = fn
        self.nfe = 0

    def __call__(self, y, t):
        self.nfe += np.atleast_2d(y).shape[0]
        return self.fn(y, t)


def _check_finite(arr, step):
    bad = ~np.all(np.isfinite(np.atleast_2d(arr)), axis=1)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise SamplerError(f"non-finite score for particle {idx} at step {step}",
                           particle=idx, step=step)


def heun_pc_step(score_fn, y, t_hi, t_lo, z, step=None):
    """One reverse step from ``t_hi`` to ``t_lo``.

    With ``f(y, t) = y + 2 s(y, t)`` and ``delta = t_hi - t_lo`` the step
    integrates the reverse OU dynamics backwards in time, so ``f`` enters
    with a plus sign.  The same Gaussian draw ``z`` is used by predictor
    and corrector.
    """
    delta = float(t_hi) - float(t_lo)
    if not (t_hi > t_lo > 0):
        raise ValueError("need t_hi > t_lo > 0")
    s_hi = score_fn(y, t_hi)
    _check_finite(s_hi, step)
    f_hi = y + 2.0 * s_hi
    noise = np.sqrt(2.0 * delta) * z
    y_pred = y + delta * f_hi + noise
    s_lo = score_fn(y_pred, t_lo)
    _check_finite(s_lo, step)
    f_lo = y_pred + 2.0 * s_lo
    return y + 0.5 * delta * (f_hi + f_lo) + noise


@dataclass
class SamplerConfig:
    n_particles: int = 1000
    grid: TimeGrid = field(default_factory=lambda: make_time_grid(5e-4, 1.5, 30))
    kind: str = "blend"
    weight_mode: str = "prior"
    seed: int = 0
    diagnostics: bool = False
    ess_floor: float | None = None

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("need at least one particle")


@dataclass
class SampleResult:
    samples: np.ndarray
    nfe: int
    diagnostics: list | None = None


def reverse_sample(score_fn, y_init, grid, rng):
    """Integrate the reverse OU SDE over ``grid`` from ``y_init``.

    ``score_fn(y, t)`` takes a ``(M, d)`` batch.  Returns the final particles.
    """
    y = np.array(y_init, dtype=float)
    knots = grid.knots
    for step in range(grid.n_steps):
        z = rng.standard_normal(y.shape)
        y = heun_pc_step(score_fn, y, knots[step], knots[step + 1], z, step=step)
    return y


def _check_blend_objective(est):
    """The plug-in objective at the chosen weight never exceeds either pure arm."""
    J = blended_objective(est.lam, est.sigma_T2, est.sigma_C2, est.cov)
    best = np.minimum(est.sigma_T2, est.sigma_C2)
    slack = 1e-9 * (np.abs(est.sigma_T2) + np.abs(est.sigma_C2) + 1.0)
    if np.any(J > best + slack):
        raise SamplerError("blend weight increased the plug-in variance")


def sample(bank, kernel, config):
    """Reverse-time sampling driven by a nonparametric score estimator.

    Particles start i.i.d. ``N(0, I)`` at ``t_max``; each step draws one
    fresh ``z`` per particle.  With ``config.diagnostics`` every score call
    appends ``{t, lambda, ess, ess_collapsed}`` arrays to the result and
    blend calls are checked against the plug-in objective.
    """
    if kernel.variant != "ou":
        raise ValueError("the reverse sampler integrates the OU reverse SDE")
    rng = np.random.default_rng(config.seed)
    diags = [] if config.diagnostics else None

    def fn(y, t):
        est = estimate_score(bank, kernel, y, t, config.kind, config.weight_mode,
                             ess_floor=config.ess_floor)
        if diags is not None:
            if config.kind == "blend":
                _check_blend_objective(est)
            diags.append({"t": float(t), "lambda": np.asarray(est.lam).copy(),
                          "ess": np.asarray(est.ess).copy(),
                          "ess_collapsed": np.asarray(est.ess_collapsed).copy()})
        return est.score

    counted = CountingScore(fn)
    y0 = rng.standard_normal((config.n_particles, bank.dim))
    out = reverse_sample(counted, y0, config.grid, rng)
    return SampleResult(out, counted.nfe, diags)


@dataclass
class MalaResult:
    chain: np.ndarray
    acceptance_rate: float
    step_size: float


def mala_sample(log_density_fn, grad_fn, init, n_iters, burn_in, step_size, rng,
                target_accept=None):
    """Metropolis-adjusted Langevin chains.

    ``init`` is ``(d,)`` for one chain or ``(C, d)`` for independent parallel
    chains; the callables must accept a ``(C, d)`` batch.  When
    ``target_accept`` is given the step size is adapted by Robbins-Monro
    during burn-in only and frozen afterwards.

    Returns
    -------
    MalaResult
        ``chain`` has shape ``(n_iters - burn_in, [C,] d)``; the acceptance
        rate is measured after burn-in.
    """
    if not step_size > 0:
        raise ValueError("step size must be positive")
    if not n_iters > burn_in >= 0:
        raise ValueError("need n_iters > burn_in >= 0")
    x0 = np.asarray(init, dtype=float)
    single = x0.ndim == 1
    x = np.atleast_2d(x0).copy()
    lp = np.asarray(log_density_fn(x), dtype=float).reshape(-1)
    g = np.atleast_2d(grad_fn(x))
    if not (np.all(np.isfinite(lp)) and np.all(np.isfinite(g))):
        raise ValueError("target is not finite at the initial state")
    h = float(step_size)
    keep = np.empty((n_iters - burn_in,) + x.shape)
    accepted = 0
    for it in range(n_iters):
        mean_fwd = x + 0.5 * h * g
        prop = mean_fwd + np.sqrt(h) * rng.standard_normal(x.shape)
        lp_p = np.asarray(log_density_fn(prop), dtype=float).reshape(-1)
        g_p = np.atleast_2d(grad_fn(prop))
        mean_bwd = prop + 0.5 * h * g_p
        log_q_fwd = -np.sum((prop - mean_fwd) ** 2, axis=1) / (2.0 * h)
        log_q_bwd = -np.sum((x - mean_bwd) ** 2, axis=1) / (2.0 * h)
        with np.errstate(invalid="ignore"):
            log_a = lp_p + log_q_bwd - lp - log_q_fwd
        log_a = np.where(np.isfinite(log_a), log_a, -np.inf)
        acc = np.log(rng.uniform(size=x.shape[0])) < log_a
        x = np.where(acc[:, None], prop, x)
        lp = np.where(acc, lp_p, lp)
        g = np.where(acc[:, None], g_p, g)
        if it < burn_in:
            if target_accept is not None:
                rate = np.mean(np.minimum(1.0, np.exp(np.minimum(log_a, 0.0))))
                h *= np.exp((rate - target_accept) / np.sqrt(it + 1.0))
        else:
            keep[it - burn_in] = x
            accepted += int(acc.sum())
    rate = accepted / ((n_iters - burn_in) * x.shape[0])
    chain = keep[:, 0, :] if single else keep
    return MalaResult(chain, rate, h)
