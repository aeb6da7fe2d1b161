"""Closed-form transition laws of affine forward diffusions.

Three isotropic variants are supported:

``ou``  dX = -X dt + sqrt(2) dW
``vp``  dX = -beta(t)/2 X dt + sqrt(beta(t)) dW
``ve``  dX = g(t) dW

For each of them the transition kernel is ``N(phi(t) x0 + m(t), sigma_t^2 I)``
with ``m(t) = 0``.  Schedules for ``vp``/``ve`` are piecewise constant and
given as ``((start_time, value), ...)`` with the first start at 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AffineKernel",
    "ou_kernel",
    "vp_kernel",
    "ve_kernel",
    "phi",
    "noise_variance",
    "mean_offset",
    "forward_sample",
    "log_transition_density",
    "tsi_prefactor",
]

VARIANTS = ("ou", "vp", "ve")


def _check_schedule(schedule):
    sched = tuple((float(s), float(v)) for s, v in schedule)
    if not sched:
        raise ValueError("schedule must contain at least one segment")
    if sched[0][0] != 0.0:
        raise ValueError("schedule must start at t=0")
    starts = [s for s, _ in sched]
    if any(b <= a for a, b in zip(starts, starts[1:])):
        raise ValueError("schedule breakpoints must be strictly increasing")
    if any(v < 0 for _, v in sched):
        raise ValueError("schedule values must be nonnegative")
    return sched


def _integrate(schedule, t, power=1):
    """Exact integral of ``value**power`` over [0, t] for a piecewise-constant schedule."""
    total = 0.0
    for k, (start, value) in enumerate(schedule):
        if t <= start:
            break
        stop = schedule[k + 1][0] if k + 1 < len(schedule) else np.inf
        total += (min(t, stop) - start) * value**power
    return total


@dataclass(frozen=True)
class AffineKernel:
    """Isotropic affine diffusion kernel.

    Parameters
    ----------
    variant : {"ou", "vp", "ve"}
    dim : int
        Ambient dimension ``d``.
    schedule : tuple of (start, value)
        ``beta`` segments for ``vp``, ``g`` segments for ``ve``; ignored for ``ou``.
    """

    variant: str = "ou"
    dim: int = 1
    schedule: tuple = field(default=((0.0, 1.0),))

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown kernel variant {self.variant!r}")
        if int(self.dim) < 1:
            raise ValueError("dim must be a positive integer")
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "schedule", _check_schedule(self.schedule))

    def to_dict(self):
        return {"variant": self.variant, "dim": self.dim,
                "schedule": [list(seg) for seg in self.schedule]}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc.get("variant", "ou"), doc["dim"],
                   tuple(tuple(s) for s in doc.get("schedule", [[0.0, 1.0]])))


def ou_kernel(dim):
    return AffineKernel("ou", dim)


def vp_kernel(dim, beta=((0.0, 1.0),)):
    return AffineKernel("vp", dim, tuple(beta))


def ve_kernel(dim, g=((0.0, 1.0),)):
    return AffineKernel("ve", dim, tuple(g))


def _check_time(t, strict=False):
    t = float(t)
    if not np.isfinite(t):
        raise ValueError("time must be finite")
    if strict and t <= 0:
        raise ValueError(f"time must be > 0, got {t}")
    if t < 0:
        raise ValueError(f"time must be >= 0, got {t}")
    return t


def phi(kernel, t):
    """Scalar fundamental-matrix factor ``Phi(t, 0)``."""
    t = _check_time(t)
    if kernel.variant == "ou":
        return float(np.exp(-t))
    if kernel.variant == "vp":
        return float(np.exp(-0.5 * _integrate(kernel.schedule, t)))
    return 1.0


def noise_variance(kernel, t):
    """Scalar transition variance ``sigma_t^2``."""
    t = _check_time(t)
    if kernel.variant == "ou":
        return float(-np.expm1(-2.0 * t))
    if kernel.variant == "vp":
        return float(-np.expm1(-_integrate(kernel.schedule, t)))
    return float(_integrate(kernel.schedule, t, power=2))


def mean_offset(kernel, t):
    """Drift offset ``m(t)``; zero for every built-in variant."""
    _check_time(t)
    return np.zeros(kernel.dim)


def tsi_prefactor(kernel, t):
    """``Phi(t, 0)^{-T}`` as a scalar."""
    f = phi(kernel, t)
    if f == 0.0:
        raise ArithmeticError("fundamental matrix is singular")
    return 1.0 / f


def forward_sample(kernel, x0, t, noise):
    """Push ``x0`` through the forward kernel with the given standard-normal ``noise``."""
    x0 = np.asarray(x0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if x0.shape[-1] != kernel.dim or noise.shape[-1] != kernel.dim:
        raise ValueError(
            f"dimension mismatch: kernel d={kernel.dim}, x0 {x0.shape}, noise {noise.shape}")
    return phi(kernel, t) * x0 + mean_offset(kernel, t) + np.sqrt(noise_variance(kernel, t)) * noise


def log_transition_density(kernel, y, x0, t):
    """Normalized Gaussian log-density ``log p_{t|0}(y | x0)``.

    Broadcasts over leading axes of ``y`` and ``x0``.
    """
    t = _check_time(t, strict=True)
    var = noise_variance(kernel, t)
    y = np.asarray(y, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if y.shape[-1] != kernel.dim or x0.shape[-1] != kernel.dim:
        raise ValueError("dimension mismatch")
    resid = y - phi(kernel, t) * x0 - mean_offset(kernel, t)
    sq = np.sum(resid**2, axis=-1)
    return -0.5 * sq / var - 0.5 * kernel.dim * np.log(2.0 * np.pi * var)
