"""Named target and time-grid presets."""

from __future__ import annotations

import numpy as np

from .sampler import TIME_GRID_PRESETS, make_time_grid
from .targets import GaussianMixture, SpectralGmmConfig, gaussian, helix_gmm, spectral_gmm

__all__ = ["TARGET_PRESETS", "get_target", "get_time_grid", "bimodal2d", "helix9d", "list_presets"]


def bimodal2d(separation=1.5, std=0.3):
    """Two equal-weight isotropic components at ``(+-separation, 0)``."""
    means = np.array([[-separation, 0.0], [separation, 0.0]])
    return GaussianMixture([0.5, 0.5], means, np.full((2, 2), std**2))


def _gaussian(d=3):
    return gaussian(np.zeros(d), np.eye(d))


def _spectral(d=3, seed=0, **kw):
    return spectral_gmm(SpectralGmmConfig(d=d, seed=seed, **kw))


def helix9d(seed=0, **kw):
    """Nine-dimensional spectral mixture: 64 components, radius 2, ``i^-2`` spectrum."""
    return _spectral(d=9, seed=seed, **kw)


TARGET_PRESETS = {
    "gaussian3d": _gaussian,
    "bimodal2d": bimodal2d,
    "helix9d": helix9d,
    "helix_curve": helix_gmm,
    "spectral": _spectral,
}


def list_presets():
    return sorted(TARGET_PRESETS)


def get_target(name, **overrides):
    """Build a preset mixture; keyword overrides go to the preset constructor."""
    try:
        factory = TARGET_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown target preset {name!r}; choose from {list_presets()}") from None
    return factory(**overrides)


def get_time_grid(name="main", K=30, spacing="log"):
    try:
        t_min, t_max = TIME_GRID_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown time-grid preset {name!r}") from None
    return make_time_grid(t_min, t_max, K, spacing)
