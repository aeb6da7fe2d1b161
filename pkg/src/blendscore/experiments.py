"""Configuration-driven experiment runners.

Each runner splits its study into independent cells (grid point x seed),
evaluates them (optionally in a process pool) and assembles a
:class:`RunResult` whose tables are written as CSV next to a JSON manifest.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from . import io
from .estimators import (
    ESS_FRACTION,
    estimate_score,
    exact_score_fn,
    variance_time_factors,
)
from .kernels import forward_sample, ou_kernel
from .metrics import (
    NoValidTimesError,
    error_correlation_curve,
    forward_error,
    imq,
    ksd2,
    mmd,
    rbf,
    regime_mmd_bandwidth,
    rmse_alpha,
    score_rmse,
)
from .presets import TARGET_PRESETS, get_target, get_time_grid
from .proxy import ProxyConfig, bank_with_proxy
from .sampler import TIME_GRID_PRESETS, SamplerConfig, mala_sample, sample
from .snis import ReferenceBank, tilt_bank
from .targets import (
    LinearGaussianLikelihood,
    conjugate_posterior,
    gmm_log_density,
    gmm_sample,
    gmm_score,
    signal_scale,
)

__all__ = [
    "EXPERIMENT_KINDS",
    "SCHEMA_VERSION",
    "METRICS_HEADER",
    "CURVES_HEADER",
    "ExperimentConfig",
    "RunResult",
    "default_config",
    "load_config",
    "run_experiment",
    "write_result",
]

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRICS_HEADER = ("experiment", "method", "n_ref", "d", "sigma_rel", "seed", "metric", "value", "status")
CURVES_HEADER = ("curve", "seed", "t", "value", "ess_mean", "kept")

EXPERIMENT_KINDS = (
    "prior_sampling",
    "posterior_sampling",
    "correlation_curve",
    "variance_profile",
    "regime_sweep",
    "rmse_vs_nref",
)
PRIOR_METHODS = ("tweedie", "tsi", "blend", "blend_proxy")
POSTERIOR_METHODS = ("tweedie", "blend", "mala")

# desk-scale defaults; PAPER_SCALE holds the larger budgets
DEFAULTS = {
    "prior_sampling": dict(
        target={"preset": "helix9d"}, grid={"preset": "main", "K": 30},
        estimators=list(PRIOR_METHODS), metrics=["mmd", "ksd", "score_rmse"],
        n_ref=[250, 1000], seeds=[0, 1],
        params={"n_particles": 500, "n_eval": 100, "n_exact": 500}),
    "rmse_vs_nref": dict(
        target={"preset": "helix9d"}, grid={"preset": "main", "K": 30},
        estimators=list(PRIOR_METHODS), metrics=["score_rmse"],
        n_ref=[500, 2000], seeds=[0, 1, 2],
        params={"n_eval": 500}),
    "regime_sweep": dict(
        target={"preset": "spectral"}, grid={"preset": "sweep", "K": 30},
        estimators=["tweedie", "blend"], metrics=["log_mmd_ratio"],
        n_ref=[2000], seeds=[0, 1, 2],
        params={"dims": [3, 6], "sigma_rel": list(np.geomspace(0.025, 1.0, 8)),
                "n_particles": 500, "prior_seed": 0, "n_signal": 20000}),
    "correlation_curve": dict(
        target={"preset": "bimodal2d"}, grid={"preset": "main", "K": 30},
        estimators=["exact", "proxy"], metrics=["rho"],
        n_ref=[2000], seeds=[0, 1],
        params={"n_queries": 200, "n_batches": 5}),
    "variance_profile": dict(
        target={"preset": "gaussian3d"}, grid={"preset": "main", "K": 30},
        estimators=["tweedie", "tsi"], metrics=["error_variance"],
        n_ref=[256], seeds=[0, 1],
        params={"t_sub": [0.05, 0.1, 0.2, 0.35, 0.5, 1.0], "n_queries": 200,
                "n_banks": 20, "n_table": 400}),
    "posterior_sampling": dict(
        target={"preset": "spectral", "d": 3}, grid={"preset": "sweep", "K": 30},
        estimators=list(POSTERIOR_METHODS), metrics=["mmd_exact", "mmd_mala", "rmse_alpha", "forward_error"],
        n_ref=[2000], seeds=[0, 1, 2],
        params={"sigma_rel": [0.2], "n_particles": 500, "prior_seed": 0, "n_signal": 20000,
                "mala_iters": 600, "mala_burn_in": 300, "mala_step": 0.05}),
}

PAPER_SCALE = {
    "prior_sampling": dict(n_ref=[500, 1000, 2000, 4000, 8000], seeds=list(range(10)),
                           params={"n_particles": 2000, "n_eval": 500, "n_exact": 2000}),
    "rmse_vs_nref": dict(n_ref=[500, 1000, 2000, 4000, 8000], seeds=list(range(10)),
                         params={"n_eval": 500}),
    "regime_sweep": dict(n_ref=[2000], seeds=list(range(5)),
                         params={"dims": [3, 6, 12, 24],
                                 "sigma_rel": list(np.geomspace(0.025, 1.0, 24)),
                                 "n_particles": 2000}),
    "correlation_curve": dict(seeds=list(range(10)), params={"n_queries": 500, "n_batches": 20}),
    "variance_profile": dict(seeds=list(range(10)), params={"n_banks": 100}),
    "posterior_sampling": dict(n_ref=[4000], seeds=list(range(10)),
                               params={"sigma_rel": [0.05, 0.2, 0.5], "n_particles": 2000,
                                       "mala_iters": 2000, "mala_burn_in": 1000}),
}


@dataclass
class ExperimentConfig:
    """One experiment: kind, target preset, time grid, methods, budgets and seeds."""

    experiment: str
    target: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    estimators: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    n_ref: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    proxy: dict = field(default_factory=dict)
    out: str | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.target.get("preset") not in TARGET_PRESETS:
            raise ValueError(f"unknown target preset {self.target.get('preset')!r}")
        if self.grid.get("preset", "main") not in TIME_GRID_PRESETS:
            raise ValueError(f"unknown time-grid preset {self.grid.get('preset')!r}")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if not self.n_ref or any(int(n) < 1 for n in self.n_ref):
            raise ValueError("n_ref schedule must hold positive integers")
        self.seeds = [int(s) for s in self.seeds]
        self.n_ref = [int(n) for n in self.n_ref]

    def to_dict(self):
        return _plain(asdict(self))

    def hash(self):
        """SHA-256 of the canonical JSON form, excluding the output directory."""
        doc = self.to_dict()
        doc.pop("out", None)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def target_mixture(self, **extra):
        kw = {k: v for k, v in self.target.items() if k != "preset"}
        kw.update(extra)
        return get_target(self.target["preset"], **kw)

    def time_grid(self):
        g = self.grid
        return get_time_grid(g.get("preset", "main"), int(g.get("K", 30)), g.get("spacing", "log"))

    def proxy_config(self):
        return ProxyConfig(**self.proxy)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def default_config(experiment, paper_scale=False, **overrides):
    """Defaults for ``experiment`` with optional paper-scale budgets and overrides."""
    if experiment not in DEFAULTS:
        raise ValueError(f"unknown experiment {experiment!r}")
    doc = copy.deepcopy(DEFAULTS[experiment])
    if paper_scale:
        doc = _merge(doc, PAPER_SCALE[experiment])
    doc = _merge(doc, overrides)
    return ExperimentConfig(experiment=experiment, **doc)


def load_config(source, paper_scale=False):
    """Read a JSON config document (path or mapping) on top of the defaults."""
    if isinstance(source, (str, os.PathLike)):
        doc = json.loads(Path(source).read_text())
    else:
        doc = dict(source)
    kind = doc.pop("experiment", None)
    if kind is None:
        raise ValueError("config needs an 'experiment' field")
    return default_config(kind, paper_scale=paper_scale, **doc)


@dataclass
class RunResult:
    """Metric table, per-t curves and counters for one run."""

    config: ExperimentConfig
    config_hash: str
    metrics: list = field(default_factory=list)
    curves: list = field(default_factory=list)
    wall_clock: float = 0.0
    nfe: int = 0
    errors: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def complete(self):
        return not self.errors

    def table(self, metric=None, method=None):
        return [r for r in self.metrics
                if (metric is None or r["metric"] == metric) and (method is None or r["method"] == method)]


def _row(experiment, method, metric, value, n_ref="", d="", sigma_rel="", seed="", status="ok"):
    return {"experiment": experiment, "method": method, "n_ref": n_ref, "d": d,
            "sigma_rel": sigma_rel, "seed": seed, "metric": metric,
            "value": float(value), "status": status}


def _cell_rng(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def _exact_bank(gmm, n, rng):
    x = gmm_sample(gmm, n, rng)
    return ReferenceBank(x, gmm_score(gmm, x))


def _proxy_k(cfg, n):
    return min(int(cfg.proxy.get("k", ProxyConfig.k)), n - 1)


def _proxy_bank(cfg, points, log_likelihoods=None):
    """Proxy bank, or ``None`` when the bank is too small to fit neighbours."""
    n = points.shape[0]
    if n < 3:
        return None
    pc = ProxyConfig(**{**cfg.proxy, "k": _proxy_k(cfg, n)})
    return bank_with_proxy(points, pc, log_likelihoods)


# --- cells ------------------------------------------------------------------

def _prior_cell(cfg, seed, n_ref):
    gmm = cfg.target_mixture()
    d = gmm.dim
    kernel = ou_kernel(d)
    grid = cfg.time_grid()
    p = cfg.params
    rng = _cell_rng(seed, n_ref, 1)
    bank = _exact_bank(gmm, n_ref, rng)
    pbank = _proxy_bank(cfg, bank.points) if "blend_proxy" in cfg.estimators else None
    exact = gmm_sample(gmm, int(p["n_exact"]), rng)
    exact_fn = exact_score_fn(gmm, kernel)
    kspec = rbf(regime_mmd_bandwidth(d))
    rows, nfe, samples = [], 0, {}
    sampler_seed = int(rng.integers(2**31))
    eval_seed = int(rng.integers(2**31))
    for method in cfg.estimators:
        b = pbank if method == "blend_proxy" else bank
        kind = "blend" if method == "blend_proxy" else method
        base = dict(n_ref=n_ref, d=d, seed=seed)
        if b is None:
            rows += [_row(cfg.experiment, method, m, np.nan, status="invalid", **base) for m in cfg.metrics]
            continue
        if {"mmd", "ksd"} & set(cfg.metrics):
            sc = SamplerConfig(n_particles=int(p["n_particles"]), grid=grid, kind=kind,
                               seed=sampler_seed, diagnostics=True)
            res = sample(b, kernel, sc)
            nfe += res.nfe
            samples[method] = res.samples
            frac = float(np.mean(np.concatenate([r["ess_collapsed"] for r in res.diagnostics])))
            rows.append(_row(cfg.experiment, method, "ess_collapsed_frac", frac, **base))
            if "mmd" in cfg.metrics:
                rows.append(_row(cfg.experiment, method, "mmd", mmd(res.samples, exact, kspec), **base))
            if "ksd" in cfg.metrics:
                val = ksd2(res.samples, lambda x: gmm_score(gmm, x), imq())
                rows.append(_row(cfg.experiment, method, "ksd", np.sqrt(max(val, 0.0)), **base))
        if "score_rmse" in cfg.metrics:
            rows.append(_rmse_row(cfg, method, b, kernel, kind, gmm, exact_fn, grid, eval_seed, base))
    return {"rows": rows, "curves": [], "nfe": nfe, "samples": samples}


def _rmse_row(cfg, method, bank, kernel, kind, gmm, exact_fn, grid, eval_seed, base):
    floor = ESS_FRACTION * bank.size
    try:
        val = score_rmse(lambda y, t: estimate_score(bank, kernel, y, t, kind), exact_fn,
                         lambda n, r: gmm_sample(gmm, n, r), kernel, grid,
                         int(cfg.params["n_eval"]), np.random.default_rng(eval_seed),
                         ess_floor=floor)
        return _row(cfg.experiment, method, "score_rmse", val, **base)
    except NoValidTimesError:
        return _row(cfg.experiment, method, "score_rmse", np.nan, status="dropped_ess", **base)


def _rmse_cell(cfg, seed, n_ref):
    gmm = cfg.target_mixture()
    d = gmm.dim
    kernel = ou_kernel(d)
    grid = cfg.time_grid()
    rng = _cell_rng(seed, n_ref, 2)
    bank = _exact_bank(gmm, n_ref, rng)
    pbank = _proxy_bank(cfg, bank.points) if "blend_proxy" in cfg.estimators else None
    exact_fn = exact_score_fn(gmm, kernel)
    # every estimator sees the same evaluation queries
    eval_seed = int(rng.integers(2**31))
    rows = []
    for method in cfg.estimators:
        b = pbank if method == "blend_proxy" else bank
        base = dict(n_ref=n_ref, d=d, seed=seed)
        if b is None:
            rows.append(_row(cfg.experiment, method, "score_rmse", np.nan, status="invalid", **base))
            continue
        kind = "blend" if method == "blend_proxy" else method
        rows.append(_rmse_row(cfg, method, b, kernel, kind, gmm, exact_fn, grid, eval_seed, base))
    return {"rows": rows, "curves": [], "nfe": 0}


def _inverse_problem(cfg, d, sigma_rel, seed, key):
    """Prior, likelihood, truth and exact posterior for one sweep/posterior cell."""
    p = cfg.params
    gmm = cfg.target_mixture(d=d, seed=int(p.get("prior_seed", 0)))
    A = np.diag(1.0 / np.arange(1, d + 1))
    scale = signal_scale(gmm, A, int(p.get("n_signal", 20000)),
                         np.random.default_rng(int(p.get("prior_seed", 0)) + 1))
    rng = _cell_rng(seed, *key)
    x_star = gmm_sample(gmm, 1, rng)[0]
    sigma = sigma_rel * scale
    y_clean = A @ x_star
    lik = LinearGaussianLikelihood(A, sigma, y_clean + sigma * rng.standard_normal(d))
    return gmm, lik, x_star, y_clean, conjugate_posterior(gmm, lik), rng


def _posterior_bank(gmm, lik, n_ref, rng):
    return tilt_bank(_exact_bank(gmm, n_ref, rng), lik.log_likelihood, lik.grad_log_likelihood)


def _sweep_cell(cfg, seed, d, i_sig):
    sigma_rel = float(cfg.params["sigma_rel"][i_sig])
    n_ref = cfg.n_ref[0]
    M = int(cfg.params["n_particles"])
    gmm, lik, _, _, post, rng = _inverse_problem(cfg, d, sigma_rel, seed, (d, i_sig, 3))
    bank = _posterior_bank(gmm, lik, n_ref, rng)
    exact_a = gmm_sample(post, M, rng)
    exact_b = gmm_sample(post, M, rng)
    kspec = rbf(regime_mmd_bandwidth(d))
    floor = mmd(exact_a, exact_b, kspec)
    base = dict(n_ref=n_ref, d=d, sigma_rel=sigma_rel, seed=seed)
    rows = [_row(cfg.experiment, "exact", "mmd_floor", floor, **base)]
    sampler_seed = int(rng.integers(2**31))
    nfe = 0
    for method in cfg.estimators:
        sc = SamplerConfig(n_particles=M, grid=cfg.time_grid(), kind=method,
                           weight_mode="posterior", seed=sampler_seed)
        res = sample(bank, ou_kernel(d), sc)
        nfe += res.nfe
        m = mmd(res.samples, exact_a, kspec)
        if floor > 0:
            rows.append(_row(cfg.experiment, method, "log_mmd_ratio", np.log(m / floor), **base))
        else:
            rows.append(_row(cfg.experiment, method, "log_mmd_ratio", np.nan, status="invalid", **base))
    return {"rows": rows, "curves": [], "nfe": nfe}


def _posterior_cell(cfg, seed, i_sig):
    p = cfg.params
    sigma_rel = float(p["sigma_rel"][i_sig])
    n_ref = cfg.n_ref[0]
    M = int(p["n_particles"])
    d = int(cfg.target.get("d", 3))
    gmm, lik, x_star, y_clean, post, rng = _inverse_problem(cfg, d, sigma_rel, seed, (i_sig, 4))
    bank = _posterior_bank(gmm, lik, n_ref, rng)
    exact_a = gmm_sample(post, M, rng)
    exact_b = gmm_sample(post, M, rng)
    kspec = rbf(regime_mmd_bandwidth(d))
    floor = mmd(exact_a, exact_b, kspec)
    base = dict(n_ref=n_ref, d=d, sigma_rel=sigma_rel, seed=seed)
    rows = [_row(cfg.experiment, "exact", "mmd_floor", floor, **base)]
    sampler_seed = int(rng.integers(2**31))
    draws, nfe = {}, 0

    def logpost(x):
        return gmm_log_density(gmm, x) + lik.log_likelihood(x)

    def gradpost(x):
        return gmm_score(gmm, x) + lik.grad_log_likelihood(x)

    if "mala" in cfg.estimators:
        init = gmm_sample(gmm, M, rng)
        res = mala_sample(logpost, gradpost, init, int(p["mala_iters"]), int(p["mala_burn_in"]),
                          float(p["mala_step"]), rng, target_accept=0.57)
        draws["mala"] = res.chain[-1]
        rows.append(_row(cfg.experiment, "mala", "acceptance_rate", res.acceptance_rate, **base))
    for method in cfg.estimators:
        if method == "mala":
            continue
        sc = SamplerConfig(n_particles=M, grid=cfg.time_grid(), kind=method,
                           weight_mode="posterior", seed=sampler_seed)
        res = sample(bank, ou_kernel(d), sc)
        nfe += res.nfe
        draws[method] = res.samples
    for method in cfg.estimators:
        X = draws[method]
        vals = {"mmd_exact": mmd(X, exact_a, kspec),
                "rmse_alpha": rmse_alpha(X, x_star),
                "forward_error": forward_error(lambda a: lik.A @ a, X.mean(axis=0), y_clean)}
        if "mala" in draws and method != "mala":
            vals["mmd_mala"] = mmd(X, draws["mala"], kspec)
        for m in cfg.metrics:
            if m in vals:
                rows.append(_row(cfg.experiment, method, m, vals[m], **base))
    return {"rows": rows, "curves": [], "nfe": nfe, "samples": draws}


def _correlation_cell(cfg, seed):
    gmm = cfg.target_mixture()
    kernel = ou_kernel(gmm.dim)
    grid = cfg.time_grid()
    n_ref = cfg.n_ref[0]
    p = cfg.params
    rows, curves = [], []
    for variant in cfg.estimators:
        if variant == "exact":
            def factory(r):
                return _exact_bank(gmm, n_ref, r)
        elif variant == "proxy":
            def factory(r):
                return _proxy_bank(cfg, gmm_sample(gmm, n_ref, r))
        else:
            raise ValueError(f"unknown correlation variant {variant!r}")
        rng = _cell_rng(seed, n_ref, 5)
        base = dict(n_ref=n_ref, d=gmm.dim, seed=seed)
        try:
            curve = error_correlation_curve(factory, kernel, gmm, grid, int(p["n_queries"]),
                                            int(p["n_batches"]), rng)
        except NoValidTimesError:
            rows.append(_row(cfg.experiment, variant, "rho_min_t", np.nan, status="dropped_ess", **base))
            continue
        for t, v, e, k in curve.rows():
            curves.append({"curve": f"rho_{variant}", "seed": seed, "t": t, "value": v,
                           "ess_mean": e, "kept": int(k)})
        first = int(np.flatnonzero(curve.kept)[-1])
        rows.append(_row(cfg.experiment, variant, "rho_min_t", curve.value[first], **base))
        rows.append(_row(cfg.experiment, variant, "t_min_kept", curve.t[first], **base))
    return {"rows": rows, "curves": curves, "nfe": 0}


def _variance_cell(cfg, seed):
    gmm = cfg.target_mixture()
    d = gmm.dim
    kernel = ou_kernel(d)
    n_ref = cfg.n_ref[0]
    p = cfg.params
    exact_fn = exact_score_fn(gmm, kernel)
    rng = _cell_rng(seed, n_ref, 6)
    rows, curves = [], []
    base = dict(n_ref=n_ref, d=d, seed=seed)
    for t in p["t_sub"]:
        err = {k: [] for k in cfg.estimators}
        ess = []
        for _ in range(int(p["n_banks"])):
            bank = _exact_bank(gmm, n_ref, rng)
            x0 = gmm_sample(gmm, int(p["n_queries"]), rng)
            y = forward_sample(kernel, x0, t, rng.standard_normal(x0.shape))
            s = exact_fn(y, t)
            for kind in cfg.estimators:
                est = estimate_score(bank, kernel, y, t, kind)
                err[kind].append(np.sum((est.score - s) ** 2, axis=1))
                ess.append(est.ess)
        for kind in cfg.estimators:
            v = float(np.mean(np.concatenate(err[kind])))
            curves.append({"curve": f"error_variance_{kind}", "seed": seed, "t": float(t),
                           "value": v, "ess_mean": float(np.mean(np.concatenate(ess))), "kept": 1})
            rows.append(_row(cfg.experiment, kind, f"error_variance_t{t:g}", v, **base))
    return {"rows": rows, "curves": curves, "nfe": 0}


def _variance_table(cfg):
    """Deterministic factor table and crossover time."""
    n = int(cfg.params["n_table"])
    ts = np.geomspace(1e-3, 2.0, n)
    tsi, twd = variance_time_factors(ts)
    curves = []
    for name, vals in (("factor_tsi", tsi), ("factor_tweedie", twd)):
        curves += [{"curve": name, "seed": "", "t": float(t), "value": float(v),
                    "ess_mean": "", "kept": 1} for t, v in zip(ts, vals)]
    root = brentq(lambda t: np.log(variance_time_factors(t)[0]) - np.log(variance_time_factors(t)[1]),
                  1e-3, 2.0, xtol=1e-14)
    grid_star = float(ts[np.argmin(np.abs(np.log(tsi) - np.log(twd)))])
    rows = [_row(cfg.experiment, "closed_form", "crossover_t", root),
            _row(cfg.experiment, "closed_form", "crossover_t_grid", grid_star),
            _row(cfg.experiment, "closed_form", "crossover_factor", variance_time_factors(root)[0])]
    return rows, curves


def _cells(cfg):
    p = cfg.params
    k = cfg.experiment
    if k == "prior_sampling":
        return [(_prior_cell, (s, n)) for n in cfg.n_ref for s in cfg.seeds]
    if k == "rmse_vs_nref":
        return [(_rmse_cell, (s, n)) for n in cfg.n_ref for s in cfg.seeds]
    if k == "regime_sweep":
        return [(_sweep_cell, (s, int(d), i)) for d in p["dims"]
                for i in range(len(p["sigma_rel"])) for s in cfg.seeds]
    if k == "posterior_sampling":
        return [(_posterior_cell, (s, i)) for i in range(len(p["sigma_rel"])) for s in cfg.seeds]
    if k == "correlation_curve":
        return [(_correlation_cell, (s,)) for s in cfg.seeds]
    return [(_variance_cell, (s,)) for s in cfg.seeds]


def _run_one(fn, cfg, args):
    t0 = time.perf_counter()
    try:
        out = fn(cfg, *args)
        out["error"] = None
    except Exception as exc:  # recorded per cell; the run is then marked incomplete
        log.exception("cell %s%s failed", fn.__name__, args)
        out = {"rows": [], "curves": [], "nfe": 0, "error": f"{fn.__name__}{args}: {exc!r}"}
    out["args"] = args
    out["seconds"] = time.perf_counter() - t0
    return out


def run_experiment(cfg, jobs=1, keep_samples=False):
    """Run every cell of ``cfg`` and assemble a :class:`RunResult`.

    Cells are independent and seeded from ``(seed, cell key)`` only, so the
    result does not depend on ``jobs`` or completion order.
    """
    t0 = time.perf_counter()
    cells = _cells(cfg)
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(_run_one, fn, cfg, args) for fn, args in cells]
            outs = [f.result() for f in futs]
    else:
        outs = [_run_one(fn, cfg, args) for fn, args in cells]
    result = RunResult(cfg, cfg.hash())
    if cfg.experiment == "variance_profile":
        rows, curves = _variance_table(cfg)
        result.metrics += rows
        result.curves += curves
    samples = {}
    for out in outs:
        result.metrics += out["rows"]
        result.curves += out["curves"]
        result.nfe += out["nfe"]
        if out["error"]:
            result.errors.append(out["error"])
        if keep_samples and out.get("samples"):
            samples[out["args"]] = out["samples"]
    result.wall_clock = time.perf_counter() - t0
    result.extra["cell_seconds"] = [o["seconds"] for o in outs]
    if keep_samples:
        result.extra["samples"] = samples
    return result


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(r[h]) for h in header) + "\n")


def write_result(result, out_dir, plots=True):
    """Write ``metrics.csv``, ``curves.csv``, ``manifest.json`` and optional figures.

    Returns the list of written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    _write_csv(out / "metrics.csv", METRICS_HEADER, result.metrics)
    written.append(out / "metrics.csv")
    if result.curves:
        _write_csv(out / "curves.csv", CURVES_HEADER, result.curves)
        written.append(out / "curves.csv")
    for args, draws in result.extra.get("samples", {}).items():
        for method, X in draws.items():
            tag = "_".join(str(a) for a in args)
            path = out / "samples" / f"{method}_{tag}.bin"
            path.parent.mkdir(exist_ok=True)
            io.write_samples(path, X, provenance={"config_hash": result.config_hash,
                                                  "method": method, "cell": list(args)})
            written.append(path)
    if plots:
        from .plotting import render_figures
        written += render_figures(result, out)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": result.config_hash,
        "config": result.config.to_dict(),
        "complete": result.complete,
        "errors": result.errors,
        "wall_clock_seconds": result.wall_clock,
        "nfe": result.nfe,
        "n_cells": len(result.extra.get("cell_seconds", [])),
        "files": sorted(str(p.relative_to(out)) for p in written),
    }
    (out / "manifest.json").write_text(json.dumps(_plain(manifest), indent=2))
    return written + [out / "manifest.json"]
