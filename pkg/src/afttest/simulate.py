"""Synthetic AFT data and Monte Carlo size/power of the supremum tests.

Covariates are i.i.d. Uniform(0, 1).  Log failure times follow

    log T = -g(Z) + eps

with ``g(Z) = Z beta0`` under the null, ``Z beta0 + a Z_q^2`` under the
quadratic alternative and ``eta + a log(1 + eta^2)`` with ``eta = Z beta0``
under the link alternative.  Censoring times are Uniform(0, c) with ``c``
calibrated by bisection to a target censoring rate on a common set of pilot
draws.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .data import CONTINUOUS, SurvivalDataset
from .errors import AftTestError
from .estimation import fit
from .gof import (
    MULTIPLIERS,
    PLUGIN_MODES,
    TestType,
    build_design,
    resample_many,
    standardize,
    supremum_pvalues,
)

log = logging.getLogger(__name__)

ERROR_DISTS = ("normal", "extreme-value")
MISSPECS = ("none", "quadratic", "log-link")
PILOT_DRAWS = 10_000


@dataclass(frozen=True)
class SimConfig:
    n: int = 100
    beta0: tuple = (1.0, 1.0)
    error_dist: str = "normal"
    sigma: float = 1.0
    censor_rate: float = 0.3  # target; 0 means no censoring
    misspec: str = "none"
    misspec_cov: int = 1  # 1-based covariate for the quadratic alternative
    misspec_a: float = 0.0
    replications: int = 200
    alpha: float = 0.05
    npath: int = 100
    seed: int = 0
    est_method: str = "rr"
    eq_type: str = "ns"
    plugin: str = "regression"  # see gof.resample_many
    multipliers: str = "poisson"
    censor_c: float | None = field(default=None, compare=False)  # fixed c, skips tuning

    def __post_init__(self):
        object.__setattr__(self, "beta0", tuple(float(b) for b in self.beta0))
        if self.n < 20:
            raise ValueError("n must be at least 20")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0 <= self.censor_rate < 1:
            raise ValueError("censor_rate must lie in [0, 1)")
        if self.error_dist not in ERROR_DISTS:
            raise ValueError(f"error_dist must be one of {ERROR_DISTS}")
        if self.misspec not in MISSPECS:
            raise ValueError(f"misspec must be one of {MISSPECS}")
        if not 1 <= self.misspec_cov <= len(self.beta0):
            raise ValueError("misspec_cov out of range")
        if self.multipliers not in MULTIPLIERS:
            raise ValueError(f"multipliers must be one of {tuple(MULTIPLIERS)}")
        if self.plugin not in PLUGIN_MODES:
            raise ValueError(f"plugin must be one of {PLUGIN_MODES}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def p(self) -> int:
        return len(self.beta0)


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


# spawn-key namespaces so pilot, sample and resampling streams never overlap
_SAMPLE, _PILOT, _PATHS = 0, 1, 2


def _linear_predictor(cfg: SimConfig, z: np.ndarray) -> np.ndarray:
    eta = z @ np.asarray(cfg.beta0)
    if cfg.misspec == "quadratic":
        return eta + cfg.misspec_a * z[:, cfg.misspec_cov - 1] ** 2
    if cfg.misspec == "log-link":
        return eta + cfg.misspec_a * np.log1p(eta * eta)
    return eta


def _errors(cfg: SimConfig, rng: np.random.Generator, size: int) -> np.ndarray:
    if cfg.error_dist == "normal":
        return cfg.sigma * rng.standard_normal(size)
    # minimum extreme value: log of a unit exponential
    return cfg.sigma * np.log(rng.standard_exponential(size))


def _draw(cfg: SimConfig, rng: np.random.Generator, n: int):
    """Covariates, failure times and Uniform(0, 1) censoring draws."""
    z = rng.uniform(size=(n, cfg.p))
    t = np.exp(-_linear_predictor(cfg, z) + _errors(cfg, rng, n))
    u = rng.uniform(size=n)
    return z, t, u


def calibrate_censoring(cfg: SimConfig) -> float:
    """Upper limit ``c`` of Uniform(0, c) censoring hitting ``cfg.censor_rate``.

    The censoring rate on the pilot draws is monotone in ``c``; the root
    is bracketed on a log scale.  Returns ``inf`` for a zero target.
    """
    if cfg.censor_c is not None:
        return float(cfg.censor_c)
    if cfg.censor_rate == 0:
        return np.inf
    _, t, u = _draw(cfg, _stream(cfg.seed, _PILOT), PILOT_DRAWS)

    def excess(logc):
        return np.mean(u * np.exp(logc) < t) - cfg.censor_rate

    lo, hi = np.log(np.min(t)) - 1.0, np.log(np.max(t)) + 1.0
    while excess(lo) < 0:
        lo -= 5.0
    while excess(hi) > 0:
        hi += 5.0
    return float(np.exp(optimize.bisect(excess, lo, hi, xtol=1e-10)))


def generate_sample(cfg: SimConfig, rep: int, censor_c: float | None = None) -> SurvivalDataset:
    """Replication ``rep`` (0-based) of the design in ``cfg``."""
    c = calibrate_censoring(cfg) if censor_c is None else censor_c
    rng = _stream(cfg.seed, _SAMPLE, rep)
    z, t, u = _draw(cfg, rng, cfg.n)
    cens = u * c if np.isfinite(c) else np.full(cfg.n, np.inf)
    status = (t <= cens).astype(float)
    if not status.any():  # astronomically rare; keep the earliest failure observed
        k = int(np.argmin(t))
        status[k] = 1.0
        cens[k] = t[k]
    time = np.minimum(t, cens)
    names = tuple(f"z{q + 1}" for q in range(cfg.p))
    return SurvivalDataset(time, status, z, names, (CONTINUOUS,) * cfg.p)


@dataclass
class RejectionResult:
    test: TestType
    rate: float
    rate_std: float
    achieved_censoring: float
    p_values: np.ndarray  # per replication, nan where the fit failed
    p_std_values: np.ndarray
    failures: int = 0

    def rates_at(self, alpha: float) -> tuple[float, float]:
        ok = ~np.isnan(self.p_values)
        return (float(np.mean(self.p_values[ok] <= alpha)),
                float(np.mean(self.p_std_values[ok] <= alpha)))


def _one_replication(args):
    cfg, tests, rep, c = args
    d = generate_sample(cfg, rep, c)
    censored = 1.0 - float(d.status.mean())
    try:
        fitres = fit(d, cfg.est_method, cfg.eq_type)
        designs = [build_design(t, fitres.beta, d) for t in tests]
        path_seed = int(np.random.SeedSequence(cfg.seed, spawn_key=(_PATHS, rep))
                        .generate_state(1)[0])
        resampled = resample_many(designs, fitres, d, cfg.npath, path_seed,
                                  multipliers=cfg.multipliers, plugin=cfg.plugin)
    except AftTestError as exc:
        log.warning("replication %d failed: %s", rep, exc)
        return rep, censored, None
    out = []
    for des, res in zip(designs, resampled):
        obs = des.project(des.mhat)
        obs_std, paths_std, _ = standardize(obs, res.paths)
        out.append(supremum_pvalues(obs, res.paths, obs_std, paths_std))
    return rep, censored, out


def rejection_rate(cfg: SimConfig, tests, workers: int = 1) -> list[RejectionResult]:
    """Share of replications rejecting at ``cfg.alpha`` for each test.

    All tests in ``tests`` are evaluated on the same samples and the same
    multiplier draws.  Replications whose estimate fails are excluded from
    the denominators and counted in ``failures``.
    """
    tests = [tests] if isinstance(tests, TestType) else list(tests)
    c = calibrate_censoring(cfg)
    jobs = [(cfg, tests, r, c) for r in range(cfg.replications)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_one_replication, jobs, chunksize=1))
    else:
        results = [_one_replication(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    censoring = float(np.mean([r[1] for r in results]))
    failures = sum(r[2] is None for r in results)
    out = []
    for k, test in enumerate(tests):
        pv = np.array([np.nan if r[2] is None else r[2][k][0] for r in results])
        ps = np.array([np.nan if r[2] is None else r[2][k][1] for r in results])
        res = RejectionResult(test, np.nan, np.nan, censoring, pv, ps, failures)
        if failures < len(results):
            res.rate, res.rate_std = res.rates_at(cfg.alpha)
        out.append(res)
    return out
