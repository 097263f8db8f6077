"""Cumulative martingale-residual processes and their multiplier resampling.

The observed process is

    W(t, z) = n^{-1/2} sum_i I(Z_i <= z) M_i(t; beta_hat)

on the ``n`` sorted residual times and ``n`` covariate anchors (omnibus),
at ``t = infinity`` over the anchors (link), or at ``t = infinity`` over one
covariate (covform).

Its null law is approximated by paths built from i.i.d. nonnegative multipliers
``xi`` with mean and variance one.  Any nonnegative law keeps each
perturbed Gehan loss convex.  Each path is

    n^{-1/2} sum_i (xi_i - 1) int_0^t {pi_i(z) - pibar(z, s)} dM_i(s; beta_hat)
      + n^{-1/2} sum_i pi_i(z) {M_i(t; beta*) - M_i(t; beta_hat)}

where ``pibar(z, s)`` is the at-risk average of ``pi_l(z)`` and ``beta*``
solves the xi-perturbed estimating equation.  The first term reproduces
the martingale fluctuation including the Nelson-Aalen plug-in; the second
reproduces the effect of estimating ``beta``.  By default the second term
is replaced by its linearization in ``beta* - beta_hat`` (see
``resample_many``).
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import BINARY, SurvivalDataset
from .errors import (
    AftTestError,
    BinaryCovariateForCovform,
    IndexOutOfRange,
    UnknownCovariate,
)
from .estimation import EQ_TYPES, EST_METHODS, FitResult, fit, residual_times
from .formula import ModelSpec, resolve_covariate
from .residuals import martingale_on_grid, residual_process_from_times

log = logging.getLogger(__name__)

TEST_TYPES = ("omnibus", "link", "covform")
MIN_NPATH = 10
SE_FLOOR = 1e-10


@dataclass(frozen=True)
class TestType:
    kind: str = "omnibus"
    cov_index: int | None = None  # 1-based, covform only

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.kind not in TEST_TYPES:
            raise ValueError(f"testType must be one of {TEST_TYPES}, got {self.kind!r}")
        if self.kind == "covform" and self.cov_index is None:
            object.__setattr__(self, "cov_index", 1)
        if self.kind != "covform" and self.cov_index is not None:
            object.__setattr__(self, "cov_index", None)


def anchor_order(z: np.ndarray) -> np.ndarray:
    """Canonical anchor ordering: by first covariate, then the next ones, then index."""
    n, p = z.shape
    keys = (np.arange(n),) + tuple(z[:, q] for q in reversed(range(p)))
    return np.lexsort(keys)


def weight_matrix(test: TestType, d: SurvivalDataset) -> tuple[np.ndarray, np.ndarray]:
    """Indicator weights ``pi[j, i] = I(Z_i <= z_j)`` and the anchor order.

    Rows follow the anchor order, columns the original subject order.
    """
    z = d.covariates
    if test.kind == "covform":
        q = test.cov_index - 1
        if not 0 <= q < d.p:
            raise IndexOutOfRange(test.cov_index)
        if d.kinds[q] == BINARY:
            raise BinaryCovariateForCovform(d.names[q])
        col = z[:, q]
        order = np.argsort(col, kind="stable")
        return (col[None, :] <= col[order][:, None]).astype(float), order
    order = anchor_order(z)
    anchors = z[order]
    pi = np.ones((d.n, d.n), dtype=bool)
    for q in range(d.p):
        pi &= z[None, :, q] <= anchors[:, None, q]
    return pi.astype(float), order


@dataclass(frozen=True, eq=False)
class ProcessDesign:
    """Everything the observed and perturbed processes share for one fit."""

    test: TestType
    beta: np.ndarray
    pi: np.ndarray
    anchor_order: np.ndarray
    grid: np.ndarray  # evaluation grid, last point is +inf
    mhat: np.ndarray
    pibar: np.ndarray  # [anchor, grid] at-risk average of pi

    @property
    def n(self) -> int:
        return self.mhat.shape[0]

    def project(self, m: np.ndarray) -> np.ndarray:
        """``n^{-1/2} pi @ m`` restricted to what the test stores."""
        if self.test.kind == "omnibus":
            return self.pi @ m / np.sqrt(self.n)
        return self.pi @ m[:, -1] / np.sqrt(self.n)


def build_design(test: TestType, beta, d: SurvivalDataset) -> ProcessDesign:
    beta = np.asarray(beta, dtype=float)
    rp = residual_process_from_times(residual_times(beta, d), d.status)
    grid = rp.grid.copy()
    grid[-1] = np.inf  # t = infinity; M_i is constant beyond the largest residual
    pi, order = weight_matrix(test, d)
    at_risk = (rp.e[:, None] >= rp.grid[None, :]).astype(float)
    pibar = (pi @ at_risk) / at_risk.sum(axis=0)
    return ProcessDesign(test, beta, pi, order, grid, rp.mhat, pibar)


def observed_process(test: TestType, fit_or_beta, d: SurvivalDataset) -> np.ndarray:
    """Observed process: ``n x n`` (anchor x time) for omnibus, length ``n`` otherwise."""
    beta = fit_or_beta.beta if isinstance(fit_or_beta, FitResult) else fit_or_beta
    design = build_design(test, beta, d)
    return design.project(design.mhat)


def multiplier_term(design: ProcessDesign, xi: np.ndarray) -> np.ndarray:
    """``n^{-1/2} sum_i (xi_i - 1) int {pi_i(z) - pibar(z, s)} dM_i(s)`` on the design grid."""
    psi = np.asarray(xi, dtype=float) - 1.0
    # A(t_k) = sum_i psi_i M_i(t_k); its increments drive the pibar correction
    d_agg = np.diff(psi @ design.mhat, prepend=0.0)
    if design.test.kind == "omnibus":
        direct = design.pi @ (psi[:, None] * design.mhat)
        correction = np.cumsum(design.pibar * d_agg[None, :], axis=1)
    else:
        direct = design.pi @ (psi * design.mhat[:, -1])
        correction = design.pibar @ d_agg
    return (direct - correction) / np.sqrt(design.n)


def plugin_term(design: ProcessDesign, beta_star, d: SurvivalDataset) -> np.ndarray:
    """``n^{-1/2} sum_i pi_i(z) {M_i(t; beta*) - M_i(t; beta_hat)}``, fully recomputed."""
    m_star = martingale_on_grid(residual_times(beta_star, d), d.status, design.grid)
    return design.project(m_star - design.mhat)


def perturbed_process(design: ProcessDesign, xi: np.ndarray, beta_star,
                      d: SurvivalDataset) -> np.ndarray:
    """One resampled path with the plug-in term recomputed at ``beta_star``."""
    return multiplier_term(design, xi) + plugin_term(design, beta_star, d)


_SQRT5 = np.sqrt(5.0)
# two-point law with mean 1, variance 1 and third central moment 1
_MAMMEN_LOW, _MAMMEN_HIGH = (3.0 - _SQRT5) / 2.0, (3.0 + _SQRT5) / 2.0
_MAMMEN_P_LOW = (_SQRT5 + 1.0) / (2.0 * _SQRT5)


def mammen_multipliers(rng: np.random.Generator, n: int) -> np.ndarray:
    """Two-point multipliers: ``(3 - sqrt 5)/2`` w.p. ``(sqrt 5 + 1)/(2 sqrt 5)``, else ``(3 + sqrt 5)/2``.

    Bounded, so sparse corners of the grid cannot produce the long right
    tail that exponential weights give to standardized path suprema.
    """
    return np.where(rng.uniform(size=n) < _MAMMEN_P_LOW, _MAMMEN_LOW, _MAMMEN_HIGH)


def exponential_multipliers(rng: np.random.Generator, n: int) -> np.ndarray:
    """Exp(1) multipliers (mean 1, variance 1, third central moment 2)."""
    return rng.exponential(1.0, size=n)


def poisson_multipliers(rng: np.random.Generator, n: int) -> np.ndarray:
    """Poisson(1) multipliers (mean 1, variance 1, third central moment 1).

    The default law.  Its tail lies between the two-point and exponential
    laws; a zero weight drops the subject from the perturbed fit.
    """
    return rng.poisson(1.0, size=n).astype(float)


MULTIPLIERS = {"poisson": poisson_multipliers, "mammen": mammen_multipliers,
               "exponential": exponential_multipliers}


def resolve_multipliers(multipliers):
    """A multiplier sampler ``f(rng, n)`` from a name, a callable or ``None`` (default)."""
    if multipliers is None:
        return poisson_multipliers
    if callable(multipliers):
        return multipliers
    try:
        return MULTIPLIERS[multipliers]
    except KeyError:
        raise ValueError(f"multipliers must be one of {tuple(MULTIPLIERS)} or a callable, "
                         f"got {multipliers!r}") from None


def path_rng(seed: int, b: int) -> np.random.Generator:
    """Independent stream for path ``b`` (0-based) under ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(b,))))


PLUGIN_MODES = ("regression", "recompute")


@dataclass
class ResampleResult:
    paths: np.ndarray  # (npath_effective, *process shape)
    betas: np.ndarray  # (npath_effective, p)
    path_index: np.ndarray  # original 0-based index of each kept path
    retries: int = 0
    dropped: int = 0
    slope: np.ndarray | None = None  # fitted d(process)/d(beta), regression mode only

    @property
    def npath_effective(self) -> int:
        return self.paths.shape[0]


# worker-process state, set once per pool
_CTX: dict = {}


def _init_worker(ctx):
    _CTX.clear()
    _CTX.update(ctx)


def _one_path(b: int):
    c = _CTX
    d, fitres = c["d"], c["fit"]
    rng = path_rng(c["seed"], b)
    retries = 0
    for attempt in range(2):
        xi = c["multipliers"](rng, d.n)
        if np.all(xi == xi[0]):
            # constant weights rescale the estimating equation; its root is beta_hat
            beta_star = fitres.beta
        else:
            try:
                beta_star = fit(d, fitres.est_method, fitres.eq_type or "ns", c["cfg"],
                                weights=xi, x0=fitres.beta).beta
            except AftTestError as exc:
                log.debug("path %d attempt %d failed: %s", b, attempt, exc)
                retries += 1
                continue
        recompute = c["plugin"] == "recompute"
        terms = [(multiplier_term(des, xi),
                  plugin_term(des, beta_star, d) if recompute else None)
                 for des in c["designs"]]
        return b, beta_star, terms, retries
    return b, None, None, retries


def offset_rng(seed: int, m: int) -> np.random.Generator:
    """Stream of the ``m``-th slope-design offset; disjoint from every path stream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(m, 1))))


def offset_scale(dbeta: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of the second moment of ``beta* - beta_hat``.

    A jitter proportional to the diagonal keeps the factor covariant under
    column rescaling when the moment matrix is singular.
    """
    m2 = dbeta.T @ dbeta / dbeta.shape[0]
    diag = np.diag(m2)
    if not np.all(diag > 0):
        return np.zeros_like(m2)
    for eps in (0.0, 1e-10, 1e-6):
        try:
            return np.linalg.cholesky(m2 + eps * np.diag(diag))
        except np.linalg.LinAlgError:
            continue
    return np.diag(np.sqrt(diag))


class _SlopeFit:
    """Streaming least squares of plug-in terms on ``[1, beta - beta_hat]``."""

    def __init__(self, p: int, shape):
        self.xtx = np.zeros((p + 1, p + 1))
        self.xty = np.zeros((p + 1,) + tuple(shape))

    def add(self, dbeta, y):
        x = np.concatenate([[1.0], dbeta])
        self.xtx += np.outer(x, x)
        self.xty += np.tensordot(x, y, axes=0)

    def slope(self) -> np.ndarray:
        coef = np.linalg.lstsq(self.xtx, self.xty.reshape(self.xtx.shape[0], -1), rcond=None)[0]
        return coef[1:].reshape((-1,) + self.xty.shape[1:])


def resample_many(designs: list[ProcessDesign], fitres: FitResult, d: SurvivalDataset,
                  npath: int = 200, seed: int = 0, multipliers=None, workers: int = 1,
                  cfg=None, plugin: str = "regression") -> list[ResampleResult]:
    """Resample several processes from one set of perturbed fits.

    ``multipliers`` names the weight law (``"poisson"``, the default,
    ``"mammen"`` or ``"exponential"``) or is a callable ``f(rng, n)``.  Path ``b`` draws its
    multipliers from ``path_rng(seed, b)``; a failed
    perturbed fit is retried once with the next draw of the same stream and
    dropped after a second failure.  Output is ordered by path index and
    does not depend on ``workers``.

    With ``plugin="recompute"`` each path is ``multiplier_term +
    plugin_term``.  With ``plugin="regression"`` (default) the plug-in term
    of path ``b`` is replaced by ``(beta*_b - beta_hat)' eta``.  The slope
    ``eta`` is the least-squares fit, separately at every grid point and
    with an intercept, of ``plugin_term`` evaluated at antithetic offsets
    ``beta_hat +- L u_m`` on the offsets, where ``u_m ~ N(0, I)`` comes from
    ``offset_rng(seed, m)`` and ``L`` is ``offset_scale(beta* - beta_hat)``.
    The offsets cover the same neighbourhood as the perturbed estimates but
    avoid the kinks of the rank score where those estimates settle, so every
    path depends continuously on the perturbed fits.
    """
    if plugin not in PLUGIN_MODES:
        raise ValueError(f"plugin must be one of {PLUGIN_MODES}, got {plugin!r}")
    npath = max(int(npath), MIN_NPATH)
    designs = list(designs)
    ctx = dict(d=d, designs=designs, fit=fitres, seed=int(seed), cfg=cfg,
               multipliers=resolve_multipliers(multipliers), plugin=plugin)
    mult = [[] for _ in designs]
    plug = [[] for _ in designs]
    betas, index = [], []
    retries = 0

    def consume(results):
        nonlocal retries
        for b, beta_star, terms, tries in results:
            retries += tries
            if beta_star is None:
                continue
            betas.append(beta_star)
            index.append(b)
            for k, (t1, t2) in enumerate(terms):
                mult[k].append(t1)
                plug[k].append(t2)

    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(ctx,)) as ex:
            chunk = max(1, npath // (4 * workers))
            consume(ex.map(_one_path, range(npath), chunksize=chunk))
    else:
        saved = dict(_CTX)
        _init_worker(ctx)
        try:
            consume(_one_path(b) for b in range(npath))
        finally:
            _init_worker(saved)

    dropped = npath - len(betas)
    if dropped:
        log.warning("%d of %d resampling paths dropped after repeated solver failure",
                    dropped, npath)
    if not betas:
        raise AftTestError("every resampling path failed")
    betas = np.stack(betas)
    index = np.array(index)
    dbeta = betas - fitres.beta
    slopes = _offset_slopes(designs, fitres, d, dbeta, int(seed)) if plugin == "regression" \
        else [None] * len(designs)
    out = []
    for k, slope in enumerate(slopes):
        t1 = np.stack(mult[k])
        if plugin == "regression":
            paths = t1 + np.tensordot(dbeta, slope, axes=1)
        else:
            paths = t1 + np.stack(plug[k])
        out.append(ResampleResult(paths=paths, betas=betas, path_index=index,
                                  retries=retries, dropped=dropped, slope=slope))
    return out


def _offset_slopes(designs, fitres: FitResult, d: SurvivalDataset, dbeta: np.ndarray,
                   seed: int) -> list[np.ndarray]:
    """Per-design slopes of ``plugin_term`` on antithetic offsets around ``beta_hat``."""
    scale = offset_scale(dbeta)
    fits = [_SlopeFit(d.p, des.project(des.mhat).shape) for des in designs]
    for m in range((dbeta.shape[0] + 1) // 2):
        step = scale @ offset_rng(seed, m).standard_normal(d.p)
        for sign in (1.0, -1.0):
            delta = sign * step
            for des, sf in zip(designs, fits):
                sf.add(delta, plugin_term(des, fitres.beta + delta, d))
    return [sf.slope() for sf in fits]


def resample_paths(test: TestType, fitres: FitResult, d: SurvivalDataset,
                   npath: int = 200, seed: int = 0, multipliers=None,
                   workers: int = 1, cfg=None, design: ProcessDesign | None = None,
                   plugin: str = "regression") -> ResampleResult:
    """Multiplier-resampled processes and perturbed coefficient estimates."""
    design = design or build_design(test, fitres.beta, d)
    return resample_many([design], fitres, d, npath, seed, multipliers, workers, cfg,
                         plugin)[0]


def standardize(obs: np.ndarray, paths: np.ndarray):
    """Divide by the pointwise resampling SD (``ddof=1``); zero where SD < 1e-10."""
    paths = np.asarray(paths, dtype=float)
    se = paths.std(axis=0, ddof=1)
    ok = se >= SE_FLOOR
    safe = np.where(ok, se, 1.0)
    obs_std = np.where(ok, obs / safe, 0.0)
    paths_std = np.where(ok, paths / safe, 0.0)
    return obs_std, paths_std, se


def supremum_pvalues(obs, paths, obs_std, paths_std) -> tuple[float, float]:
    """Kolmogorov-type p-values: share of paths whose sup |.| reaches the observed one."""
    paths = np.asarray(paths)
    npath = paths.shape[0]
    axes = tuple(range(1, paths.ndim))
    s = np.max(np.abs(obs))
    s_std = np.max(np.abs(obs_std))
    sb = np.max(np.abs(paths), axis=axes)
    sb_std = np.max(np.abs(np.asarray(paths_std)), axis=axes)
    return float(np.sum(sb >= s)) / npath, float(np.sum(sb_std >= s_std)) / npath


@dataclass
class GofTestResult:
    beta: np.ndarray
    test_type: str
    cov_tested: int | None
    cov_name: str | None
    est_method: str
    eq_type: str | None
    npath: int
    npath_effective: int
    npathsave: int
    seed: int
    obs_process: np.ndarray
    apprx_process: np.ndarray
    SE_process: np.ndarray
    obs_std_process: np.ndarray
    apprx_std_process: np.ndarray
    p_value: float
    p_std_value: float
    time: np.ndarray
    delta: np.ndarray
    covariates: np.ndarray
    names: tuple
    anchor_order: np.ndarray
    beta_original: np.ndarray | None = None
    retries: int = 0
    fit: FitResult | None = field(default=None, repr=False)


def _resolve(key, d: SurvivalDataset, spec: ModelSpec | None) -> int:
    if spec is not None:
        return resolve_covariate(spec, key)
    if isinstance(key, str) and not key.strip().isdigit():
        name = key.replace(" ", "")
        for idx, label in enumerate(d.names, start=1):
            aliases = {label}
            if label.startswith("log(") and label.endswith(")"):
                aliases.add(f"log_{label[4:-1]}")
            if name in aliases:
                return idx
        raise UnknownCovariate(key)
    idx = int(key)
    if not 1 <= idx <= d.p:
        raise IndexOutOfRange(idx)
    return idx


def default_workers() -> int:
    env = os.environ.get("AFTTEST_THREADS")
    return max(1, int(env)) if env and env.strip().isdigit() else 1


def run_afttest(d: SurvivalDataset, test_type: str = "omnibus", est_method: str = "rr",
                eq_type: str = "ns", cov_tested=1, npath: int = 200, npathsave: int = 50,
                seed: int = 0, spec: ModelSpec | None = None, fit_result: FitResult | None = None,
                workers: int | None = None, multipliers=None, cfg=None,
                plugin: str = "regression") -> GofTestResult:
    """Fit (unless ``fit_result`` is given), build the process, resample, and test."""
    if est_method not in EST_METHODS:
        raise ValueError(f"estMethod must be one of {EST_METHODS}, got {est_method!r}")
    if est_method == "rr" and eq_type not in EQ_TYPES:
        raise ValueError(f"eqType must be one of {EQ_TYPES}, got {eq_type!r}")
    if npath < MIN_NPATH:
        log.info("npath %d raised to the minimum of %d", npath, MIN_NPATH)
    npath = max(int(npath), MIN_NPATH)
    npathsave = max(int(npathsave), 0)
    eq = eq_type if est_method == "rr" else None
    cov_index = _resolve(cov_tested, d, spec) if test_type == "covform" else None
    test = TestType(test_type, cov_index)
    if fit_result is None:
        fit_result = fit(d, est_method, eq or "ns", cfg)
    design = build_design(test, fit_result.beta, d)
    obs = design.project(design.mhat)
    res = resample_paths(test, fit_result, d, npath, seed, multipliers=multipliers,
                         workers=workers or default_workers(), cfg=cfg, design=design,
                         plugin=plugin)
    obs_std, paths_std, se = standardize(obs, res.paths)
    p, p_std = supremum_pvalues(obs, res.paths, obs_std, paths_std)
    keep = min(npathsave, res.npath_effective)
    return GofTestResult(
        beta=fit_result.beta,
        test_type=test_type,
        cov_tested=cov_index,
        cov_name=d.names[cov_index - 1] if cov_index else None,
        est_method=est_method,
        eq_type=eq,
        npath=npath,
        npath_effective=res.npath_effective,
        npathsave=npathsave,
        seed=int(seed),
        obs_process=obs,
        apprx_process=res.paths[:keep],
        SE_process=se,
        obs_std_process=obs_std,
        apprx_std_process=paths_std[:keep],
        p_value=p,
        p_std_value=p_std,
        time=d.time,
        delta=d.status,
        covariates=d.covariates,
        names=d.names,
        anchor_order=design.anchor_order,
        beta_original=fit_result.beta_original,
        retries=res.retries,
        fit=fit_result,
    )
