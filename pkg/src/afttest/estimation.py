"""Estimation of the AFT coefficients.

The model is ``log T_i = -Z_i' beta + eps_i``, so the residual time of
subject ``i`` at ``beta`` is ``e_i(beta) = log X_i + Z_i' beta``.

Three estimators are available: the non-smoothed Gehan rank estimator
(``rr``/``ns``), its induced-smoothed version (``rr``/``is``) and the
Buckley-James least-squares estimator (``ls``).  All accept optional
nonnegative subject weights, which is how multiplier resampling perturbs
them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize
from scipy.special import ndtr

from .data import SurvivalDataset
from .dfsane import SolverConfig, SolverResult, dfsane
from .errors import KaplanMeierDegenerate, SingularDesign, SolverFailure

log = logging.getLogger(__name__)

EST_METHODS = ("rr", "ls")
EQ_TYPES = ("ns", "is")

# A stagnated non-smoothed solve is accepted when its residual norm is below
# max(NS_ACCEPT_TOL, NS_JUMP_MULTIPLE * typical single-pair jump of the score).
NS_ACCEPT_TOL = 1e-4
NS_JUMP_MULTIPLE = 25.0
NS_PATIENCE = 50


@dataclass
class FitResult:
    beta: np.ndarray
    est_method: str
    eq_type: str | None
    solver: SolverResult | None = None
    converged: bool = True
    nonsmooth_accepted: bool = False
    iterations: int = 0
    oscillated: bool = False
    beta_original: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        if self.est_method == "ls" and self.eq_type is not None:
            raise ValueError("eq_type only applies to est_method='rr'")
        if not np.all(np.isfinite(self.beta)):
            raise SolverFailure("non-finite coefficient estimate")


def residual_times(beta, d: SurvivalDataset) -> np.ndarray:
    """``e_i(beta) = log X_i + Z_i' beta``."""
    return d.log_time + d.covariates @ np.asarray(beta, dtype=float)


def gehan_score_ns(beta, d: SurvivalDataset, weights=None) -> np.ndarray:
    """Non-smoothed Gehan estimating function.

    ``U(b) = n^-1 sum_i sum_j w_i w_j Delta_i (Z_i - Z_j) I(e_j >= e_i)``,
    evaluated in ``O(n log n)`` with suffix sums over the sorted residuals.
    """
    z = d.covariates
    n = d.n
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    e = residual_times(beta, d)
    order = np.argsort(e, kind="stable")
    es = e[order]
    ws = w[order]
    # suffix sums S[k] = sum_{m >= k} over sorted positions, with S[n] = 0
    sw = np.concatenate([np.cumsum(ws[::-1])[::-1], [0.0]])
    swz = np.vstack([np.cumsum((ws[:, None] * z[order])[::-1], axis=0)[::-1],
                     np.zeros((1, z.shape[1]))])
    first = np.searchsorted(es, e, side="left")
    coef = w * d.status
    return (coef[:, None] * (z * sw[first][:, None] - swz[first])).sum(axis=0) / n


def pair_bandwidth(d: SurvivalDataset) -> np.ndarray:
    """Induced-smoothing bandwidths ``r_ij = sqrt(|Z_i - Z_j|^2 / n)``."""
    z = d.covariates
    sq = (z * z).sum(axis=1)
    dist2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * z @ z.T, 0.0)
    return np.sqrt(dist2 / d.n)


def gehan_score_is(beta, d: SurvivalDataset, weights=None, bandwidth=None) -> np.ndarray:
    """Induced-smoothed Gehan estimating function.

    The indicator ``I(e_j >= e_i)`` is replaced by ``Phi((e_j - e_i)/r_ij)``;
    pairs with ``r_ij = 0`` keep the indicator (their covariate difference
    is zero, so they contribute nothing either way).
    """
    z = d.covariates
    n = d.n
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    r = pair_bandwidth(d) if bandwidth is None else bandwidth
    e = residual_times(beta, d)
    diff = e[None, :] - e[:, None]  # [i, j] -> e_j - e_i
    zero = r == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        kern = ndtr(np.where(zero, 0.0, diff / np.where(zero, 1.0, r)))
    kern = np.where(zero, (diff >= 0).astype(float), kern)
    kw = kern * w[None, :]
    coef = w * d.status
    left = coef * kw.sum(axis=1)
    return (left @ z - coef @ (kw @ z)) / n


def gehan_loss(beta, d: SurvivalDataset, weights=None) -> float:
    """Convex Gehan objective whose negative subgradient is the ns score.

    ``L(b) = n^-1 sum_i sum_j w_i w_j Delta_i max(e_j - e_i, 0)``, evaluated
    in ``O(n log n)``: for each ``i`` the inner sum is
    ``sum_{e_j > e_i} w_j e_j - e_i sum_{e_j > e_i} w_j``.
    """
    n = d.n
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    e = residual_times(beta, d)
    order = np.argsort(e, kind="stable")
    es, ws = e[order], w[order]
    sw = np.concatenate([np.cumsum(ws[::-1])[::-1], [0.0]])
    swe = np.concatenate([np.cumsum((ws * es)[::-1])[::-1], [0.0]])
    above = np.searchsorted(es, e, side="right")
    inner = swe[above] - e * sw[above]
    return float((w * d.status) @ inner) / n


def _polish_ns(d, weights, beta):
    """Nelder-Mead descent on the Gehan loss from a DF-SANE point.

    The non-smoothed score may have no exact root; its loss is convex and
    piecewise linear with the minimizer at a kink, which a simplex search
    locates where a score-only search can stall on a flat piece.
    """
    def loss(b):
        return gehan_loss(b, d, weights)

    start = loss(beta)
    simplex = np.vstack([beta, beta + 1e-2 * np.eye(d.p)])
    out = optimize.minimize(loss, beta, method="Nelder-Mead",
                            options=dict(initial_simplex=simplex, xatol=1e-8,
                                         fatol=1e-12 * max(1.0, abs(start)),
                                         maxfev=400 * d.p))
    return out.x if out.fun < start else beta


def score_jump_scale(d: SurvivalDataset, weights=None) -> float:
    """Typical size of one jump of the non-smoothed score.

    When a single pair of residuals swaps order the score changes by
    ``w_i w_j Delta_i (Z_i - Z_j) / n``; this returns the weighted mean of
    ``||Z_i - Z_j||_inf / n`` over comparable pairs.
    """
    n = d.n
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    z = d.covariates
    wd = w * d.status
    total = 0.0
    for q0 in range(0, n, 256):
        blk = np.abs(z[q0:q0 + 256, None, :] - z[None, :, :]).max(axis=-1)
        total += float(wd[q0:q0 + 256] @ blk @ w)
    return total / (wd.sum() * w.sum()) / n


def smoothed_jacobian(beta, d: SurvivalDataset, weights=None, bandwidth=None) -> np.ndarray:
    """Central-difference Jacobian of the induced-smoothed score at ``beta``."""
    beta = np.asarray(beta, dtype=float)
    bw = pair_bandwidth(d) if bandwidth is None else bandwidth
    jac = np.empty((d.p, d.p))
    for q in range(d.p):
        h = 1e-5 * max(1.0, abs(beta[q]))
        step = np.zeros(d.p)
        step[q] = h
        jac[:, q] = (gehan_score_is(beta + step, d, weights, bw)
                     - gehan_score_is(beta - step, d, weights, bw)) / (2 * h)
    return jac


def _ns_preconditioner(d, weights, start):
    """Inverse smoothed Jacobian at ``start``, or ``None`` if it is unusable."""
    jac = smoothed_jacobian(start, d, weights)
    if not np.all(np.isfinite(jac)) or np.linalg.cond(jac) > 1e10:
        return None
    return np.linalg.inv(jac)


def _solve_rank(d, eq_type, cfg, weights, start):
    n = d.n
    unit = 1.0 / (n * n)
    if eq_type == "ns":
        # Newton-type scaling keeps unit spectral steps commensurate with the
        # distance to the root; the piecewise-constant score gives the solver
        # no curvature information of its own.
        precond = _ns_preconditioner(d, weights, start)
        if precond is None:
            precond = unit * np.eye(d.p)

        def score(b):
            return precond @ gehan_score_ns(b, d, weights)

        res = dfsane(score, start, replace(cfg, tol_f=cfg.tol_f * unit))
        if not res.converged:
            res.beta_hat = _polish_ns(d, weights, res.beta_hat)
        u_norm = float(np.linalg.norm(gehan_score_ns(res.beta_hat, d, weights)) / np.sqrt(d.p))
        res.f_norm = u_norm
        res.converged = u_norm <= cfg.tol_f
        accepted = False
        if not res.converged:
            tol = max(NS_ACCEPT_TOL, NS_JUMP_MULTIPLE * score_jump_scale(d, weights))
            accepted = u_norm <= tol
        return res, accepted

    # the smoothed score grows like n^2 in beta; dividing by n^2 keeps the
    # unit first step of the solver from overshooting
    bw = pair_bandwidth(d)

    def score(b):
        return unit * gehan_score_is(b, d, weights, bw)

    res = dfsane(score, start, replace(cfg, tol_f=cfg.tol_f * unit))
    res.f_norm /= unit
    return res, False


def fit_rank(d: SurvivalDataset, eq_type: str = "ns", cfg: SolverConfig | None = None,
             weights=None, x0=None) -> FitResult:
    """Gehan rank estimator: DF-SANE root of the chosen score.

    Columns are divided by their sample SD before solving and the estimate
    is mapped back, which makes the fit equivariant to rescaling any column;
    scores, bandwidths and the reported solver norm refer to the unit-SD
    columns.  Standardized continuous columns are unaffected.

    ``is`` starts from ``x0`` (zero by default).  ``ns`` starts from ``x0``
    when given; otherwise, or if that solve fails, it is warm-started from
    the induced-smoothed root, which lies within O(1/n) of the Gehan root.
    A stagnated ``ns`` solve is accepted when its norm is within
    ``NS_JUMP_MULTIPLE`` jumps of the piecewise-constant score.
    """
    if eq_type not in EQ_TYPES:
        raise ValueError(f"eq_type must be one of {EQ_TYPES}, got {eq_type!r}")
    if cfg is None:
        cfg = SolverConfig(patience=NS_PATIENCE if eq_type == "ns" else None)
    # solve on unit-SD columns so the result is equivariant to column scaling
    col_sd = solver_scales(d)
    d, user_d = d.with_covariates(d.covariates / col_sd), d
    if x0 is not None:
        x0 = np.asarray(x0, float) * col_sd
    zero = np.zeros(d.p)
    if eq_type == "is":
        res, accepted = _solve_rank(d, "is", cfg, weights, zero if x0 is None else x0)
    else:
        res = None
        if x0 is not None:
            res, accepted = _solve_rank(d, "ns", cfg, weights, np.asarray(x0, float))
        if res is None or not (res.converged or accepted):
            smooth_cfg = replace(cfg, patience=None)
            warm, _ = _solve_rank(d, "is", smooth_cfg, weights,
                                  zero if x0 is None else np.asarray(x0, float))
            res, accepted = _solve_rank(d, "ns", cfg, weights, warm.beta_hat)
    if not (res.converged or accepted):
        raise SolverFailure(f"rank estimator ({eq_type}) did not converge", res.f_norm)
    res.beta_hat = res.beta_hat / col_sd
    return _finish(FitResult(res.beta_hat, "rr", eq_type, solver=res,
                             converged=res.converged, nonsmooth_accepted=accepted,
                             iterations=res.iterations), user_d)


def solver_scales(d: SurvivalDataset) -> np.ndarray:
    """Sample SD of each covariate column (1 for a constant column)."""
    sd = d.covariates.std(axis=0, ddof=1)
    return np.where(sd > 0, sd, 1.0)


def _finish(fit: FitResult, d: SurvivalDataset) -> FitResult:
    fit.beta_original = fit.beta / d.scale
    return fit


def km_residual_expectations(e, status, weights=None) -> np.ndarray:
    """``E[eps | eps > e_i]`` under the Kaplan-Meier law of the residuals.

    Events precede censorings at tied values.  If the largest residual is
    censored its remaining mass is placed on it (Efron's convention), so the
    conditional expectation of the maximum is the maximum itself.  Subjects
    with zero weight do not enter the law but still get an expectation.
    """
    e = np.asarray(e, dtype=float)
    n = e.size
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    status = np.asarray(status, dtype=float)
    live = w > 0
    if not np.any(status[live] == 1):
        raise KaplanMeierDegenerate("all observations are censored")
    # events before censorings at ties
    el, dl, wl = e[live], status[live], w[live]
    order = np.lexsort((1 - dl, el))
    es, ds, ws = el[order], dl[order], wl[order]
    at_risk = np.cumsum(ws[::-1])[::-1]
    haz = np.where(ds == 1, ws / at_risk, 0.0)
    surv = np.cumprod(1.0 - haz)
    surv_before = np.concatenate([[1.0], surv[:-1]])
    mass = surv_before - surv
    mass[-1] += surv[-1]  # Efron tail: leftover mass sits on the largest residual
    # tail sums over values strictly greater than e_i
    uniq, inv = np.unique(es, return_inverse=True)
    mass_u = np.bincount(inv, weights=mass, minlength=uniq.size)
    me_u = mass_u * uniq
    # trailing zero covers residuals above every positive-weight value
    tail_m = np.concatenate([np.cumsum(mass_u[::-1])[::-1][1:], [0.0, 0.0]])
    tail_me = np.concatenate([np.cumsum(me_u[::-1])[::-1][1:], [0.0, 0.0]])
    pos = np.searchsorted(uniq, e, side="left")
    tm = tail_m[pos]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(tm > 1e-300, tail_me[pos] / tm, e)
    return cond


def buckley_james_step(beta, d: SurvivalDataset, weights=None) -> np.ndarray:
    n = d.n
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    z = d.covariates
    zb = z @ beta
    e = d.log_time + zb
    cond = km_residual_expectations(e, d.status, w)
    y = np.where(d.status == 1, d.log_time, cond - zb)
    wsum = w.sum()
    zc = z - (w @ z) / wsum
    yc = y - (w @ y) / wsum
    xtx = (zc * w[:, None]).T @ zc
    xty = (zc * w[:, None]).T @ yc
    try:
        if np.linalg.cond(xtx) > 1e12:
            raise np.linalg.LinAlgError
        return -np.linalg.solve(xtx, xty)
    except np.linalg.LinAlgError:
        raise SingularDesign("centered design is rank deficient") from None


def fit_ls(d: SurvivalDataset, cfg: SolverConfig | None = None, weights=None,
           init=None, tol: float = 1e-6, max_iter: int = 100) -> FitResult:
    """Buckley-James least-squares estimator.

    Initialised at the non-smoothed Gehan estimate unless ``init`` is given.
    If the iteration has not settled after ``max_iter`` steps (typically a
    two-cycle) the average of the last two iterates is returned and the
    result is flagged ``oscillated``.
    """
    if not np.any(d.status == 1):
        raise KaplanMeierDegenerate("all observations are censored")
    if init is None:
        init = fit_rank(d, "ns", cfg, weights=weights).beta
    beta = np.asarray(init, dtype=float)
    if np.all(d.status == 1):
        beta = buckley_james_step(beta, d, weights)
        return _finish(FitResult(beta, "ls", None, iterations=1), d)
    prev = beta
    for it in range(1, max_iter + 1):
        new = buckley_james_step(prev, d, weights)
        if np.max(np.abs(new - prev)) <= tol:
            return _finish(FitResult(new, "ls", None, iterations=it), d)
        beta, prev = prev, new
    log.debug("Buckley-James did not settle in %d iterations; averaging", max_iter)
    return _finish(FitResult(0.5 * (beta + prev), "ls", None, iterations=max_iter,
                             oscillated=True), d)


def fit(d: SurvivalDataset, est_method: str = "rr", eq_type: str = "ns",
        cfg: SolverConfig | None = None, weights=None, x0=None) -> FitResult:
    if est_method == "rr":
        return fit_rank(d, eq_type, cfg, weights=weights, x0=x0)
    if est_method == "ls":
        return fit_ls(d, cfg, weights=weights, init=x0)
    raise ValueError(f"est_method must be one of {EST_METHODS}, got {est_method!r}")
