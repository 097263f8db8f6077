"""Derivative-free spectral residual method (DF-SANE) for F(x) = 0.

Nonmonotone spectral residual iteration of La Cruz, Martinez and Raydan.
The merit function is ``f(x) = ||F(x)||^2``; a trial point ``x +/- alpha*d``
with ``d = -sigma * F(x)`` is accepted when

    f(trial) <= max(last M merit values) + eta_k - gamma * alpha^2 * f(x_k)

with ``eta_k = f(x_0) / (1 + k)^2``.  Works on nonsmooth (even piecewise
constant) systems, in which case the best iterate found is returned with
``stagnated`` set.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteEvaluation

log = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-14


@dataclass(frozen=True)
class SolverConfig:
    tol_f: float = 1e-7
    max_iter: int = 500
    history_M: int = 10
    sigma_min: float = 1e-10
    sigma_max: float = 1e10
    gamma: float = 1e-4
    tau_min: float = 0.1
    tau_max: float = 0.5
    # stop (stagnated) after this many iterations without a new best merit
    patience: int | None = None

    def __post_init__(self):
        if not 0 < self.tau_min < self.tau_max < 1:
            raise ValueError("need 0 < tau_min < tau_max < 1")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if not self.tol_f > 0:
            raise ValueError("tol_f must be positive")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive")
        if self.max_iter < 1 or self.history_M < 1:
            raise ValueError("max_iter and history_M must be positive")


@dataclass
class SolverResult:
    beta_hat: np.ndarray
    f_norm: float
    iterations: int
    converged: bool
    stagnated: bool
    evaluations: int = 0
    # (k, alpha, merit, reference merit bound) per accepted step
    trace: list = field(default_factory=list, repr=False)


def _norm(fx: np.ndarray) -> float:
    return float(np.sqrt(fx @ fx / fx.size))


def _interp(alpha: float, f_trial: float, f_k: float, lo: float, hi: float) -> float:
    denom = f_trial + (2.0 * alpha - 1.0) * f_k
    a = alpha * alpha * f_k / denom if denom > 0 else lo
    return min(max(a, lo), hi)


def dfsane(F, x0, cfg: SolverConfig | None = None, record_trace: bool = False) -> SolverResult:
    """Solve ``F(x) = 0`` starting from ``x0``.

    Convergence is declared when ``||F(x)|| / sqrt(p) <= cfg.tol_f``.  When
    the line search underflows or ``max_iter`` is reached the best iterate
    seen so far is returned with ``stagnated=True``.
    """
    cfg = cfg or SolverConfig()
    x = np.array(x0, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise NonFiniteEvaluation(x)
    nevals = 0

    def evaluate(xv):
        nonlocal nevals
        nevals += 1
        fv = np.asarray(F(xv), dtype=float).ravel()
        if fv.shape != xv.shape or not np.all(np.isfinite(fv)):
            raise NonFiniteEvaluation(xv.copy())
        return fv

    fx = evaluate(x)
    merit = float(fx @ fx)
    merit0 = merit
    history = deque([merit], maxlen=cfg.history_M)
    best_x, best_merit = x.copy(), merit
    sigma = 1.0
    trace = []

    k = 0
    k_best = 0
    stagnated = False
    while True:
        if _norm(fx) <= cfg.tol_f:
            break
        if k >= cfg.max_iter or (cfg.patience and k - k_best >= cfg.patience):
            stagnated = True
            break
        d = -sigma * fx
        eta = merit0 / (1.0 + k) ** 2
        fmax = max(history)
        a_pos = a_neg = 1.0
        while True:
            bound_p = fmax + eta - cfg.gamma * a_pos * a_pos * merit
            xp = x + a_pos * d
            fp = evaluate(xp)
            mp = float(fp @ fp)
            if mp <= bound_p:
                x_new, f_new, m_new, alpha = xp, fp, mp, a_pos
                break
            bound_n = fmax + eta - cfg.gamma * a_neg * a_neg * merit
            xn = x - a_neg * d
            fn = evaluate(xn)
            mn = float(fn @ fn)
            if mn <= bound_n:
                x_new, f_new, m_new, alpha = xn, fn, mn, -a_neg
                break
            a_pos = _interp(a_pos, mp, merit, cfg.tau_min * a_pos, cfg.tau_max * a_pos)
            a_neg = _interp(a_neg, mn, merit, cfg.tau_min * a_neg, cfg.tau_max * a_neg)
            if max(a_pos, a_neg) < ALPHA_FLOOR:
                x_new = None
                break
        if x_new is None:
            stagnated = True
            break
        if record_trace:
            trace.append((k, alpha, m_new, fmax + eta - cfg.gamma * alpha * alpha * merit))
        s = x_new - x
        y = f_new - fx
        sy = float(s @ y)
        if sy == 0.0:
            sigma = 1.0
        else:
            sigma = float(s @ s) / sy
            mag = min(max(abs(sigma), cfg.sigma_min), cfg.sigma_max)
            sigma = np.copysign(mag, sigma)
        x, fx, merit = x_new, f_new, m_new
        history.append(merit)
        # ties move the best point too: on a piecewise-constant F the later
        # iterate with equal merit is the one closer to the jump being bracketed
        if merit <= best_merit:
            if merit < best_merit:
                k_best = k + 1
            best_x, best_merit = x.copy(), merit
        k += 1
        log.debug("dfsane k=%d alpha=%.3g |F|=%.3g sigma=%.3g", k, alpha,
                  np.sqrt(merit / x.size), sigma)

    if stagnated:
        x = best_x
        merit = best_merit
    converged = bool(np.sqrt(merit / x.size) <= cfg.tol_f)
    return SolverResult(
        beta_hat=x,
        f_norm=float(np.sqrt(merit / x.size)),
        iterations=k,
        converged=converged,
        stagnated=stagnated,
        evaluations=nevals,
        trace=trace,
    )
