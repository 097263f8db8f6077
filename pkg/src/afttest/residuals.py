"""Counting-process quantities on the residual time scale.

For residuals ``e_i`` and event indicators ``Delta_i`` the Nelson-Aalen
estimator is ``L(t) = sum_{i: Delta_i = 1, e_i <= t} 1 / R(e_i)`` with
``R(s) = #{j : e_j >= s}``, and the martingale residual of subject ``i`` is

    M_i(t) = Delta_i I(e_i <= t) - L(min(e_i, t)).

Because ``L`` is nondecreasing, ``L(min(e_i, t)) = min(L(e_i), L(t))``,
which gives the whole ``n x grid`` matrix in one broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SurvivalDataset
from .errors import EmptyInput
from .estimation import residual_times


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function, zero before the first jump."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right") - 1
        padded = np.concatenate([[0.0], self.values])
        out = padded[idx + 1]
        return out if out.ndim else float(out)


def nelson_aalen(e, delta) -> StepFunction:
    """Nelson-Aalen cumulative hazard of ``(e, delta)``.

    Tied event times each contribute ``1/R`` at the shared time.
    """
    e = np.asarray(e, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if e.size == 0:
        raise EmptyInput("nelson_aalen needs at least one observation")
    if e.shape != delta.shape:
        raise ValueError("e and delta must have the same length")
    if not np.all((delta == 0) | (delta == 1)):
        raise ValueError("delta must be 0 or 1")
    es = np.sort(e)
    ev = e[delta == 1]
    if ev.size == 0:
        return StepFunction(np.empty(0), np.empty(0))
    jump_times, counts = np.unique(ev, return_counts=True)
    at_risk = e.size - np.searchsorted(es, jump_times, side="left")
    return StepFunction(jump_times, np.cumsum(counts / at_risk))


def martingale_on_grid(e, delta, grid, hazard: StepFunction | None = None) -> np.ndarray:
    """``M_i(t_k)`` for every subject ``i`` (rows) and grid point ``t_k``."""
    e = np.asarray(e, dtype=float)
    delta = np.asarray(delta, dtype=float)
    grid = np.asarray(grid, dtype=float)
    hazard = hazard or nelson_aalen(e, delta)
    lam_e = hazard(e)
    lam_g = hazard(grid)
    counted = (e[:, None] <= grid[None, :]) * delta[:, None]
    return counted - np.minimum(lam_e[:, None], lam_g[None, :])


@dataclass(frozen=True, eq=False)
class ResidualProcessSet:
    """Martingale residuals on the grid of sorted residual times.

    ``mhat[i, k]`` is ``M_i(t_k)`` where ``t_k = e[order[k]]``; rows follow
    the original subject order.
    """

    e: np.ndarray
    delta: np.ndarray
    order: np.ndarray
    hazard: StepFunction
    na_steps: np.ndarray
    mhat: np.ndarray

    @property
    def grid(self) -> np.ndarray:
        return self.e[self.order]

    @property
    def n(self) -> int:
        return self.e.size


def residual_process_from_times(e, delta) -> ResidualProcessSet:
    e = np.asarray(e, dtype=float)
    delta = np.asarray(delta, dtype=float)
    order = np.argsort(e, kind="stable")
    grid = e[order]
    hazard = nelson_aalen(e, delta)
    return ResidualProcessSet(
        e=e,
        delta=delta,
        order=order,
        hazard=hazard,
        na_steps=hazard(grid),
        mhat=martingale_on_grid(e, delta, grid, hazard),
    )


def martingale_matrix(beta, d: SurvivalDataset) -> ResidualProcessSet:
    """Residuals, Nelson-Aalen steps and the n x n martingale matrix at ``beta``."""
    return residual_process_from_times(residual_times(beta, d), d.status)
