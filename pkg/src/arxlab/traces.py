"""Regret traces and empirical rate fits."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class RegretTrace:
    cost: np.ndarray
    comparator: np.ndarray
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=float)
        self.comparator = np.broadcast_to(np.asarray(self.comparator, dtype=float), self.cost.shape).copy()

    @property
    def cum_regret(self) -> np.ndarray:
        return np.cumsum(self.cost - self.comparator)

    @property
    def final_regret(self) -> float:
        return float(np.sum(self.cost - self.comparator))

    def __len__(self) -> int:
        return len(self.cost)

    def with_comparator(self, comparator, **meta) -> "RegretTrace":
        return RegretTrace(self.cost, comparator, {**self.meta, **meta})

    def to_csv(self, path) -> None:
        cum = self.cum_regret
        with open(path, "w", newline="") as fh:
            fh.write("t,cost,comparator_cost,cum_regret\n")
            for t in range(len(self.cost)):
                fh.write(f"{t},{self.cost[t]:.17g},{self.comparator[t]:.17g},{cum[t]:.17g}\n")


def regret_quadratic(costs, J_star: float, **meta) -> RegretTrace:
    """Regret against the optimal average cost: prefix sums of c_t - J*."""
    return RegretTrace(np.asarray(costs, dtype=float), J_star, meta)


@dataclass(frozen=True)
class ExponentFit:
    slope: float
    intercept: float
    r_squared: float
    polylog_k: int
    polylog_r_squared: float
    T: tuple
    regret: tuple

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r_squared": self.r_squared,
                "polylog_k": self.polylog_k, "polylog_r_squared": self.polylog_r_squared,
                "T": list(self.T), "median_regret": list(self.regret)}


def _linfit(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), float(r2)


def fit_regret_exponent(T_values: Sequence[float], regrets) -> ExponentFit:
    """OLS of log(median regret) on log T, plus the best polylog fit regret ~ a + b log^k T.

    ``regrets`` is either one value per T or a sequence of per-seed values per T
    (medians taken).  Non-positive medians are dropped with a warning.
    """
    T = np.asarray(T_values, dtype=float)
    med = np.array([float(np.median(r)) for r in regrets]) if np.ndim(regrets[0]) else np.asarray(regrets, float)
    keep = med > 0
    if not np.all(keep):
        log.warning("dropping grid points with non-positive median regret: T=%s", T[~keep].tolist())
    T, med = T[keep], med[keep]
    if len(T) < 3:
        raise ValueError(f"need >= 3 grid points with positive regret, have {len(T)}")
    slope, intercept, r2 = _linfit(np.log(T), np.log(med))
    best_k, best_r2 = 1, -np.inf
    for k in (1, 2, 3):
        _, _, r2k = _linfit(np.log(T) ** k, med)
        if r2k > best_r2:
            best_k, best_r2 = k, float(r2k)
    return ExponentFit(slope, intercept, r2, best_k, best_r2, tuple(T.tolist()), tuple(med.tolist()))
