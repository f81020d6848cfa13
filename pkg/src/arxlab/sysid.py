"""Regularized least-squares estimation of ARX Markov parameters."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .system import MarkovOperator, TrajectoryLog, regressor_matrix


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Regressor:
    phi: np.ndarray
    t: int


@dataclass(frozen=True)
class RegressorSet:
    """Stacked regressors phi_i (rows of ``phi``) for steps ``t``, with targets ``y``."""

    phi: np.ndarray  # (N, h(m+p))
    t: np.ndarray  # (N,)
    y: np.ndarray  # (N, m) outputs y_i paired with phi_i
    h: int
    p: int

    def __len__(self) -> int:
        return self.phi.shape[0]

    def __getitem__(self, k) -> Regressor:
        return Regressor(self.phi[k], int(self.t[k]))


def build_regressors(log_or_y, h: int, u: Optional[np.ndarray] = None, stop: Optional[int] = None) -> RegressorSet:
    """One regressor per i in [h, T-1] (or [h, stop-1]).

    Accepts a TrajectoryLog, or raw ``y`` and ``u`` arrays.
    """
    if isinstance(log_or_y, TrajectoryLog):
        y, u = log_or_y.y, log_or_y.u
    else:
        y = np.asarray(log_or_y, dtype=float)
        u = np.asarray(u, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if u.ndim == 1:
            u = u[:, None]
    if stop is not None:
        y, u = y[:stop], u[:stop]
    if h < 1:
        raise ValueError("h must be >= 1")
    T = y.shape[0]
    if T < h + 1:
        raise ValueError(f"trajectory of length {T} too short for horizon {h}")
    phi = regressor_matrix(y, u, h, start=h)
    return RegressorSet(phi, np.arange(h, T), y[h:], h, u.shape[1])


@dataclass(frozen=True)
class LsEstimate:
    g_hat: np.ndarray  # (m, h(m+p))
    V: np.ndarray
    lam: float
    t: int
    h: int
    p: int
    logdet_ratio: float  # log det(V) - log det(lam I)
    beta: Optional[float] = None

    @property
    def m(self) -> int:
        return self.g_hat.shape[0]

    def markov(self) -> MarkovOperator:
        return MarkovOperator.from_stacked(self.g_hat, self.h, self.p)

    def to_dict(self) -> dict:
        d = {"h": self.h, "p": self.p, "m": self.m, "lambda": self.lam, "t": self.t,
             "g_hat": self.g_hat.tolist(), "V": self.V.tolist(), "logdet_ratio": self.logdet_ratio}
        if self.beta is not None:
            d["beta"] = self.beta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LsEstimate":
        return cls(np.asarray(d["g_hat"], float), np.asarray(d["V"], float), float(d["lambda"]),
                   int(d["t"]), int(d["h"]), int(d["p"]), float(d["logdet_ratio"]), d.get("beta"))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def rls_estimate(regressors: RegressorSet, outputs: Optional[np.ndarray] = None, lam: float = 1.0) -> LsEstimate:
    """Solve min_G lam ||G||_F^2 + sum_i ||y_i - G phi_i||^2 through a Cholesky factor of V."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    Phi = regressors.phi
    Y = regressors.y if outputs is None else np.asarray(outputs, dtype=float).reshape(len(Phi), -1)
    if len(Phi) == 0:
        raise ValueError("need at least one regressor")
    d = Phi.shape[1]
    V = lam * np.eye(d) + Phi.T @ Phi
    S = Y.T @ Phi  # sum y_i phi_i^T
    try:
        cf = cho_factor(V, lower=True)
    except LinAlgError as exc:
        raise NumericalError(f"design matrix not positive definite (lambda={lam:g})") from exc
    piv = np.abs(np.diag(cf[0]))
    if not np.all(np.isfinite(cf[0])):
        raise NumericalError("non-finite Cholesky factor")
    if (piv.min() / piv.max()) ** 2 < np.finfo(float).eps:
        raise NumericalError(f"design matrix numerically singular (lambda={lam:g} below working precision)")
    g_hat = cho_solve(cf, S.T).T
    resid = np.linalg.norm(g_hat @ V - S)
    if resid > 1e-8 * max(np.linalg.norm(V), 1.0) * max(1.0, np.linalg.norm(g_hat)):
        raise NumericalError(f"least-squares residual {resid:.3g} too large; V is ill-conditioned")
    logdet_V = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    return LsEstimate(g_hat, V, float(lam), len(Phi), regressors.h, regressors.p, logdet_V - d * np.log(lam))


@dataclass(frozen=True)
class ConfidenceParams:
    S: float
    delta: float
    R: float
    T: int

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.S <= 0:
            raise ValueError("S must be positive")


def confidence_radius(est: LsEstimate, params: ConfidenceParams, m: Optional[int] = None) -> float:
    """beta_t = (sqrt(m R log(det(V)^{1/2} / (delta det(lam I)^{1/2}))) + S sqrt(lam) + t sqrt(h)/T^2)^2."""
    m = est.m if m is None else m
    log_term = np.log(1.0 / params.delta) + 0.5 * est.logdet_ratio
    root = np.sqrt(m * params.R * log_term) + params.S * np.sqrt(est.lam) + est.t * np.sqrt(est.h) / params.T**2
    return float(root**2)


def ellipsoid_statistic(est: LsEstimate, truth: MarkovOperator) -> float:
    """Tr((G_hat - G) V (G_hat - G)^T)."""
    D = est.g_hat - truth.truncate(est.h).stacked()
    return float(np.trace(D @ est.V @ D.T))


def g_error_bound(est: LsEstimate, beta: float) -> float:
    """Frobenius radius implied by the ellipsoid: sqrt(beta / lambda_min(V))."""
    return float(np.sqrt(beta / np.linalg.eigvalsh(est.V)[0]))


def pe_diagnostic(est: LsEstimate):
    """``(lambda_min(V), lambda_min(V) / t)``; the ratio divides by max(t, 1)."""
    smin = float(np.linalg.eigvalsh(est.V)[0])
    return smin, smin / max(est.t, 1)


def estimation_error(est: LsEstimate, truth: MarkovOperator) -> float:
    if truth.h < est.h or truth.m != est.m or truth.p != est.p:
        raise ValueError(f"estimate (h={est.h}) and truth (h={truth.h}) do not share a horizon")
    return float(np.linalg.norm(est.g_hat - truth.truncate(est.h).stacked()))


def ls_objective(G: np.ndarray, regressors: RegressorSet, lam: float) -> float:
    R = regressors.y - regressors.phi @ G.T
    return float(lam * np.sum(G**2) + np.sum(R**2))


def estimate_from_data(y: np.ndarray, u: np.ndarray, h: int, lam: float = 1.0, stop: Optional[int] = None) -> LsEstimate:
    """Convenience: regressors from the first ``stop`` steps, then rls_estimate."""
    return rls_estimate(build_regressors(y, h, u=u, stop=stop), lam=lam)
