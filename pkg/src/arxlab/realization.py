"""State-space realization (A, B, C, F) from Markov parameters via Hankel SVD."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .system import MarkovOperator, spectral_radius

PINV_RCOND = 1e-10
ORDER_TOL = 1e-12


class OrderDeficiencyError(ValueError):
    """The rank-n Hankel truncation has (numerically) zero n-th singular value."""


@dataclass(frozen=True)
class HankelPair:
    H: np.ndarray  # [H_y, H_u], (m d1) x (m+p)(d2+1)
    d1: int
    d2: int
    m: int
    p: int

    @property
    def h(self) -> int:
        return self.d1 + self.d2 + 1

    @property
    def H_y(self) -> np.ndarray:
        return self.H[:, : self.m * (self.d2 + 1)]

    @property
    def H_u(self) -> np.ndarray:
        return self.H[:, self.m * (self.d2 + 1):]

    def _drop(self, which: str) -> np.ndarray:
        m, p, d2 = self.m, self.p, self.d2
        if which == "last":  # H^-: drop (d2+1)th and (2d2+2)th block columns
            return np.hstack([self.H_y[:, : m * d2], self.H_u[:, : p * d2]])
        return np.hstack([self.H_y[:, m:], self.H_u[:, p:]])  # H^+: drop 1st and (d2+2)th

    @property
    def minus(self) -> np.ndarray:
        return self._drop("last")

    @property
    def plus(self) -> np.ndarray:
        return self._drop("first")


def default_split(h: int):
    d1 = (h - 1) // 2
    return d1, h - 1 - d1


def build_hankel(op: MarkovOperator, d1: Optional[int] = None, d2: Optional[int] = None) -> HankelPair:
    """Block (i, j) (0-based) of each Hankel is the Markov parameter with 1-based index i+j+1."""
    if d1 is None and d2 is None:
        d1, d2 = default_split(op.h)
    elif d1 is None or d2 is None:
        raise ValueError("give both d1 and d2, or neither")
    if d1 < 1 or d2 < 1 or d1 + d2 + 1 != op.h:
        raise ValueError(f"split d1={d1}, d2={d2} does not satisfy d1 + d2 + 1 = h = {op.h}")
    Hy = np.block([[op.g_y[i + j] for j in range(d2 + 1)] for i in range(d1)])
    Hu = np.block([[op.g_u[i + j] for j in range(d2 + 1)] for i in range(d1)])
    return HankelPair(np.hstack([Hy, Hu]), d1, d2, op.m, op.p)


@dataclass(frozen=True)
class RealizedSystem:
    A_hat: np.ndarray
    B_hat: np.ndarray
    C_hat: np.ndarray
    F_hat: np.ndarray
    n: int
    sigma_n: float
    h: int = 0
    hplus_norm: float = 0.0
    hankel_sv: Optional[np.ndarray] = None

    @property
    def m(self) -> int:
        return self.C_hat.shape[0]

    @property
    def p(self) -> int:
        return self.B_hat.shape[1]

    @property
    def stable(self) -> bool:
        return spectral_radius(self.A_hat) < 1

    def markov_parameters(self, h: int) -> MarkovOperator:
        g_u = np.empty((h, self.m, self.p))
        g_y = np.empty((h, self.m, self.m))
        CAk = self.C_hat.copy()
        for i in range(h):
            g_u[i] = CAk @ self.B_hat
            g_y[i] = CAk @ self.F_hat
            CAk = CAk @ self.A_hat
        return MarkovOperator(g_u, g_y)

    def transformed(self, Tm: np.ndarray) -> "RealizedSystem":
        """(T A T^-1, T B, C T^-1, T F)."""
        Ti = np.linalg.inv(Tm)
        return replace(self, A_hat=Tm @ self.A_hat @ Ti, B_hat=Tm @ self.B_hat,
                       C_hat=self.C_hat @ Ti, F_hat=Tm @ self.F_hat)

    def matrices(self):
        return self.A_hat, self.B_hat, self.C_hat, self.F_hat

    def to_dict(self) -> dict:
        return {"n": self.n, "A": self.A_hat.tolist(), "B": self.B_hat.tolist(),
                "C": self.C_hat.tolist(), "F": self.F_hat.tolist(), "sigma_n": self.sigma_n,
                "h": self.h, "hplus_norm": self.hplus_norm, "stable": bool(self.stable),
                "hankel_sv": None if self.hankel_sv is None else self.hankel_sv.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RealizedSystem":
        sv = d.get("hankel_sv")
        return cls(np.asarray(d["A"], float), np.asarray(d["B"], float), np.asarray(d["C"], float),
                   np.asarray(d["F"], float), int(d["n"]), float(d["sigma_n"]), int(d.get("h", 0)),
                   float(d.get("hplus_norm", 0.0)), None if sv is None else np.asarray(sv, float))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def realize(pair: HankelPair, n: int) -> RealizedSystem:
    m, p, d1, d2 = pair.m, pair.p, pair.d1, pair.d2
    if not 1 <= n <= min(m * d1, (m + p) * d2):
        raise ValueError(f"order n={n} exceeds Hankel rank bound min({m * d1}, {(m + p) * d2})")
    H_minus = pair.minus
    U, s, Vt = np.linalg.svd(H_minus, full_matrices=False)
    if s[n - 1] < ORDER_TOL:
        raise OrderDeficiencyError(f"sigma_{n} of the Hankel matrix is {s[n - 1]:.3g}")
    root = np.sqrt(s[:n])
    O = U[:, :n] * root  # U Sigma^{1/2}
    Ctrb = root[:, None] * Vt[:n]  # Sigma^{1/2} V^T = [C_F, C_B]
    C_hat = O[:m]
    F_hat = Ctrb[:, :m]
    B_hat = Ctrb[:, m * d2: m * d2 + p]
    H_plus = pair.plus
    A_hat = np.linalg.pinv(O, rcond=PINV_RCOND) @ H_plus @ np.linalg.pinv(Ctrb, rcond=PINV_RCOND)
    return RealizedSystem(A_hat, B_hat, C_hat, F_hat, n, float(s[n - 1]), pair.h,
                          float(np.linalg.norm(H_plus, 2)), s)


def sysid_arx(op: MarkovOperator, n: int, d1: Optional[int] = None, d2: Optional[int] = None) -> RealizedSystem:
    return realize(build_hankel(op, d1, d2), n)


def markov_roundtrip_error(realized: RealizedSystem, op: MarkovOperator, h: Optional[int] = None) -> float:
    """Frobenius distance between the realized system's Markov parameters and ``op``."""
    h = op.h if h is None else min(h, op.h)
    mine = realized.markov_parameters(h)
    return float(np.sqrt(np.sum((mine.g_u - op.g_u[:h]) ** 2) + np.sum((mine.g_y - op.g_y[:h]) ** 2)))


def estimate_order(pair: HankelPair, max_order: Optional[int] = None) -> int:
    """Diagnostic: position of the largest gap in log Hankel singular values."""
    s = np.linalg.svd(pair.minus, compute_uv=False)
    if max_order is not None:
        s = s[: max_order + 1]
    s = np.maximum(s, np.finfo(float).tiny)
    gaps = np.log(s[:-1]) - np.log(s[1:])
    return int(np.argmax(gaps)) + 1 if len(gaps) else 1


def parameter_confidence(realized: RealizedSystem, g_error_bound: float,
                         sigma_n: Optional[float] = None, hplus_norm: Optional[float] = None,
                         h: Optional[int] = None) -> dict:
    """Per-matrix radii up to similarity, scaled by an estimation error bound.

    B, C and F share sqrt(20 n h) eps / sqrt(sigma_n); A gets
    31 sqrt(2nh) ||H+|| eps / (2 sigma_n^2) + 13 sqrt(nh) eps / (2 sqrt(2) sigma_n).
    The Hankel spectrum defaults to that of the realized (estimated) Hankel.
    """
    if g_error_bound < 0:
        raise ValueError("g_error_bound must be non-negative")
    sn = realized.sigma_n if sigma_n is None else sigma_n
    hp = realized.hplus_norm if hplus_norm is None else hplus_norm
    h = realized.h if h is None else h
    n = realized.n
    if sn <= 0:
        raise ValueError("sigma_n must be positive")
    eps = g_error_bound
    r_bcf = np.sqrt(20 * n * h) * eps / np.sqrt(sn)
    r_a = 31 * np.sqrt(2 * n * h) * hp * eps / (2 * sn**2) + 13 * np.sqrt(n * h) * eps / (2 * np.sqrt(2) * sn)
    return {"A": float(r_a), "B": float(r_bcf), "C": float(r_bcf), "F": float(r_bcf)}
