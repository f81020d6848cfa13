"""Disturbance-feedback control with counterfactual online gradient descent.

A DFC policy of length h' maps the last h' output uncertainties to an input,
u_t = sum_i M[i] b_{t-i}.  The learner plays such a policy on uncertainties
computed from estimated Markov parameters and updates it by projected online
gradient descent on counterfactual losses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .system import ArxSystem, History, MarkovOperator, TrajectoryLog, simulate
from .sysid import estimate_from_data, pe_diagnostic
from .traces import RegretTrace

EXPLORE_COMMIT = "explore_commit"
CLOSED_LOOP = "closed_loop"
MODES = (EXPLORE_COMMIT, CLOSED_LOOP)


# --- losses --------------------------------------------------------------

@dataclass(frozen=True)
class LossOracle:
    """Strongly convex, smooth loss l(y, u).

    ``value`` and ``gradient`` must broadcast over leading axes, i.e. accept
    ``y`` of shape (..., m) and ``u`` of shape (..., p).
    """

    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray, np.ndarray], tuple]
    alpha_lower: float
    alpha_upper: float
    L: float
    name: str = "custom"

    def __call__(self, y, u):
        return float(self.value(y, u))

    def hessian_bounds(self, rng: np.random.Generator, m: int, p: int, radius: float = 3.0,
                       samples: int = 20, step: float = 1e-5):
        """Extreme eigenvalues of the central-difference Hessian at random points."""
        lo, hi = np.inf, -np.inf
        d = m + p
        for _ in range(samples):
            z = rng.uniform(-radius, radius, size=d) / np.sqrt(d)
            H = np.empty((d, d))
            for k in range(d):
                dz = np.zeros(d)
                dz[k] = step
                gp = np.concatenate(self.gradient((z + dz)[:m], (z + dz)[m:]))
                gm = np.concatenate(self.gradient((z - dz)[:m], (z - dz)[m:]))
                H[:, k] = (gp - gm) / (2 * step)
            ev = np.linalg.eigvalsh(0.5 * (H + H.T))
            lo, hi = min(lo, ev[0]), max(hi, ev[-1])
        return float(lo), float(hi)


def quadratic_loss(Q, R) -> LossOracle:
    """l(y, u) = y'Qy + u'Ru with Q, R positive definite."""
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    eq, er = np.linalg.eigvalsh(Q), np.linalg.eigvalsh(R)
    if eq[0] <= 0 or er[0] <= 0:
        raise ValueError("strongly convex quadratic loss needs Q, R positive definite")

    def value(y, u):
        return np.einsum("...i,ij,...j->...", y, Q, y) + np.einsum("...i,ij,...j->...", u, R, u)

    def gradient(y, u):
        return 2.0 * y @ Q, 2.0 * u @ R

    loss = LossOracle(value, gradient, 2 * min(eq[0], er[0]), 2 * max(eq[-1], er[-1]),
                      2 * max(eq[-1], er[-1]), "quadratic")
    object.__setattr__(loss, "Q", Q)
    object.__setattr__(loss, "R", R)
    return loss


def logcosh_loss(Q, R, c: float = 1.0) -> LossOracle:
    """Quadratic loss plus c * sum_i log cosh(y_i); Hessian in [2 lambda_min, 2 lambda_max + c]."""
    base = quadratic_loss(Q, R)

    def value(y, u):
        return base.value(y, u) + c * np.sum(np.logaddexp(y, -y) - np.log(2.0), axis=-1)

    def gradient(y, u):
        gy, gu = base.gradient(y, u)
        return gy + c * np.tanh(y), gu

    return LossOracle(value, gradient, base.alpha_lower, base.alpha_upper + c, base.L + c, "logcosh")


def is_quadratic(loss: LossOracle) -> bool:
    return hasattr(loss, "Q") and hasattr(loss, "R")


# --- policies ------------------------------------------------------------

@dataclass(frozen=True)
class DfcPolicy:
    M: np.ndarray  # (h', p, m)

    def __post_init__(self):
        object.__setattr__(self, "M", np.asarray(self.M, dtype=float))
        if self.M.ndim != 3:
            raise ValueError(f"policy taps must have shape (h', p, m), got {self.M.shape}")

    @property
    def h_prime(self) -> int:
        return self.M.shape[0]

    @classmethod
    def zeros(cls, h_prime: int, p: int, m: int) -> "DfcPolicy":
        return cls(np.zeros((h_prime, p, m)))

    def norm_sum(self) -> float:
        return block_norm_sum(self.M)


def block_norm_sum(M: np.ndarray) -> float:
    """sum_i ||M[i]||_2."""
    if M.shape[1] == 1 or M.shape[2] == 1:
        return float(np.sum(np.sqrt(np.sum(M**2, axis=(1, 2)))))
    return float(np.sum(np.linalg.norm(M, ord=2, axis=(1, 2))))


@dataclass(frozen=True)
class DfcSet:
    """Policies with sum_i ||M[i]||_2 <= kappa_psi (1 + r)."""

    kappa_psi: float
    r: float
    h_prime: int
    h: int

    def __post_init__(self):
        if self.kappa_psi <= 0 or self.r < 0:
            raise ValueError("need kappa_psi > 0 and r >= 0")
        if self.h_prime < 3 * self.h or self.h < 1:
            raise ValueError(f"need h' >= 3h >= 3, got h'={self.h_prime}, h={self.h}")

    @property
    def h0_prime(self) -> int:
        return self.h_prime // 2 - self.h

    @property
    def bound(self) -> float:
        return self.kappa_psi * (1 + self.r)

    def contains(self, policy: DfcPolicy, tol: float = 1e-9) -> bool:
        return policy.norm_sum() <= self.bound * (1 + tol)


def project_taps(M: np.ndarray, bound: float) -> np.ndarray:
    """Radial scaling onto {sum ||M[i]||_2 <= bound}; identity inside the set."""
    s = block_norm_sum(M)
    if s <= bound:
        return M
    return M * (bound / s)


def project(policy: DfcPolicy, dset: DfcSet) -> DfcPolicy:
    M = project_taps(policy.M, dset.bound)
    return policy if M is policy.M else DfcPolicy(M)


# --- counterfactuals -----------------------------------------------------

class CounterfactualState:
    """Uncertainty history b_j(G_hat) and nature's outputs under the current estimate.

    ``nature[j] = y_j - sum_{k=1}^h Gbar^k u_{j-k}`` removes the effect of past
    inputs through the output-feedback loop, with Gbar^k = C (A+FC)^{k-1} B
    derived from the estimate.  Arrays are zero-padded so that windows reaching
    before t = 0 read zeros.
    """

    def __init__(self, g_hat: MarkovOperator, h_prime: int, T: int, epoch: int = 0):
        self.g_hat = g_hat
        self.gbar = g_hat.closed_loop()
        self.h = g_hat.h
        self.h_prime = h_prime
        self.epoch = epoch
        self.pad = self.h + h_prime
        m = g_hat.m
        self.b_bar = np.zeros((T + self.pad, m))
        self.nature = np.zeros((T + self.pad, m))
        self._idx = np.arange(self.h + 1)[:, None] + np.arange(h_prime)[None, :]

    @classmethod
    def from_history(cls, g_hat: MarkovOperator, h_prime: int, y: np.ndarray, u: np.ndarray,
                     T: Optional[int] = None, epoch: int = 0) -> "CounterfactualState":
        """Recompute every past b_j and nature_j under ``g_hat``."""
        from .system import output_uncertainties

        T = len(y) if T is None else T
        st = cls(g_hat, h_prime, T, epoch)
        k = len(y)
        if k:
            st.b_bar[st.pad: st.pad + k] = output_uncertainties(y, u[:k], g_hat)
            zero_y = MarkovOperator(st.gbar, np.zeros_like(g_hat.g_y))
            st.nature[st.pad: st.pad + k] = output_uncertainties(y, u[:k], zero_y)
        return st

    def observe(self, t: int, y_t: np.ndarray, u_past: np.ndarray, y_past: np.ndarray) -> np.ndarray:
        """Store b_t and nature_t from y_t and the last h inputs/outputs (newest first)."""
        g = self.g_hat
        b = y_t - np.einsum("kmp,kp->m", g.g_u, u_past) - np.einsum("kmj,kj->m", g.g_y, y_past)
        self.b_bar[t + self.pad] = b
        self.nature[t + self.pad] = y_t - np.einsum("kmp,kp->m", self.gbar, u_past)
        return b

    def recent(self, t: int, k: int) -> np.ndarray:
        """b_t, b_{t-1}, ..., b_{t-k+1}."""
        i = t + self.pad
        return self.b_bar[i - k + 1: i + 1][::-1]

    def window(self, t: int) -> np.ndarray:
        """W[j, l] = b_{t-j-l} for j = 0..h, l = 0..h'-1."""
        return self.recent(t, self.h + self.h_prime)[self._idx]


def dfc_input(policy: DfcPolicy, state: CounterfactualState, t: int) -> np.ndarray:
    return np.einsum("lpm,lm->p", policy.M, state.recent(t, policy.h_prime))


def _counterfactuals(M: np.ndarray, state: CounterfactualState, t: int):
    W = state.window(t)
    u_cf = np.einsum("lpm,jlm->jp", M, W)  # u~_{t-j}, j = 0..h
    y_cf = state.nature[t + state.pad] + np.einsum("jmp,jp->m", state.gbar, u_cf[1:])
    return W, u_cf, y_cf


def counterfactual_loss(policy: DfcPolicy, state: CounterfactualState, loss: LossOracle, t: int) -> float:
    _, u_cf, y_cf = _counterfactuals(policy.M, state, t)
    return float(loss.value(y_cf, u_cf[0]))


def counterfactual_gradient(policy: DfcPolicy, state: CounterfactualState, loss: LossOracle, t: int) -> np.ndarray:
    """d f_t / d M[l], shape (h', p, m).

    u~ and y~ are linear in M, so the gradient is the loss gradient pulled back
    through u~_t directly and through each u~_{t-j} via Gbar^j.
    """
    W, u_cf, y_cf = _counterfactuals(policy.M, state, t)
    gy, gu = loss.gradient(y_cf, u_cf[0])
    V = np.vstack([gu[None, :], np.einsum("jmp,m->jp", state.gbar, gy)])
    return np.einsum("jp,jlm->lpm", V, W)


# --- Algorithm runner ----------------------------------------------------

@dataclass
class DfcConfig:
    T: int
    T_warm: int  # warm-up length; in closed_loop mode the base epoch length tau
    h: int
    h_prime: Optional[int] = None
    sigma_u: float = 1.0
    eta_scale: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if self.h_prime is None:
            self.h_prime = 3 * self.h
        if self.h_prime < 3 * self.h:
            raise ValueError("h' must be at least 3h")
        if not self.h < self.T_warm < self.T:
            raise ValueError(f"need h < T_warm < T, got h={self.h}, T_warm={self.T_warm}, T={self.T}")


def epoch_starts(T_warm: int, T: int, mode: str):
    if mode == EXPLORE_COMMIT:
        return [T_warm]
    if mode != CLOSED_LOOP:
        raise ValueError(f"unknown mode {mode!r}")
    starts, s = [], T_warm
    while s < T:
        starts.append(s)
        s *= 2
    return starts


class DfcController:
    """Warm-up with Gaussian inputs, then DFC play with projected OGD."""

    def __init__(self, dset: DfcSet, loss: LossOracle, mode: str, cfg: DfcConfig, m: int, p: int):
        self.dset, self.loss, self.mode, self.cfg = dset, loss, mode, cfg
        self.m, self.p = m, p
        self.M = np.zeros((cfg.h_prime, p, m))
        self.starts = set(epoch_starts(cfg.T_warm, cfg.T, mode))
        self.state: Optional[CounterfactualState] = None
        self.alpha = loss.alpha_lower
        self.epochs = []  # (start step, number of samples used, pe diagnostics)
        self.max_norm_sum = 0.0

    def _new_epoch(self, t: int, hist: History):
        est = estimate_from_data(hist.y[:t], hist.u[:t], self.cfg.h, self.cfg.lam)
        self.state = CounterfactualState.from_history(est.markov(), self.cfg.h_prime, hist.y[:t], hist.u[:t],
                                                      T=self.cfg.T, epoch=len(self.epochs))
        smin, ratio = pe_diagnostic(est)
        self.epochs.append({"start": t, "data_steps": t, "samples": est.t, "sigma_min": smin,
                            "sigma_min_per_sample": ratio, "g_hat": est.g_hat})

    def __call__(self, t: int, hist: History) -> np.ndarray:
        cfg = self.cfg
        if t < cfg.T_warm:
            return cfg.sigma_u * hist.rng.standard_normal(self.p)
        if t in self.starts:
            self._new_epoch(t, hist)
        h = cfg.h
        st = self.state
        st.observe(t, hist.y[t], hist.u[t - h:t][::-1], hist.y[t - h:t][::-1])
        M = self.M
        u = np.einsum("lpm,lm->p", M, st.recent(t, cfg.h_prime))
        grad = counterfactual_gradient(DfcPolicy(M), st, self.loss, t)
        eta = cfg.eta_scale * 12.0 / (self.alpha * t)
        self.M = project_taps(M - eta * grad, self.dset.bound)
        ns = block_norm_sum(self.M)
        if ns > self.dset.bound * (1 + 1e-9):
            raise AssertionError(f"policy left the DFC set at step {t}: {ns} > {self.dset.bound}")
        self.max_norm_sum = max(self.max_norm_sum, ns)
        return u


def run_algorithm1(system: ArxSystem, dset: DfcSet, loss: LossOracle, mode: str, cfg: DfcConfig,
                   seed: int = 0, x0=None):
    """Adaptive DFC control; returns ``(TrajectoryLog, RegretTrace)``.

    The trace carries realized per-step costs; its comparator column is zero
    until filled by a best-in-hindsight computation.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if dset.h_prime != cfg.h_prime or dset.h != cfg.h:
        raise ValueError("DFC set and config disagree on (h, h')")
    ctrl = DfcController(dset, loss, mode, cfg, system.m, system.p)
    log = simulate(system, ctrl, cfg.T, seed=seed, loss=loss, x0=x0)
    meta = {"algorithm": "dfc", "mode": mode, "seed": seed, "T": cfg.T, "T_warm": cfg.T_warm,
            "h": cfg.h, "h_prime": cfg.h_prime, "epochs": ctrl.epochs, "final_policy": ctrl.M,
            "max_norm_sum": ctrl.max_norm_sum}
    return log, RegretTrace(log.losses.copy(), 0.0, meta)
