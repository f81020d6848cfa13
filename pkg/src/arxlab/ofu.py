"""Riccati-based optimal control of ARX systems and optimistic adaptive control."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dfc import CLOSED_LOOP, EXPLORE_COMMIT, MODES, epoch_starts
from .realization import OrderDeficiencyError, RealizedSystem, parameter_confidence, sysid_arx
from .system import ArxSystem, History, markov_parameters, simulate
from .sysid import ConfidenceParams, confidence_radius, estimate_from_data, g_error_bound, pe_diagnostic
from .traces import regret_quadratic

log = logging.getLogger(__name__)


class DareConvergenceError(RuntimeError):
    def __init__(self, msg, iterations, last_change, P_norm):
        super().__init__(f"{msg} (iterations={iterations}, last change={last_change:.3g}, ||P||={P_norm:.3g})")
        self.iterations = iterations
        self.last_change = last_change
        self.P_norm = P_norm


@dataclass(frozen=True)
class QuadraticCost:
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, float))
        R = np.atleast_2d(np.asarray(self.R, float))
        if not (np.allclose(Q, Q.T, atol=1e-12) and np.allclose(R, R.T, atol=1e-12)):
            raise ValueError("Q and R must be symmetric")
        if np.linalg.eigvalsh(Q)[0] < -1e-9:
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(R)[0] <= 1e-9:
            raise ValueError("R must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @classmethod
    def identity(cls, m: int, p: int) -> "QuadraticCost":
        return cls(np.eye(m), np.eye(p))

    def __call__(self, y, u):
        return float(y @ self.Q @ y + u @ self.R @ u)

    def batch(self, y, u):
        return np.einsum("ti,ij,tj->t", y, self.Q, y) + np.einsum("ti,ij,tj->t", u, self.R, u)


@dataclass(frozen=True)
class DareSolution:
    P: np.ndarray
    K_x: np.ndarray
    K_y: np.ndarray
    J_star: float
    residual: float
    cost: QuadraticCost
    iterations: int = 0
    P_bar: Optional[np.ndarray] = None  # P - P B (R + B'PB)^{-1} B'P

    def gains(self):
        return self.K_x, self.K_y


def _matrices(system):
    if isinstance(system, ArxSystem):
        return system.A, system.B, system.C, system.F
    if isinstance(system, RealizedSystem):
        return system.matrices()
    return tuple(np.atleast_2d(np.asarray(M, float)) for M in system)


def _noise_cov(system, noise_cov, m):
    if noise_cov is None:
        return system.noise.cov if isinstance(system, ArxSystem) else np.eye(m)
    return np.atleast_2d(np.asarray(noise_cov, float))


def riccati_rhs(system, cost: QuadraticCost, P: np.ndarray) -> np.ndarray:
    """C'QC + Acl'P Acl - Acl'PB (R + B'PB)^{-1} B'P Acl with Acl = A + F C."""
    A, B, C, F = _matrices(system)
    Acl = A + F @ C
    PB = P @ B
    PBA = PB.T @ Acl
    return C.T @ cost.Q @ C + Acl.T @ P @ Acl - PBA.T @ np.linalg.solve(cost.R + B.T @ PB, PBA)


def solution_from_P(system, cost: QuadraticCost, P: np.ndarray, noise_cov=None, iterations: int = 0) -> DareSolution:
    """Gains, average cost and residual implied by a candidate Riccati matrix ``P``."""
    A, B, C, F = _matrices(system)
    P = np.asarray(P, float)
    noise_cov = _noise_cov(system, noise_cov, C.shape[0])
    gain = np.linalg.solve(cost.R + B.T @ P @ B, B.T @ P)  # (R + B'PB)^{-1} B'P
    P_bar = P - P @ B @ gain
    J = float(np.trace(noise_cov @ (cost.Q + F.T @ P_bar @ F)))
    residual = float(np.linalg.norm(P - riccati_rhs(system, cost, P)))
    return DareSolution(P, -gain @ A, -gain @ F, J, residual, cost, iterations, P_bar)


def solve_dare(system, cost: QuadraticCost, noise_cov=None, tol: float = 1e-13, max_iter: int = 100_000,
               P0: Optional[np.ndarray] = None, blowup: float = 1e12) -> DareSolution:
    """Fixed-point iteration P <- rhs(P) of the ARX Riccati equation.

    Starts from C'QC (or ``P0``) and stops once ||P_new - P||_F <= tol (1 + ||P||_F).
    The average cost uses ``noise_cov`` (default: the system's, else identity).
    """
    mats = _matrices(system)
    C = mats[2]
    P = C.T @ cost.Q @ C if P0 is None else np.asarray(P0, float).copy()
    change = np.inf
    for k in range(1, max_iter + 1):
        P_new = riccati_rhs(mats, cost, P)
        P_new = 0.5 * (P_new + P_new.T)
        change = np.linalg.norm(P_new - P)
        if not np.all(np.isfinite(P_new)) or np.linalg.norm(P_new) > blowup:
            raise DareConvergenceError("Riccati iterates diverged; (A+FC, B) is likely not stabilizable",
                                       k, change, float(np.linalg.norm(P_new)))
        done = change <= tol * (1 + np.linalg.norm(P))
        P = P_new
        if done:
            break
    else:
        raise DareConvergenceError("Riccati iteration did not converge", max_iter, change, float(np.linalg.norm(P)))
    return solution_from_P(mats, cost, P, _noise_cov(system, noise_cov, C.shape[0]), k)


def optimal_input(sol: DareSolution, x_hat, y) -> np.ndarray:
    return sol.K_x @ np.asarray(x_hat, float).reshape(-1) + sol.K_y @ np.asarray(y, float).reshape(-1)


def contraction_norms(mats, sol: DareSolution):
    """(||A + B K_x||_2, ||F + B K_y||_2) for the gains deployed on ``mats``."""
    A, B, C, F = _matrices(mats)
    return float(np.linalg.norm(A + B @ sol.K_x, 2)), float(np.linalg.norm(F + B @ sol.K_y, 2))


class RiccatiController:
    """u_t = K_x x_hat_t + K_y y_t with x_hat propagated by the model's predictor form."""

    def __init__(self, mats, sol: DareSolution, x0=None):
        self.A, self.B, self.C, self.F = _matrices(mats)
        self.sol = sol
        self.x_hat = np.zeros(self.A.shape[0]) if x0 is None else np.asarray(x0, float).copy()

    def __call__(self, t: int, hist: History) -> np.ndarray:
        y = hist.y[t]
        u = self.sol.K_x @ self.x_hat + self.sol.K_y @ y
        self.x_hat = self.A @ self.x_hat + self.B @ u + self.F @ y
        return u


def bellman_samples(system: ArxSystem, sol: DareSolution, samples: int = 1000, seed: int = 0,
                    analytic: bool = False) -> np.ndarray:
    """Per-sample LHS - RHS of the average-cost Bellman equation at random (x, y).

    Under ``analytic`` the expectation over the next noise is taken in closed
    form; otherwise one noise draw per sample replaces it.
    """
    A, B, C, F = system.A, system.B, system.C, system.F
    Q, R = sol.cost.Q, sol.cost.R
    Sigma = system.noise.cov
    Pb = sol.P_bar
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((samples, system.n))
    y = rng.standard_normal((samples, system.m))
    u = x @ sol.K_x.T + y @ sol.K_y.T
    s = x @ A.T + y @ F.T
    quad = lambda v, M: np.einsum("ti,ij,tj->t", v, M, v)
    lhs = sol.J_star + quad(s, Pb) + quad(y, Q)
    x1 = s + u @ B.T
    if analytic:
        Acl = A + F @ C
        nxt = quad(x1, Acl.T @ Pb @ Acl + C.T @ Q @ C) + np.trace(Sigma @ (F.T @ Pb @ F + Q))
    else:
        e1 = system.noise.sample(rng, samples)
        y1 = x1 @ C.T + e1
        s1 = x1 @ A.T + y1 @ F.T
        nxt = quad(s1, Pb) + quad(y1, Q)
    rhs = quad(y, Q) + quad(u, R) + nxt
    return lhs - rhs


def bellman_residual(system: ArxSystem, sol: DareSolution, samples: int = 1000, seed: int = 0,
                     analytic: bool = False) -> float:
    """Bellman residual normalized by |J*|.

    Analytic mode averages |LHS - RHS|; Monte Carlo mode returns |mean(LHS - RHS)|,
    whose standard error is ``std / sqrt(samples)`` of :func:`bellman_samples`.
    """
    d = bellman_samples(system, sol, samples, seed, analytic)
    scale = abs(sol.J_star) if sol.J_star != 0 else 1.0
    stat = np.mean(np.abs(d)) if analytic else abs(np.mean(d))
    return float(stat / scale)


# --- optimism ------------------------------------------------------------

def controllable(A, B, tol=1e-8) -> bool:
    return bool(_controllable_batch(A[None], B[None], tol)[0])


def _controllable_batch(A, B, tol):
    n = A.shape[-1]
    blocks, X = [], B
    for _ in range(n):
        blocks.append(X)
        X = A @ X
    s = np.linalg.svd(np.concatenate(blocks, axis=-1), compute_uv=False)
    return np.sum(s > tol * np.maximum(s[:, :1], 1.0), axis=1) == n


def dare_batch(A, B, C, F, cost: QuadraticCost, noise_cov, tol: float = 1e-11, max_iter: int = 5000,
               P0=None, blowup: float = 1e12):
    """The same fixed-point iteration as :func:`solve_dare`, vectorized over a stack of models.

    Returns ``(P, K_x, K_y, J, ok)``; entries with ``ok`` False diverged or did
    not converge within ``max_iter`` and carry J = inf.
    """
    K, n = A.shape[0], A.shape[1]
    Q, R = cost.Q, cost.R
    Acl = A + F @ C
    AclT = np.swapaxes(Acl, 1, 2)
    BT = np.swapaxes(B, 1, 2)
    CQC = np.swapaxes(C, 1, 2) @ Q @ C
    P = CQC.copy() if P0 is None else np.broadcast_to(P0, (K, n, n)).copy()
    active = np.ones(K, bool)
    ok = np.zeros(K, bool)
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Pa = P[idx]
        PB = Pa @ B[idx]
        S = R + BT[idx] @ PB
        PBA = np.swapaxes(PB, 1, 2) @ Acl[idx]
        Pn = CQC[idx] + AclT[idx] @ Pa @ Acl[idx] - np.swapaxes(PBA, 1, 2) @ np.linalg.solve(S, PBA)
        Pn = 0.5 * (Pn + np.swapaxes(Pn, 1, 2))
        change = np.sqrt(np.sum((Pn - Pa) ** 2, axis=(1, 2)))
        size = np.sqrt(np.sum(Pa**2, axis=(1, 2)))
        bad = ~np.all(np.isfinite(Pn), axis=(1, 2)) | (np.sqrt(np.sum(Pn**2, axis=(1, 2))) > blowup)
        P[idx] = np.where(bad[:, None, None], Pa, Pn)
        done = ~bad & (change <= tol * (1 + size))
        ok[idx[done]] = True
        active[idx[done | bad]] = False
    gain = np.linalg.solve(R + BT @ P @ B, BT @ P)
    K_x, K_y = -gain @ A, -gain @ F
    P_bar = P - P @ B @ gain
    FT = np.swapaxes(F, 1, 2)
    J = np.trace(noise_cov @ (Q + FT @ P_bar @ F), axis1=1, axis2=2)
    return P, K_x, K_y, np.where(ok, J, np.inf), ok


@dataclass
class ModelBall:
    center: RealizedSystem
    radii: dict
    noise_cov: np.ndarray
    rho: float = 0.99
    upsilon: float = 0.99
    rank_tol: float = 1e-8

    def __post_init__(self):
        if any(v < 0 for v in self.radii.values()):
            raise ValueError("radii must be non-negative")

    def center_matrices(self):
        return self.center.matrices()

    def evaluate_batch(self, A, B, C, F, cost: QuadraticCost, P0=None):
        """J for each stacked model, inf where the model is not admissible.

        Admissible means: (A, B), (A, F) controllable and (A, C) observable at
        ``rank_tol``, the Riccati iteration converges, and the optimal gains
        contract: ||A + B K_x||_2 <= rho and ||F + B K_y||_2 <= upsilon.
        """
        tol = self.rank_tol
        CT, AT = np.swapaxes(C, 1, 2), np.swapaxes(A, 1, 2)
        struct = _controllable_batch(A, B, tol) & _controllable_batch(A, F, tol) & _controllable_batch(AT, CT, tol)
        J = np.full(A.shape[0], np.inf)
        P = np.zeros_like(A)
        idx = np.flatnonzero(struct)
        if idx.size:
            with np.errstate(all="ignore"):
                Pi, Kx, Ky, Ji, ok = dare_batch(A[idx], B[idx], C[idx], F[idx], cost, self.noise_cov, P0=P0)
                ok &= np.linalg.norm(A[idx] + B[idx] @ Kx, 2, axis=(1, 2)) <= self.rho
                ok &= np.linalg.norm(F[idx] + B[idx] @ Ky, 2, axis=(1, 2)) <= self.upsilon
            J[idx] = np.where(ok, Ji, np.inf)
            P[idx] = Pi
        return J, P

    def evaluate(self, mats, cost: QuadraticCost):
        """Full DARE solution of one model if it is admissible, else None."""
        J, _ = self.evaluate_batch(*(np.asarray(M, float)[None] for M in mats), cost)
        if not np.isfinite(J[0]):
            return None
        return solve_dare(tuple(mats), cost, self.noise_cov)


def _clip_rows(delta, r):
    """Radially clip each stacked matrix deviation to Frobenius norm r."""
    nrm = np.sqrt(np.sum(delta**2, axis=(1, 2)))
    scale = np.where(nrm > r, r / np.maximum(nrm, 1e-300), 1.0)
    return delta * scale[:, None, None]


def _ball_samples(rng, K, shape, r):
    k = int(np.prod(shape))
    v = rng.standard_normal((K, k))
    v *= (r * rng.uniform(size=K) ** (1.0 / k) / np.maximum(np.linalg.norm(v, axis=1), 1e-300))[:, None]
    return v.reshape((K,) + tuple(shape))


@dataclass
class Selection:
    model: tuple
    solution: Optional[DareSolution]
    J_center: float
    fallback: bool
    evaluations: int


def optimistic_select(ball: ModelBall, cost: QuadraticCost, budget: int = 256, refine: int = 64,
                      tol_T: float = 0.0, seed: int = 0) -> Selection:
    """Approximately minimize J over the admissible part of the ball.

    Samples ``budget`` models uniformly (Frobenius ball per matrix) plus the
    center, then runs ``refine`` rounds of coordinate perturbation descent
    from the best one: every round tries +-step on each coordinate, moves to
    the best improvement, and halves the step when nothing improves.  The
    returned model never has larger J than the admissible center.  The T^{-1}
    optimality target ``tol_T`` is a target only; the gap is not certified.
    """
    rng = np.random.default_rng(seed)
    center = tuple(np.array(M, float) for M in ball.center_matrices())
    radii = [float(ball.radii.get(k, 0.0)) for k in "ABCF"]
    J_c, P_c = ball.evaluate_batch(*(M[None] for M in center), cost)
    J_center = float(J_c[0])
    evals = 1
    if all(r == 0 for r in radii):
        sol = ball.evaluate(center, cost) if np.isfinite(J_center) else None
        if sol is None:
            log.warning("center model is not admissible; returning it with fallback flag")
        return Selection(center, sol, J_center, sol is None, evals)

    P0 = P_c[0] if np.isfinite(J_center) else None
    cands = [np.concatenate([M[None], M[None] + (_ball_samples(rng, budget, M.shape, r) if r > 0
                                                   else np.zeros((budget,) + M.shape))])
             for M, r in zip(center, radii)]
    J, _ = ball.evaluate_batch(*cands, cost, P0=P0)
    evals += budget
    i = int(np.argmin(J))  # first index wins ties, so the center is preferred
    if not np.isfinite(J[i]):
        log.warning("no admissible model among %d candidates; falling back to the center", budget)
        return Selection(center, None, J_center, True, evals)
    best = [c[i].copy() for c in cands]
    J_best = float(J[i])

    coords = [(k, idx) for k, M in enumerate(center) if radii[k] > 0 for idx in np.ndindex(M.shape)]
    step = np.array([0.25 * radii[k] for k, _ in coords])
    for _ in range(refine):
        trial = [np.repeat(b[None], 2 * len(coords), axis=0) for b in best]
        for j, (k, idx) in enumerate(coords):
            trial[k][(2 * j,) + idx] += step[j]
            trial[k][(2 * j + 1,) + idx] -= step[j]
        for k, r in enumerate(radii):
            trial[k] = center[k] + _clip_rows(trial[k] - center[k], r)
        Jt, _ = ball.evaluate_batch(*trial, cost, P0=P0)
        evals += len(Jt)
        j = int(np.argmin(Jt))
        if Jt[j] < J_best:
            best, J_best = [t[j].copy() for t in trial], float(Jt[j])
        else:
            step *= 0.5
    sol = solve_dare(tuple(best), cost, ball.noise_cov)
    if sol.J_star > J_center + tol_T and np.isfinite(J_center):
        log.debug("optimistic search did not beat the center by the target margin")
    return Selection(tuple(best), sol, J_center, False, evals)


# --- Algorithm runner ----------------------------------------------------

@dataclass
class OfuConfig:
    T: int
    T_warm: int  # warm-up length; in closed_loop mode the base epoch length tau
    h: int
    n: int
    sigma_u: float = 1.0
    budget: int = 256
    refine: int = 64
    lam: float = 1.0
    delta: float = 0.05
    S: Optional[float] = None
    rho: float = 0.99
    upsilon: float = 0.99
    optimism: bool = True
    radius_scale: float = 1.0
    state_init: str = "replay"
    d1: Optional[int] = None
    d2: Optional[int] = None

    def __post_init__(self):
        if not self.h < self.T_warm < self.T:
            raise ValueError(f"need h < T_warm < T, got h={self.h}, T_warm={self.T_warm}, T={self.T}")
        if self.state_init not in ("replay", "zero"):
            raise ValueError("state_init must be 'replay' or 'zero'")


class OfuController:
    def __init__(self, system: ArxSystem, cost: QuadraticCost, mode: str, cfg: OfuConfig, seed: int):
        self.cost, self.mode, self.cfg = cost, mode, cfg
        self.m, self.p = system.m, system.p
        self.noise_cov = system.noise.cov
        self.R_sub = system.noise.R
        S = cfg.S if cfg.S is not None else 2.0 * markov_parameters(system, cfg.h).norm()
        self.conf = ConfidenceParams(S, cfg.delta, max(self.R_sub, 1e-12), cfg.T)
        self.starts = set(epoch_starts(cfg.T_warm, cfg.T, mode))
        self.seed = seed
        self.model = None
        self.sol: Optional[DareSolution] = None
        self.x_hat = None
        self.epochs = []

    def _new_epoch(self, t: int, hist: History):
        cfg = self.cfg
        est = estimate_from_data(hist.y[:t], hist.u[:t], cfg.h, cfg.lam)
        beta = confidence_radius(est, self.conf)
        eps = g_error_bound(est, beta)
        info = {"start": t, "data_steps": t, "samples": est.t, "beta": beta, "g_error_bound": eps,
                "sigma_min": pe_diagnostic(est)[0]}
        try:
            realized = sysid_arx(est.markov(), cfg.n, cfg.d1, cfg.d2)
        except OrderDeficiencyError as exc:
            info["error"] = str(exc)
            self.epochs.append(info)
            return
        radii = parameter_confidence(realized, eps) if cfg.optimism else dict.fromkeys("ABCF", 0.0)
        radii = {k: v * cfg.radius_scale for k, v in radii.items()}
        ball = ModelBall(realized, radii, self.noise_cov, cfg.rho, cfg.upsilon)
        sel = optimistic_select(ball, self.cost, cfg.budget, cfg.refine, 1.0 / cfg.T,
                                seed=self.seed * 1009 + len(self.epochs))
        info.update(radii=radii, J_center=sel.J_center, fallback=sel.fallback, evaluations=sel.evaluations)
        if sel.solution is not None:
            self.model, self.sol = sel.model, sel.solution
            info["J_selected"] = sel.solution.J_star
            info["contraction"] = contraction_norms(sel.model, sel.solution)
            A, B, C, F = self.model
            if cfg.state_init == "zero":
                self.x_hat = np.zeros(A.shape[0])
            else:
                x = np.zeros(A.shape[0])
                for s in range(max(t - cfg.h, 0), t):
                    x = A @ x + B @ hist.u[s] + F @ hist.y[s]
                self.x_hat = x
        else:
            info["J_selected"] = None
        self.epochs.append(info)

    def __call__(self, t: int, hist: History) -> np.ndarray:
        cfg = self.cfg
        if t in self.starts:
            self._new_epoch(t, hist)
        if t < cfg.T_warm or self.sol is None:
            return cfg.sigma_u * hist.rng.standard_normal(self.p)
        y = hist.y[t]
        u = self.sol.K_x @ self.x_hat + self.sol.K_y @ y
        A, B, C, F = self.model
        self.x_hat = A @ self.x_hat + B @ u + F @ y
        return u


def run_algorithm2(system: ArxSystem, cost: QuadraticCost, mode: str, cfg: OfuConfig, seed: int = 0,
                   x0=None):
    """Optimistic adaptive control; returns ``(TrajectoryLog, RegretTrace)`` with c_t - J*(truth)."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    truth = solve_dare(system, cost)
    ctrl = OfuController(system, cost, mode, cfg, seed)
    log_ = simulate(system, ctrl, cfg.T, seed=seed, loss=cost, x0=x0)
    meta = {"algorithm": "ofu", "mode": mode, "seed": seed, "T": cfg.T, "T_warm": cfg.T_warm,
            "h": cfg.h, "n": cfg.n, "J_opt": truth.J_star, "epochs": ctrl.epochs}
    return log_, regret_quadratic(log_.losses.copy(), truth.J_star, **meta)
