"""ARX systems in predictor form, simulation, and Markov operators.

The dynamics are

    x_{t+1} = A x_t + B u_t + F y_t
    y_t     = C x_t + e_t

with hidden state ``x``, output ``y``, input ``u`` and measurement noise ``e``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Union

import numpy as np

STABILITY_TOL = 1e-9


class StabilityError(ValueError):
    """Base class for rejected (non-contractive) system matrices."""


class OpenLoopUnstableError(StabilityError):
    """rho(A) >= 1."""


class OutputFeedbackUnstableError(StabilityError):
    """rho(A + F C) >= 1."""


class InstabilityError(RuntimeError):
    """A simulated signal diverged; carries the step index and signal norms."""

    def __init__(self, step: int, norms: dict):
        self.step = step
        self.norms = norms
        desc = ", ".join(f"|{k}|={v:.3g}" for k, v in norms.items())
        super().__init__(f"signal diverged at step {step} ({desc})")


def spectral_radius(M: np.ndarray) -> float:
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def _as_matrix(M, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {M.shape}")
    return M


NOISE_KINDS = ("gaussian", "uniform_bounded", "rademacher_scaled", "none")

# Sub-Gaussian variance proxy of a unit-variance coordinate of each kind
# (uniform on [-sqrt(3), sqrt(3)] has Hoeffding proxy 3).
_UNIT_PROXY = {"gaussian": 1.0, "uniform_bounded": 3.0, "rademacher_scaled": 1.0, "none": 0.0}


@dataclass(frozen=True)
class NoiseSpec:
    """Zero-mean i.i.d. measurement noise with covariance ``cov``.

    Non-Gaussian kinds are generated as ``L z`` with ``L`` the Cholesky factor of
    ``cov`` and ``z`` i.i.d. unit-variance uniform or Rademacher coordinates, so
    every kind has the same second moment.  ``kind="none"`` gives e = 0.
    """

    kind: str
    cov: np.ndarray
    sigma_e2: float
    R: float

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        cov = _as_matrix(self.cov, "cov")
        if cov.shape[0] != cov.shape[1]:
            raise ValueError("noise covariance must be square")
        object.__setattr__(self, "cov", cov)
        if self.kind == "none":
            return
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("noise covariance must be symmetric")
        lmin = float(np.linalg.eigvalsh(cov)[0])
        if lmin <= 0:
            raise ValueError("noise covariance must be positive definite")
        if lmin < self.sigma_e2 - 1e-12:
            raise ValueError(f"sigma_e2={self.sigma_e2} exceeds lambda_min(cov)={lmin}")
        if self.R <= 0:
            raise ValueError("sub-Gaussian proxy R must be positive")

    @classmethod
    def make(cls, m: int, kind: str = "gaussian", scale: float = 1.0, cov=None) -> "NoiseSpec":
        """Build a spec with covariance ``scale**2 * I`` (or ``cov``) and derived bounds."""
        if kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {kind!r}")
        if kind == "none":
            return cls("none", np.zeros((m, m)), 0.0, 0.0)
        cov = scale**2 * np.eye(m) if cov is None else _as_matrix(cov, "cov")
        sigma_e2 = float(np.linalg.eigvalsh(cov)[0])
        R = float(np.sqrt(_UNIT_PROXY[kind] * np.max(np.diag(cov))))
        return cls(kind, cov, sigma_e2, R)

    @property
    def m(self) -> int:
        return self.cov.shape[0]

    def sample(self, rng: np.random.Generator, T: int) -> np.ndarray:
        m = self.m
        if self.kind == "none":
            return np.zeros((T, m))
        if self.kind == "gaussian":
            z = rng.standard_normal((T, m))
        elif self.kind == "uniform_bounded":
            z = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=(T, m))
        else:
            z = rng.choice(np.array([-1.0, 1.0]), size=(T, m))
        L = np.linalg.cholesky(self.cov)
        return z @ L.T

    def to_dict(self) -> dict:
        return {"kind": self.kind, "cov": self.cov.tolist(), "sigma_e2": self.sigma_e2, "R": self.R}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(d["kind"], np.asarray(d["cov"], dtype=float), float(d["sigma_e2"]), float(d["R"]))


@dataclass(frozen=True)
class ArxSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    F: np.ndarray
    noise: Optional[NoiseSpec] = None

    def __post_init__(self):
        A, B, C, F = (_as_matrix(M, k) for M, k in zip((self.A, self.B, self.C, self.F), "ABCF"))
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        m, p = C.shape[0], B.shape[1]
        if B.shape[0] != n or C.shape[1] != n or F.shape != (n, m):
            raise ValueError(
                f"inconsistent dimensions: A{A.shape} B{B.shape} C{C.shape} F{F.shape}"
            )
        for k, M in zip("ABCF", (A, B, C, F)):
            object.__setattr__(self, k, M)
        noise = self.noise if self.noise is not None else NoiseSpec.make(m)
        if noise.m != m:
            raise ValueError(f"noise dimension {noise.m} != output dimension {m}")
        object.__setattr__(self, "noise", noise)
        if spectral_radius(A) >= 1 - STABILITY_TOL:
            raise OpenLoopUnstableError(f"rho(A)={spectral_radius(A):.6g} >= 1")
        rho_cl = spectral_radius(A + F @ C)
        if rho_cl >= 1 - STABILITY_TOL:
            raise OutputFeedbackUnstableError(f"rho(A+FC)={rho_cl:.6g} >= 1")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]

    @classmethod
    def scalar(cls, a=0.5, b=1.0, c=1.0, f=0.2, noise: Optional[NoiseSpec] = None) -> "ArxSystem":
        return cls([[a]], [[b]], [[c]], [[f]], noise)

    def with_noise(self, noise: NoiseSpec) -> "ArxSystem":
        return ArxSystem(self.A, self.B, self.C, self.F, noise)

    def phi_A(self, horizon: int = 200) -> float:
        """Diagnostic sup_tau ||A^tau|| / rho(A)^tau over a finite horizon."""
        rho = spectral_radius(self.A)
        if rho == 0:
            return 1.0
        best, Ak = 1.0, np.eye(self.n)
        for tau in range(1, horizon):
            Ak = Ak @ self.A
            best = max(best, np.linalg.norm(Ak, 2) / rho**tau)
        return float(best)

    def to_dict(self) -> dict:
        return {
            "n": self.n, "m": self.m, "p": self.p,
            "A": self.A.tolist(), "B": self.B.tolist(),
            "C": self.C.tolist(), "F": self.F.tolist(),
            "noise": self.noise.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArxSystem":
        noise = d.get("noise")
        m = len(d["C"])
        if noise is None:
            noise = NoiseSpec.make(m)
        elif "sigma_e2" not in noise:
            noise = NoiseSpec.make(m, noise.get("kind", "gaussian"), noise.get("scale", 1.0), noise.get("cov"))
        else:
            noise = NoiseSpec.from_dict(noise)
        return cls(d["A"], d["B"], d["C"], d["F"], noise)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def random_system(rng: np.random.Generator, n: int, m: int, p: int, rho: float = 0.7,
                  noise: Optional[NoiseSpec] = None) -> ArxSystem:
    """Random system with rho(A) and rho(A+FC) both at most ``rho``."""
    while True:
        A = rng.standard_normal((n, n))
        A *= rho / max(spectral_radius(A), 1e-12) * rng.uniform(0.3, 1.0)
        B = rng.standard_normal((n, p))
        C = rng.standard_normal((m, n))
        F = 0.3 * rng.standard_normal((n, m))
        if spectral_radius(A + F @ C) < rho:
            return ArxSystem(A, B, C, F, noise if noise is not None else NoiseSpec.make(m))


def step(system: ArxSystem, state, u, e):
    """Advance one step; returns ``(next_state, output)``."""
    state = np.asarray(state, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    e = np.asarray(e, dtype=float).reshape(-1)
    if state.shape != (system.n,) or u.shape != (system.p,) or e.shape != (system.m,):
        raise ValueError(
            f"expected state({system.n}), input({system.p}), noise({system.m}); "
            f"got {state.shape}, {u.shape}, {e.shape}"
        )
    y = system.C @ state + e
    return system.A @ state + system.B @ u + system.F @ y, y


@dataclass
class TrajectoryLog:
    x: np.ndarray  # (T, n)
    y: np.ndarray  # (T, m)
    u: np.ndarray  # (T, p)
    e: np.ndarray  # (T, m)
    losses: np.ndarray  # (T,)
    seed: Optional[int] = None

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def x0(self) -> np.ndarray:
        return self.x[0]

    def to_csv(self, path) -> None:
        write_trajectory_csv(path, self)


class History(NamedTuple):
    """What a controller may look at when choosing ``u_t``.

    ``y`` holds outputs up to and including step t, ``u`` and ``losses`` hold
    steps before t.  ``rng`` is the controller's private generator.
    """

    y: np.ndarray
    u: np.ndarray
    losses: np.ndarray
    rng: np.random.Generator


Controller = Callable[[int, History], np.ndarray]
Loss = Callable[[np.ndarray, np.ndarray], float]


def zero_controller(p: int) -> Controller:
    z = np.zeros(p)
    return lambda t, hist: z


def gaussian_controller(p: int, sigma_u: float = 1.0) -> Controller:
    return lambda t, hist: sigma_u * hist.rng.standard_normal(p)


def spawn_rngs(seed: Optional[int], k: int = 2):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(k)]


def simulate(system: ArxSystem, controller: Controller, T: int, seed: Optional[int] = 0,
             loss: Optional[Loss] = None, x0=None, noise: Optional[np.ndarray] = None,
             blowup: float = 1e12) -> TrajectoryLog:
    """Run ``controller`` in closed loop for ``T`` steps.

    Noise and controller randomness come from independent child streams of
    ``seed``.  A precomputed ``noise`` array overrides the system's noise spec.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    n, m, p = system.n, system.m, system.p
    rng_noise, rng_ctrl = spawn_rngs(seed)
    e = system.noise.sample(rng_noise, T) if noise is None else np.asarray(noise, float).reshape(T, m)
    x = np.zeros((T, n))
    y = np.zeros((T, m))
    u = np.zeros((T, p))
    losses = np.zeros(T)
    xt = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).reshape(n)
    A, B, C, F = system.A, system.B, system.C, system.F
    for t in range(T):
        x[t] = xt
        yt = C @ xt + e[t]
        y[t] = yt
        ut = np.asarray(controller(t, History(y[: t + 1], u[:t], losses[:t], rng_ctrl)), dtype=float)
        if ut.shape != (p,):
            ut = ut.reshape(-1)
            if ut.shape != (p,):
                raise RuntimeError(f"controller returned input of shape {ut.shape} at step {t}, expected ({p},)")
        u[t] = ut
        if loss is not None:
            losses[t] = loss(yt, ut)
        xt = A @ xt + B @ ut + F @ yt
        nx = float(np.abs(xt).max(initial=0.0))
        if not np.isfinite(nx) or nx > blowup or not np.all(np.isfinite(ut)):
            raise InstabilityError(t, {"x": float(np.linalg.norm(xt)), "y": float(np.linalg.norm(yt)),
                                       "u": float(np.linalg.norm(ut))})
    return TrajectoryLog(x, y, u, e, losses, seed)


@dataclass(frozen=True)
class MarkovOperator:
    """First ``h`` Markov parameters; ``g_u[i] = C A^i B`` and ``g_y[i] = C A^i F``."""

    g_u: np.ndarray  # (h, m, p)
    g_y: np.ndarray  # (h, m, m)

    def __post_init__(self):
        g_u = np.asarray(self.g_u, dtype=float)
        g_y = np.asarray(self.g_y, dtype=float)
        if g_u.ndim != 3 or g_y.ndim != 3 or g_u.shape[0] != g_y.shape[0]:
            raise ValueError(f"mismatched Markov blocks {g_u.shape} / {g_y.shape}")
        object.__setattr__(self, "g_u", g_u)
        object.__setattr__(self, "g_y", g_y)

    @property
    def h(self) -> int:
        return self.g_u.shape[0]

    @property
    def m(self) -> int:
        return self.g_u.shape[1]

    @property
    def p(self) -> int:
        return self.g_u.shape[2]

    def stacked(self) -> np.ndarray:
        """The m x h(m+p) matrix [G_u^1 ... G_u^h  G_y^1 ... G_y^h]."""
        return np.concatenate([np.concatenate(list(self.g_u), axis=1),
                               np.concatenate(list(self.g_y), axis=1)], axis=1)

    @classmethod
    def from_stacked(cls, G: np.ndarray, h: int, p: int) -> "MarkovOperator":
        G = np.asarray(G, dtype=float)
        m = G.shape[0]
        if G.shape[1] != h * (m + p):
            raise ValueError(f"stacked operator has {G.shape[1]} columns, expected {h * (m + p)}")
        gu = G[:, : h * p].reshape(m, h, p).transpose(1, 0, 2)
        gy = G[:, h * p:].reshape(m, h, m).transpose(1, 0, 2)
        return cls(gu, gy)

    def truncate(self, h: int) -> "MarkovOperator":
        if h > self.h:
            raise ValueError(f"cannot truncate horizon {self.h} to {h}")
        return MarkovOperator(self.g_u[:h], self.g_y[:h])

    def norm(self) -> float:
        return float(np.linalg.norm(self.stacked()))

    def closed_loop(self) -> np.ndarray:
        """Input-to-output response through the output feedback, C (A+FC)^i B.

        Computed from the ARX parameters alone via the series identity
        Gbar^k = G_u^k + sum_{i<k} G_y^i Gbar^{k-i}.
        """
        gbar = np.zeros_like(self.g_u)
        for k in range(self.h):
            acc = self.g_u[k].copy()
            for i in range(k):
                acc += self.g_y[i] @ gbar[k - 1 - i]
            gbar[k] = acc
        return gbar

    def to_dict(self) -> dict:
        return {"h": self.h, "g_u": self.g_u.tolist(), "g_y": self.g_y.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MarkovOperator":
        return cls(np.asarray(d["g_u"], float), np.asarray(d["g_y"], float))


def markov_parameters(system: ArxSystem, h: int) -> MarkovOperator:
    if h < 1:
        raise ValueError("horizon h must be >= 1")
    g_u = np.empty((h, system.m, system.p))
    g_y = np.empty((h, system.m, system.m))
    CAk = system.C.copy()
    for i in range(h):
        g_u[i] = CAk @ system.B
        g_y[i] = CAk @ system.F
        CAk = CAk @ system.A
    return MarkovOperator(g_u, g_y)


def decay_psi(op: Union[MarkovOperator, ArxSystem], h: int, tail: int = 2000) -> float:
    """sum_{i >= h} max(||G_u^i||, ||G_y^i||) with 1-based Markov indices.

    For a system the sum is truncated after ``tail`` terms and a rigorous
    geometric bound on the remainder is added.  For an operator only the
    available terms are known; the remainder is extrapolated from the ratio of
    the last two terms when that ratio is below one.
    """
    if h < 1:
        raise ValueError("h must be >= 1")
    if isinstance(op, MarkovOperator):
        terms = np.array([max(np.linalg.norm(a, 2), np.linalg.norm(b, 2)) for a, b in zip(op.g_u, op.g_y)])
        total = float(terms[h - 1:].sum())
        if op.h >= 2 and terms[-2] > 0:
            ratio = terms[-1] / terms[-2]
            if ratio < 1:
                total += float(terms[-1] * ratio / (1 - ratio))
        return total
    system = op
    B, F, C, A = system.B, system.F, system.C, system.A
    CAk = C @ np.linalg.matrix_power(A, h - 1)
    total = 0.0
    for _ in range(tail):
        total += max(np.linalg.norm(CAk @ B, 2), np.linalg.norm(CAk @ F, 2))
        CAk = CAk @ A
    # remainder: sum_{j >= 0} ||C A^(h-1+tail+j) X|| <= ||CA^(h-1+tail)|| ||X|| / (1 - q) if ||A^k|| = q < 1
    scale = np.linalg.norm(CAk, 2) * max(np.linalg.norm(B, 2), np.linalg.norm(F, 2))
    if scale == 0:
        return float(total)
    Ak, k = A.copy(), 1
    while np.linalg.norm(Ak, 2) >= 1 and k < 10_000:
        Ak = Ak @ A
        k += 1
    q = np.linalg.norm(Ak, 2)
    powers = [np.linalg.norm(np.linalg.matrix_power(A, r), 2) for r in range(k)]
    return float(total + scale * sum(powers) / (1 - q))


def default_horizon(system: ArxSystem, T: int, h_max: int = 500) -> int:
    """Smallest h with decay_psi(h) <= 1/(10T)."""
    for h in range(1, h_max + 1):
        if decay_psi(system, h, tail=400) <= 1.0 / (10 * T):
            return h
    raise ValueError(f"no horizon up to {h_max} meets the decay target for T={T}")


def regressor_matrix(y: np.ndarray, u: np.ndarray, h: int, start: int = 0) -> np.ndarray:
    """Rows phi_t = [u_{t-1}..u_{t-h}, y_{t-1}..y_{t-h}] for t = start..T-1, zero-padded."""
    T, m = y.shape
    p = u.shape[1]
    upad = np.vstack([np.zeros((h, p)), u])
    ypad = np.vstack([np.zeros((h, m)), y])
    idx = np.arange(start, T)[:, None] + h - 1 - np.arange(h)[None, :]  # padded index of lag k+1
    return np.concatenate([upad[idx].reshape(len(idx), h * p), ypad[idx].reshape(len(idx), h * m)], axis=1)


def output_uncertainties(y: np.ndarray, u: np.ndarray, op: MarkovOperator) -> np.ndarray:
    """Truncated b_t(G) for every t, using the last h lags (zero before t = 0)."""
    return y - regressor_matrix(y, u, op.h) @ op.stacked().T


def output_uncertainty(log: TrajectoryLog, op: MarkovOperator, t: int, truncated: bool = True) -> np.ndarray:
    """y_t minus the part of y_t explained by past inputs and outputs through ``op``.

    With ``truncated`` only the last ``op.h`` lags are used (fewer when t < h);
    otherwise the full history, which requires ``op.h >= t``.
    """
    if not 0 <= t < len(log):
        raise ValueError(f"step {t} outside log of length {len(log)}")
    lags = min(op.h, t) if truncated else t
    if lags > op.h:
        raise ValueError(f"full history at t={t} needs {t} Markov parameters, operator has {op.h}")
    b = log.y[t].copy()
    for k in range(lags):
        b -= op.g_u[k] @ log.u[t - k - 1] + op.g_y[k] @ log.y[t - k - 1]
    return b


# --- CSV -----------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_trajectory_csv(path, log: TrajectoryLog) -> None:
    T, m = log.y.shape
    p = log.u.shape[1]
    header = ["t"] + [f"u_{i}" for i in range(p)] + [f"y_{i}" for i in range(m)] + ["loss"]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for t in range(T):
            row = [str(t)] + [_fmt(v) for v in log.u[t]] + [_fmt(v) for v in log.y[t]] + [_fmt(log.losses[t])]
            fh.write(",".join(row) + "\n")


def read_trajectory_csv(path):
    """Returns ``(y, u, losses)`` arrays from a trajectory CSV."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    ucols = [i for i, c in enumerate(header) if c.startswith("u_")]
    ycols = [i for i, c in enumerate(header) if c.startswith("y_")]
    lcol = header.index("loss")
    return data[:, ycols], data[:, ucols], data[:, lcol]
