"""Best fixed DFC policy in hindsight, replayed on the realized noise."""
from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.signal import lfilter, ss2tf

from .dfc import DfcPolicy, DfcSet, LossOracle, is_quadratic, project_taps
from .system import ArxSystem


def _filter(Acl, B, C, sig):
    """Zero-state response y_t = sum_{k>=1} C Acl^{k-1} B s_{t-k} for each input column."""
    T = sig.shape[0]
    out = np.zeros((T, C.shape[0], B.shape[1]))
    for a in range(B.shape[1]):
        num, den = ss2tf(Acl, B, C, np.zeros((C.shape[0], B.shape[1])), input=a)
        for c in range(C.shape[0]):
            out[:, c, a] = lfilter(num[c], den, sig)
    return out


def closed_loop_responses(system: ArxSystem, e: np.ndarray):
    """Nature's output and per-channel input responses on the noise ``e``.

    Returns ``(nature, W)`` with ``nature[t]`` the output under zero input and
    ``W[t, :, a, b]`` the output response to input channel ``a`` driven by the
    signal ``e[:, b]``; both start from x0 = 0.
    """
    A, B, C, F = system.A, system.B, system.C, system.F
    Acl = A + F @ C
    T, m = e.shape
    nature = e.copy()
    W = np.zeros((T, m, system.p, m))
    for b in range(m):
        nature += _filter(Acl, F[:, [b]], C, e[:, b])[:, :, 0]
        W[:, :, :, b] = _filter(Acl, B, C, e[:, b])
    return nature, W


def dfc_features(system: ArxSystem, e: np.ndarray, h_prime: int):
    """Linear maps theta -> (y^M_t, u^M_t) with theta = M.ravel() over (l, a, b).

    y^M_t = nature_t + Zy[t] @ theta,   u^M_t = Zu[t] @ theta.
    """
    nature, W = closed_loop_responses(system, e)
    T, m = e.shape
    p = system.p
    Zy = np.zeros((T, m, h_prime, p, m))
    Zu = np.zeros((T, p, h_prime, p, m))
    for l in range(h_prime):
        Zy[l:, :, l] = W[: T - l]
        for a in range(p):
            Zu[l:, a, l, a, :] = e[: T - l]
    d = h_prime * p * m
    return nature, Zy.reshape(T, m, d), Zu.reshape(T, p, d)


def best_in_hindsight_dfc(system: ArxSystem, dset: DfcSet, loss: LossOracle, e: np.ndarray,
                          iters: int = 20000, h_prime: Optional[int] = None, bound: Optional[float] = None,
                          tol: float = 1e-8, M0: Optional[np.ndarray] = None, return_info: bool = False):
    """Minimize sum_t l(y^M_t, u^M_t) over fixed DFC policies by projected gradient descent.

    The comparator class defaults to the inner set: ``dset.h0_prime`` taps with
    norm-sum bound ``kappa_psi``.  Steps follow an accelerated schedule with
    restarts; the iteration stops once the relative objective change falls
    below ``tol`` or ``iters`` is exhausted.
    """
    h_prime = max(dset.h0_prime, 1) if h_prime is None else h_prime
    bound = dset.kappa_psi if bound is None else bound
    e = np.asarray(e, float)
    T, m = e.shape
    p = system.p
    nature, Zy, Zu = dfc_features(system, e, h_prime)
    d = Zy.shape[2]

    if is_quadratic(loss):
        Q, R = loss.Q, loss.R
        H = np.einsum("tid,ij,tje->de", Zy, Q, Zy) + np.einsum("tid,ij,tje->de", Zu, R, Zu)
        g = np.einsum("tid,ij,tj->d", Zy, Q, nature)
        c0 = float(np.einsum("ti,ij,tj->", nature, Q, nature))

        def objective(th):
            return float(th @ H @ th + 2 * g @ th + c0)

        def gradient(th):
            return 2 * (H @ th + g)

        lip = 2 * np.linalg.eigvalsh(H)[-1]
    else:
        def objective(th):
            return float(np.sum(loss.value(nature + Zy @ th, Zu @ th)))

        def gradient(th):
            gy, gu = loss.gradient(nature + Zy @ th, Zu @ th)
            return np.einsum("tid,ti->d", Zy, gy) + np.einsum("tid,ti->d", Zu, gu)

        G = np.einsum("tid,tie->de", Zy, Zy) + np.einsum("tid,tie->de", Zu, Zu)
        lip = loss.alpha_upper * np.linalg.eigvalsh(G)[-1]

    shape = (h_prime, p, m)

    def proj(th):
        return project_taps(th.reshape(shape), bound).reshape(-1)

    th = proj(np.zeros(d) if M0 is None else np.asarray(M0, float).reshape(-1))
    step = 1.0 / max(lip, 1e-300)
    f = objective(th)
    z, k_acc, it = th.copy(), 1.0, 0
    for it in range(1, iters + 1):
        th_new = proj(z - step * gradient(z))
        f_new = objective(th_new)
        if f_new > f:  # restart momentum
            z, k_acc = th.copy(), 1.0
            th_new = proj(th - step * gradient(th))
            f_new = objective(th_new)
        k_next = 0.5 * (1 + np.sqrt(1 + 4 * k_acc**2))
        z = th_new + ((k_acc - 1) / k_next) * (th_new - th)
        k_acc = k_next
        change = abs(f - f_new) / max(abs(f), 1e-300)
        th, f = th_new, f_new
        if change < tol:
            break
    policy = DfcPolicy(th.reshape(shape))
    costs = np.asarray(loss.value(nature + Zy @ th, Zu @ th), dtype=float)
    if return_info:
        return policy, costs, {"objective": float(np.sum(costs)), "iterations": it,
                               "grad_norm": float(np.linalg.norm(gradient(th)))}
    return policy, costs


def dfc_total_cost(system: ArxSystem, loss: LossOracle, e: np.ndarray, policy: DfcPolicy) -> float:
    nature, Zy, Zu = dfc_features(system, e, policy.h_prime)
    th = policy.M.reshape(-1)
    return float(np.sum(loss.value(nature + Zy @ th, Zu @ th)))
