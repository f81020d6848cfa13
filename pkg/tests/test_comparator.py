import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from arxlab.comparator import best_in_hindsight_dfc, closed_loop_responses, dfc_features, dfc_total_cost
from arxlab.dfc import DfcPolicy, DfcSet, logcosh_loss, quadratic_loss
from arxlab.system import ArxSystem, NoiseSpec, random_system, simulate


def _replay(system, e, M):
    """Direct state loop of a fixed DFC policy driven by the true uncertainties e."""
    T = len(e)
    hp = M.shape[0]
    x = np.zeros(system.n)
    ys, us = np.zeros((T, system.m)), np.zeros((T, system.p))
    for t in range(T):
        y = system.C @ x + e[t]
        u = sum(M[l] @ e[t - l] for l in range(hp) if t - l >= 0)
        ys[t], us[t] = y, u
        x = system.A @ x + system.B @ u + system.F @ y
    return ys, us


def test_features_match_state_loop(rng):
    s = random_system(rng, 3, 2, 2)
    e = rng.standard_normal((60, 2))
    M = 0.3 * rng.standard_normal((4, 2, 2))
    nature, Zy, Zu = dfc_features(s, e, 4)
    ys, us = _replay(s, e, M)
    np.testing.assert_allclose(nature + Zy @ M.ravel(), ys, atol=1e-10)
    np.testing.assert_allclose(Zu @ M.ravel(), us, atol=1e-12)
    nat, _ = closed_loop_responses(s, e)
    np.testing.assert_allclose(nat, _replay(s, e, np.zeros((1, 2, 2)))[0], atol=1e-10)


def test_zero_noise_gives_zero_cost():
    s = ArxSystem.scalar()
    dset = DfcSet(2.0, 0.5, 30, 5)
    pol, costs, info = best_in_hindsight_dfc(s, dset, quadratic_loss(np.eye(1), np.eye(1)), np.zeros((200, 1)),
                                             return_info=True)
    assert costs.sum() == pytest.approx(0.0, abs=1e-12)
    assert info["grad_norm"] <= 1e-6


def test_restarts_agree(rng):
    s = ArxSystem.scalar()
    e = rng.standard_normal((2000, 1))
    dset = DfcSet(2.0, 0.5, 24, 4)
    loss = quadratic_loss(np.eye(1), np.eye(1))
    _, c1 = best_in_hindsight_dfc(s, dset, loss, e, tol=1e-14)
    _, c2 = best_in_hindsight_dfc(s, dset, loss, e, M0=0.1 * rng.standard_normal((8, 1, 1)), tol=1e-14)
    assert abs(c1.sum() - c2.sum()) <= 1e-6 * c1.sum()


def test_single_tap_matches_scalar_scan(rng):
    s = ArxSystem.scalar()
    e = rng.standard_normal((1500, 1))
    dset = DfcSet(2.0, 0.5, 6, 2)
    loss = quadratic_loss(np.eye(1), np.eye(1))
    pol, costs = best_in_hindsight_dfc(s, dset, loss, e, h_prime=1, tol=1e-15)
    scan = minimize_scalar(lambda m: dfc_total_cost(s, loss, e, DfcPolicy(np.array([[[m]]]))),
                           bounds=(-dset.kappa_psi, dset.kappa_psi), method="bounded", options={"xatol": 1e-10})
    assert pol.M[0, 0, 0] == pytest.approx(scan.x, abs=1e-4)


def test_perturbations_do_not_improve(rng):
    s = random_system(rng, 2, 1, 1)
    e = rng.standard_normal((1500, 1))
    dset = DfcSet(3.0, 0.5, 18, 3)
    for loss in (quadratic_loss(np.eye(1), np.eye(1)), logcosh_loss(np.eye(1), np.eye(1), 1.0)):
        pol, costs = best_in_hindsight_dfc(s, dset, loss, e, tol=1e-14)
        f0 = costs.sum()
        assert pol.norm_sum() < dset.kappa_psi  # interior optimum
        for _ in range(10):
            d = rng.standard_normal(pol.M.shape)
            d *= 1e-3 / np.linalg.norm(d)
            assert dfc_total_cost(s, loss, e, DfcPolicy(pol.M + d)) >= f0 * (1 - 1e-6)


def test_comparator_respects_bound(rng):
    s = ArxSystem.scalar()
    e = rng.standard_normal((800, 1))
    dset = DfcSet(0.05, 0.0, 12, 2)
    pol, _ = best_in_hindsight_dfc(s, dset, quadratic_loss(np.eye(1), np.eye(1)), e)
    assert pol.norm_sum() <= 0.05 * (1 + 1e-9)
