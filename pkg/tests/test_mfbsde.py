import numpy as np
import pytest

import mflq
from mflq import rng as mflq_rng
from mflq.mfbsde import mean_phi_ode

from conftest import scalar_spec, smoke2d_spec, tanh_spec


def det_terminal(a):
    return {"kind": "deterministic", "a": a}


def lg_terminal(a, lam):
    return {"kind": "linear-gaussian", "a": a, "lambda": lam}


def test_deterministic_zero_terminal():
    spec = tanh_spec(terminal=det_terminal([0.0]))
    ric = mflq.solve_riccati(spec)
    pair = mflq.solve_phi_deterministic(spec, ric)
    assert np.all(pair.mean_phi == 0.0)
    assert np.all(pair.beta_values(3, np.zeros(4)) == 0.0)


def test_deterministic_exponential_closed_form():
    # A = Q = Qbar = 0, Abar = 1, B = C = 0: dphi/ds = phi, phi(1) = -1
    spec = scalar_spec(Abar=1.0, R2=1.0, terminal=det_terminal([1.0]))
    ric = mflq.solve_riccati(spec)
    pair = mflq.solve_phi_deterministic(spec, ric)
    assert abs(pair.mean_phi[0, 0] + np.exp(-1.0)) < 1e-9


def test_deterministic_constant_solution():
    spec = scalar_spec(R2=1.0, terminal=det_terminal([2.5]))  # all drift coefficients zero
    ric = mflq.solve_riccati(spec)
    pair = mflq.solve_phi_deterministic(spec, ric)
    assert np.abs(pair.mean_phi + 2.5).max() < 1e-13


def test_linear_gaussian_martingale_case():
    # zero coefficients, xi = W(T): phi(s) = -W(s), beta = -1
    spec = scalar_spec(R2=1.0, terminal=lg_terminal([0.0], [1.0]))
    ric = mflq.solve_riccati(spec)
    pair = mflq.solve_phi_linear_gaussian(spec, ric)
    assert np.abs(pair.p_nodes).max() == 0.0
    assert np.abs(pair.q_nodes + 1.0).max() < 1e-13
    w = np.array([-0.7, 0.0, 1.3])
    assert np.allclose(pair.phi_values(5, w), -w[:, None])


def test_linear_gaussian_exponential_q():
    # A = 1 with Sigma = 0 (B = C = 0, Q = 0): dq/ds = q, q(1) = -1
    spec = scalar_spec(A=1.0, R2=1.0, terminal=lg_terminal([0.0], [1.0]))
    ric = mflq.solve_riccati(spec)
    pair = mflq.solve_phi_linear_gaussian(spec, ric)
    assert abs(pair.q_nodes[0, 0] + np.exp(-1.0)) < 1e-9


def test_wrong_kind_rejected():
    spec = tanh_spec(terminal=lg_terminal([0.0], [1.0]))
    ric = mflq.solve_riccati(spec)
    with pytest.raises(ValueError):
        mflq.solve_phi_deterministic(spec, ric)
    spec2 = tanh_spec(terminal=det_terminal([1.0]))
    ric2 = mflq.solve_riccati(spec2)
    with pytest.raises(ValueError):
        mflq.solve_phi_linear_gaussian(spec2, ric2)


def test_degenerate_basis_raises_conditioning_error():
    from mflq.mfbsde import ConditioningError, _ls_fit

    Psi = np.ones((400, 3))  # rank-1 design
    with pytest.raises(ConditioningError):
        _ls_fit(Psi, np.ones((400, 1)))


def test_regression_guards():
    spec = scalar_spec(R2=1.0, steps=20, terminal=lg_terminal([0.0], [1.0]))
    ric = mflq.solve_riccati(spec)
    with pytest.raises(ValueError, match="1000"):
        mflq.solve_phi_regression(spec, ric, 500, 1, seed=0)
    with pytest.raises(ValueError, match="degree"):
        mflq.solve_phi_regression(spec, ric, 2000, 7, seed=0)


def test_regression_beta_band_for_martingale():
    spec = scalar_spec(R2=1.0, steps=50, terminal=lg_terminal([0.0], [1.0]))
    ric = mflq.solve_riccati(spec)
    pair = mflq.solve_phi_regression(spec, ric, 20_000, degree=2, seed=7)
    for k in range(spec.grid.N):
        assert -1.05 <= pair.mean_beta[k, 0] <= -0.95


def test_regression_terminal_exact_on_paths():
    spec = scalar_spec(R2=1.0, steps=20,
                       terminal={"kind": "functional", "poly": [[0.0, 0.5, 1.0, 0.25]]})
    ric = mflq.solve_riccati(spec)
    pair = mflq.solve_phi_regression(spec, ric, 5000, degree=3, seed=3)
    W, _ = mflq_rng.brownian_paths(3, mflq_rng.STAGE_PHI, 5000, spec.grid.nodes)
    xi = spec.terminal.evaluate(W[:, -1])
    phiT = pair.phi_values(spec.grid.N, W[:, -1])
    assert np.abs(phiT + xi).max() == 0.0


def test_regression_conditional_second_moment():
    # zero coefficients, xi = W(T)^2: phi(s) = -(W(s)^2 + (T - s))
    spec = scalar_spec(R2=1.0, steps=50,
                       terminal={"kind": "functional", "poly": [[0.0, 0.0, 1.0]]})
    ric = mflq.solve_riccati(spec)
    pair = mflq.solve_phi_regression(spec, ric, 50_000, degree=2, seed=19)
    k = spec.grid.N // 2
    fitted = pair.phi_values(k, np.array([1.0]))[0, 0]
    assert abs(fitted - (-1.5)) < 0.05
    beta_fit = pair.beta_values(k, np.array([1.0]))[0, 0]
    assert abs(beta_fit - (-2.0)) < 0.1


def test_regression_matches_deterministic_solver():
    spec = scalar_spec(Abar=1.0, R2=1.0, steps=50, terminal=det_terminal([1.0]))
    ric = mflq.solve_riccati(spec)
    exact = mflq.solve_phi_deterministic(spec, ric)
    pair = mflq.solve_phi_regression(spec, ric, 5000, degree=1, seed=5)
    se = np.sqrt(np.maximum(pair.m2_phi[:, 0, 0], 1e-300) / pair.paths)
    gap = np.abs(pair.mean_phi[:, 0] - exact.mean_phi[:, 0])
    assert np.all(gap <= 3.0 * se + 5e-3)


def test_regression_matches_ansatz_on_linear_gaussian():
    spec = smoke2d_spec(steps=50)
    ric = mflq.solve_riccati(spec)
    ansatz = mflq.solve_phi_linear_gaussian(spec, ric)
    pair = mflq.solve_phi_regression(spec, ric, 20_000, degree=2, seed=13)
    W, _ = mflq_rng.brownian_paths(13, mflq_rng.STAGE_PHI, 20_000, spec.grid.nodes)
    worst = 0.0
    for k in range(spec.grid.N + 1):
        diff = pair.phi_values(k, W[:, k]) - ansatz.phi_values(k, W[:, k])
        worst = max(worst, float(np.abs(diff).mean(axis=0).max()))
    assert worst <= 5e-2


def test_regression_seed_determinism():
    spec = scalar_spec(R2=1.0, steps=20, terminal=lg_terminal([0.1], [0.5]))
    ric = mflq.solve_riccati(spec)
    a = mflq.solve_phi_regression(spec, ric, 2000, degree=2, seed=42)
    b = mflq.solve_phi_regression(spec, ric, 2000, degree=2, seed=42)
    assert np.array_equal(a.coef_phi, b.coef_phi)
    assert np.array_equal(a.coef_beta, b.coef_beta)
    c = mflq.solve_phi_regression(spec, ric, 2000, degree=2, seed=43)
    assert not np.array_equal(a.coef_phi, c.coef_phi)


def test_tower_property_against_mean_ode():
    spec = smoke2d_spec(steps=50)
    ric = mflq.solve_riccati(spec)
    pair = mflq.solve_phi_regression(spec, ric, 20_000, degree=2, seed=29)
    mean_xi = spec.terminal.mean(spec.grid.T - spec.grid.t0)
    ode = mean_phi_ode(spec, ric, pair.mean_beta, mean_xi)
    se = np.sqrt(np.maximum(np.diagonal(pair.m2_phi, axis1=1, axis2=2), 1e-300) / pair.paths)
    # explicit Euler drift stepping carries an O(h) bias on top of the MC error
    assert np.all(np.abs(pair.mean_phi - ode) <= 3.0 * se + 0.5 * spec.grid.h)


def test_mean_ode_matches_deterministic_pair_exactly():
    spec = scalar_spec(Abar=1.0, R2=1.0, terminal=det_terminal([1.0]))
    ric = mflq.solve_riccati(spec)
    exact = mflq.solve_phi_deterministic(spec, ric)
    ode = mean_phi_ode(spec, ric, np.zeros((spec.grid.N + 1, 1)), np.array([1.0]))
    assert np.abs(ode - exact.mean_phi).max() < 1e-12
