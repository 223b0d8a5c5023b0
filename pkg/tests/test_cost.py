import numpy as np
import pytest

import mflq
from mflq.core import refine_spec
from mflq.cost import quadrature_weights
from mflq.matode import MatrixTrajectory
from mflq.synthesis import PathEnsemble

from conftest import scalar_spec, smoke2d_spec


def bare_ensemble(spec, M, Y=None, Z=None, U=None):
    N1 = spec.grid.N + 1
    mean_x = MatrixTrajectory(grid=spec.grid, samples=np.zeros((N1, spec.n, 1)))
    return PathEnsemble(
        spec=spec, n_paths=M, seed=0,
        W=np.zeros((M, N1)), dW=np.zeros((M, N1 - 1)), mean_x=mean_x,
        X=np.zeros((M, N1, spec.n)),
        Y=np.zeros((M, N1, spec.n)) if Y is None else Y,
        Z=np.zeros((M, N1, spec.n)) if Z is None else Z,
        u=np.zeros((M, N1, spec.m)) if U is None else U,
        mean_u=np.zeros((N1, spec.m)),
    )


def test_quadrature_weights_sum_to_horizon():
    nodes = np.linspace(0.25, 2.25, 9)
    w = quadrature_weights(nodes)
    assert abs(w.sum() - 2.0) < 1e-14
    assert w[0] == w[-1] == (nodes[1] - nodes[0]) / 2


def test_cost_zero_processes():
    spec = scalar_spec(G=1.0, Q=1.0, R1=1.0, R2=1.0, steps=8)
    j, se = mflq.evaluate_cost_mc(spec, bare_ensemble(spec, 16))
    assert j == 0.0 and se == 0.0


def test_cost_initial_weight_only():
    spec = scalar_spec(G=1.0, R2=1.0, steps=8)
    ens = bare_ensemble(spec, 16)
    ens.Y[:, 0, 0] = 2.0
    j, se = mflq.evaluate_cost_mc(spec, ens)
    assert abs(j - 4.0) < 1e-14
    assert se == 0.0


def test_cost_constant_control_exact():
    spec = scalar_spec(R2=1.0, steps=16)
    ens = bare_ensemble(spec, 8)
    ens.u[:] = 1.0
    j, se = mflq.evaluate_cost_mc(spec, ens)
    assert abs(j - 1.0) < 1e-14  # trapezoid of a constant is exact
    assert se == 0.0


def test_cost_mean_terms_plug_in():
    # Qbar only: J = int <Qbar E[Y], E[Y]> for the ensemble mean
    spec = scalar_spec(Qbar=2.0, R2=1.0, steps=10)
    ens = bare_ensemble(spec, 2)
    ens.Y[0, :, 0] = 1.0
    ens.Y[1, :, 0] = 3.0  # ensemble mean 2, so J = 2 * 4 = 8
    j, _ = mflq.evaluate_cost_mc(spec, ens)
    assert abs(j - 8.0) < 1e-14


def test_value_function_zero_weights():
    spec = scalar_spec(R2=1.0, steps=10, terminal={"kind": "linear-gaussian", "a": [0.3], "lambda": [0.8]})
    ric = mflq.solve_riccati(spec)
    pair = mflq.solve_phi_linear_gaussian(spec, ric)
    assert mflq.value_function(spec, ric, pair) == 0.0


def test_value_function_martingale_case():
    # zero coefficients, xi = W(T), R1 = 1: V = int_0^1 1 * E[beta]^2 ds = 1
    spec = scalar_spec(R1=1.0, R2=1.0, steps=40, terminal={"kind": "linear-gaussian", "a": [0.0], "lambda": [1.0]})
    ric = mflq.solve_riccati(spec)
    pair = mflq.solve_phi_linear_gaussian(spec, ric)
    v = mflq.value_function(spec, ric, pair)
    assert abs(v - 1.0) < 1e-12


def test_value_function_quadrature_convergence():
    # deterministic terminal with Q weight only; oracle = same formula at 10x nodes
    spec = scalar_spec(Abar=0.8, Q=0.6, Qbar=0.2, B=1.0, R2=1.0, steps=40,
                       terminal={"kind": "deterministic", "a": [1.0]})
    fine = refine_spec(spec, 10)
    vals = {}
    for label, sp in (("coarse", spec), ("fine", fine)):
        ric = mflq.solve_riccati(sp)
        pair = mflq.solve_phi_deterministic(sp, ric)
        vals[label] = mflq.value_function(sp, ric, pair)
    assert abs(vals["coarse"] - vals["fine"]) < 0.2 * spec.grid.h**2


def test_gateaux_zero_direction_exact(smoke_pipeline):
    spec, ric, pair, ens = smoke_pipeline
    est, se = mflq.gateaux_derivative(spec, ric, pair, ens, np.zeros((spec.grid.N + 1, spec.m)))
    assert est == 0.0 and se == 0.0


def test_gateaux_vanishes_at_optimum(smoke_pipeline):
    spec, ric, pair, ens = smoke_pipeline
    for j in range(spec.m):
        v = np.zeros((spec.grid.N + 1, spec.m))
        v[:, j] = 1.0
        est, se = mflq.gateaux_derivative(spec, ric, pair, ens, v)
        assert abs(est) <= 3.0 * se + 1e-12


def test_gateaux_detects_suboptimal_control(smoke_pipeline):
    spec, ric, pair, ens = smoke_pipeline
    import copy

    zeroed = copy.copy(ens)
    zeroed.u = np.zeros_like(ens.u)
    zeroed.mean_u = np.zeros_like(ens.mean_u)
    v = np.ones((spec.grid.N + 1, spec.m))
    est, se = mflq.gateaux_derivative(spec, ric, pair, zeroed, v)
    # formula oracle: -2 int <B^T E[X] + Bbar^T E[X], 1> ds over the mean trajectory
    wq = quadrature_weights(spec.grid.nodes)
    mx = ens.mean_x_nodes
    target = 0.0
    for k in range(spec.grid.N + 1):
        s = spec.grid.nodes[k]
        Bsum = spec.B(s) + spec.Bbar(s)
        target += -2.0 * wq[k] * float((Bsum.T @ mx[k]).sum())
    assert abs(target) > 10 * se  # genuinely nonzero signal
    assert abs(est - target) <= 4.0 * se


def test_gateaux_rejects_bad_direction(smoke_pipeline):
    spec, ric, pair, ens = smoke_pipeline
    with pytest.raises(ValueError):
        mflq.gateaux_derivative(spec, ric, pair, ens, np.ones((3, spec.m)))
    bad = np.ones((spec.grid.N + 1, spec.m))
    bad[5, 0] = np.nan
    with pytest.raises(ValueError):
        mflq.gateaux_derivative(spec, ric, pair, ens, bad)


def test_perturbation_gap_zero_eps(smoke_pipeline):
    spec, ric, pair, ens = smoke_pipeline
    v = np.ones((spec.grid.N + 1, spec.m))
    gaps = mflq.perturbation_gap(spec, ric, pair, ens, v, [0.0])
    assert gaps[0].gap == 0.0 and gaps[0].predicted == 0.0


def test_perturbation_gap_quadratic_structure(smoke_pipeline):
    spec, ric, pair, ens = smoke_pipeline
    v = np.ones((spec.grid.N + 1, spec.m))
    gaps = mflq.perturbation_gap(spec, ric, pair, ens, v, [0.05, -0.05, 0.1, 0.2])
    by_eps = {g.eps: g for g in gaps}
    for g in gaps:
        assert g.gap >= -3.0 * g.se
        assert abs(g.gap - g.predicted) <= 0.02 * abs(g.predicted) + 3.0 * g.se
    plus, minus = by_eps[0.05], by_eps[-0.05]
    assert abs(plus.gap - minus.gap) <= 3.0 * (plus.se + minus.se) + 1e-4 * abs(plus.gap)
    # pure quadratic: gap(0.2) / gap(0.1) close to 4
    assert abs(by_eps[0.2].gap / by_eps[0.1].gap - 4.0) < 0.05


def test_control_response_zero_control():
    spec = smoke2d_spec(steps=20)
    Yv = mflq.control_response(spec, np.zeros((21, 2)))
    assert np.all(Yv == 0.0)


def test_control_response_constant_coefficient_oracle():
    # A + Abar = 0, B + Bbar = 1, v = 1: dY/ds = 1, Y(T) = 0 => Y(t) = t - T
    spec = scalar_spec(A=0.4, Abar=-0.4, B=0.7, Bbar=0.3, R2=1.0, steps=25)
    Yv = mflq.control_response(spec, np.ones((26, 1)))
    assert np.abs(Yv[:, 0] - (spec.grid.nodes - 1.0)).max() < 1e-12


def test_coercivity_direct_case():
    # all state weights zero, R2 = 1, delta = 1: J = int u^2 = 2 * bound
    spec = scalar_spec(R2=1.0, delta=1.0, steps=30)
    draws = mflq.coercivity_check(spec, n_draws=6, seed=9)
    assert len(draws) == 6
    for d in draws:
        assert d.passed
        assert abs(d.cost - 2.0 * d.bound) < 1e-12


def test_coercivity_smoke_battery(smoke_pipeline):
    spec, *_ = smoke_pipeline
    draws = mflq.coercivity_check(spec, n_draws=20, seed=4)
    assert all(d.passed for d in draws)


def test_cost_report_serialization(smoke_pipeline):
    spec, ric, pair, ens = smoke_pipeline
    j, se = mflq.evaluate_cost_mc(spec, ens)
    report = mflq.CostReport(
        j_mc=j, j_se=se, v_formula=mflq.value_function(spec, ric, pair),
        stationarity=mflq.stationarity_residual(spec, ens),
    )
    d = report.as_dict()
    assert set(d) >= {"j_mc", "j_se", "v_formula", "stationarity_residual"}
    assert abs(d["j_mc"] - d["v_formula"]) <= 3.0 * d["j_se"] + 5e-3
