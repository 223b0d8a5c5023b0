"""Closed-loop synthesis: simulate the decoupled forward process and recover
the optimal triple.

The adjoint-like state X follows the decoupled forward SDE whose drift and
diffusion are assembled from the Riccati solutions and the backward pair; the
optimal state, martingale integrand and control are then pointwise functions
of X along each path:

    Y = -Sigma (X - E[X]) - Gamma E[X] - phi
    Z = (I + Sigma R1)^-1 { Sigma C^T (X - E[X]) - (beta - E[beta]) }
        + (I + Sigma R1 + Sigma R1bar)^-1 { Sigma (C+Cbar)^T E[X] - E[beta] }
    u = R2^-1 B^T (X - E[X]) + (R2 + R2bar)^-1 (B + Bbar)^T E[X]

E[X] is supplied by a deterministic mean ODE rather than the running ensemble
average, so paths stay independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .core import ProblemSpec
from .matode import IntegrationDivergedError, MatrixTrajectory, integrate_forward
from .mfbsde import BackwardPair
from .riccati import RiccatiSolution

__all__ = [
    "PathEnsemble",
    "initial_x",
    "mean_x_ode",
    "simulate_x_ensemble",
    "recover_y",
    "recover_z",
    "optimal_control",
    "stationarity_residual",
]

_BRACKET_CHECK_STRIDE = 100
_BRACKET_CHECK_TOL = 1e-8


@dataclass
class PathEnsemble:
    """Aligned Monte Carlo samples of (W, X, Y, Z, u) on the grid.

    ``mean_x`` is the deterministic mean trajectory used inside drift and
    diffusion; ``mean_u`` is the deterministic mean of the control currently
    stored in ``u`` (the synthesized control's mean, shifted when a
    deterministic perturbation is applied).  Stages fill fields in place:
    simulate -> X, recover_y -> Y, recover_z -> Z, optimal_control -> u.
    """

    spec: ProblemSpec
    n_paths: int
    seed: int
    W: np.ndarray  # (M, N+1)
    dW: np.ndarray  # (M, N)
    mean_x: MatrixTrajectory  # (n, 1) samples per node
    X: np.ndarray  # (M, N+1, n)
    Y: np.ndarray | None = None
    Z: np.ndarray | None = None
    u: np.ndarray | None = None
    mean_u: np.ndarray | None = None  # (N+1, m)

    @property
    def mean_x_nodes(self) -> np.ndarray:
        """(N+1, n) view of the deterministic mean trajectory."""
        return self.mean_x.samples[:, :, 0]


def initial_x(
    spec: ProblemSpec,
    ric: RiccatiSolution,
    phi: BackwardPair,
    w0: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Initial adjoint state per path and its deterministic mean.

    X(t0) = -[I + G Sigma(t0)]^-1 G (phi(t0) - E[phi(t0)])
            -[I + (G+Gbar) Gamma(t0)]^-1 (G+Gbar) E[phi(t0)]

    With the Brownian convention W(t0) = 0 the fluctuation term vanishes for
    the analytic representations, making X(t0) deterministic.
    """
    n = spec.n
    G = spec.weights.G
    GG = G + spec.weights.Gbar
    eye = np.eye(n)
    F1 = eye + G @ ric.sigma[0]
    F2 = eye + GG @ ric.gamma[0]
    if np.linalg.cond(F1) > 1e12 or np.linalg.cond(F2) > 1e12:
        raise np.linalg.LinAlgError("initial-state matrix I + G Sigma(t0) is singular")
    phi0 = phi.phi_values(0, np.asarray(w0, dtype=float))
    mean_phi0 = phi.mean_phi[0]
    fluct = phi0 - mean_phi0[None, :]
    mean_x0 = -np.linalg.solve(F2, GG @ mean_phi0)
    x0 = -np.linalg.solve(F1, G @ fluct.T).T + mean_x0[None, :]
    return x0, mean_x0


def mean_x_ode(spec: ProblemSpec, ric: RiccatiSolution, phi: BackwardPair, substeps: int = 4) -> MatrixTrajectory:
    """Forward RK4 for the deterministic mean of X.

    d E[X] / ds = -{ [A + Abar + Gamma (Q + Qbar)]^T E[X] + (Q + Qbar) E[phi] }
    from the mean of the initial-state formula.
    """
    _, mean_x0 = initial_x(spec, ric, phi, np.zeros(1))

    def field(s: float, E: np.ndarray) -> np.ndarray:
        A2 = spec.A(s) + spec.Abar(s)
        Q2 = spec.weights.Q(s) + spec.weights.Qbar(s)
        G = ric.gamma.at(s)
        mphi = phi.mean_phi_at(s)
        return -((A2 + G @ Q2).T @ E + (Q2 @ mphi)[:, None])

    return integrate_forward(field, mean_x0[:, None], spec.grid, substeps=substeps, keep_dense=False)


def _node_tables(spec: ProblemSpec, ric: RiccatiSolution):
    """Per-node matrices for the forward simulation's drift and diffusion."""
    grid = spec.grid
    N, n = grid.N, spec.n
    drift_x = np.empty((N + 1, n, n))
    drift_e = np.empty((N + 1, n, n))
    drift_phi = np.empty((N + 1, n, n))
    drift_mphi = np.empty((N + 1, n, n))
    diff_x = np.empty((N + 1, n, n))
    diff_e = np.empty((N + 1, n, n))
    diff_b = np.empty((N + 1, n, n))
    diff_mb = np.empty((N + 1, n, n))
    for k in range(N + 1):
        s = grid.nodes[k]
        A, Ab = spec.A(s), spec.Abar(s)
        Q, Qb = spec.weights.Q(s), spec.weights.Qbar(s)
        R1, R1b = spec.weights.R1(s), spec.weights.R1bar(s)
        C, Cb = spec.C(s), spec.Cbar(s)
        S = ric.sigma[k]
        G = ric.gamma[k]
        K1, K1b = ric.k1[k], ric.k1bar[k]
        drift_x[k] = -(A + S @ Q).T
        drift_e[k] = -(Ab - S @ Q + G @ (Q + Qb)).T
        drift_phi[k] = -Q
        drift_mphi[k] = -Qb
        R1K1S = R1 @ K1 @ S
        diff_x[k] = (R1K1S - np.eye(n)) @ C.T
        diff_e[k] = -Cb.T - R1K1S @ C.T + (R1 + R1b) @ K1b @ S @ (C + Cb).T
        diff_b[k] = -R1 @ K1
        diff_mb[k] = -(R1 + R1b) @ K1b
    return drift_x, drift_e, drift_phi, drift_mphi, diff_x, diff_e, diff_b, diff_mb


def _optimality_diffusion(spec: ProblemSpec, ric: RiccatiSolution, k: int,
                          X: np.ndarray, mean_x: np.ndarray,
                          beta: np.ndarray, mean_beta: np.ndarray) -> np.ndarray:
    """Diffusion in optimality-system form -C^T X - Cbar^T E[X] + R1 Z + R1bar E[Z]."""
    s = spec.grid.nodes[k]
    C, Cb = spec.C(s), spec.Cbar(s)
    R1, R1b = spec.weights.R1(s), spec.weights.R1bar(s)
    S = ric.sigma[k]
    K1, K1b = ric.k1[k], ric.k1bar[k]
    dx = X - mean_x[None, :]
    mean_z = K1b @ (S @ (C + Cb).T @ mean_x - mean_beta)
    z_fluct = (K1 @ (S @ C.T @ dx.T - (beta - mean_beta[None, :]).T)).T
    z = z_fluct + mean_z[None, :]
    return -(C.T @ X.T).T - (Cb.T @ mean_x)[None, :] + (R1 @ z.T).T + (R1b @ mean_z)[None, :]


def simulate_x_ensemble(
    spec: ProblemSpec,
    ric: RiccatiSolution,
    phi: BackwardPair,
    n_paths: int,
    seed: int,
    substeps: int = 4,
    driver: tuple[np.ndarray, np.ndarray] | None = None,
) -> PathEnsemble:
    """Euler-Maruyama forward march of the decoupled SDE for X.

    The mean-field terms use the deterministic mean ODE solution, so paths
    are independent and the drift/diffusion are exactly the displayed
    closed-loop coefficients.  Every 100th path is cross-checked against the
    equivalent optimality-system form of the diffusion.  ``driver`` overrides
    the generated Brownian samples (used by refinement studies that coarsen a
    common noise).
    """
    grid = spec.grid
    N, n = grid.N, spec.n
    if driver is None:
        W, dW = rng.brownian_paths(seed, rng.STAGE_SIM, n_paths, grid.nodes)
    else:
        W, dW = driver
        if W.shape != (n_paths, N + 1) or dW.shape != (n_paths, N):
            raise ValueError("driver arrays do not match the grid and path count")
    mean_x = mean_x_ode(spec, ric, phi, substeps=substeps)
    mx = mean_x.samples[:, :, 0]

    (drift_x, drift_e, drift_phi, drift_mphi,
     diff_x, diff_e, diff_b, diff_mb) = _node_tables(spec, ric)

    X = np.empty((n_paths, N + 1, n))
    x0, _ = initial_x(spec, ric, phi, W[:, 0])
    X[:, 0] = x0

    check = slice(0, n_paths, _BRACKET_CHECK_STRIDE)
    for k in range(N):
        xk = X[:, k]
        beta = phi.beta_values(k, W[:, k])
        phik = phi.phi_values(k, W[:, k])
        mb = phi.mean_beta[k]
        mp = phi.mean_phi[k]
        drift = (
            xk @ drift_x[k].T
            + (drift_e[k] @ mx[k])[None, :]
            + phik @ drift_phi[k].T
            + (drift_mphi[k] @ mp)[None, :]
        )
        diffusion = (
            xk @ diff_x[k].T
            + (diff_e[k] @ mx[k])[None, :]
            + (beta - mb[None, :]) @ diff_b[k].T
            + (diff_mb[k] @ mb)[None, :]
        )
        alt = _optimality_diffusion(spec, ric, k, xk[check], mx[k], beta[check], mb)
        scale = max(float(np.abs(diffusion[check]).max()), 1.0)
        if not np.allclose(diffusion[check], alt, rtol=_BRACKET_CHECK_TOL, atol=_BRACKET_CHECK_TOL * scale):
            raise AssertionError("diffusion bracket disagrees with the optimality-system form")
        h = grid.cell_width(k)
        X[:, k + 1] = xk + h * drift + dW[:, k][:, None] * diffusion
        if not np.isfinite(X[:, k + 1]).all():
            bad = int(np.argwhere(~np.isfinite(X[:, k + 1]).all(axis=1))[0, 0])
            raise IntegrationDivergedError(grid.nodes[k + 1], f"path {bad} diverged")

    return PathEnsemble(spec=spec, n_paths=n_paths, seed=seed, W=W, dW=dW, mean_x=mean_x, X=X)


def recover_y(spec: ProblemSpec, ric: RiccatiSolution, phi: BackwardPair, ens: PathEnsemble) -> PathEnsemble:
    """Fill Y pointwise from the decoupling relation; Y(T) reproduces xi."""
    N = spec.grid.N
    mx = ens.mean_x_nodes
    Y = np.empty_like(ens.X)
    for k in range(N + 1):
        dx = ens.X[:, k] - mx[k][None, :]
        phik = phi.phi_values(k, ens.W[:, k])
        Y[:, k] = -dx @ ric.sigma[k].T - (ric.gamma[k] @ mx[k])[None, :] - phik
    ens.Y = Y
    return ens


def recover_z(spec: ProblemSpec, ric: RiccatiSolution, phi: BackwardPair, ens: PathEnsemble) -> PathEnsemble:
    """Fill Z pointwise from the kernel formula."""
    grid = spec.grid
    mx = ens.mean_x_nodes
    Z = np.empty_like(ens.X)
    for k in range(grid.N + 1):
        s = grid.nodes[k]
        C, Cb = spec.C(s), spec.Cbar(s)
        S = ric.sigma[k]
        K1, K1b = ric.k1[k], ric.k1bar[k]
        dx = ens.X[:, k] - mx[k][None, :]
        beta = phi.beta_values(k, ens.W[:, k])
        mb = phi.mean_beta[k]
        fluct = (K1 @ (S @ C.T @ dx.T - (beta - mb[None, :]).T)).T
        mean_z = K1b @ (S @ (C + Cb).T @ mx[k] - mb)
        Z[:, k] = fluct + mean_z[None, :]
    ens.Z = Z
    return ens


def optimal_control(spec: ProblemSpec, ric: RiccatiSolution, ens: PathEnsemble) -> PathEnsemble:
    """Fill the closed-loop control and its deterministic mean."""
    grid = spec.grid
    mx = ens.mean_x_nodes
    M = ens.n_paths
    u = np.empty((M, grid.N + 1, spec.m))
    mean_u = np.empty((grid.N + 1, spec.m))
    for k in range(grid.N + 1):
        s = grid.nodes[k]
        B, Bb = spec.B(s), spec.Bbar(s)
        R2, R2b = spec.weights.R2(s), spec.weights.R2bar(s)
        dx = ens.X[:, k] - mx[k][None, :]
        mean_u[k] = np.linalg.solve(R2 + R2b, (B + Bb).T @ mx[k])
        u[:, k] = np.linalg.solve(R2, B.T @ dx.T).T + mean_u[k][None, :]
    ens.u = u
    ens.mean_u = mean_u
    return ens


def stationarity_residual(spec: ProblemSpec, ens: PathEnsemble) -> float:
    """Max over nodes of the ensemble RMS of R2 u + R2bar E[u] - B^T X - Bbar^T E[X].

    E[u] and E[X] are the deterministic mean trajectories carried by the
    ensemble, under which the synthesized control satisfies the identity to
    roundoff.
    """
    if ens.u is None or ens.mean_u is None:
        raise ValueError("control not filled; run optimal_control first")
    grid = spec.grid
    mx = ens.mean_x_nodes
    worst = 0.0
    for k in range(grid.N + 1):
        s = grid.nodes[k]
        B, Bb = spec.B(s), spec.Bbar(s)
        R2, R2b = spec.weights.R2(s), spec.weights.R2bar(s)
        resid = (
            ens.u[:, k] @ R2.T
            + (R2b @ ens.mean_u[k])[None, :]
            - ens.X[:, k] @ B
            - (Bb.T @ mx[k])[None, :]
        )
        rms = float(np.sqrt((resid**2).sum(axis=1).mean()))
        worst = max(worst, rms)
    return worst
