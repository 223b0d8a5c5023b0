"""Solvers for the auxiliary backward pair (phi, beta).

The pair solves the linear mean-field BSDE

    d phi = { (A + Sigma Q) phi + [Abar + Gamma (Q + Qbar) - Sigma Q] E[phi]
              + C (I + Sigma R1)^-1 beta
              + [(C + Cbar) (I + Sigma R1 + Sigma R1bar)^-1
                 - C (I + Sigma R1)^-1] E[beta] } ds + beta dW,
    phi(T) = -xi,

and the representation is matched to the terminal-condition class:

  deterministic    exact backward ODE, beta = 0
  linear-gaussian  exact ansatz phi = p + q W, beta = q
  regression       least-squares Monte Carlo backward induction on a
                   polynomial-in-W basis (works for any polynomial xi)

All three expose the same surface: pathwise evaluation of phi and beta at a
node, deterministic mean trajectories, and central second moments (used by
the value-function formula).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .core import ProblemSpec, TerminalCondition
from .matode import MatrixTrajectory
from .riccati import RiccatiSolution, solve_joint

__all__ = [
    "ConditioningError",
    "BackwardPair",
    "solve_phi_deterministic",
    "solve_phi_linear_gaussian",
    "solve_phi_regression",
    "mean_phi_ode",
]

RIDGE = 1e-10
DEGENERATE_SD = 1e-12
MAX_DEGREE = 6


class ConditioningError(RuntimeError):
    """Regression design matrix is numerically rank deficient."""


@dataclass
class BackwardPair:
    """Kind-discriminated representation of (phi, beta) on the grid.

    Analytic kinds carry exact trajectories (phi, or the p/q pair); the
    regression kind carries per-node polynomial coefficient tables in the
    standardized Brownian variable plus the attached terminal condition,
    which node N evaluates directly so terminal values are exact per path.
    """

    kind: str  # "deterministic" | "linear-gaussian" | "regression"
    n: int
    grid_nodes: np.ndarray
    mean_phi: np.ndarray  # (N+1, n)
    mean_beta: np.ndarray  # (N+1, n)
    m2_phi: np.ndarray  # (N+1, n, n) central second moment of phi
    m2_beta: np.ndarray  # (N+1, n, n)
    phi_nodes: np.ndarray | None = None  # deterministic kind
    p_nodes: np.ndarray | None = None  # linear-gaussian kind
    q_nodes: np.ndarray | None = None
    dense_times: np.ndarray | None = field(default=None, repr=False)
    dense_p: np.ndarray | None = field(default=None, repr=False)
    dense_q: np.ndarray | None = field(default=None, repr=False)
    coef_phi: np.ndarray | None = None  # (N+1, d+1, n), regression kind
    coef_beta: np.ndarray | None = None
    basis_mu: np.ndarray | None = None  # (N+1,)
    basis_sd: np.ndarray | None = None
    degree: int | None = None
    terminal: TerminalCondition | None = None
    paths: int | None = None
    seed: int | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.grid_nodes)

    def phi_values(self, k: int, w: np.ndarray) -> np.ndarray:
        """phi at node k on Brownian samples w (M,) -> (M, n)."""
        w = np.asarray(w, dtype=float)
        M = w.shape[0]
        if self.kind == "deterministic":
            return np.broadcast_to(self.phi_nodes[k], (M, self.n)).copy()
        if self.kind == "linear-gaussian":
            return self.p_nodes[k][None, :] + w[:, None] * self.q_nodes[k][None, :]
        if k == self.n_nodes - 1:
            return -self.terminal.evaluate(w)
        z = (w - self.basis_mu[k]) / self.basis_sd[k]
        return np.polynomial.polynomial.polyval(z, self.coef_phi[k]).T

    def beta_values(self, k: int, w: np.ndarray) -> np.ndarray:
        """Martingale integrand at node k on samples w (M,) -> (M, n)."""
        w = np.asarray(w, dtype=float)
        M = w.shape[0]
        if self.kind == "deterministic":
            return np.zeros((M, self.n))
        if self.kind == "linear-gaussian":
            return np.broadcast_to(self.q_nodes[k], (M, self.n)).copy()
        if k == self.n_nodes - 1:
            return -self.terminal.derivative(w)
        z = (w - self.basis_mu[k]) / self.basis_sd[k]
        return np.polynomial.polynomial.polyval(z, self.coef_beta[k]).T

    def mean_phi_at(self, t: float) -> np.ndarray:
        """E[phi](t), interpolated between stored samples."""
        if self.kind == "linear-gaussian" and self.dense_times is not None:
            return _interp_rows(self.dense_times, self.dense_p, t)
        if self.kind == "deterministic" and self.dense_times is not None:
            return _interp_rows(self.dense_times, self.dense_p, t)
        return _interp_rows(self.grid_nodes, self.mean_phi, t)

    def mean_beta_at(self, t: float) -> np.ndarray:
        if self.kind == "linear-gaussian" and self.dense_times is not None:
            return _interp_rows(self.dense_times, self.dense_q, t)
        return _interp_rows(self.grid_nodes, self.mean_beta, t)


def _interp_rows(times: np.ndarray, values: np.ndarray, t: float) -> np.ndarray:
    if t <= times[0]:
        return values[0]
    if t >= times[-1]:
        return values[-1]
    j = int(np.searchsorted(times, t, side="right")) - 1
    w = (t - times[j]) / (times[j + 1] - times[j])
    return (1.0 - w) * values[j] + w * values[j + 1]


def _phi_drift_matrices(spec: ProblemSpec, s: float, S: np.ndarray, G: np.ndarray):
    """Coefficient matrices (D1, D2, D3, D4) of the drift at stage time s.

    drift = D1 phi + D2 E[phi] + D3 beta + D4 E[beta]
    """
    n = spec.n
    A = spec.A(s)
    Q = spec.weights.Q(s)
    Qb = spec.weights.Qbar(s)
    R1 = spec.weights.R1(s)
    R1b = spec.weights.R1bar(s)
    C = spec.C(s)
    Cb = spec.Cbar(s)
    eye = np.eye(n)
    CK1 = np.linalg.solve((eye + S @ R1).T, C.T).T  # C (I + S R1)^-1
    CK1b = np.linalg.solve((eye + S @ (R1 + R1b)).T, (C + Cb).T).T
    D1 = A + S @ Q
    D2 = spec.Abar(s) + G @ (Q + Qb) - S @ Q
    return D1, D2, CK1, CK1b - CK1


def solve_phi_deterministic(spec: ProblemSpec, ric: RiccatiSolution, substeps: int = 4) -> BackwardPair:
    """Deterministic terminal state: phi is a backward ODE and beta vanishes."""
    if spec.terminal.kind != "deterministic":
        raise ValueError("terminal condition is not deterministic")
    a = spec.terminal.a

    def extra(s, S, G, E):
        D1, D2, _, _ = _phi_drift_matrices(spec, s, S, G)
        return (D1 + D2) @ E  # E[phi] = phi for a deterministic solution

    sigma, gamma, phi = solve_joint(spec, extra_terminal=-a[:, None], extra_rhs=extra, substeps=substeps)
    _guard_riccati_match(ric, sigma)
    nodes = phi.samples[:, :, 0]
    N1, n = nodes.shape
    zero = np.zeros((N1, n, n))
    return BackwardPair(
        kind="deterministic", n=n, grid_nodes=spec.grid.nodes,
        mean_phi=nodes.copy(), mean_beta=np.zeros_like(nodes),
        m2_phi=zero, m2_beta=zero.copy(),
        phi_nodes=nodes,
        dense_times=phi.dense_times,
        dense_p=None if phi.dense_samples is None else phi.dense_samples[:, :, 0].copy(),
    )


def solve_phi_linear_gaussian(spec: ProblemSpec, ric: RiccatiSolution, substeps: int = 4) -> BackwardPair:
    """Affine-in-W terminal state: exact ansatz phi = p + q W, beta = q.

    Matching drift and diffusion of the backward equation gives
        dq/ds = (A + Sigma Q) q,
        dp/ds = [A + Abar + Gamma (Q + Qbar)] p
                + (C + Cbar) (I + Sigma (R1 + R1bar))^-1 q,
    with p(T) = -a and q(T) = -lambda; E[phi] = p because W starts at zero.
    The ansatz is cross-checked against the regression solver in tests.
    """
    if spec.terminal.kind != "linear-gaussian":
        raise ValueError("terminal condition is not linear-gaussian")
    a, lam = spec.terminal.a, spec.terminal.lam
    terminal = np.stack([-lam, -a], axis=1)  # columns [q | p]

    def extra(s, S, G, E):
        D1, D2, D3, D4 = _phi_drift_matrices(spec, s, S, G)
        q = E[:, 0]
        p = E[:, 1]
        out = np.empty_like(E)
        out[:, 0] = D1 @ q
        out[:, 1] = (D1 + D2) @ p + (D3 + D4) @ q  # D3 + D4 = (C+Cbar)(I+Sigma(R1+R1bar))^-1
        return out

    sigma, gamma, extra_traj = solve_joint(spec, extra_terminal=terminal, extra_rhs=extra, substeps=substeps)
    _guard_riccati_match(ric, sigma)
    q_nodes = extra_traj.samples[:, :, 0]
    p_nodes = extra_traj.samples[:, :, 1]
    N1, n = p_nodes.shape
    elapsed = spec.grid.nodes - spec.grid.t0
    m2_phi = elapsed[:, None, None] * np.einsum("ki,kj->kij", q_nodes, q_nodes)
    return BackwardPair(
        kind="linear-gaussian", n=n, grid_nodes=spec.grid.nodes,
        mean_phi=p_nodes.copy(), mean_beta=q_nodes.copy(),
        m2_phi=m2_phi, m2_beta=np.zeros((N1, n, n)),
        p_nodes=p_nodes, q_nodes=q_nodes,
        dense_times=extra_traj.dense_times,
        dense_p=None if extra_traj.dense_samples is None else extra_traj.dense_samples[:, :, 1].copy(),
        dense_q=None if extra_traj.dense_samples is None else extra_traj.dense_samples[:, :, 0].copy(),
    )


def _guard_riccati_match(ric: RiccatiSolution, sigma: MatrixTrajectory) -> None:
    if not np.allclose(ric.sigma.samples, sigma.samples, rtol=1e-9, atol=1e-11):
        raise ValueError("Riccati solution does not match this spec/substep count")


def _design(w: np.ndarray, degree: int) -> tuple[np.ndarray, float, float, int]:
    """Vandermonde in the standardized variable; degenerate nodes drop to degree 0."""
    mu = float(w.mean())
    sd = float(w.std())
    if sd < DEGENERATE_SD:
        return np.ones((len(w), 1)), 0.0, 1.0, 0
    z = (w - mu) / sd
    return np.vander(z, degree + 1, increasing=True), mu, sd, degree


def _ls_fit(Psi: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Ridge-stabilized normal equations; y (M, n) -> coefficients (d+1, n)."""
    M = len(y)
    G = Psi.T @ Psi / M + RIDGE * np.eye(Psi.shape[1])
    eigs = np.linalg.eigvalsh(G)
    if eigs[0] <= 0 or eigs[-1] / eigs[0] > 1e10:
        raise ConditioningError(f"regression basis is degenerate (cond ~ {eigs[-1] / max(eigs[0], 1e-300):.2e})")
    return np.linalg.solve(G, Psi.T @ y / M)


def solve_phi_regression(
    spec: ProblemSpec,
    ric: RiccatiSolution,
    n_paths: int,
    degree: int,
    seed: int,
) -> BackwardPair:
    """Least-squares Monte Carlo backward induction for (phi, beta).

    Terminal values are exact per path.  Each induction step projects the
    next-node phi onto the polynomial basis in W to get the conditional mean,
    fits beta by regressing the martingale increment (phi minus its
    projection, scaled by dW/h), takes ensemble means for the mean-field
    terms, and applies an explicit Euler step to the drift entirely in
    coefficient space.  Identical seeds give bit-identical output.
    """
    if degree > MAX_DEGREE:
        raise ValueError(f"degree capped at {MAX_DEGREE}")
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if n_paths < 1000:
        raise ValueError("need at least 1000 paths")
    if n_paths < 100 * (degree + 1):
        raise ValueError(f"need at least {100 * (degree + 1)} paths for degree {degree}")

    grid = spec.grid
    N, n = grid.N, spec.n
    W, dW = rng.brownian_paths(seed, rng.STAGE_PHI, n_paths, grid.nodes)

    terminal = spec.terminal
    phi = -terminal.evaluate(W[:, N])  # exact on every path
    beta_T = -terminal.derivative(W[:, N])

    coef_phi = np.zeros((N + 1, degree + 1, n))
    coef_beta = np.zeros((N + 1, degree + 1, n))
    mu = np.zeros(N + 1)
    sd = np.ones(N + 1)
    mean_phi = np.zeros((N + 1, n))
    mean_beta = np.zeros((N + 1, n))
    m2_phi = np.zeros((N + 1, n, n))
    m2_beta = np.zeros((N + 1, n, n))

    def record(k, phi_vals, beta_vals):
        mean_phi[k] = phi_vals.mean(axis=0)
        mean_beta[k] = beta_vals.mean(axis=0)
        dphi = phi_vals - mean_phi[k]
        dbeta = beta_vals - mean_beta[k]
        m2_phi[k] = dphi.T @ dphi / n_paths
        m2_beta[k] = dbeta.T @ dbeta / n_paths

    record(N, phi, beta_T)

    for k in range(N - 1, -1, -1):
        h = grid.cell_width(k)
        Psi, mu_k, sd_k, d_eff = _design(W[:, k], degree)
        c_hat = _ls_fit(Psi, phi)
        phi_hat = Psi @ c_hat
        c_beta = _ls_fit(Psi, (phi - phi_hat) * (dW[:, k] / h)[:, None])
        beta_vals = Psi @ c_beta

        m_phi = phi_hat.mean(axis=0)
        m_beta = beta_vals.mean(axis=0)
        t_k = grid.nodes[k]
        D1, D2, D3, D4 = _phi_drift_matrices(spec, t_k, ric.sigma[k], ric.gamma[k])

        c_new = c_hat - h * (c_hat @ D1.T + c_beta @ D3.T)
        c_new[0] -= h * (D2 @ m_phi + D4 @ m_beta)
        phi = Psi @ c_new

        mu[k], sd[k] = mu_k, sd_k
        coef_phi[k, : d_eff + 1] = c_new
        coef_beta[k, : d_eff + 1] = c_beta
        record(k, phi, beta_vals)

    return BackwardPair(
        kind="regression", n=n, grid_nodes=grid.nodes,
        mean_phi=mean_phi, mean_beta=mean_beta, m2_phi=m2_phi, m2_beta=m2_beta,
        coef_phi=coef_phi, coef_beta=coef_beta, basis_mu=mu, basis_sd=sd,
        degree=degree, terminal=terminal, paths=n_paths, seed=seed,
    )


def mean_phi_ode(
    spec: ProblemSpec,
    ric: RiccatiSolution,
    mean_beta_nodes: np.ndarray,
    mean_xi: np.ndarray,
    substeps: int = 4,
) -> np.ndarray:
    """Backward ODE for E[phi] given an E[beta] trajectory; returns (N+1, n).

    Taking expectations of the backward equation collapses it to
        dE/ds = [A + Abar + Gamma (Q + Qbar)] E
                + (C + Cbar) (I + Sigma (R1 + R1bar))^-1 E[beta](s),
    with E(T) = -E[xi].  Used as the independent oracle for ensemble means.
    """
    nodes = spec.grid.nodes
    mb = np.asarray(mean_beta_nodes, dtype=float)

    def extra(s, S, G, E):
        D1, D2, D3, D4 = _phi_drift_matrices(spec, s, S, G)
        beta_here = _interp_rows(nodes, mb, s)
        return ((D1 + D2) @ E[:, 0] + (D3 + D4) @ beta_here)[:, None]

    sigma, _, traj = solve_joint(spec, extra_terminal=-np.asarray(mean_xi, float)[:, None],
                                 extra_rhs=extra, substeps=substeps)
    _guard_riccati_match(ric, sigma)
    return traj.samples[:, :, 0]
