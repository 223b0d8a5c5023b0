"""Cost evaluation and the optimality verification battery.

The quadratic functional is estimated two independent ways: a trapezoidal
Monte Carlo average over simulated paths, and the closed-form value formula
driven only by the Riccati solutions and the moments of the backward pair.
First-order optimality is probed with deterministic control perturbations:
for a deterministic direction the perturbed state is a deterministic backward
ODE and the extra martingale integrand vanishes, so perturbed costs are exact
re-evaluations on the same paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .core import ProblemSpec
from .matode import integrate_backward
from .mfbsde import BackwardPair
from .riccati import RiccatiSolution
from .synthesis import PathEnsemble

__all__ = [
    "CostReport",
    "GateauxEstimate",
    "PerturbationGap",
    "CoercivityDraw",
    "evaluate_cost_mc",
    "value_function",
    "control_response",
    "gateaux_derivative",
    "perturbation_gap",
    "coercivity_check",
    "quadrature_weights",
]


def quadrature_weights(nodes: np.ndarray) -> np.ndarray:
    """Trapezoidal weights for the grid nodes."""
    widths = np.diff(nodes)
    w = np.zeros(len(nodes))
    w[:-1] += widths / 2.0
    w[1:] += widths / 2.0
    return w


@dataclass
class GateauxEstimate:
    label: str
    estimate: float
    se: float


@dataclass
class PerturbationGap:
    eps: float
    gap: float
    predicted: float
    se: float


@dataclass
class CoercivityDraw:
    cost: float
    bound: float

    @property
    def passed(self) -> bool:
        return self.cost >= self.bound - 1e-12


@dataclass
class CostReport:
    """Verification summary: estimates, residuals, and perturbation probes."""

    j_mc: float
    j_se: float
    v_formula: float
    stationarity: float
    gateaux: list[GateauxEstimate] = field(default_factory=list)
    perturbation_gaps: list[PerturbationGap] = field(default_factory=list)
    coercivity: list[CoercivityDraw] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "j_mc": self.j_mc,
            "j_se": self.j_se,
            "v_formula": self.v_formula,
            "stationarity_residual": self.stationarity,
            "gateaux": [
                {"label": g.label, "estimate": g.estimate, "se": g.se} for g in self.gateaux
            ],
            "perturbation_gaps": [
                {"eps": p.eps, "gap": p.gap, "predicted": p.predicted, "se": p.se}
                for p in self.perturbation_gaps
            ],
            "coercivity": [
                {"cost": c.cost, "bound": c.bound, "passed": c.passed} for c in self.coercivity
            ],
        }


def _node_weights(spec: ProblemSpec, k: int):
    s = spec.grid.nodes[k]
    w = spec.weights
    return w.Q(s), w.Qbar(s), w.R1(s), w.R1bar(s), w.R2(s), w.R2bar(s)


def _quad(M: np.ndarray, V: np.ndarray) -> np.ndarray:
    """<M v, v> per row of V."""
    return np.einsum("mi,ij,mj->m", V, M, V)


def _mc_cost_arrays(spec: ProblemSpec, Y: np.ndarray, Z: np.ndarray, U: np.ndarray):
    """Plug-in cost estimate plus per-path influence contributions.

    The estimate is mean(path terms) + mean terms evaluated at ensemble
    means.  The influence array linearizes the mean terms so its standard
    deviation is a first-order-correct standard error for the whole estimate.
    """
    grid = spec.grid
    M = Y.shape[0]
    wq = quadrature_weights(grid.nodes)
    path = np.zeros(M)
    mean_total = 0.0
    influence = np.zeros(M)

    for k in range(grid.N + 1):
        Qk, Qbk, R1k, R1bk, R2k, R2bk = _node_weights(spec, k)
        yk, zk, uk = Y[:, k], Z[:, k], U[:, k]
        path += wq[k] * (_quad(Qk, yk) + _quad(R1k, zk) + _quad(R2k, uk))
        ybar, zbar, ubar = yk.mean(axis=0), zk.mean(axis=0), uk.mean(axis=0)
        mean_total += wq[k] * (ybar @ Qbk @ ybar + zbar @ R1bk @ zbar + ubar @ R2bk @ ubar)
        influence += wq[k] * 2.0 * (yk @ (Qbk @ ybar) + zk @ (R1bk @ zbar) + uk @ (R2bk @ ubar))

    G, Gb = spec.weights.G, spec.weights.Gbar
    y0 = Y[:, 0]
    path += _quad(G, y0)
    y0bar = y0.mean(axis=0)
    mean_total += y0bar @ Gb @ y0bar
    influence += 2.0 * (y0 @ (Gb @ y0bar))

    estimate = float(path.mean() + mean_total)
    contrib = path + influence
    se = float(contrib.std(ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    return estimate, se, contrib


def evaluate_cost_mc(spec: ProblemSpec, ens: PathEnsemble) -> tuple[float, float]:
    """Monte Carlo cost of the ensemble's (Y, Z, u); returns (estimate, SE)."""
    if ens.Y is None or ens.Z is None or ens.u is None:
        raise ValueError("ensemble must have Y, Z and u filled")
    est, se, _ = _mc_cost_arrays(spec, ens.Y, ens.Z, ens.u)
    return est, se


def value_function(spec: ProblemSpec, ric: RiccatiSolution, phi: BackwardPair) -> float:
    """Closed-form optimal cost from Riccati solutions and (phi, beta) moments.

    Two boundary terms at t0 plus four running terms; fluctuation second
    moments enter through traces, means through quadratic forms.  Analytic
    pair kinds supply exact Gaussian moments, the regression kind ensemble
    averages.
    """
    n = spec.n
    eye = np.eye(n)
    G, Gb = spec.weights.G, spec.weights.Gbar
    GG = G + Gb

    F1 = eye + ric.sigma[0] @ G
    F2 = eye + ric.gamma[0] @ GG
    m0 = phi.mean_phi[0]
    total = float(np.trace(np.linalg.solve(F1.T, G).T @ phi.m2_phi[0]))
    total += float(m0 @ np.linalg.solve(F2.T, GG.T) @ m0)

    wq = quadrature_weights(spec.grid.nodes)
    for k in range(spec.grid.N + 1):
        Qk, Qbk, R1k, R1bk, _, _ = _node_weights(spec, k)
        S = ric.sigma[k]
        mphi, mbeta = phi.mean_phi[k], phi.mean_beta[k]
        term_q = np.trace(Qk @ phi.m2_phi[k]) + mphi @ (Qk + Qbk) @ mphi
        KR1 = np.linalg.solve(eye + R1k @ S, R1k)  # (I + R1 Sigma)^-1 R1
        R12 = R1k + R1bk
        KR12 = np.linalg.solve(eye + R12 @ S, R12)
        term_r = np.trace(KR1 @ phi.m2_beta[k]) + mbeta @ KR12 @ mbeta
        total += wq[k] * float(term_q + term_r)
    return total


def _v_lookup(v_nodes: np.ndarray, nodes: np.ndarray, s: float) -> np.ndarray:
    idx = int(np.searchsorted(nodes, s, side="left"))
    return v_nodes[min(idx, len(nodes) - 1)]


def control_response(spec: ProblemSpec, v_nodes: np.ndarray, substeps: int = 4) -> np.ndarray:
    """Deterministic state response Y^v to a deterministic control path.

    Solves dY/ds = (A + Abar) Y + (B + Bbar) v backward from Y(T) = 0; a
    deterministic control with zero terminal leaves no martingale integrand,
    so this ODE is the exact perturbed-state direction.  Returns (N+1, n).
    """
    v_nodes = np.asarray(v_nodes, dtype=float)
    if v_nodes.shape != (spec.grid.N + 1, spec.m):
        raise ValueError(f"expected control table of shape {(spec.grid.N + 1, spec.m)}")
    if not np.isfinite(v_nodes).all():
        raise ValueError("perturbation direction must be deterministic and finite")
    nodes = spec.grid.nodes

    def fieldfn(s, Yv):
        A2 = spec.A(s) + spec.Abar(s)
        B2 = spec.B(s) + spec.Bbar(s)
        return A2 @ Yv + (B2 @ _v_lookup(v_nodes, nodes, s))[:, None]

    traj = integrate_backward(fieldfn, np.zeros((spec.n, 1)), spec.grid, substeps=substeps)
    return traj.samples[:, :, 0]


def _stationarity_vectors(spec: ProblemSpec, ens: PathEnsemble) -> np.ndarray:
    """(M, N+1, m) array of R2 u + R2bar E[u] - B^T X - Bbar^T E[X] per node."""
    grid = spec.grid
    mx = ens.mean_x_nodes
    out = np.empty_like(ens.u)
    for k in range(grid.N + 1):
        s = grid.nodes[k]
        B, Bb = spec.B(s), spec.Bbar(s)
        R2, R2b = spec.weights.R2(s), spec.weights.R2bar(s)
        out[:, k] = (
            ens.u[:, k] @ R2.T
            + (R2b @ ens.mean_u[k])[None, :]
            - ens.X[:, k] @ B
            - (Bb.T @ mx[k])[None, :]
        )
    return out


def gateaux_derivative(
    spec: ProblemSpec,
    ric: RiccatiSolution,
    phi: BackwardPair,
    ens: PathEnsemble,
    v_nodes: np.ndarray,
) -> tuple[float, float]:
    """First-order cost change along a deterministic control direction.

    Returns the Monte Carlo estimate and standard error of
    2 E int < R2 u + R2bar E[u] - B^T X - Bbar^T E[X], v > ds, which vanishes
    for the synthesized control.
    """
    v_nodes = np.asarray(v_nodes, dtype=float)
    control_response(spec, v_nodes)  # validates the direction and its state response
    if ens.u is None:
        raise ValueError("ensemble control not filled")
    wq = quadrature_weights(spec.grid.nodes)
    resid = _stationarity_vectors(spec, ens)
    per_path = 2.0 * np.einsum("mkj,kj,k->m", resid, v_nodes, wq)
    est = float(per_path.mean())
    se = float(per_path.std(ddof=1) / np.sqrt(len(per_path))) if len(per_path) > 1 else 0.0
    return est, se


def perturbation_gap(
    spec: ProblemSpec,
    ric: RiccatiSolution,
    phi: BackwardPair,
    ens: PathEnsemble,
    v_nodes: np.ndarray,
    eps_list: list[float],
) -> list[PerturbationGap]:
    """Exact cost re-evaluation under u -> u + eps v on the same paths.

    The state shifts by eps Y^v (deterministic), the martingale integrand is
    unchanged, and the predicted quadratic term is the deterministic cost form
    of (Y^v, 0, v).  Gap standard errors use per-path differences, so common
    paths cancel most of the noise.
    """
    v_nodes = np.asarray(v_nodes, dtype=float)
    if ens.Y is None or ens.Z is None or ens.u is None:
        raise ValueError("ensemble must have Y, Z and u filled")
    Yv = control_response(spec, v_nodes)

    wq = quadrature_weights(spec.grid.nodes)
    G, Gb = spec.weights.G, spec.weights.Gbar
    quad_form = float(Yv[0] @ (G + Gb) @ Yv[0])
    for k in range(spec.grid.N + 1):
        Qk, Qbk, _, _, R2k, R2bk = _node_weights(spec, k)
        quad_form += wq[k] * float(Yv[k] @ (Qk + Qbk) @ Yv[k] + v_nodes[k] @ (R2k + R2bk) @ v_nodes[k])

    j0, _, base_contrib = _mc_cost_arrays(spec, ens.Y, ens.Z, ens.u)
    out: list[PerturbationGap] = []
    for eps in eps_list:
        if eps == 0.0:
            out.append(PerturbationGap(eps=0.0, gap=0.0, predicted=0.0, se=0.0))
            continue
        Yp = ens.Y + eps * Yv[None, :, :]
        Up = ens.u + eps * v_nodes[None, :, :]
        jp, _, contrib_p = _mc_cost_arrays(spec, Yp, ens.Z, Up)
        diff = contrib_p - base_contrib
        gap = jp - j0
        se = float(diff.std(ddof=1) / np.sqrt(len(diff))) if len(diff) > 1 else 0.0
        out.append(PerturbationGap(eps=float(eps), gap=float(gap), predicted=float(eps**2 * quad_form), se=se))
    return out


def coercivity_check(spec: ProblemSpec, n_draws: int = 20, seed: int = 0) -> list[CoercivityDraw]:
    """Lower-bound battery: J(t, 0; u) >= (delta/2) int |u|^2 for random controls.

    Controls are deterministic piecewise-constant paths, so the zero-terminal
    state response is a deterministic ODE and both sides evaluate without
    Monte Carlo error.
    """
    grid = spec.grid
    wq = quadrature_weights(grid.nodes)
    draws: list[CoercivityDraw] = []
    blocks = 8
    raw = rng.normal_paths(seed, rng.STAGE_CONTROLS, n_draws, blocks * spec.m)
    for d in range(n_draws):
        vals = raw[d].reshape(blocks, spec.m)
        idx = np.minimum((np.arange(grid.N + 1) * blocks) // (grid.N + 1), blocks - 1)
        u_nodes = vals[idx]
        Yu = control_response(spec, u_nodes)

        G, Gb = spec.weights.G, spec.weights.Gbar
        cost = float(Yu[0] @ (G + Gb) @ Yu[0])
        norm2 = 0.0
        for k in range(grid.N + 1):
            Qk, Qbk, _, _, R2k, R2bk = _node_weights(spec, k)
            cost += wq[k] * float(Yu[k] @ (Qk + Qbk) @ Yu[k] + u_nodes[k] @ (R2k + R2bk) @ u_nodes[k])
            norm2 += wq[k] * float(u_nodes[k] @ u_nodes[k])
        draws.append(CoercivityDraw(cost=cost, bound=0.5 * spec.weights.delta * norm2))
    return draws
