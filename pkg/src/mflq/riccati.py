"""The two coupled quadratic terminal-value equations and their limit oracle.

``solve_sigma`` integrates the fluctuation equation

    dSigma/ds = A Sigma + Sigma A^T + Sigma Q Sigma
                - B R2^-1 B^T - C (I + Sigma R1)^-1 Sigma C^T,   Sigma(T) = 0,

``solve_gamma`` the mean equation driven by the barred-sum coefficients with a
kernel that still involves Sigma (the coupling is one-directional, so Sigma
never sees Gamma).  An independent convergence oracle integrates the penalized
forward-problem pair (P, Pi) with terminal lambda * I; the inverses of P
approach Sigma from above as lambda grows, which gives a derivative-free check
on the primary solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import ProblemSpec
from .matode import IntegrationDivergedError, MatrixTrajectory, integrate_backward, symmetrize

__all__ = [
    "KernelSingularError",
    "RiccatiSolution",
    "PenalizedPair",
    "solve_sigma",
    "solve_gamma",
    "solve_riccati",
    "solve_penalized",
    "sigma_from_penalized",
]

COND_LIMIT = 1e12
PSD_FLOOR = -1e-10


class KernelSingularError(RuntimeError):
    """I + Sigma R1 (or the barred variant) is numerically singular."""

    def __init__(self, time: float, cond: float):
        self.time = time
        self.cond = cond
        super().__init__(f"kernel matrix singular at t={time:.6g} (cond={cond:.3e})")


@dataclass
class RiccatiSolution:
    """Node-sampled Sigma and Gamma plus cached per-node kernel inverses.

    k1[k]    = (I + Sigma_k R1_k)^-1
    k1bar[k] = (I + Sigma_k (R1_k + R1bar_k))^-1
    """

    sigma: MatrixTrajectory
    gamma: MatrixTrajectory
    k1: np.ndarray
    k1bar: np.ndarray
    cond_k1: np.ndarray
    cond_k1bar: np.ndarray


@dataclass
class PenalizedPair:
    """Solution pair of the penalized forward-problem equations."""

    lam: float
    eps: float
    P: MatrixTrajectory
    Pi: MatrixTrajectory


def _sigma_rhs(spec: ProblemSpec, s: float, S: np.ndarray) -> np.ndarray:
    A = spec.A(s)
    Q = spec.weights.Q(s)
    B = spec.B(s)
    C = spec.C(s)
    R1 = spec.weights.R1(s)
    R2 = spec.weights.R2(s)
    n = spec.n
    try:
        ker = C @ np.linalg.solve(np.eye(n) + S @ R1, S @ C.T)
        ctrl = B @ np.linalg.solve(R2, B.T)
    except np.linalg.LinAlgError as exc:
        raise KernelSingularError(s, math.inf) from exc
    return A @ S + S @ A.T + S @ Q @ S - ctrl - ker


def _gamma_rhs(spec: ProblemSpec, s: float, G: np.ndarray, S: np.ndarray) -> np.ndarray:
    A2 = spec.A(s) + spec.Abar(s)
    Q2 = spec.weights.Q(s) + spec.weights.Qbar(s)
    B2 = spec.B(s) + spec.Bbar(s)
    C2 = spec.C(s) + spec.Cbar(s)
    R12 = spec.weights.R1(s) + spec.weights.R1bar(s)
    R22 = spec.weights.R2(s) + spec.weights.R2bar(s)
    n = spec.n
    try:
        ker = C2 @ np.linalg.solve(np.eye(n) + S @ R12, S @ C2.T)
        ctrl = B2 @ np.linalg.solve(R22, B2.T)
    except np.linalg.LinAlgError as exc:
        raise KernelSingularError(s, math.inf) from exc
    return A2 @ G + G @ A2.T + G @ Q2 @ G - ctrl - ker


def _check_psd(traj: MatrixTrajectory, label: str) -> None:
    sym = symmetrize(traj.samples)
    mn = float(np.linalg.eigvalsh(sym)[:, 0].min())
    if mn < PSD_FLOOR:
        raise IntegrationDivergedError(traj.grid.t0, f"{label} lost positive semidefiniteness (min eig {mn:.3e})")


def solve_sigma(spec: ProblemSpec, substeps: int = 4, keep_dense: bool = True) -> MatrixTrajectory:
    """Backward RK4 solve of the fluctuation equation from Sigma(T) = 0."""
    n = spec.n
    traj = integrate_backward(
        lambda s, S: _sigma_rhs(spec, s, S),
        np.zeros((n, n)),
        spec.grid,
        substeps=substeps,
        project=symmetrize,
        keep_dense=keep_dense,
    )
    _check_psd(traj, "Sigma")
    return traj


def solve_joint(
    spec: ProblemSpec,
    extra_terminal: np.ndarray | None = None,
    extra_rhs: Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None,
    substeps: int = 4,
    keep_dense: bool = True,
) -> tuple[MatrixTrajectory, MatrixTrajectory, MatrixTrajectory | None]:
    """Joint backward solve of (Sigma, Gamma) plus optional extra columns.

    The extra block sees the concurrent Sigma and Gamma stage values, which is
    what keeps linear equations driven by them at full RK4 accuracy.  Returns
    node trajectories (and dense samples) for each block.
    """
    n = spec.n
    k_extra = 0 if extra_terminal is None else extra_terminal.shape[1]
    state_T = np.zeros((n, 2 * n + k_extra))
    if extra_terminal is not None:
        state_T[:, 2 * n:] = extra_terminal

    def field(s: float, Y: np.ndarray) -> np.ndarray:
        S = Y[:, :n]
        G = Y[:, n:2 * n]
        out = np.empty_like(Y)
        out[:, :n] = _sigma_rhs(spec, s, S)
        out[:, n:2 * n] = _gamma_rhs(spec, s, G, S)
        if k_extra:
            out[:, 2 * n:] = extra_rhs(s, S, G, Y[:, 2 * n:])
        return out

    def project(Y: np.ndarray) -> np.ndarray:
        Y[:, :n] = symmetrize(Y[:, :n])
        Y[:, n:2 * n] = symmetrize(Y[:, n:2 * n])
        return Y

    traj = integrate_backward(field, state_T, spec.grid, substeps=substeps,
                              project=project, keep_dense=keep_dense)

    def split(lo: int, hi: int) -> MatrixTrajectory:
        return MatrixTrajectory(
            grid=spec.grid,
            samples=traj.samples[:, :, lo:hi].copy(),
            dense_times=traj.dense_times,
            dense_samples=None if traj.dense_samples is None else traj.dense_samples[:, :, lo:hi].copy(),
        )

    sigma = split(0, n)
    gamma = split(n, 2 * n)
    extra = split(2 * n, 2 * n + k_extra) if k_extra else None
    return sigma, gamma, extra


def solve_gamma(spec: ProblemSpec, sigma: MatrixTrajectory, substeps: int = 4) -> MatrixTrajectory:
    """Backward RK4 solve of the mean equation from Gamma(T) = 0.

    Integrates jointly with the fluctuation equation so the kernel sees exact
    stage values of Sigma; the supplied ``sigma`` must come from the same grid
    and is used as a consistency guard.
    """
    if sigma.grid is not spec.grid and not np.array_equal(sigma.grid.nodes, spec.grid.nodes):
        raise ValueError("sigma was solved on a different grid")
    sig2, gamma, _ = solve_joint(spec, substeps=substeps)
    if not np.allclose(sig2.samples, sigma.samples, rtol=1e-10, atol=1e-12):
        raise ValueError("supplied sigma is inconsistent with this spec/substep count")
    _check_psd(gamma, "Gamma")
    return gamma


def _kernel_caches(spec: ProblemSpec, sigma: MatrixTrajectory) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    N, n = spec.grid.N, spec.n
    k1 = np.empty((N + 1, n, n))
    k1bar = np.empty((N + 1, n, n))
    c1 = np.empty(N + 1)
    c1b = np.empty(N + 1)
    eye = np.eye(n)
    for k in range(N + 1):
        t = spec.grid.nodes[k]
        R1 = spec.weights.R1.at_node(k)
        R1b = spec.weights.R1bar.at_node(k)
        for F, out, conds in ((eye + sigma[k] @ R1, k1, c1), (eye + sigma[k] @ (R1 + R1b), k1bar, c1b)):
            cond = float(np.linalg.cond(F))
            conds[k] = cond
            if not np.isfinite(cond) or cond > COND_LIMIT:
                raise KernelSingularError(t, cond)
            out[k] = np.linalg.inv(F)
    return k1, k1bar, c1, c1b


def solve_riccati(spec: ProblemSpec, substeps: int = 4) -> RiccatiSolution:
    """Solve both equations jointly and cache the per-node kernel inverses."""
    sigma, gamma, _ = solve_joint(spec, substeps=substeps)
    _check_psd(sigma, "Sigma")
    _check_psd(gamma, "Gamma")
    k1, k1bar, c1, c1b = _kernel_caches(spec, sigma)
    return RiccatiSolution(sigma=sigma, gamma=gamma, k1=k1, k1bar=k1bar, cond_k1=c1, cond_k1bar=c1b)


# ---------------------------------------------------------------------------
# penalized family


def _penalized_rhs(spec: ProblemSpec, s: float, state: np.ndarray, eps: float) -> np.ndarray:
    n = spec.n
    P = state[:, :n]
    Pi = state[:, n:]
    A = spec.A(s)
    A2 = A + spec.Abar(s)
    Q = spec.weights.Q(s)
    Q2 = Q + spec.weights.Qbar(s)
    B = spec.B(s)
    B2 = B + spec.Bbar(s)
    C = spec.C(s)
    C2 = C + spec.Cbar(s)
    R1 = spec.weights.R1(s)
    R12 = R1 + spec.weights.R1bar(s)
    R2 = spec.weights.R2(s)
    R22 = R2 + spec.weights.R2bar(s)
    m = spec.m
    eyen = np.eye(n)

    def quadratic(Pmat, Bv, Cv, Rv, block):
        # (B, C) [[R2, 0], [0, eps I + R1 + P]]^-1 (B, C)^T, assembled literally
        BC = np.concatenate([Bv, Cv], axis=1)
        blk = np.zeros((m + n, m + n))
        blk[:m, :m] = Rv
        blk[m:, m:] = block
        try:
            sol = np.linalg.solve(blk, BC.T)
        except np.linalg.LinAlgError as exc:
            raise KernelSingularError(s, math.inf) from exc
        return Pmat @ BC @ sol @ Pmat

    dP = -(P @ A + A.T @ P + Q) + quadratic(P, B, C, R2, eps * eyen + R1 + P)
    dPi = -(Pi @ A2 + A2.T @ Pi + Q2) + quadratic(Pi, B2, C2, R22, eps * eyen + R12 + P)
    out = np.empty_like(state)
    out[:, :n] = dP
    out[:, n:] = dPi
    return out


def _penalized_substeps(spec: ProblemSpec, lam: float, base: int):
    """Per-cell substep count resolving the stiff terminal layer.

    Explicit RK4 needs the step to stay inside the stability region of the
    locally linearized decay, whose rate scales with the spectral norm of the
    current solution; the count therefore tracks the state at cell entry and
    relaxes back to the baseline once the layer has collapsed.
    """
    h = spec.grid.h
    floor = max(base, min(64, int(math.ceil(lam ** 0.25))))

    def pick(cell: int, state: np.ndarray) -> int:
        n = spec.n
        rho = max(np.linalg.norm(state[:, :n], 2), np.linalg.norm(state[:, n:], 2), 1.0)
        need = int(math.ceil(2.0 * h * rho / 1.4))
        nsub = max(floor, need)
        if nsub > 5_000_000 // max(spec.grid.N, 1):
            raise IntegrationDivergedError(spec.grid.nodes[cell + 1], "penalized solve needs implausibly many substeps")
        return nsub

    return pick


def solve_penalized(spec: ProblemSpec, lam: float, eps: float, substeps: int = 4) -> PenalizedPair:
    """Integrate the penalized pair backward from lambda * I.

    P feeds the second equation through its block inverse.  Both solutions are
    checked to stay symmetric positive definite at every node.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    n = spec.n
    terminal = np.concatenate([lam * np.eye(n), lam * np.eye(n)], axis=1)

    def project(Y):
        Y[:, :n] = symmetrize(Y[:, :n])
        Y[:, n:] = symmetrize(Y[:, n:])
        return Y

    traj = integrate_backward(
        lambda s, Y: _penalized_rhs(spec, s, Y, eps),
        terminal,
        spec.grid,
        substeps=_penalized_substeps(spec, lam, substeps),
        project=project,
    )
    P = MatrixTrajectory(grid=spec.grid, samples=traj.samples[:, :, :n].copy())
    Pi = MatrixTrajectory(grid=spec.grid, samples=traj.samples[:, :, n:].copy())
    for label, part in (("P", P), ("Pi", Pi)):
        mn = float(np.linalg.eigvalsh(symmetrize(part.samples))[:, 0].min())
        if mn <= 0.0:
            raise IntegrationDivergedError(spec.grid.t0, f"penalized {label} lost positive definiteness (min eig {mn:.3e})")
    return PenalizedPair(lam=lam, eps=eps, P=P, Pi=Pi)


def sigma_from_penalized(
    spec: ProblemSpec,
    lambdas: list[float],
    substeps: int = 4,
    oracle_refine: int = 10,
) -> list[tuple[float, float]]:
    """Convergence table (lambda, ||P_lambda(t0)^-1 - Sigma(t0)||_F).

    Sigma(t0) comes from an independent solve at ``oracle_refine`` times the
    substep resolution.  Distances should be nonincreasing in lambda.
    """
    if sorted(lambdas) != list(lambdas):
        raise ValueError("lambdas must be ascending")
    sigma_ref = solve_sigma(spec, substeps=substeps * oracle_refine, keep_dense=False)
    target = sigma_ref[0]
    rows: list[tuple[float, float]] = []
    for lam in lambdas:
        pair = solve_penalized(spec, lam, 0.0, substeps=substeps)
        P0 = pair.P[0]
        cond = float(np.linalg.cond(P0))
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise KernelSingularError(spec.grid.t0, cond)
        dist = float(np.linalg.norm(np.linalg.inv(P0) - target, ord="fro"))
        rows.append((float(lam), dist))
    return rows
