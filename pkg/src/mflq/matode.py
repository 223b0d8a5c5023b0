"""Fixed-step RK4 integration of matrix-valued ODEs on a scenario grid.

Every deterministic solve in the toolkit (the two quadratic terminal-value
equations, the auxiliary backward pairs, the mean-state equation) marches
through this module.  Coefficients are piecewise-constant on the grid, so a
classical fourth-order scheme with a per-cell substep count needs no step
control; an optional post-step projection kills symmetry drift.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import TimeGrid

__all__ = [
    "IntegrationDivergedError",
    "MatrixTrajectory",
    "symmetrize",
    "integrate_backward",
    "integrate_forward",
]


class IntegrationDivergedError(RuntimeError):
    """Non-finite state encountered; ``time`` localizes the failure."""

    def __init__(self, time: float, detail: str = "non-finite state"):
        self.time = time
        super().__init__(f"integration diverged at t={time:.6g}: {detail}")


def symmetrize(M: np.ndarray) -> np.ndarray:
    """(M + M^T) / 2 over the trailing two axes."""
    return (M + M.swapaxes(-1, -2)) / 2.0


@dataclass
class MatrixTrajectory:
    """Matrix samples at grid nodes, optionally with substep-dense samples.

    ``samples[k]`` is the value at ``grid.nodes[k]``.  When dense samples are
    kept, :meth:`at` interpolates linearly between substep points, which is
    accurate enough for any downstream solver whose own error floor is above
    the substep spacing squared.
    """

    grid: TimeGrid
    samples: np.ndarray  # (N+1, *shape)
    dense_times: np.ndarray | None = None
    dense_samples: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    def __getitem__(self, k: int) -> np.ndarray:
        return self.samples[k]

    def at(self, t: float) -> np.ndarray:
        times, values = self.grid.nodes, self.samples
        if self.dense_times is not None:
            times, values = self.dense_times, self.dense_samples
        if t <= times[0]:
            return values[0]
        if t >= times[-1]:
            return values[-1]
        j = int(np.searchsorted(times, t, side="right")) - 1
        w = (t - times[j]) / (times[j + 1] - times[j])
        return (1.0 - w) * values[j] + w * values[j + 1]


def _rk4_cell(field, t_from: float, y: np.ndarray, width: float, nsub: int, project):
    """March one grid cell with `nsub` uniform RK4 steps; width is signed."""
    h = width / nsub
    t = t_from
    for _ in range(nsub):
        k1 = field(t, y)
        k2 = field(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = field(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = field(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if project is not None:
            y = project(y)
        t += h
        if not np.isfinite(y).all():
            raise IntegrationDivergedError(t)
    return y


def _resolve_substeps(substeps, k: int, y: np.ndarray) -> int:
    if callable(substeps):
        nsub = int(substeps(k, y))
    else:
        nsub = int(substeps)
    if nsub < 1:
        raise ValueError("substep count must be >= 1")
    return nsub


def integrate_backward(
    field: Callable[[float, np.ndarray], np.ndarray],
    terminal: np.ndarray,
    grid: TimeGrid,
    substeps: int | Callable[[int, np.ndarray], int] = 4,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
    keep_dense: bool = False,
) -> MatrixTrajectory:
    """March dy/ds = field(s, y) from T down to t0; samples[N] = terminal exactly.

    ``substeps`` may be a callable (cell index, state at cell entry) -> count,
    used by solvers that need extra resolution in a terminal layer.  Dense
    output requires a fixed substep count.
    """
    terminal = np.asarray(terminal, dtype=float)
    if not np.isfinite(terminal).all():
        raise IntegrationDivergedError(grid.T, "non-finite terminal value")
    N = grid.N
    samples = np.empty((N + 1, *terminal.shape))
    samples[N] = terminal

    dense_times = dense = None
    if keep_dense:
        if callable(substeps):
            raise ValueError("dense output needs a fixed substep count")
        K = int(substeps)
        dense_times = np.empty(N * K + 1)
        dense = np.empty((N * K + 1, *terminal.shape))
        dense_times[-1] = grid.T
        dense[-1] = terminal

    y = terminal
    for k in range(N - 1, -1, -1):
        width = grid.nodes[k] - grid.nodes[k + 1]  # negative
        nsub = _resolve_substeps(substeps, k, y)
        if keep_dense:
            h = width / nsub
            t = grid.nodes[k + 1]
            for j in range(nsub):
                y = _rk4_cell(field, t, y, h, 1, project)
                t += h
                idx = k * nsub + (nsub - 1 - j)
                dense_times[idx] = grid.nodes[k + 1] + (j + 1) * h
                dense[idx] = y
            dense_times[k * nsub] = grid.nodes[k]  # exact node time
        else:
            y = _rk4_cell(field, grid.nodes[k + 1], y, width, nsub, project)
        samples[k] = y
    return MatrixTrajectory(grid=grid, samples=samples, dense_times=dense_times, dense_samples=dense)


def integrate_forward(
    field: Callable[[float, np.ndarray], np.ndarray],
    initial: np.ndarray,
    grid: TimeGrid,
    substeps: int | Callable[[int, np.ndarray], int] = 4,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
    keep_dense: bool = False,
) -> MatrixTrajectory:
    """March dy/ds = field(s, y) from t0 up to T; samples[0] = initial exactly."""
    initial = np.asarray(initial, dtype=float)
    if not np.isfinite(initial).all():
        raise IntegrationDivergedError(grid.t0, "non-finite initial value")
    N = grid.N
    samples = np.empty((N + 1, *initial.shape))
    samples[0] = initial

    dense_times = dense = None
    if keep_dense:
        if callable(substeps):
            raise ValueError("dense output needs a fixed substep count")
        K = int(substeps)
        dense_times = np.empty(N * K + 1)
        dense = np.empty((N * K + 1, *initial.shape))
        dense_times[0] = grid.t0
        dense[0] = initial

    y = initial
    for k in range(N):
        width = grid.nodes[k + 1] - grid.nodes[k]
        nsub = _resolve_substeps(substeps, k, y)
        if keep_dense:
            h = width / nsub
            t = grid.nodes[k]
            for j in range(nsub):
                y = _rk4_cell(field, t, y, h, 1, project)
                t += h
                idx = k * nsub + j + 1
                dense_times[idx] = grid.nodes[k] + (j + 1) * h
                dense[idx] = y
            dense_times[(k + 1) * nsub] = grid.nodes[k + 1]
        else:
            y = _rk4_cell(field, grid.nodes[k], y, width, nsub, project)
        samples[k + 1] = y
    return MatrixTrajectory(grid=grid, samples=samples, dense_times=dense_times, dense_samples=dense)
