"""Shared scenario builders for the test suite."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from mflq import load_spec
from mflq.matode import MatrixTrajectory
from mflq.riccati import RiccatiSolution, _kernel_caches

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


def scalar_spec(
    A=0.0, Abar=0.0, B=0.0, Bbar=0.0, C=0.0, Cbar=0.0,
    G=0.0, Gbar=0.0, Q=0.0, Qbar=0.0, R1=0.0, R1bar=0.0, R2=1.0, R2bar=0.0,
    delta=0.5, steps=200, T=1.0, terminal=None,
):
    doc = {
        "dimensions": {"n": 1, "m": 1},
        "grid": {"t0": 0.0, "T": T, "steps": steps},
        "coefficients": {"A": A, "A_bar": Abar, "B": B, "B_bar": Bbar, "C": C, "C_bar": Cbar},
        "weights": {"G": G, "G_bar": Gbar, "Q": Q, "Q_bar": Qbar, "R1": R1, "R1_bar": R1bar,
                    "R2": R2, "R2_bar": R2bar, "delta": delta},
        "terminal": terminal or {"kind": "deterministic", "a": [0.0]},
    }
    return load_spec(doc)


def tanh_spec(steps=200, terminal=None):
    """Closed form: Sigma(t) = tanh(T - t)."""
    return scalar_spec(B=1.0, Q=1.0, R2=1.0, steps=steps, terminal=terminal)


def smoke2d_doc(steps=200):
    return {
        "dimensions": {"n": 2, "m": 2},
        "grid": {"t0": 0.0, "T": 1.0, "steps": steps},
        "coefficients": {
            "A": [[-0.3, 0.1], [0.0, -0.2]], "A_bar": [[0.1, 0.0], [0.05, 0.1]],
            "B": [[1.0, 0.0], [0.2, 0.8]], "B_bar": [[0.1, 0.0], [0.0, 0.1]],
            "C": [[0.2, 0.0], [0.05, 0.1]], "C_bar": [[0.05, 0.0], [0.0, 0.05]],
        },
        "weights": {
            "G": [[0.4, 0.0], [0.0, 0.2]], "G_bar": [[0.1, 0.0], [0.0, 0.1]],
            "Q": [[0.5, 0.0], [0.0, 0.3]], "Q_bar": [[0.1, 0.0], [0.0, 0.1]],
            "R1": [[0.2, 0.0], [0.0, 0.2]], "R1_bar": [[0.1, 0.0], [0.0, 0.1]],
            "R2": [[1.0, 0.0], [0.0, 1.0]], "R2_bar": [[0.5, 0.0], [0.0, 0.5]],
            "delta": 0.5,
        },
        "terminal": {"kind": "linear-gaussian", "a": [0.5, -0.3], "lambda": [0.4, 0.6]},
    }


def smoke2d_spec(steps=200):
    return load_spec(smoke2d_doc(steps=steps))


def constant_riccati(spec, sigma0: float | np.ndarray, gamma0: float | np.ndarray) -> RiccatiSolution:
    """Synthetic solution with constant Sigma/Gamma, for formula unit tests."""
    n = spec.n
    S = np.atleast_2d(np.asarray(sigma0, dtype=float)) * np.eye(n) if np.isscalar(sigma0) else np.asarray(sigma0, float)
    G = np.atleast_2d(np.asarray(gamma0, dtype=float)) * np.eye(n) if np.isscalar(gamma0) else np.asarray(gamma0, float)
    reps = spec.grid.N + 1
    sig = MatrixTrajectory(grid=spec.grid, samples=np.repeat(S[None], reps, axis=0))
    gam = MatrixTrajectory(grid=spec.grid, samples=np.repeat(G[None], reps, axis=0))
    k1, k1bar, c1, c1b = _kernel_caches(spec, sig)
    return RiccatiSolution(sigma=sig, gamma=gam, k1=k1, k1bar=k1bar, cond_k1=c1, cond_k1bar=c1b)


@pytest.fixture(scope="session")
def smoke_pipeline():
    """One shared synthesized run on the 2-d scenario (N=100, M=20000)."""
    from mflq.verify import synthesize

    spec = smoke2d_spec(steps=100)
    ric, pair, ens = synthesize(spec, paths=20_000, seed=11)
    return spec, ric, pair, ens
