"""Counter-based random streams keyed by (seed, stage, path chunk).

Paths are grouped into fixed-size chunks; each chunk owns a Philox generator
keyed by (seed, stage, chunk index).  The samples a given path sees therefore
never depend on how many paths were requested or on any parallel split, and
identical seeds reproduce bit-identical streams.
"""

from __future__ import annotations

import numpy as np

__all__ = ["STAGE_PHI", "STAGE_SIM", "STAGE_CONTROLS", "normal_paths", "brownian_paths"]

STAGE_PHI = 1
STAGE_SIM = 2
STAGE_CONTROLS = 3

_CHUNK = 1024


def _chunk_generator(seed: int, stage: int, chunk: int) -> np.random.Generator:
    key = np.array(
        [np.uint64(seed), (np.uint64(stage) << np.uint64(32)) ^ np.uint64(chunk)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def normal_paths(seed: int, stage: int, n_paths: int, n_cols: int) -> np.ndarray:
    """Standard normal block (n_paths, n_cols); rows are prefix-stable in n_paths."""
    out = np.empty((n_paths, n_cols))
    n_chunks = (n_paths + _CHUNK - 1) // _CHUNK
    for c in range(n_chunks):
        lo = c * _CHUNK
        hi = min(lo + _CHUNK, n_paths)
        block = _chunk_generator(seed, stage, c).standard_normal((_CHUNK, n_cols))
        out[lo:hi] = block[: hi - lo]
    return out


def brownian_paths(seed: int, stage: int, n_paths: int, nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Brownian samples on the grid with W(t0) = 0.

    Returns (W, dW): W has shape (n_paths, N+1), dW shape (n_paths, N) with
    dW[:, k] ~ N(0, nodes[k+1] - nodes[k]).
    """
    widths = np.diff(nodes)
    z = normal_paths(seed, stage, n_paths, len(widths))
    dW = z * np.sqrt(widths)[None, :]
    W = np.concatenate([np.zeros((n_paths, 1)), np.cumsum(dW, axis=1)], axis=1)
    return W, dW
