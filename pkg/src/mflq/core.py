"""Problem data: time grid, coefficients, weights, terminal condition, validation.

A scenario is a set of deterministic matrix-valued coefficient functions for
the controlled backward state equation, symmetric weight matrices for the
quadratic cost, a time grid, and a terminal-condition descriptor.  Everything
downstream (Riccati solves, path simulation, cost evaluation) reads from the
immutable :class:`ProblemSpec` built here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

__all__ = [
    "SpecError",
    "TimeGrid",
    "CoefficientFn",
    "WeightFn",
    "TerminalCondition",
    "ProblemSpec",
    "ClauseCheck",
    "ValidationReport",
    "load_spec",
    "validate_assumptions",
    "refine_spec",
]

PSD_TOL = 1e-12
MAX_TERMINAL_DEGREE = 6


class SpecError(ValueError):
    """Raised on malformed scenario input; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class TimeGrid:
    """Discretization of the horizon [t0, T] into N steps.

    ``nodes`` holds the N+1 grid times; spacing is uniform unless a custom
    strictly increasing node array is supplied.
    """

    t0: float
    T: float
    N: int
    nodes: np.ndarray = field(repr=False)

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if self.N < 1:
            raise SpecError("grid.steps", "need at least one step")
        if nodes.shape != (self.N + 1,):
            raise SpecError("grid.nodes", f"expected {self.N + 1} nodes, got {nodes.shape}")
        if not (np.diff(nodes) > 0).all():
            raise SpecError("grid.nodes", "nodes must be strictly increasing")
        if nodes[0] != self.t0 or nodes[-1] != self.T:
            raise SpecError("grid.nodes", "endpoints must match t0 and T")
        if self.t0 < 0:
            raise SpecError("grid.t0", "start time must be >= 0")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, t0: float, T: float, N: int) -> "TimeGrid":
        if not T > t0:
            raise SpecError("grid.T", "horizon must exceed start time")
        return cls(t0=float(t0), T=float(T), N=int(N), nodes=np.linspace(t0, T, int(N) + 1))

    @property
    def h(self) -> float:
        """Nominal step (T - t0) / N; equals every cell width on uniform grids."""
        return (self.T - self.t0) / self.N

    def cell_width(self, k: int) -> float:
        return float(self.nodes[k + 1] - self.nodes[k])


@dataclass(frozen=True)
class CoefficientFn:
    """Matrix-valued function of time: constant or a piecewise table on grid nodes.

    Piecewise tables use left-continuous lookup: f(t_k) = values[k] and any s
    inside the open cell (t_k, t_{k+1}) evaluates to values[k+1].
    """

    kind: str  # "constant" | "piecewise"
    values: np.ndarray = field(repr=False)  # (r, c) or (N+1, r, c)
    grid: TimeGrid | None = None

    @classmethod
    def constant(cls, M: np.ndarray | float, name: str = "coefficient") -> "CoefficientFn":
        arr = np.atleast_2d(np.asarray(M, dtype=float))
        if arr.ndim != 2:
            raise SpecError(name, f"constant value must be a matrix, got ndim={arr.ndim}")
        return cls(kind="constant", values=arr)

    @classmethod
    def piecewise(cls, table: np.ndarray, grid: TimeGrid, name: str = "coefficient") -> "CoefficientFn":
        arr = np.asarray(table, dtype=float)
        if arr.ndim == 1:  # table of scalars
            arr = arr[:, None, None]
        if arr.ndim != 3 or arr.shape[0] != grid.N + 1:
            raise SpecError(name, f"piecewise table needs {grid.N + 1} matrices, got shape {arr.shape}")
        return cls(kind="piecewise", values=arr, grid=grid)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.values.shape[-2:])

    def __call__(self, s: float) -> np.ndarray:
        if self.kind == "constant":
            return self.values
        idx = int(np.searchsorted(self.grid.nodes, s, side="left"))
        return self.values[min(idx, self.grid.N)]

    def at_node(self, k: int) -> np.ndarray:
        return self.values if self.kind == "constant" else self.values[k]

    def table(self, grid: TimeGrid) -> np.ndarray:
        """Materialize node samples as an (N+1, r, c) array."""
        if self.kind == "constant":
            return np.broadcast_to(self.values, (grid.N + 1, *self.values.shape)).copy()
        return self.values.copy()


def _gaussian_raw_moment(p: int, var: float) -> float:
    """E[W^p] for W ~ N(0, var)."""
    if p % 2 == 1:
        return 0.0
    half = p // 2
    return var**half * math.prod(range(1, p, 2)) if p else 1.0


@dataclass(frozen=True)
class TerminalCondition:
    """Descriptor for the prescribed terminal state.

    kinds:
      deterministic     --  xi = a
      linear-gaussian   --  xi = a + lam * W(T)
      functional        --  xi = g(W(T)), g componentwise polynomial (degree <= 6)
    """

    kind: str
    a: np.ndarray | None = None
    lam: np.ndarray | None = None
    poly: np.ndarray | None = None  # (n, d+1), ascending powers

    def __post_init__(self):
        if self.kind not in ("deterministic", "linear-gaussian", "functional"):
            raise SpecError("terminal.kind", f"unknown kind {self.kind!r}")
        if self.kind in ("deterministic", "linear-gaussian"):
            if self.a is None:
                raise SpecError("terminal.a", "required for this terminal kind")
            object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(-1))
        if self.kind == "linear-gaussian":
            if self.lam is None:
                raise SpecError("terminal.lambda", "required for linear-gaussian kind")
            object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float).reshape(-1))
            if self.lam.shape != self.a.shape:
                raise SpecError("terminal.lambda", "shape must match terminal.a")
        if self.kind == "functional":
            if self.poly is None:
                raise SpecError("terminal.poly", "required for functional kind")
            arr = np.atleast_2d(np.asarray(self.poly, dtype=float))
            if arr.shape[1] > MAX_TERMINAL_DEGREE + 1:
                raise SpecError("terminal.poly", f"degree capped at {MAX_TERMINAL_DEGREE}")
            object.__setattr__(self, "poly", arr)

    @property
    def n(self) -> int:
        return len(self.a) if self.kind != "functional" else self.poly.shape[0]

    @property
    def degree(self) -> int:
        if self.kind == "deterministic":
            return 0
        if self.kind == "linear-gaussian":
            return 1
        return self.poly.shape[1] - 1

    def as_poly(self) -> np.ndarray:
        """Coefficient table (n, d+1) of xi as a polynomial in W(T)."""
        if self.kind == "deterministic":
            return self.a[:, None].copy()
        if self.kind == "linear-gaussian":
            return np.stack([self.a, self.lam], axis=1)
        return self.poly.copy()

    def evaluate(self, w: np.ndarray) -> np.ndarray:
        """xi per path: w shape (M,) -> (M, n)."""
        w = np.asarray(w, dtype=float)
        if self.kind == "deterministic":
            return np.broadcast_to(self.a, (*w.shape, self.n)).copy()
        if self.kind == "linear-gaussian":
            return self.a[None, :] + w[:, None] * self.lam[None, :]
        return np.polynomial.polynomial.polyval(w, self.poly.T).T

    def derivative(self, w: np.ndarray) -> np.ndarray:
        """d(xi)/dW(T) per path, shape (M, n)."""
        w = np.asarray(w, dtype=float)
        if self.kind == "deterministic":
            return np.zeros((*w.shape, self.n))
        if self.kind == "linear-gaussian":
            return np.broadcast_to(self.lam, (*w.shape, self.n)).copy()
        dp = np.polynomial.polynomial.polyder(self.poly.T)
        return np.polynomial.polynomial.polyval(w, dp).T

    def mean(self, var_T: float) -> np.ndarray:
        """E[xi] when W(T) ~ N(0, var_T)."""
        if self.kind in ("deterministic", "linear-gaussian"):
            return self.a.copy()
        moments = np.array([_gaussian_raw_moment(p, var_T) for p in range(self.poly.shape[1])])
        return self.poly @ moments


def _sym_ingest(M: np.ndarray, name: str, allow_symmetrize: bool) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(M, dtype=float))
    if arr.shape[0] != arr.shape[1]:
        raise SpecError(name, f"must be square, got {arr.shape}")
    skew = np.abs(arr - arr.T).max() if arr.size else 0.0
    scale = max(np.abs(arr).max(), 1.0)
    if skew > 1e-9 * scale and not allow_symmetrize:
        raise SpecError(name, "not symmetric; set weights.symmetrize = true to average with transpose")
    return (arr + arr.T) / 2.0


@dataclass(frozen=True)
class WeightFn:
    """Cost weights: terminal-side matrices G, Gbar and running weights.

    Construction averages every matrix with its transpose so stored weights
    are exactly symmetric.
    """

    G: np.ndarray
    Gbar: np.ndarray
    Q: CoefficientFn
    Qbar: CoefficientFn
    R1: CoefficientFn
    R1bar: CoefficientFn
    R2: CoefficientFn
    R2bar: CoefficientFn
    delta: float

    def __post_init__(self):
        if self.delta <= 0:
            raise SpecError("weights.delta", "coercivity constant must be positive")


_COEFF_SHAPES = {
    "A": ("n", "n"), "A_bar": ("n", "n"),
    "B": ("n", "m"), "B_bar": ("n", "m"),
    "C": ("n", "n"), "C_bar": ("n", "n"),
}


@dataclass(frozen=True)
class ProblemSpec:
    """Validated, immutable scenario: the single source of truth for a run."""

    n: int
    m: int
    grid: TimeGrid
    A: CoefficientFn
    Abar: CoefficientFn
    B: CoefficientFn
    Bbar: CoefficientFn
    C: CoefficientFn
    Cbar: CoefficientFn
    weights: WeightFn
    terminal: TerminalCondition
    brownian_dim: int = 1

    def __post_init__(self):
        if self.brownian_dim != 1:
            raise SpecError("dimensions.brownian", "only one-dimensional driving noise is supported")
        n, m = self.n, self.m
        wanted = {
            "coefficients.A": (self.A, (n, n)), "coefficients.A_bar": (self.Abar, (n, n)),
            "coefficients.B": (self.B, (n, m)), "coefficients.B_bar": (self.Bbar, (n, m)),
            "coefficients.C": (self.C, (n, n)), "coefficients.C_bar": (self.Cbar, (n, n)),
        }
        for name, (fn, shape) in wanted.items():
            if fn.shape != shape:
                raise SpecError(name, f"expected shape {shape}, got {fn.shape}")
            if not np.isfinite(fn.values).all():
                raise SpecError(name, "contains non-finite entries")
        for name, fn, shape in [
            ("weights.Q", self.weights.Q, (n, n)), ("weights.Q_bar", self.weights.Qbar, (n, n)),
            ("weights.R1", self.weights.R1, (n, n)), ("weights.R1_bar", self.weights.R1bar, (n, n)),
            ("weights.R2", self.weights.R2, (m, m)), ("weights.R2_bar", self.weights.R2bar, (m, m)),
        ]:
            if fn.shape != shape:
                raise SpecError(name, f"expected shape {shape}, got {fn.shape}")
        for name, mat, shape in [("weights.G", self.weights.G, (n, n)), ("weights.G_bar", self.weights.Gbar, (n, n))]:
            if mat.shape != shape:
                raise SpecError(name, f"expected shape {shape}, got {mat.shape}")
        if self.terminal.n != n:
            raise SpecError("terminal", f"terminal dimension {self.terminal.n} != n={n}")

    @property
    def coeffs(self) -> dict[str, CoefficientFn]:
        return {"A": self.A, "A_bar": self.Abar, "B": self.B, "B_bar": self.Bbar,
                "C": self.C, "C_bar": self.Cbar}


def _refine_coeff(fn: CoefficientFn, fine: TimeGrid, factor: int) -> CoefficientFn:
    if fn.kind == "constant":
        return fn
    idx = (np.arange(fine.N + 1) + factor - 1) // factor
    return CoefficientFn.piecewise(fn.values[idx], fine)


def refine_spec(spec: ProblemSpec, factor: int) -> ProblemSpec:
    """Same scenario on a grid with ``factor`` times as many steps.

    Piecewise tables are resampled so evaluation at any time is unchanged;
    used by discretization-budget studies.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    g = spec.grid
    fine = TimeGrid.uniform(g.t0, g.T, g.N * factor)
    w = spec.weights
    weights = WeightFn(
        G=w.G, Gbar=w.Gbar,
        Q=_refine_coeff(w.Q, fine, factor), Qbar=_refine_coeff(w.Qbar, fine, factor),
        R1=_refine_coeff(w.R1, fine, factor), R1bar=_refine_coeff(w.R1bar, fine, factor),
        R2=_refine_coeff(w.R2, fine, factor), R2bar=_refine_coeff(w.R2bar, fine, factor),
        delta=w.delta,
    )
    return ProblemSpec(
        n=spec.n, m=spec.m, grid=fine,
        A=_refine_coeff(spec.A, fine, factor), Abar=_refine_coeff(spec.Abar, fine, factor),
        B=_refine_coeff(spec.B, fine, factor), Bbar=_refine_coeff(spec.Bbar, fine, factor),
        C=_refine_coeff(spec.C, fine, factor), Cbar=_refine_coeff(spec.Cbar, fine, factor),
        weights=weights, terminal=spec.terminal, brownian_dim=spec.brownian_dim,
    )


@dataclass(frozen=True)
class ClauseCheck:
    """One assumption clause with the worst value found over grid nodes."""

    clause: str
    worst: float
    threshold: float
    passed: bool


@dataclass(frozen=True)
class ValidationReport:
    entries: tuple[ClauseCheck, ...]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def failures(self) -> list[ClauseCheck]:
        return [e for e in self.entries if not e.passed]

    def __str__(self) -> str:
        lines = []
        for e in self.entries:
            status = "pass" if e.passed else "FAIL"
            lines.append(f"  [{status}] {e.clause:24s} worst={e.worst:+.3e} (>= {e.threshold:+.3e})")
        return "\n".join(lines)


def _min_eig_over_nodes(fn: CoefficientFn, grid: TimeGrid, other: CoefficientFn | None = None) -> float:
    table = fn.table(grid)
    if other is not None:
        table = table + other.table(grid)
    table = (table + table.swapaxes(-1, -2)) / 2.0
    return float(np.linalg.eigvalsh(table)[:, 0].min())


def validate_assumptions(spec: ProblemSpec) -> ValidationReport:
    """Check every coefficient and weight clause; failures land in the report.

    State-equation coefficients must be finite with declared shapes.  Weight
    clauses require positive semidefiniteness (with tolerance -1e-12) and the
    control weights to dominate delta * I.
    """
    entries: list[ClauseCheck] = []
    for name, fn in spec.coeffs.items():
        finite = bool(np.isfinite(fn.values).all())
        worst = float(np.abs(fn.values).max()) if finite else float("inf")
        entries.append(ClauseCheck(f"{name} finite", -worst, -float("inf"), finite))

    w = spec.weights
    g_min = float(np.linalg.eigvalsh(w.G)[0])
    gg_min = float(np.linalg.eigvalsh(w.G + w.Gbar)[0])
    entries.append(ClauseCheck("G >= 0", g_min, -PSD_TOL, g_min >= -PSD_TOL))
    entries.append(ClauseCheck("G+Gbar >= 0", gg_min, -PSD_TOL, gg_min >= -PSD_TOL))

    psd_clauses = [
        ("Q(s) >= 0", w.Q, None),
        ("Q+Qbar >= 0", w.Q, w.Qbar),
        ("R1(s) >= 0", w.R1, None),
        ("R1+R1bar >= 0", w.R1, w.R1bar),
    ]
    for clause, fn, other in psd_clauses:
        mn = _min_eig_over_nodes(fn, spec.grid, other)
        entries.append(ClauseCheck(clause, mn, -PSD_TOL, mn >= -PSD_TOL))

    for clause, fn, other in [("R2 >= delta I", w.R2, None), ("R2+R2bar >= delta I", w.R2, w.R2bar)]:
        mn = _min_eig_over_nodes(fn, spec.grid, other)
        entries.append(ClauseCheck(clause, mn, w.delta - PSD_TOL, mn >= w.delta - PSD_TOL))

    return ValidationReport(entries=tuple(entries))


# ---------------------------------------------------------------------------
# scenario loading


def _require(table: dict, key: str, section: str):
    if key not in table:
        raise SpecError(f"{section}.{key}", "missing field")
    return table[key]


def _as_matrix(value, name: str, rows: int, cols: int) -> np.ndarray:
    if isinstance(value, (int, float)):
        if (rows, cols) != (1, 1):
            raise SpecError(name, f"scalar given but expected a {rows}x{cols} matrix")
        return np.array([[float(value)]])
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :] if rows == 1 else arr[:, None]
    if arr.shape != (rows, cols):
        raise SpecError(name, f"expected shape ({rows}, {cols}), got {arr.shape}")
    return arr


def _coeff_from_config(value, name: str, rows: int, cols: int, grid: TimeGrid) -> CoefficientFn:
    if isinstance(value, dict):
        if value.get("kind") != "piecewise":
            raise SpecError(name, "table form requires kind = 'piecewise'")
        raw = _require(value, "values", name)
        mats = [_as_matrix(v, f"{name}.values[{i}]", rows, cols) for i, v in enumerate(raw)]
        if len(mats) != grid.N + 1:
            raise SpecError(name, f"piecewise table needs {grid.N + 1} entries, got {len(mats)}")
        return CoefficientFn.piecewise(np.stack(mats), grid, name)
    return CoefficientFn.constant(_as_matrix(value, name, rows, cols), name)


def _sym_coeff(fn: CoefficientFn, name: str, allow_symmetrize: bool) -> CoefficientFn:
    if fn.kind == "constant":
        return CoefficientFn(kind="constant", values=_sym_ingest(fn.values, name, allow_symmetrize))
    vals = np.stack([_sym_ingest(v, name, allow_symmetrize) for v in fn.values])
    return CoefficientFn(kind="piecewise", values=vals, grid=fn.grid)


def load_spec(source: dict | str | Path) -> ProblemSpec:
    """Build a validated ProblemSpec from a TOML path or an equivalent dict.

    The scenario document carries [dimensions], [grid], [coefficients],
    [weights] and [terminal] sections; matrices are written row-major as
    nested arrays.  Field names are documented in the README.
    """
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            doc = tomllib.load(fh)
    else:
        doc = source

    dims = _require(doc, "dimensions", "scenario")
    n = int(_require(dims, "n", "dimensions"))
    m = int(_require(dims, "m", "dimensions"))
    brownian = int(dims.get("brownian", 1))
    if n < 1 or m < 1:
        raise SpecError("dimensions", "n and m must be positive")

    graw = _require(doc, "grid", "scenario")
    grid = TimeGrid.uniform(
        float(_require(graw, "t0", "grid")),
        float(_require(graw, "T", "grid")),
        int(_require(graw, "steps", "grid")),
    )

    craw = doc.get("coefficients", {})
    coeffs = {}
    for key, (r_sym, c_sym) in _COEFF_SHAPES.items():
        rows = n if r_sym == "n" else m
        cols = n if c_sym == "n" else m
        if key in craw:
            coeffs[key] = _coeff_from_config(craw[key], f"coefficients.{key}", rows, cols, grid)
        else:
            coeffs[key] = CoefficientFn.constant(np.zeros((rows, cols)))

    wraw = _require(doc, "weights", "scenario")
    allow_sym = bool(wraw.get("symmetrize", False))
    zero_n = np.zeros((n, n))
    zero_m = np.zeros((m, m))

    def weight_coeff(key: str, size: int, default: np.ndarray, required: bool = False) -> CoefficientFn:
        if key not in wraw:
            if required:
                raise SpecError(f"weights.{key}", "missing field")
            return CoefficientFn.constant(default)
        fn = _coeff_from_config(wraw[key], f"weights.{key}", size, size, grid)
        return _sym_coeff(fn, f"weights.{key}", allow_sym)

    weights = WeightFn(
        G=_sym_ingest(_as_matrix(wraw["G"], "weights.G", n, n), "weights.G", allow_sym) if "G" in wraw else zero_n.copy(),
        Gbar=_sym_ingest(_as_matrix(wraw["G_bar"], "weights.G_bar", n, n), "weights.G_bar", allow_sym) if "G_bar" in wraw else zero_n.copy(),
        Q=weight_coeff("Q", n, zero_n),
        Qbar=weight_coeff("Q_bar", n, zero_n),
        R1=weight_coeff("R1", n, zero_n),
        R1bar=weight_coeff("R1_bar", n, zero_n),
        R2=weight_coeff("R2", m, zero_m, required=True),
        R2bar=weight_coeff("R2_bar", m, zero_m),
        delta=float(_require(wraw, "delta", "weights")),
    )

    traw = _require(doc, "terminal", "scenario")
    kind = _require(traw, "kind", "terminal")
    if kind == "deterministic":
        terminal = TerminalCondition(kind=kind, a=np.asarray(_require(traw, "a", "terminal"), dtype=float))
    elif kind == "linear-gaussian":
        terminal = TerminalCondition(
            kind=kind,
            a=np.asarray(_require(traw, "a", "terminal"), dtype=float),
            lam=np.asarray(_require(traw, "lambda", "terminal"), dtype=float),
        )
    elif kind == "functional":
        terminal = TerminalCondition(kind=kind, poly=np.asarray(_require(traw, "poly", "terminal"), dtype=float))
    else:
        raise SpecError("terminal.kind", f"unknown kind {kind!r}")

    return ProblemSpec(
        n=n, m=m, grid=grid,
        A=coeffs["A"], Abar=coeffs["A_bar"],
        B=coeffs["B"], Bbar=coeffs["B_bar"],
        C=coeffs["C"], Cbar=coeffs["C_bar"],
        weights=weights, terminal=terminal, brownian_dim=brownian,
    )
