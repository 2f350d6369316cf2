"""Uniform (tau, y) grids, sampled surfaces, nested parameter meshes and norms.

Everything downstream (PDE solves, penalties, calibration) lives on the
rectangular domain D = [tau_min, tau_max] x [y_min, y_max].  Integrals are
approximated with the tensor trapezoidal rule, second order like the
time-stepping scheme.  Parameter meshes are coarse uniform meshes with a
bilinear or bicubic-spline nodal basis, prolongated onto the PDE grid by
tensor-product interpolation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from numpy.typing import NDArray
from scipy.interpolate import make_interp_spline
from scipy import sparse

from .errors import InvalidInputError

FloatArray = NDArray[np.float64]

BASIS_KINDS = ("bilinear", "bicubic-spline")


@dataclass(frozen=True)
class Grid:
    """Uniform rectangular grid; node (i, j) sits at (tau_min + i*d_tau, y_min + j*d_y)."""

    tau_min: float
    tau_max: float
    y_min: float
    y_max: float
    n_tau: int
    n_y: int

    def __post_init__(self):
        if not (self.tau_max > self.tau_min >= 0.0):
            raise InvalidInputError(
                f"need tau_max > tau_min >= 0, got [{self.tau_min}, {self.tau_max}]"
            )
        if not self.y_max > self.y_min:
            raise InvalidInputError(
                f"need y_max > y_min, got [{self.y_min}, {self.y_max}]"
            )
        if self.n_tau < 1 or self.n_y < 1:
            raise InvalidInputError(
                f"need at least one interval per axis, got {self.n_tau}x{self.n_y}"
            )

    @property
    def d_tau(self) -> float:
        return (self.tau_max - self.tau_min) / self.n_tau

    @property
    def d_y(self) -> float:
        return (self.y_max - self.y_min) / self.n_y

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_tau + 1, self.n_y + 1)

    @property
    def n_nodes(self) -> int:
        return (self.n_tau + 1) * (self.n_y + 1)

    @property
    def area(self) -> float:
        return (self.tau_max - self.tau_min) * (self.y_max - self.y_min)

    def tau_nodes(self) -> FloatArray:
        return np.linspace(self.tau_min, self.tau_max, self.n_tau + 1)

    def y_nodes(self) -> FloatArray:
        return np.linspace(self.y_min, self.y_max, self.n_y + 1)

    def node_mesh(self) -> tuple[FloatArray, FloatArray]:
        """(TT, YY) arrays of shape ``self.shape`` with node coordinates."""
        return np.meshgrid(self.tau_nodes(), self.y_nodes(), indexing="ij")

    def refined(self, factor: int = 2) -> "Grid":
        """Same domain with ``factor`` times as many intervals per axis."""
        return replace(self, n_tau=self.n_tau * factor, n_y=self.n_y * factor)

    def same_domain(self, other: "Grid") -> bool:
        return (
            self.tau_min == other.tau_min
            and self.tau_max == other.tau_max
            and self.y_min == other.y_min
            and self.y_max == other.y_max
        )


@dataclass(frozen=True)
class Surface:
    """Scalar field sampled at every node of a :class:`Grid`.

    ``values`` has shape ``grid.shape`` (tau along axis 0) and must be finite.
    Instances are immutable; arithmetic returns new surfaces.
    """

    grid: Grid
    values: FloatArray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.grid.shape:
            raise InvalidInputError(
                f"values shape {values.shape} does not match grid shape {self.grid.shape}"
            )
        if not np.isfinite(values).all():
            raise InvalidInputError("surface contains non-finite values")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def with_values(self, values: FloatArray) -> "Surface":
        return Surface(self.grid, values)

    def _check_same_grid(self, other: "Surface"):
        if other.grid != self.grid:
            raise InvalidInputError("surfaces live on different grids")

    def __add__(self, other):
        if isinstance(other, Surface):
            self._check_same_grid(other)
            return Surface(self.grid, self.values + other.values)
        return Surface(self.grid, self.values + float(other))

    def __sub__(self, other):
        if isinstance(other, Surface):
            self._check_same_grid(other)
            return Surface(self.grid, self.values - other.values)
        return Surface(self.grid, self.values - float(other))

    def __mul__(self, scalar):
        return Surface(self.grid, self.values * float(scalar))

    __rmul__ = __mul__

    def min(self) -> float:
        return float(self.values.min())

    def max(self) -> float:
        return float(self.values.max())


def constant_surface(grid: Grid, value: float) -> Surface:
    return Surface(grid, np.full(grid.shape, float(value)))


def surface_from_function(grid: Grid, fn) -> Surface:
    """Sample ``fn(tau, y)`` (vectorized) at every node."""
    tt, yy = grid.node_mesh()
    return Surface(grid, np.asarray(fn(tt, yy), dtype=np.float64))


# ---------------------------------------------------------------------------
# Quadrature and norms
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _trapezoid_factors(grid: Grid) -> tuple[FloatArray, FloatArray]:
    w_tau = np.full(grid.n_tau + 1, grid.d_tau)
    w_tau[0] *= 0.5
    w_tau[-1] *= 0.5
    w_y = np.full(grid.n_y + 1, grid.d_y)
    w_y[0] *= 0.5
    w_y[-1] *= 0.5
    w_tau.setflags(write=False)
    w_y.setflags(write=False)
    return w_tau, w_y


@lru_cache(maxsize=None)
def trapezoid_weights(grid: Grid) -> FloatArray:
    """Nodal quadrature weights; ``sum(W * f)`` approximates the integral of f over D."""
    w_tau, w_y = _trapezoid_factors(grid)
    w = np.outer(w_tau, w_y)
    w.setflags(write=False)
    return w


def integrate(s: Surface) -> float:
    return float(np.sum(trapezoid_weights(s.grid) * s.values))


def l2_inner(a: Surface, b: Surface) -> float:
    """Trapezoidal approximation of the L2(D) inner product."""
    a._check_same_grid(b)
    return float(np.sum(trapezoid_weights(a.grid) * a.values * b.values))


def l2_norm(s: Surface) -> float:
    """Trapezoidal approximation of the L2(D) norm of ``s``."""
    if s.grid.n_tau < 1 or s.grid.n_y < 1:  # pragma: no cover - Grid enforces this
        raise InvalidInputError("grid too small for quadrature")
    return float(np.sqrt(np.sum(trapezoid_weights(s.grid) * s.values**2)))


@lru_cache(maxsize=None)
def _gradient_matrix_1d(n: int, h: float) -> sparse.csr_matrix:
    """First-derivative matrix on n+1 uniform nodes: central inside, one-sided at ends."""
    d = sparse.lil_matrix((n + 1, n + 1))
    d[0, 0], d[0, 1] = -1.0 / h, 1.0 / h
    d[n, n - 1], d[n, n] = -1.0 / h, 1.0 / h
    for_rows = np.arange(1, n)
    d[for_rows, for_rows - 1] = -0.5 / h
    d[for_rows, for_rows + 1] = 0.5 / h
    return d.tocsr()


def _partials(s: Surface) -> tuple[FloatArray, FloatArray]:
    g = s.grid
    d_tau = _gradient_matrix_1d(g.n_tau, g.d_tau)
    d_y = _gradient_matrix_1d(g.n_y, g.d_y)
    s_tau = d_tau @ s.values
    s_y = (d_y @ s.values.T).T
    return s_tau, s_y


def h1_norm_sq(s: Surface) -> float:
    """Trapezoidal approximation of ``int s^2 + s_tau^2 + s_y^2`` over D."""
    w = trapezoid_weights(s.grid)
    s_tau, s_y = _partials(s)
    return float(np.sum(w * (s.values**2 + s_tau**2 + s_y**2)))


def h1_norm(s: Surface) -> float:
    return float(np.sqrt(h1_norm_sq(s)))


def h1_gradient_field(s: Surface) -> FloatArray:
    """L2-representation of the gradient of ``h1_norm_sq`` at ``s``.

    Exact adjoint of the finite differences used by :func:`h1_norm_sq`, so
    ``<field, h>_L2`` equals the directional derivative of the discrete
    functional to machine precision.
    """
    g = s.grid
    w = trapezoid_weights(g)
    d_tau = _gradient_matrix_1d(g.n_tau, g.d_tau)
    d_y = _gradient_matrix_1d(g.n_y, g.d_y)
    s_tau = d_tau @ s.values
    s_y = (d_y @ s.values.T).T
    euclid = 2.0 * (
        w * s.values + d_tau.T @ (w * s_tau) + ((d_y.T @ (w * s_y).T).T)
    )
    return euclid / w


# ---------------------------------------------------------------------------
# Parameter meshes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeshLevel:
    """Coarse uniform parameter mesh over D with a nodal basis expansion.

    ``coefficients`` (one real per coarse node, shape
    ``(n_tau_c+1, n_y_c+1)``) may be ``None`` for a pure descriptor.
    """

    n_tau_c: int
    n_y_c: int
    basis_kind: str = "bilinear"
    coefficients: FloatArray | None = None

    def __post_init__(self):
        if self.n_tau_c < 1 or self.n_y_c < 1:
            raise InvalidInputError("mesh needs at least one interval per axis")
        if self.basis_kind not in BASIS_KINDS:
            raise InvalidInputError(
                f"unknown basis {self.basis_kind!r}; expected one of {BASIS_KINDS}"
            )
        if self.coefficients is not None:
            coeffs = np.asarray(self.coefficients, dtype=np.float64)
            if coeffs.shape != self.shape:
                raise InvalidInputError(
                    f"coefficients shape {coeffs.shape} does not match mesh {self.shape}"
                )
            if not np.isfinite(coeffs).all():
                raise InvalidInputError("mesh coefficients contain non-finite values")
            coeffs = coeffs.copy()
            coeffs.setflags(write=False)
            object.__setattr__(self, "coefficients", coeffs)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_tau_c + 1, self.n_y_c + 1)

    @property
    def n_nodes(self) -> int:
        return (self.n_tau_c + 1) * (self.n_y_c + 1)

    def with_coefficients(self, coefficients: FloatArray) -> "MeshLevel":
        return replace(self, coefficients=np.asarray(coefficients, dtype=np.float64))

    def descriptor(self) -> "MeshLevel":
        return replace(self, coefficients=None)


@dataclass(frozen=True)
class MeshHierarchy:
    """Nested coarse-to-fine sequence of mesh descriptors."""

    levels: tuple[MeshLevel, ...]

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels:
            raise InvalidInputError("hierarchy needs at least one level")
        for k in range(1, len(levels)):
            prev, cur = levels[k - 1], levels[k]
            if cur.n_nodes <= prev.n_nodes:
                raise InvalidInputError("levels must strictly increase in node count")
            if cur.n_tau_c % prev.n_tau_c or cur.n_y_c % prev.n_y_c:
                raise InvalidInputError(
                    f"level {k} ({cur.n_tau_c}x{cur.n_y_c}) is not nested in "
                    f"level {k - 1} ({prev.n_tau_c}x{prev.n_y_c})"
                )
        object.__setattr__(self, "levels", levels)

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, k: int) -> MeshLevel:
        return self.levels[k]


@lru_cache(maxsize=None)
def _interp_matrix_1d(n_src: int, n_dst: int, kind: str) -> FloatArray:
    """(n_dst+1) x (n_src+1) interpolation matrix between uniform unit meshes."""
    x_src = np.linspace(0.0, 1.0, n_src + 1)
    x_dst = np.linspace(0.0, 1.0, n_dst + 1)
    if kind == "bilinear" or n_src < 2:
        mat = np.zeros((n_dst + 1, n_src + 1))
        pos = np.clip(x_dst * n_src, 0.0, float(n_src))
        left = np.minimum(pos.astype(int), n_src - 1)
        t = pos - left
        rows = np.arange(n_dst + 1)
        mat[rows, left] = 1.0 - t
        mat[rows, left + 1] = t
    else:
        order = min(3, n_src)
        spl = make_interp_spline(x_src, np.eye(n_src + 1), k=order)
        mat = spl(x_dst)
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=None)
def _interp_pinv_1d(n_src: int, n_dst: int, kind: str) -> FloatArray:
    pinv = np.linalg.pinv(_interp_matrix_1d(n_src, n_dst, kind))
    pinv.setflags(write=False)
    return pinv


def prolongation_factors(m: MeshLevel, g: Grid) -> tuple[FloatArray, FloatArray]:
    """1D factors (P_tau, P_y) of the tensor prolongation from ``m`` onto ``g``."""
    if g.n_tau < m.n_tau_c or g.n_y < m.n_y_c:
        raise InvalidInputError(
            f"grid {g.n_tau}x{g.n_y} does not resolve mesh {m.n_tau_c}x{m.n_y_c}"
        )
    kind = "bilinear" if m.basis_kind == "bilinear" else "spline"
    p_tau = _interp_matrix_1d(m.n_tau_c, g.n_tau, kind)
    p_y = _interp_matrix_1d(m.n_y_c, g.n_y, kind)
    return p_tau, p_y


def prolongate(m: MeshLevel, g: Grid) -> Surface:
    """Evaluate the basis expansion of ``m`` at every node of ``g``."""
    if m.coefficients is None:
        raise InvalidInputError("mesh level carries no coefficients")
    p_tau, p_y = prolongation_factors(m, g)
    return Surface(g, p_tau @ m.coefficients @ p_y.T)


def prolongation_transpose(field: FloatArray, m: MeshLevel, g: Grid) -> FloatArray:
    """Apply the transpose of the prolongation matrix to a nodal field on ``g``."""
    p_tau, p_y = prolongation_factors(m, g)
    return p_tau.T @ field @ p_y


def project(s: Surface, m: MeshLevel) -> MeshLevel:
    """Project a surface onto a mesh level.

    Bilinear meshes sample the surface at the coarse nodes (exact when the
    grid contains them); spline meshes are fitted by least squares on the
    grid samples.
    """
    g = s.grid
    if g.n_tau < m.n_tau_c or g.n_y < m.n_y_c:
        raise InvalidInputError(
            f"grid {g.n_tau}x{g.n_y} does not resolve mesh {m.n_tau_c}x{m.n_y_c}"
        )
    if m.basis_kind == "bilinear":
        s_tau = _interp_matrix_1d(g.n_tau, m.n_tau_c, "bilinear")
        s_y = _interp_matrix_1d(g.n_y, m.n_y_c, "bilinear")
        coeffs = s_tau @ s.values @ s_y.T
    else:
        q_tau = _interp_pinv_1d(m.n_tau_c, g.n_tau, "spline")
        q_y = _interp_pinv_1d(m.n_y_c, g.n_y, "spline")
        coeffs = q_tau @ s.values @ q_y.T
    return m.with_coefficients(coeffs)


def restrict_measure_gamma(a_true: Surface, m: MeshLevel) -> float:
    """Empirical domain-discretization error of representing ``a_true`` on ``m``.

    Projects onto the mesh, prolongates back and returns the H1 norm of the
    difference.
    """
    fitted = project(a_true, m)
    back = prolongate(fitted, a_true.grid)
    return h1_norm(a_true - back)


def sample_surface(s: Surface, tau: float, y: float) -> float:
    """Bilinear interpolation of a surface at an in-domain point."""
    g = s.grid
    if not (g.tau_min <= tau <= g.tau_max and g.y_min <= y <= g.y_max):
        raise InvalidInputError(f"point ({tau}, {y}) lies outside the grid domain")
    ti = min(int((tau - g.tau_min) / g.d_tau), g.n_tau - 1)
    yi = min(int((y - g.y_min) / g.d_y), g.n_y - 1)
    ft = (tau - (g.tau_min + ti * g.d_tau)) / g.d_tau
    fy = (y - (g.y_min + yi * g.d_y)) / g.d_y
    v = s.values
    return float(
        (1 - ft) * (1 - fy) * v[ti, yi]
        + (1 - ft) * fy * v[ti, yi + 1]
        + ft * (1 - fy) * v[ti + 1, yi]
        + ft * fy * v[ti + 1, yi + 1]
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def fmt_float(x: float) -> str:
    """Round-trip decimal formatting shared by every CSV writer (bit-stable)."""
    return f"{float(x):.17g}"


def save_surface(s: Surface, path) -> None:
    """Write ``tau,y,value`` rows in row-major order (tau outer, y inner)."""
    taus = s.grid.tau_nodes()
    ys = s.grid.y_nodes()
    with open(path, "w", newline="") as fh:
        fh.write("tau,y,value\n")
        for i, tau in enumerate(taus):
            for j, y in enumerate(ys):
                fh.write(f"{fmt_float(tau)},{fmt_float(y)},{fmt_float(s.values[i, j])}\n")


def load_surface(path) -> Surface:
    """Read a surface written by :func:`save_surface`."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["tau", "y", "value"]:
            raise InvalidInputError(f"{path}: expected header 'tau,y,value'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((float(row[0]), float(row[1]), float(row[2])))
            except (ValueError, IndexError) as exc:
                raise InvalidInputError(f"{path}: bad row at line {lineno}") from exc
    if not rows:
        raise InvalidInputError(f"{path}: no data rows")
    taus = sorted({r[0] for r in rows})
    ys = sorted({r[1] for r in rows})
    if len(taus) < 2 or len(ys) < 2:
        raise InvalidInputError(f"{path}: need at least a 2x2 grid")
    if len(rows) != len(taus) * len(ys):
        raise InvalidInputError(f"{path}: incomplete tensor grid")
    for nodes in (taus, ys):
        steps = np.diff(nodes)
        if not np.allclose(steps, steps[0], rtol=1e-8, atol=1e-12):
            raise InvalidInputError(f"{path}: grid is not uniform")
    grid = Grid(taus[0], taus[-1], ys[0], ys[-1], len(taus) - 1, len(ys) - 1)
    values = np.empty(grid.shape)
    tau_index = {t: i for i, t in enumerate(taus)}
    y_index = {y: j for j, y in enumerate(ys)}
    for tau, y, v in rows:
        values[tau_index[tau], y_index[y]] = v
    return Surface(grid, values)
