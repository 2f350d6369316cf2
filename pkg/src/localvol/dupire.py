"""Forward pricing of European calls on a (tau, y) grid.

The price field u(tau, y) with y = log(strike / spot) satisfies

    u_tau = a (u_yy - u_y) - r u_y

with u(0, y) equal to the call payoff and far-field values spot (left) and 0
(right).  The stepping scheme is Crank-Nicolson with two fully implicit
startup steps to damp the payoff kink; diffusion coefficients are averaged
between adjacent time levels so the scheme stays second order for
time-dependent surfaces.  The module also provides the closed inversion
formula recovering a from noiseless prices, usable only as a desk-scale
oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_banded

from .errors import InvalidInputError, NumericalFailureError
from .grids import FloatArray, Grid, Surface

RANNACHER_STEPS = 2

# bound checks tolerate clip-level float fuzz
_BOUNDS_SLACK = 1e-12


@dataclass(frozen=True)
class MarketParams:
    """Spot level and annualized risk-free rate."""

    spot: float
    rate: float = 0.0

    def __post_init__(self):
        if not self.spot > 0.0:
            raise InvalidInputError(f"spot must be positive, got {self.spot}")
        if self.rate < 0.0:
            raise InvalidInputError(f"rate must be nonnegative, got {self.rate}")


@dataclass(frozen=True)
class DiffusionBounds:
    """Admissible box for the diffusion surface a = sigma^2 / 2."""

    a_lower: float
    a_upper: float

    def __post_init__(self):
        if not 0.0 < self.a_lower < self.a_upper:
            raise InvalidInputError(
                f"need 0 < a_lower < a_upper, got [{self.a_lower}, {self.a_upper}]"
            )

    def clip(self, values: FloatArray) -> FloatArray:
        return np.clip(values, self.a_lower, self.a_upper)

    def contains(self, values: FloatArray) -> bool:
        return bool(
            (values >= self.a_lower - _BOUNDS_SLACK).all()
            and (values <= self.a_upper + _BOUNDS_SLACK).all()
        )


def payoff(g: Grid, p: MarketParams) -> FloatArray:
    """Initial (tau = 0) price row: value of the call at expiry, spot*(1 - e^y)^+."""
    return p.spot * np.maximum(1.0 - np.exp(g.y_nodes()), 0.0)


def _kink_averaged_payoff(g: Grid, p: MarketParams) -> FloatArray:
    """Payoff row with the cell containing the kink replaced by its cell average.

    Restores a small second-order error constant for the scheme; only the
    single node whose cell straddles y = 0 changes.
    """
    row = payoff(g, p)
    ys = g.y_nodes()
    h = g.d_y
    straddles = (ys - 0.5 * h < 0.0) & (ys + 0.5 * h > 0.0)
    for j in np.nonzero(straddles)[0]:
        lo = ys[j] - 0.5 * h
        hi = min(ys[j] + 0.5 * h, 0.0)
        integral = (hi - lo) - (np.exp(hi) - np.exp(lo))
        row[j] = p.spot * integral / h
    return row


def left_boundary(g: Grid, p: MarketParams, tau) -> FloatArray | float:
    """Truncated far-field value at y_min: spot - strike*e^{-r tau}, floored at 0."""
    return p.spot * np.maximum(1.0 - np.exp(g.y_min - p.rate * np.asarray(tau)), 0.0)


def _theta_schedule(n_steps: int) -> FloatArray:
    theta = np.full(n_steps, 0.5)
    theta[: min(RANNACHER_STEPS, n_steps)] = 1.0
    return theta


@lru_cache(maxsize=None)
def _convection_stencil(d_y: float) -> tuple[float, float, float]:
    """Coefficients of the (u_yy - u_y) stencil at an interior node."""
    gl = 1.0 / d_y**2 + 1.0 / (2.0 * d_y)
    gc = -2.0 / d_y**2
    gu = 1.0 / d_y**2 - 1.0 / (2.0 * d_y)
    return gl, gc, gu


def apply_curvature(u: FloatArray, d_y: float) -> FloatArray:
    """(u_yy - u_y) by central differences; zero at the boundary columns."""
    gl, gc, gu = _convection_stencil(d_y)
    out = np.zeros_like(u)
    out[..., 1:-1] = gl * u[..., :-2] + gc * u[..., 1:-1] + gu * u[..., 2:]
    return out


def _apply_first_derivative(u: FloatArray, d_y: float) -> FloatArray:
    out = np.zeros_like(u)
    out[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2.0 * d_y)
    return out


def apply_generator(u: FloatArray, abar: FloatArray, r: float, d_y: float) -> FloatArray:
    """a*(u_yy - u_y) - r*u_y at interior nodes, zero at boundaries."""
    out = abar * apply_curvature(u, d_y)
    if r != 0.0:
        out -= r * _apply_first_derivative(u, d_y)
    return out


def apply_generator_transpose(
    lam: FloatArray, abar: FloatArray, r: float, d_y: float
) -> FloatArray:
    """Transpose of :func:`apply_generator` (boundary rows of the generator are zero)."""
    gl, gc, gu = _convection_stencil(d_y)
    w = abar[1:-1] * lam[1:-1]
    out = np.zeros_like(lam)
    out[:-2] += gl * w
    out[1:-1] += gc * w
    out[2:] += gu * w
    if r != 0.0:
        v = r * lam[1:-1] / (2.0 * d_y)
        out[:-2] += v
        out[2:] -= v
    return out


def _implicit_banded(abar: FloatArray, r: float, d_y: float, theta: float, d_tau: float):
    """Banded form of I - theta*d_tau*T with identity rows at both boundaries."""
    n = abar.shape[0] - 1
    gl, gc, gu = _convection_stencil(d_y)
    a_int = abar[1:-1]
    lower = a_int * gl + r / (2.0 * d_y)
    center = a_int * gc
    upper = a_int * gu - r / (2.0 * d_y)
    s = theta * d_tau
    ab = np.zeros((3, n + 1))
    ab[1, :] = 1.0
    ab[1, 1:-1] -= s * center
    ab[0, 2:] = -s * upper
    ab[2, : n - 1] = -s * lower
    return ab


def _transpose_banded(ab: FloatArray) -> FloatArray:
    abt = np.zeros_like(ab)
    abt[1, :] = ab[1, :]
    abt[0, 1:] = ab[2, :-1]
    abt[2, :-1] = ab[0, 1:]
    return abt


def _solve_banded(ab: FloatArray, rhs: FloatArray) -> FloatArray:
    try:
        return solve_banded((1, 1), ab, rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
        raise NumericalFailureError("tridiagonal solve broke down") from exc


def _validate_diffusion(a: Surface, bounds: DiffusionBounds | None):
    if bounds is not None:
        if not bounds.contains(a.values):
            raise InvalidInputError(
                f"diffusion surface leaves [{bounds.a_lower}, {bounds.a_upper}]"
            )
    elif (a.values <= 0.0).any():
        raise InvalidInputError("diffusion surface must be strictly positive")


def solve_dupire(
    a: Surface, p: MarketParams, bounds: DiffusionBounds | None = None
) -> Surface:
    """March the forward equation over the grid of ``a`` and return the prices."""
    _validate_diffusion(a, bounds)
    g = a.grid
    u = _solve_values(a.values, g, p)
    if not np.isfinite(u).all():
        raise NumericalFailureError("forward solve produced non-finite prices")
    return Surface(g, u)


def _solve_values(a_values: FloatArray, g: Grid, p: MarketParams) -> FloatArray:
    d_tau, d_y, r = g.d_tau, g.d_y, p.rate
    taus = g.tau_nodes()
    theta = _theta_schedule(g.n_tau)
    u = np.empty(g.shape)
    # march from the kink-averaged row; the stored row 0 is the exact payoff.
    # Consistent for sensitivities because the first step is fully implicit,
    # so nothing downstream differentiates through the row-0 curvature.
    u[0] = _kink_averaged_payoff(g, p)
    g_left = left_boundary(g, p, taus)
    for i in range(g.n_tau):
        abar = 0.5 * (a_values[i] + a_values[i + 1])
        th = theta[i]
        rhs = u[i] + (1.0 - th) * d_tau * apply_generator(u[i], abar, r, d_y)
        rhs[0] = g_left[i + 1]
        rhs[-1] = 0.0
        ab = _implicit_banded(abar, r, d_y, th, d_tau)
        u[i + 1] = _solve_banded(ab, rhs)
    u[0] = payoff(g, p)
    return u


def forward_operator(
    a: Surface, a0: Surface, p: MarketParams, bounds: DiffusionBounds | None = None
) -> Surface:
    """Price difference u(a) - u(a0), the parameter-to-data map being inverted."""
    if a.grid != a0.grid:
        raise InvalidInputError("a and a0 must share a grid")
    return solve_dupire(a, p, bounds) - solve_dupire(a0, p, bounds)


def dupire_inversion(
    u: Surface,
    p: MarketParams,
    bounds: DiffusionBounds,
    denominator_floor: float = 1e-7,
) -> tuple[Surface, np.ndarray]:
    """Recover the diffusion surface from noiseless prices by differentiation.

    Returns the clamped surface and a boolean mask of trustworthy nodes; the
    mask is false wherever the convexity denominator u_yy - u_y falls below
    ``denominator_floor`` (boundary rows rely on one-sided differences and are
    usually masked by the far-field degeneracy).  Only meaningful on smooth,
    noise-free prices.
    """
    g = u.grid
    vals = u.values
    u_tau = np.gradient(vals, g.d_tau, axis=0, edge_order=1)
    u_y = np.gradient(vals, g.d_y, axis=1, edge_order=1)
    u_yy = np.empty_like(vals)
    u_yy[:, 1:-1] = (vals[:, 2:] - 2.0 * vals[:, 1:-1] + vals[:, :-2]) / g.d_y**2
    u_yy[:, 0] = u_yy[:, 1]
    u_yy[:, -1] = u_yy[:, -2]
    numerator = u_tau + p.rate * u_y
    denominator = u_yy - u_y
    mask = np.abs(denominator) >= denominator_floor
    floor = np.where(denominator < 0.0, -denominator_floor, denominator_floor)
    a_raw = numerator / np.where(mask, denominator, floor)
    return Surface(g, bounds.clip(a_raw)), mask
