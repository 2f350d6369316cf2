"""Derivatives of the forward price map: linearized solves and adjoint gradients.

The discretize-then-optimize route is used throughout: the linearized solver
differentiates the exact discrete stepping of :mod:`localvol.dupire`
(including the implicit startup steps), and the adjoint recursion is the
exact transpose of that linearization.  Finite-difference checks therefore
probe the implementation, not the discretization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dupire import (
    DiffusionBounds,
    MarketParams,
    _implicit_banded,
    _solve_banded,
    _theta_schedule,
    _transpose_banded,
    _validate_diffusion,
    apply_curvature,
    apply_generator,
    apply_generator_transpose,
    solve_dupire,
)
from .errors import DegeneratePairError, InvalidInputError, NumericalFailureError
from .grids import (
    FloatArray,
    Grid,
    Surface,
    h1_norm,
    l2_norm,
    surface_from_function,
    trapezoid_weights,
)


def _linearized_values(
    a_values: FloatArray,
    h_values: FloatArray,
    u_values: FloatArray,
    g: Grid,
    p: MarketParams,
) -> FloatArray:
    """Exact derivative of the discrete forward map in direction ``h``."""
    d_tau, d_y, r = g.d_tau, g.d_y, p.rate
    theta = _theta_schedule(g.n_tau)
    v = np.zeros(g.shape)
    curv = apply_curvature(u_values, d_y)
    for i in range(g.n_tau):
        abar = 0.5 * (a_values[i] + a_values[i + 1])
        hbar = 0.5 * (h_values[i] + h_values[i + 1])
        th = theta[i]
        rhs = v[i] + (1.0 - th) * d_tau * apply_generator(v[i], abar, r, d_y)
        rhs += d_tau * hbar * (th * curv[i + 1] + (1.0 - th) * curv[i])
        rhs[0] = 0.0
        rhs[-1] = 0.0
        ab = _implicit_banded(abar, r, d_y, th, d_tau)
        v[i + 1] = _solve_banded(ab, rhs)
    return v


def directional_derivative(
    a: Surface, h: Surface, p: MarketParams, bounds: DiffusionBounds | None = None
) -> Surface:
    """Derivative of the price map at ``a`` in direction ``h``.

    Solves the linearized forward problem with source -h (u_yy - u_y) and
    homogeneous initial/boundary data.
    """
    if a.grid != h.grid:
        raise InvalidInputError("a and h must share a grid")
    _validate_diffusion(a, bounds)
    if bounds is not None and not bounds.contains(a.values + h.values):
        raise InvalidInputError("a + h leaves the diffusion bounds")
    u = solve_dupire(a, p, bounds)
    v = _linearized_values(a.values, h.values, u.values, a.grid, p)
    if not np.isfinite(v).all():
        raise NumericalFailureError("linearized solve produced non-finite values")
    return Surface(a.grid, v)


def _adjoint_gradient_values(
    a_values: FloatArray,
    u_values: FloatArray,
    source: FloatArray,
    g: Grid,
    p: MarketParams,
) -> FloatArray:
    """Euclidean gradient of sum_k <source_k, u_k> with respect to nodal a.

    ``source`` holds d(objective)/d(u) per node; the recursion marches the
    transposed stepping backward in tau and accumulates the diffusion
    sensitivity row by row.
    """
    d_tau, d_y, r = g.d_tau, g.d_y, p.rate
    theta = _theta_schedule(g.n_tau)
    curv = apply_curvature(u_values, d_y)
    grad = np.zeros(g.shape)
    lam = np.zeros(g.n_y + 1)
    for i in range(g.n_tau - 1, -1, -1):
        abar = 0.5 * (a_values[i] + a_values[i + 1])
        th = theta[i]
        if i == g.n_tau - 1:
            rhs = -source[i + 1]
        else:
            abar_next = 0.5 * (a_values[i + 1] + a_values[i + 2])
            th_next = theta[i + 1]
            rhs = lam + (1.0 - th_next) * d_tau * apply_generator_transpose(
                lam, abar_next, r, d_y
            )
            rhs -= source[i + 1]
        ab = _transpose_banded(_implicit_banded(abar, r, d_y, th, d_tau))
        lam = _solve_banded(ab, rhs)
        gbar = -d_tau * lam * (th * curv[i + 1] + (1.0 - th) * curv[i])
        gbar[0] = 0.0
        gbar[-1] = 0.0
        grad[i] += 0.5 * gbar
        grad[i + 1] += 0.5 * gbar
    if not np.isfinite(grad).all():
        raise NumericalFailureError("adjoint solve produced non-finite values")
    return grad


def adjoint_apply(a: Surface, w: Surface, p: MarketParams) -> Surface:
    """L2-adjoint of the linearized price map applied to a field ``w``.

    Satisfies <directional_derivative(a, h), w>_L2 = <h, adjoint_apply(a, w)>_L2
    to machine precision on matching grids.
    """
    if a.grid != w.grid:
        raise InvalidInputError("a and w must share a grid")
    weights = trapezoid_weights(a.grid)
    u = solve_dupire(a, p)
    grad = _adjoint_gradient_values(a.values, u.values, weights * w.values, a.grid, p)
    return Surface(a.grid, grad / weights)


@dataclass(frozen=True)
class MisfitGradient:
    """L2-representation of the misfit gradient and the misfit itself."""

    surface: Surface
    misfit_value: float


def misfit_and_gradient_values(
    a_values: FloatArray,
    u_values: FloatArray,
    u_obs_values: FloatArray,
    g: Grid,
    p: MarketParams,
    weight: FloatArray | None = None,
) -> tuple[float, FloatArray]:
    """Weighted squared-L2 misfit and its Euclidean nodal gradient.

    Low-level entry point shared with the calibration loop; ``weight`` is an
    optional nodal mask multiplying the quadrature weights.
    """
    w = trapezoid_weights(g)
    if weight is not None:
        w = w * weight
    e = u_values - u_obs_values
    misfit = float(np.sum(w * e**2))
    grad = _adjoint_gradient_values(a_values, u_values, 2.0 * w * e, g, p)
    return misfit, grad


def misfit_gradient(
    a: Surface,
    u_obs: Surface,
    p: MarketParams,
    bounds: DiffusionBounds | None = None,
    weight: Surface | None = None,
) -> MisfitGradient:
    """Gradient of ||u(a) - u_obs||^2_L2 via the adjoint of the discrete scheme."""
    if a.grid != u_obs.grid:
        raise InvalidInputError("a and u_obs must share a grid")
    _validate_diffusion(a, bounds)
    u = solve_dupire(a, p, bounds)
    wmask = weight.values if weight is not None else None
    misfit, grad = misfit_and_gradient_values(
        a.values, u.values, u_obs.values, a.grid, p, wmask
    )
    field = grad / trapezoid_weights(a.grid)
    return MisfitGradient(Surface(a.grid, field), misfit)


def check_tangential_cone(
    a: Surface,
    a_tilde: Surface,
    p: MarketParams,
    bounds: DiffusionBounds | None = None,
) -> float:
    """Nonlinearity-to-difference ratio ||F(a)-F(ã)-F'(ã)(a-ã)|| / ||F(a)-F(ã)||."""
    if a.grid != a_tilde.grid:
        raise InvalidInputError("surfaces must share a grid")
    diff = solve_dupire(a, p, bounds) - solve_dupire(a_tilde, p, bounds)
    denom = l2_norm(diff)
    if denom < 1e-14:
        raise DegeneratePairError("F(a) and F(a_tilde) coincide; ratio undefined")
    lin = directional_derivative(a_tilde, a - a_tilde, p, bounds)
    return l2_norm(diff - lin) / denom


def default_probe_directions(g: Grid, n_probes: int = 5, seed: int = 0) -> list[Surface]:
    """Smooth low-frequency probe fields with unit-order amplitude."""
    rng = np.random.default_rng(seed)
    probes = []
    t_span = g.tau_max - g.tau_min
    y_span = g.y_max - g.y_min
    for _ in range(n_probes):
        c = rng.normal(size=4)
        k1, k2 = rng.integers(1, 4, size=2)

        def field(tau, y, c=c, k1=k1, k2=k2):
            ts = (tau - g.tau_min) / t_span
            ys = (y - g.y_min) / y_span
            return (
                c[0] * np.sin(np.pi * k1 * ys) * np.exp(-ts)
                + c[1] * np.cos(np.pi * k2 * ys) * ts
                + c[2] * np.sin(np.pi * ts) * ys
                + c[3]
            )

        probes.append(surface_from_function(g, field))
    return probes


def check_lipschitz_derivative(
    a: Surface,
    h: Surface,
    p: MarketParams,
    bounds: DiffusionBounds | None = None,
    probes: list[Surface] | None = None,
    seed: int = 0,
) -> float:
    """Empirical Lipschitz constant of a -> F'(a) between ``a`` and ``a + h``.

    Returns sup over probe directions phi of
    ||(F'(a) - F'(a+h)) phi|| / (||h||_H1 ||phi||_H1); 0 when h vanishes.
    """
    if a.grid != h.grid:
        raise InvalidInputError("a and h must share a grid")
    h_size = h1_norm(h)
    if h_size == 0.0:
        return 0.0
    if probes is None:
        probes = default_probe_directions(a.grid, seed=seed)
    a_shift = a + h
    best = 0.0
    for phi in probes:
        scale = 1e-3 / max(np.abs(phi.values).max(), 1e-12)
        phi_small = phi * scale
        d1 = directional_derivative(a, phi_small, p, bounds)
        d2 = directional_derivative(a_shift, phi_small, p, bounds)
        ratio = l2_norm(d1 - d2) / (h_size * h1_norm(phi_small))
        best = max(best, ratio)
    return best
