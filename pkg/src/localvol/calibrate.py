"""Tikhonov minimization over a parameter mesh and the two discrepancy walks.

The objective over mesh coefficients c is

    J(c) = ||u(clip(P c)) - u_obs||^2_L2 + beta * f(clip(P c))

with P the basis prolongation onto the PDE grid and clip the box projection
into the diffusion bounds.  Minimization is projected gradient descent with
Armijo backtracking; descent directions are preconditioned by the H1 Gram
matrix on the mesh so they live in the penalty's natural space.  The
regularization weight walks a geometric grid until the residual satisfies
Morozov's principle; the mesh level is then chosen as the coarsest one whose
residual lands in the discrepancy band
[tau1 * max(delta, rho_m), tau2 * max(delta, rho_m)].
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .adjoint import misfit_and_gradient_values
from .dupire import DiffusionBounds, MarketParams, _solve_values
from .errors import InvalidInputError, NumericalFailureError
from .grids import (
    FloatArray,
    MeshHierarchy,
    MeshLevel,
    Surface,
    l2_norm,
    project,
    prolongation_factors,
    trapezoid_weights,
)
from .penalties import Penalty


@dataclass(frozen=True)
class BetaGrid:
    """Geometric grid of regularization weights, walked largest to smallest."""

    beta_max: float = 1.0
    ratio: float = 0.7
    count: int = 40

    def __post_init__(self):
        if self.beta_max <= 0.0:
            raise InvalidInputError("beta_max must be positive")
        if not 0.0 < self.ratio < 1.0:
            raise InvalidInputError("beta ratio must lie in (0, 1)")
        if self.count < 1:
            raise InvalidInputError("beta grid needs at least one value")

    def sequence(self) -> FloatArray:
        return self.beta_max * self.ratio ** np.arange(self.count)


@dataclass(frozen=True)
class ArmijoParams:
    c1: float = 1e-4
    backtrack: float = 0.5
    initial_step: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.c1 < 1.0:
            raise InvalidInputError("armijo c1 must lie in (0, 1)")
        if not 0.0 < self.backtrack < 1.0:
            raise InvalidInputError("backtrack ratio must lie in (0, 1)")
        if self.initial_step <= 0.0:
            raise InvalidInputError("initial step must be positive")


@dataclass(frozen=True)
class CalibrationConfig:
    penalty: Penalty
    bounds: DiffusionBounds
    beta_grid: BetaGrid = field(default_factory=BetaGrid)
    max_iters: int = 400
    armijo: ArmijoParams = field(default_factory=ArmijoParams)
    grad_tol: float = 1e-6
    morozov_tau: float = 1.1
    mesh_tau1: float = 1.05
    mesh_tau2: float = 1.5

    def __post_init__(self):
        if self.morozov_tau <= 1.0:
            raise InvalidInputError("morozov_tau must exceed 1")
        if not 1.0 < self.mesh_tau1 < self.mesh_tau2:
            raise InvalidInputError("need 1 < mesh_tau1 < mesh_tau2")
        if self.max_iters < 1:
            raise InvalidInputError("max_iters must be positive")
        if self.grad_tol < 0.0:
            raise InvalidInputError("grad_tol must be nonnegative")


@dataclass(frozen=True)
class CalibrationResult:
    """Calibrated surface plus the diagnostics of the run that produced it."""

    a_hat: Surface
    level: MeshLevel
    mesh_level_index: int
    beta: float
    residual: float
    penalty_value: float
    iterations: int
    trace: tuple[tuple[int, float, float, float], ...]
    coefficients: FloatArray
    flags: tuple[str, ...] = ()

    @property
    def converged(self) -> bool:
        return "not_converged" not in self.flags

    def with_flag(self, flag: str) -> "CalibrationResult":
        if flag in self.flags:
            return self
        return replace(self, flags=self.flags + (flag,))


@dataclass(frozen=True)
class LevelDiagnostics:
    """Per-level row of the mesh-selection sweep."""

    index: int
    n_tau_c: int
    n_y_c: int
    n_nodes: int
    beta: float
    residual: float
    in_band: bool
    l2_error: float | None = None
    flags: tuple[str, ...] = ()


@lru_cache(maxsize=None)
def _fem_matrices_1d(n: int, length: float) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
    h = length / n
    main_m = np.full(n + 1, 2.0 * h / 3.0)
    main_m[[0, -1]] = h / 3.0
    off_m = np.full(n, h / 6.0)
    mass = sparse.diags([off_m, main_m, off_m], [-1, 0, 1], format="csr")
    main_k = np.full(n + 1, 2.0 / h)
    main_k[[0, -1]] = 1.0 / h
    off_k = np.full(n, -1.0 / h)
    stiff = sparse.diags([off_k, main_k, off_k], [-1, 0, 1], format="csr")
    return mass, stiff


@lru_cache(maxsize=None)
def _h1_gram_solver(n_tau_c: int, n_y_c: int, t_span: float, y_span: float):
    """Factorized H1 Gram matrix of the bilinear mesh basis."""
    m_t, k_t = _fem_matrices_1d(n_tau_c, t_span)
    m_y, k_y = _fem_matrices_1d(n_y_c, y_span)
    gram = (
        sparse.kron(m_t, m_y) + sparse.kron(k_t, m_y) + sparse.kron(m_t, k_y)
    ).tocsc()
    return splu(gram)


def _h1_direction(grad_coeffs: FloatArray, level: MeshLevel, t_span: float, y_span: float) -> FloatArray:
    solver = _h1_gram_solver(level.n_tau_c, level.n_y_c, t_span, y_span)
    return solver.solve(grad_coeffs.ravel()).reshape(grad_coeffs.shape)


def minimize_tikhonov(
    level: MeshLevel,
    u_obs: Surface,
    beta: float,
    cfg: CalibrationConfig,
    p: MarketParams,
    weight: Surface | None = None,
    x0: FloatArray | None = None,
    mesh_level_index: int = 0,
) -> CalibrationResult:
    """Minimize the Tikhonov objective at fixed ``beta`` over one mesh level."""
    if beta <= 0.0:
        raise InvalidInputError("beta must be positive")
    grid = u_obs.grid
    p_tau, p_y = prolongation_factors(level, grid)
    lo, hi = cfg.bounds.a_lower, cfg.bounds.a_upper
    wq = trapezoid_weights(grid)
    wmask = weight.values if weight is not None else None
    pen = cfg.penalty
    t_span = grid.tau_max - grid.tau_min
    y_span = grid.y_max - grid.y_min

    if x0 is not None:
        c = np.clip(np.asarray(x0, dtype=np.float64), lo, hi)
        if c.shape != level.shape:
            raise InvalidInputError("warm start shape does not match the mesh level")
    else:
        c = np.clip(project(pen.a0, level.descriptor()).coefficients, lo, hi)

    def evaluate(coeffs: FloatArray):
        a_raw = p_tau @ coeffs @ p_y.T
        a_vals = np.clip(a_raw, lo, hi)
        u_vals = _solve_values(a_vals, grid, p)
        if not np.isfinite(u_vals).all():
            raise NumericalFailureError("forward solve produced non-finite prices")
        w = wq if wmask is None else wq * wmask
        e = u_vals - u_obs.values
        misfit = float(np.sum(w * e**2))
        pval = pen.value(Surface(grid, a_vals))
        return a_raw, a_vals, u_vals, misfit, pval

    def gradient(a_raw, a_vals, u_vals):
        misfit_val, g_mis = misfit_and_gradient_values(
            a_vals, u_vals, u_obs.values, grid, p, wmask
        )
        g_pen = wq * pen.gradient_field(Surface(grid, a_vals)).values
        g_total = g_mis + beta * g_pen
        interior = (a_raw >= lo) & (a_raw <= hi)
        g_total = np.where(interior, g_total, 0.0)
        return p_tau.T @ g_total @ p_y

    a_raw, a_vals, u_vals, misfit, pval = evaluate(c)
    objective = misfit + beta * pval
    if not np.isfinite(objective):
        raise NumericalFailureError("objective is not finite at the starting point")
    trace = [(0, objective, float(np.sqrt(misfit)), 0.0)]
    flags: tuple[str, ...] = ()
    s_ref = cfg.armijo.initial_step
    step = s_ref
    converged = False
    iterations = 0
    stalled = 0
    prev_c = prev_d = None

    for it in range(1, cfg.max_iters + 1):
        g_c = gradient(a_raw, a_vals, u_vals)
        d = _h1_direction(g_c, level, t_span, y_span)
        # first-order condition at the reference step (box projection included)
        if float(np.linalg.norm(np.clip(c - s_ref * d, lo, hi) - c)) <= cfg.grad_tol * s_ref:
            converged = True
            iterations = it - 1
            break
        # Barzilai-Borwein step seed, safeguarded by monotone Armijo below
        if prev_c is not None:
            dc_prev = c - prev_c
            dd_prev = d - prev_d
            curvature = float(np.sum(dc_prev * dd_prev))
            if curvature > 0.0:
                step = float(np.sum(dc_prev * dc_prev)) / curvature
            else:
                step = step / cfg.armijo.backtrack
        step = float(np.clip(step, 1e-12, 1e12))
        prev_c, prev_d = c, d
        accepted = False
        s = step
        while s > 1e-16:
            c_new = np.clip(c - s * d, lo, hi)
            dc = c_new - c
            slope = float(np.sum(g_c * dc))
            if slope >= 0.0 or not dc.any():
                s *= cfg.armijo.backtrack
                continue
            cand = evaluate(c_new)
            obj_new = cand[3] + beta * cand[4]
            if obj_new <= objective + cfg.armijo.c1 * slope:
                accepted = True
                break
            s *= cfg.armijo.backtrack
        if not accepted:
            # no acceptable step: stationary within line-search resolution
            converged = True
            iterations = it - 1
            break
        iterations = it
        decrease = objective - (cand[3] + beta * cand[4])
        c = c_new
        a_raw, a_vals, u_vals, misfit, pval = cand
        objective = cand[3] + beta * cand[4]
        trace.append((it, objective, float(np.sqrt(misfit)), s))
        step = s
        # a long run of vanishing decreases means the valley floor was reached
        # without meeting grad_tol; stop and report not_converged
        stalled = stalled + 1 if decrease <= 1e-12 * max(objective, 1e-30) else 0
        if stalled >= 5:
            break

    if not converged:
        flags = flags + ("not_converged",)

    a_hat = Surface(grid, a_vals)
    return CalibrationResult(
        a_hat=a_hat,
        level=level.with_coefficients(c),
        mesh_level_index=mesh_level_index,
        beta=float(beta),
        residual=float(np.sqrt(misfit)),
        penalty_value=float(pval),
        iterations=iterations,
        trace=tuple(trace),
        coefficients=c.copy(),
        flags=flags,
    )


def select_beta_morozov(
    level: MeshLevel,
    u_obs: Surface,
    eta: float,
    cfg: CalibrationConfig,
    p: MarketParams,
    weight: Surface | None = None,
    x0: FloatArray | None = None,
    mesh_level_index: int = 0,
) -> tuple[float, CalibrationResult]:
    """Walk the beta grid downward; stop at the first residual <= morozov_tau * eta."""
    if eta <= 0.0:
        raise InvalidInputError("noise bound eta must be positive")
    target = cfg.morozov_tau * eta
    warm = x0
    result = None
    for beta in cfg.beta_grid.sequence():
        result = minimize_tikhonov(
            level, u_obs, float(beta), cfg, p,
            weight=weight, x0=warm, mesh_level_index=mesh_level_index,
        )
        warm = result.coefficients
        if result.residual <= target:
            return result.beta, result
    assert result is not None
    return result.beta, result.with_flag("discrepancy_unmet")


def select_mesh_level(
    hierarchy: MeshHierarchy,
    u_obs: Surface,
    delta: float,
    rho_m: float,
    cfg: CalibrationConfig,
    p: MarketParams,
    truth: Surface | None = None,
    weight: Surface | None = None,
) -> tuple[int, CalibrationResult, list[LevelDiagnostics]]:
    """Pick the coarsest level whose Morozov residual lands in the discrepancy band.

    Runs the beta walk on every level (coarse to fine, warm-started through
    prolongation of the previous solution) and reports per-level diagnostics.
    When no level lands in the band the level closest to it is returned,
    flagged ``band_unmet``.
    """
    if delta <= 0.0 and rho_m <= 0.0:
        raise InvalidInputError("need delta > 0 or rho_m > 0")
    if delta < 0.0 or rho_m < 0.0:
        raise InvalidInputError("delta and rho_m must be nonnegative")
    eta = max(delta, rho_m)
    band_lo = cfg.mesh_tau1 * eta
    band_hi = cfg.mesh_tau2 * eta

    results: list[CalibrationResult] = []
    diagnostics: list[LevelDiagnostics] = []
    prev_surface: Surface | None = None
    for k, level in enumerate(hierarchy):
        x0 = None
        if prev_surface is not None:
            x0 = project(prev_surface, level.descriptor()).coefficients
        beta, res = select_beta_morozov(
            level, u_obs, eta, cfg, p, weight=weight, x0=x0, mesh_level_index=k
        )
        prev_surface = res.a_hat
        results.append(res)
        in_band = band_lo <= res.residual <= band_hi
        err = None
        if truth is not None:
            err = l2_norm(res.a_hat - truth)
        diagnostics.append(
            LevelDiagnostics(
                index=k,
                n_tau_c=level.n_tau_c,
                n_y_c=level.n_y_c,
                n_nodes=level.n_nodes,
                beta=beta,
                residual=res.residual,
                in_band=in_band,
                l2_error=err,
                flags=res.flags,
            )
        )

    for k, diag in enumerate(diagnostics):
        if diag.in_band:
            return k, results[k], diagnostics

    def band_distance(r: float) -> float:
        return max(band_lo - r, r - band_hi, 0.0)

    k_best = min(range(len(diagnostics)), key=lambda k: band_distance(diagnostics[k].residual))
    flagged = results[k_best].with_flag("band_unmet")
    diagnostics[k_best] = replace(
        diagnostics[k_best], flags=diagnostics[k_best].flags + ("band_unmet",)
    )
    return k_best, flagged, diagnostics
