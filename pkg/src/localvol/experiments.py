"""Synthetic ground truth, noise injection and the headline studies.

The synthetic protocol prices on a fine grid, perturbs with seeded Gaussian
noise scaled to the maximum clean price, and collects the data on a coarser
grid contained in the fine one so the inversion never sees its own
discretization (no inverse crime).  On top of that sit the two studies:
residual/error curves across a mesh ladder with the discrepancy-band
selection, and convergence rates of the reconstruction error as the noise
level halves with beta proportional to it.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np

from .calibrate import (
    CalibrationConfig,
    minimize_tikhonov,
    select_beta_morozov,
    select_mesh_level,
)
from .dupire import DiffusionBounds, MarketParams, solve_dupire
from .errors import InvalidInputError
from .grids import (
    Grid,
    MeshHierarchy,
    MeshLevel,
    Surface,
    constant_surface,
    fmt_float,
    l2_norm,
    restrict_measure_gamma,
    surface_from_function,
)
from .penalties import make_penalty

DEFAULT_FINE_GRID = Grid(0.0, 1.0, -5.0, 5.0, 400, 1000)
DEFAULT_PDE_GRID = Grid(0.0, 1.0, -5.0, 5.0, 50, 100)


@dataclass(frozen=True)
class NoiseSpec:
    """Zero-mean Gaussian noise with std = level_fraction * max clean price."""

    level_fraction: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.level_fraction < 0.0:
            raise InvalidInputError("noise fraction must be nonnegative")


@dataclass(frozen=True)
class SyntheticSetup:
    """Grids, market parameters and bounds shared by the synthetic studies."""

    fine: Grid = DEFAULT_FINE_GRID
    coarse: Grid = DEFAULT_PDE_GRID
    params: MarketParams = MarketParams(1.0, 0.0)
    a0_value: float = 0.08
    bounds: DiffusionBounds = DiffusionBounds(0.005, 0.5)


def default_config(setup: SyntheticSetup, penalty: str = "h1", **overrides) -> CalibrationConfig:
    a0 = constant_surface(setup.coarse, setup.a0_value)
    return CalibrationConfig(
        penalty=make_penalty(penalty, a0), bounds=setup.bounds, **overrides
    )


def true_volatility(g: Grid) -> Surface:
    """Reference diffusion surface a = sigma^2/2 with a localized smile dip.

    sigma dips from 2/5 at |y| >= 2/5 down to 2/5 - (4/25) e^{-tau/2} at the
    money; the cosine frequency makes sigma continuous at the cutoff, keeping
    the surface inside the admissible (H1) parameter space.
    """

    def sigma(tau, y):
        bump = 0.4 - 0.16 * np.exp(-tau / 2.0) * np.cos(1.25 * np.pi * y)
        return np.where(np.abs(y) <= 0.4, bump, 0.4)

    def a_field(tau, y):
        return 0.5 * sigma(tau, y) ** 2

    return surface_from_function(g, a_field)


def _restriction_steps(fine: Grid, coarse: Grid) -> tuple[int, int]:
    if not fine.same_domain(coarse):
        raise InvalidInputError("fine and coarse grids must share the domain")
    if fine.n_tau % coarse.n_tau or fine.n_y % coarse.n_y:
        raise InvalidInputError(
            f"coarse grid {coarse.n_tau}x{coarse.n_y} is not nested in "
            f"fine grid {fine.n_tau}x{fine.n_y}"
        )
    return fine.n_tau // coarse.n_tau, fine.n_y // coarse.n_y


def make_synthetic_data(
    fine: Grid, coarse: Grid, noise: NoiseSpec, p: MarketParams
) -> tuple[Surface, float]:
    """Fine-grid solve + noise, collected on the coarse grid by node injection.

    Returns the perturbed coarse data and the realized noise norm on the
    coarse grid.
    """
    st, sy = _restriction_steps(fine, coarse)
    u_clean = solve_dupire(true_volatility(fine), p)
    rng = np.random.default_rng(noise.seed)
    sigma = noise.level_fraction * u_clean.values.max()
    e = sigma * rng.standard_normal(fine.shape)
    u_obs = Surface(coarse, (u_clean.values + e)[::st, ::sy])
    delta = l2_norm(Surface(coarse, e[::st, ::sy]))
    return u_obs, delta


def measure_rho(a: Surface, coarse: Grid, p: MarketParams) -> float:
    """Range-discretization error: fine-reference solve vs a coarse solve.

    ``a`` lives on the reference grid; it is injected onto ``coarse`` (which
    must be nested), both problems are solved, and the L2 difference of the
    prices on the coarse grid is returned.
    """
    st, sy = _restriction_steps(a.grid, coarse)
    u_ref = solve_dupire(a, p)
    a_coarse = Surface(coarse, a.values[::st, ::sy])
    u_coarse = solve_dupire(a_coarse, p)
    diff = u_ref.values[::st, ::sy] - u_coarse.values
    return l2_norm(Surface(coarse, diff))


def default_mesh_ladder(basis_kind: str = "bilinear") -> MeshHierarchy:
    """Nested coarse-to-fine parameter meshes bounded by the default PDE grid."""
    counts = [(3, 6), (6, 12), (12, 24), (24, 48), (48, 96)]
    return MeshHierarchy(
        tuple(MeshLevel(nt, ny, basis_kind) for nt, ny in counts)
    )


# ---------------------------------------------------------------------------
# Mesh-discrepancy study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeshSweepRow:
    seed: int
    delta: float
    index: int
    n_tau_c: int
    n_y_c: int
    n_nodes: int
    beta: float
    residual: float
    l2_error: float
    in_band: bool
    selected: bool


@dataclass(frozen=True)
class MeshSweepReport:
    rows: tuple[MeshSweepRow, ...]
    tau1: float
    tau2: float

    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.rows})

    def selected_error(self, seed: int) -> float:
        return next(r.l2_error for r in self.rows if r.seed == seed and r.selected)

    def best_error(self, seed: int) -> float:
        return min(r.l2_error for r in self.rows if r.seed == seed)

    def mean_selected_error(self) -> float:
        return float(np.mean([self.selected_error(s) for s in self.seeds()]))

    def mean_best_error(self) -> float:
        return float(np.mean([self.best_error(s) for s in self.seeds()]))

    def write(self, outdir) -> None:
        from pathlib import Path

        out = Path(outdir)
        with open(out / "levels.csv", "w", newline="") as fh:
            fh.write("seed,level,n_tau_c,n_y_c,n_nodes,beta,residual,l2_error,in_band,selected,delta\n")
            for r in self.rows:
                fh.write(
                    f"{r.seed},{r.index},{r.n_tau_c},{r.n_y_c},{r.n_nodes},"
                    f"{fmt_float(r.beta)},{fmt_float(r.residual)},{fmt_float(r.l2_error)},"
                    f"{int(r.in_band)},{int(r.selected)},{fmt_float(r.delta)}\n"
                )
        with open(out / "summary.txt", "w") as fh:
            fh.write(f"seeds = {self.seeds()}\n")
            fh.write(f"mean_selected_l2_error = {fmt_float(self.mean_selected_error())}\n")
            fh.write(f"mean_best_l2_error = {fmt_float(self.mean_best_error())}\n")
            ratio = self.mean_selected_error() / self.mean_best_error()
            fh.write(f"selected_to_best_ratio = {fmt_float(ratio)}\n")


def _sweep_one_seed(seed, noise_fraction, setup, hierarchy, cfg):
    noise = NoiseSpec(level_fraction=noise_fraction, seed=seed)
    u_obs, delta = make_synthetic_data(setup.fine, setup.coarse, noise, setup.params)
    truth = true_volatility(setup.coarse)
    k_sel, _, diags = select_mesh_level(
        hierarchy, u_obs, delta, 0.0, cfg, setup.params, truth=truth
    )
    rows = [
        MeshSweepRow(
            seed=seed,
            delta=delta,
            index=d.index,
            n_tau_c=d.n_tau_c,
            n_y_c=d.n_y_c,
            n_nodes=d.n_nodes,
            beta=d.beta,
            residual=d.residual,
            l2_error=d.l2_error,
            in_band=d.in_band,
            selected=d.index == k_sel,
        )
        for d in diags
    ]
    return rows


def run_mesh_sweep(
    seeds=(0, 1, 2, 3, 4),
    noise_fraction: float = 0.01,
    penalty: str = "h1",
    setup: SyntheticSetup = SyntheticSetup(),
    hierarchy: MeshHierarchy | None = None,
    cfg: CalibrationConfig | None = None,
    jobs: int = 1,
) -> MeshSweepReport:
    """Calibrate every ladder level for every seed and mark the band selection."""
    hierarchy = hierarchy or default_mesh_ladder()
    cfg = cfg or default_config(setup, penalty)
    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(
                pool.map(
                    lambda s: _sweep_one_seed(s, noise_fraction, setup, hierarchy, cfg),
                    seeds,
                )
            )
    else:
        per_seed = [
            _sweep_one_seed(s, noise_fraction, setup, hierarchy, cfg) for s in seeds
        ]
    rows = tuple(row for rows in per_seed for row in rows)
    return MeshSweepReport(rows=rows, tau1=cfg.mesh_tau1, tau2=cfg.mesh_tau2)


# ---------------------------------------------------------------------------
# Convergence-rate study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateRow:
    penalty: str
    seed: int
    octave: int
    delta: float
    beta: float
    l2_error: float
    bregman: float
    residual: float


@dataclass(frozen=True)
class GammaRow:
    index: int
    n_nodes: int
    gamma: float
    error_clean: float
    error_noisy: float


@dataclass(frozen=True)
class RateReport:
    rows: tuple[RateRow, ...]
    gamma_rows: tuple[GammaRow, ...]

    def penalties(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.penalty not in seen:
                seen.append(r.penalty)
        return seen

    def _mean_series(self, penalty: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        octaves = sorted({r.octave for r in self.rows if r.penalty == penalty})
        deltas, errors, bregmans = [], [], []
        for k in octaves:
            sel = [r for r in self.rows if r.penalty == penalty and r.octave == k]
            deltas.append(np.mean([r.delta for r in sel]))
            errors.append(np.mean([r.l2_error for r in sel]))
            bregmans.append(np.mean([r.bregman for r in sel]))
        return np.array(deltas), np.array(errors), np.array(bregmans)

    def slope(self, penalty: str, of: str = "l2_error") -> tuple[float, float]:
        """Fitted log-log slope of the mean error (or bregman) and its stderr."""
        deltas, errors, bregmans = self._mean_series(penalty)
        y = errors if of == "l2_error" else bregmans
        x = np.log(deltas)
        z = np.log(y)
        slope, intercept = np.polyfit(x, z, 1)
        fit = slope * x + intercept
        dof = max(len(x) - 2, 1)
        s2 = float(np.sum((z - fit) ** 2)) / dof
        stderr = float(np.sqrt(s2 / np.sum((x - x.mean()) ** 2)))
        return float(slope), stderr

    def write(self, outdir) -> None:
        from pathlib import Path

        out = Path(outdir)
        multi = len(self.penalties()) > 1 or len({r.seed for r in self.rows}) > 1
        with open(out / "rates.csv", "w", newline="") as fh:
            if multi:
                fh.write("penalty,seed,delta,beta,l2_error,bregman,residual\n")
            else:
                fh.write("delta,beta,l2_error,bregman,residual\n")
            for r in self.rows:
                prefix = f"{r.penalty},{r.seed}," if multi else ""
                fh.write(
                    f"{prefix}{fmt_float(r.delta)},{fmt_float(r.beta)},"
                    f"{fmt_float(r.l2_error)},{fmt_float(r.bregman)},{fmt_float(r.residual)}\n"
                )
        if self.gamma_rows:
            with open(out / "gamma_sweep.csv", "w", newline="") as fh:
                fh.write("level,n_nodes,gamma,error_clean,error_noisy\n")
                for g in self.gamma_rows:
                    fh.write(
                        f"{g.index},{g.n_nodes},{fmt_float(g.gamma)},"
                        f"{fmt_float(g.error_clean)},{fmt_float(g.error_noisy)}\n"
                    )
        with open(out / "summary.txt", "w") as fh:
            for pen in self.penalties():
                s, se = self.slope(pen)
                fh.write(f"slope[{pen}] = {fmt_float(s)} +- {fmt_float(se)}\n")
                sb, seb = self.slope(pen, of="bregman")
                fh.write(f"bregman_slope[{pen}] = {fmt_float(sb)} +- {fmt_float(seb)}\n")


def _rate_seed(seed: int, octave: int) -> int:
    return seed + 1000003 * (octave + 1)


def run_rate_study(
    octaves: int = 6,
    penalties=("h1",),
    noise_fraction0: float = 0.01,
    seeds=(0,),
    level: MeshLevel | None = None,
    setup: SyntheticSetup = SyntheticSetup(),
    cfg_overrides: dict | None = None,
    gamma_sweep: bool = False,
    hierarchy: MeshHierarchy | None = None,
    jobs: int = 1,
) -> RateReport:
    """Reconstruction error and Bregman distance as the noise level halves.

    Per penalty the largest noise level anchors beta by Morozov's principle;
    subsequent octaves scale beta proportionally to the nominal noise level.
    The optional gamma sweep recalibrates each ladder level at fixed noise to
    exhibit the approximation floor.
    """
    level = level or MeshLevel(24, 48, "bilinear")
    truth = true_volatility(setup.coarse)
    rows: list[RateRow] = []

    def one_series(pen_seed):
        penalty, seed = pen_seed
        cfg = default_config(setup, penalty, **(cfg_overrides or {}))
        series = []
        beta0 = None
        warm = None
        for k in range(octaves):
            frac = noise_fraction0 * 0.5**k
            noise = NoiseSpec(level_fraction=frac, seed=_rate_seed(seed, k))
            u_obs, delta = make_synthetic_data(setup.fine, setup.coarse, noise, setup.params)
            if beta0 is None:
                beta0, res = select_beta_morozov(
                    level, u_obs, delta, cfg, setup.params
                )
            else:
                res = minimize_tikhonov(
                    level, u_obs, beta0 * 0.5**k, cfg, setup.params, x0=warm
                )
            warm = res.coefficients
            err = l2_norm(res.a_hat - truth)
            breg = cfg.penalty.bregman(res.a_hat, truth)
            series.append(
                RateRow(
                    penalty=penalty,
                    seed=seed,
                    octave=k,
                    delta=delta,
                    beta=res.beta,
                    l2_error=err,
                    bregman=breg,
                    residual=res.residual,
                )
            )
        return series

    tasks = [(pen, seed) for pen in penalties for seed in seeds]
    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            all_series = list(pool.map(one_series, tasks))
    else:
        all_series = [one_series(t) for t in tasks]
    for series in all_series:
        rows.extend(series)

    gamma_rows: list[GammaRow] = []
    if gamma_sweep:
        ladder = hierarchy or default_mesh_ladder()
        cfg = default_config(setup, penalties[0], **(cfg_overrides or {}))
        a_true_fine = true_volatility(setup.fine)
        noise = NoiseSpec(level_fraction=noise_fraction0, seed=_rate_seed(seeds[0], 0))
        u_noisy, delta = make_synthetic_data(setup.fine, setup.coarse, noise, setup.params)
        clean = NoiseSpec(level_fraction=0.0, seed=0)
        u_clean, _ = make_synthetic_data(setup.fine, setup.coarse, clean, setup.params)
        beta_small = float(cfg.beta_grid.sequence()[-1])
        for k, lvl in enumerate(ladder):
            gamma = restrict_measure_gamma(a_true_fine, lvl)
            res_clean = minimize_tikhonov(lvl, u_clean, beta_small, cfg, setup.params)
            _, res_noisy = select_beta_morozov(lvl, u_noisy, delta, cfg, setup.params)
            gamma_rows.append(
                GammaRow(
                    index=k,
                    n_nodes=lvl.n_nodes,
                    gamma=gamma,
                    error_clean=l2_norm(res_clean.a_hat - truth),
                    error_noisy=l2_norm(res_noisy.a_hat - truth),
                )
            )

    return RateReport(rows=tuple(rows), gamma_rows=tuple(gamma_rows))
