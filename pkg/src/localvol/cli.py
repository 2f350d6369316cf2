"""Command-line front end.

Subcommands: synth, calibrate, meshsweep, rates, imply, validate.  Every run
with an output directory echoes its effective configuration to
``config_used.txt`` (flat ``key = value`` lines); rerunning with
``--config config_used.txt`` reproduces the outputs byte for byte.  Exit
codes: 0 success, 1 invalid input, 2 numerical failure, 3 an unmet
discrepancy flag (results are still written).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .calibrate import BetaGrid, CalibrationConfig, select_mesh_level
from .dupire import DiffusionBounds, MarketParams
from .errors import InvalidInputError, LocalVolError, NumericalFailureError
from .experiments import (
    NoiseSpec,
    SyntheticSetup,
    default_mesh_ladder,
    make_synthetic_data,
    run_mesh_sweep,
    run_rate_study,
    true_volatility,
)
from .grids import (
    Grid,
    MeshHierarchy,
    MeshLevel,
    Surface,
    constant_surface,
    fmt_float,
    load_surface,
    save_surface,
)
from .market import implied_vol, load_quotes, validate_calibration, write_validation_csv
from .penalties import make_penalty

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2
EXIT_DISCREPANCY = 3


class _Parser(argparse.ArgumentParser):
    """Argument parser exiting with code 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _parse_levels(spec: str, basis: str) -> MeshHierarchy:
    """Parse '3x6,6x12,...' into a mesh hierarchy."""
    levels = []
    for chunk in spec.split(","):
        chunk = chunk.strip()
        try:
            nt, ny = chunk.lower().split("x")
            levels.append(MeshLevel(int(nt), int(ny), basis))
        except (ValueError, TypeError) as exc:
            raise InvalidInputError(f"bad level spec {chunk!r}; expected NTxNY") from exc
    return MeshHierarchy(tuple(levels))


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise InvalidInputError(f"{path}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _echo_config(args: argparse.Namespace, outdir: Path) -> None:
    skip = {"config", "func"}
    lines = []
    for key in sorted(vars(args)):
        if key in skip:
            continue
        value = getattr(args, key)
        if isinstance(value, float):
            value = fmt_float(value)
        lines.append(f"{key} = {value}")
    (outdir / "config_used.txt").write_text("\n".join(lines) + "\n")


def _ensure_outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(args, out)
    return out


def _setup_from_args(args) -> SyntheticSetup:
    fine = Grid(0.0, 1.0, -5.0, 5.0, args.fine_n_tau, args.fine_n_y)
    coarse = Grid(0.0, 1.0, -5.0, 5.0, args.n_tau, args.n_y)
    return SyntheticSetup(
        fine=fine,
        coarse=coarse,
        params=MarketParams(args.spot, args.rate),
        a0_value=args.a0,
        bounds=DiffusionBounds(args.a_min, args.a_max),
    )


def _add_market_args(sub, spot_default=1.0):
    sub.add_argument("--spot", type=float, default=spot_default, help="underlier spot")
    sub.add_argument("--rate", type=float, default=0.0, help="risk-free rate")


def _add_synthetic_args(sub):
    _add_market_args(sub)
    sub.add_argument("--a0", type=float, default=0.08, help="reference diffusion level")
    sub.add_argument("--a-min", type=float, default=0.005, dest="a_min")
    sub.add_argument("--a-max", type=float, default=0.5, dest="a_max")
    sub.add_argument("--n-tau", type=int, default=50, dest="n_tau", help="data grid tau intervals")
    sub.add_argument("--n-y", type=int, default=100, dest="n_y", help="data grid y intervals")
    sub.add_argument("--fine-n-tau", type=int, default=400, dest="fine_n_tau")
    sub.add_argument("--fine-n-y", type=int, default=1000, dest="fine_n_y")


def _add_calibration_args(sub):
    sub.add_argument("--penalty", default="h1", help="l2 | h1 | kl | modes:<n>")
    sub.add_argument("--beta-max", type=float, default=1.0, dest="beta_max")
    sub.add_argument("--beta-ratio", type=float, default=0.7, dest="beta_ratio")
    sub.add_argument("--beta-count", type=int, default=40, dest="beta_count")
    sub.add_argument("--max-iters", type=int, default=400, dest="max_iters")
    sub.add_argument("--grad-tol", type=float, default=1e-6, dest="grad_tol")
    sub.add_argument("--morozov-tau", type=float, default=1.1, dest="morozov_tau")
    sub.add_argument("--tau1", type=float, default=1.05, help="discrepancy band lower factor")
    sub.add_argument("--tau2", type=float, default=1.5, help="discrepancy band upper factor")
    sub.add_argument("--basis", default="bilinear", choices=["bilinear", "bicubic-spline"])


def _calibration_config(args, a0: Surface) -> CalibrationConfig:
    return CalibrationConfig(
        penalty=make_penalty(args.penalty, a0),
        bounds=DiffusionBounds(args.a_min, args.a_max),
        beta_grid=BetaGrid(args.beta_max, args.beta_ratio, args.beta_count),
        max_iters=args.max_iters,
        grad_tol=args.grad_tol,
        morozov_tau=args.morozov_tau,
        mesh_tau1=args.tau1,
        mesh_tau2=args.tau2,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    out = _ensure_outdir(args)
    setup = _setup_from_args(args)
    noise = NoiseSpec(level_fraction=args.noise, seed=args.seed)
    u_obs, delta = make_synthetic_data(setup.fine, setup.coarse, noise, setup.params)
    save_surface(u_obs, out / "u_obs.csv")
    save_surface(true_volatility(setup.coarse), out / "a_true.csv")
    (out / "synth_summary.txt").write_text(
        f"delta = {fmt_float(delta)}\nmax_price = {fmt_float(u_obs.max())}\n"
    )
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    out = _ensure_outdir(args)
    u_obs = load_surface(args.data)
    grid = u_obs.grid
    a0 = constant_surface(grid, args.a0)
    cfg = _calibration_config(args, a0)
    hierarchy = _parse_levels(args.levels, args.basis)
    params = MarketParams(args.spot, args.rate)
    truth = load_surface(args.truth) if args.truth else None
    k_sel, result, diags = select_mesh_level(
        hierarchy, u_obs, args.eta, args.rho, cfg, params, truth=truth
    )
    save_surface(result.a_hat, out / "a_hat.csv")
    with open(out / "trace.csv", "w", newline="") as fh:
        fh.write("iter,objective,residual,step\n")
        for it, obj, res, step in result.trace:
            fh.write(f"{it},{fmt_float(obj)},{fmt_float(res)},{fmt_float(step)}\n")
    with open(out / "levels.csv", "w", newline="") as fh:
        fh.write("level,n_nodes,residual,l2_error,beta\n")
        for d in diags:
            err = fmt_float(d.l2_error) if d.l2_error is not None else ""
            fh.write(f"{d.index},{d.n_nodes},{fmt_float(d.residual)},{err},{fmt_float(d.beta)}\n")
    (out / "result_summary.txt").write_text(
        f"selected_level = {k_sel}\nbeta = {fmt_float(result.beta)}\n"
        f"residual = {fmt_float(result.residual)}\n"
        f"penalty_value = {fmt_float(result.penalty_value)}\n"
        f"iterations = {result.iterations}\nflags = {','.join(result.flags) or 'none'}\n"
    )
    if {"discrepancy_unmet", "band_unmet"} & set(result.flags):
        return EXIT_DISCREPANCY
    return EXIT_OK


def _cmd_meshsweep(args) -> int:
    out = _ensure_outdir(args)
    setup = _setup_from_args(args)
    a0 = constant_surface(setup.coarse, args.a0)
    cfg = _calibration_config(args, a0)
    hierarchy = _parse_levels(args.levels, args.basis)
    seeds = tuple(range(args.seed, args.seed + args.n_seeds))
    report = run_mesh_sweep(
        seeds=seeds,
        noise_fraction=args.noise,
        setup=setup,
        hierarchy=hierarchy,
        cfg=cfg,
        jobs=args.jobs,
    )
    report.write(out)
    return EXIT_OK


def _cmd_rates(args) -> int:
    out = _ensure_outdir(args)
    setup = _setup_from_args(args)
    penalties = tuple(p.strip() for p in args.penalties.split(",") if p.strip())
    nt, ny = args.level.lower().split("x")
    level = MeshLevel(int(nt), int(ny), args.basis)
    report = run_rate_study(
        octaves=args.octaves,
        penalties=penalties,
        noise_fraction0=args.noise,
        seeds=(args.seed,),
        level=level,
        setup=setup,
        gamma_sweep=args.gamma_sweep,
        jobs=args.jobs,
    )
    report.write(out)
    return EXIT_OK


def _cmd_imply(args) -> int:
    params = MarketParams(args.spot, args.rate)
    sigma = implied_vol(args.price, args.strike, args.maturity, params)
    print(fmt_float(sigma))
    if args.out:
        out = _ensure_outdir(args)
        (out / "imply.csv").write_text(
            "price,strike,maturity,implied_vol\n"
            f"{fmt_float(args.price)},{fmt_float(args.strike)},"
            f"{fmt_float(args.maturity)},{fmt_float(sigma)}\n"
        )
    return EXIT_OK


def _cmd_validate(args) -> int:
    out = _ensure_outdir(args)
    params = MarketParams(args.spot, args.rate)
    quotes = load_quotes(args.quotes, params)
    a_hat = load_surface(args.a_hat)
    rows = validate_calibration(a_hat, quotes, params)
    write_validation_csv(rows, out / "validation.csv")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="localvol", description=__doc__)
    parser.add_argument("--config", help="flat key = value file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_synth = sub.add_parser("synth", help="generate synthetic noisy price data")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--noise", type=float, default=0.01, help="std as fraction of max price")
    p_synth.add_argument("--out", required=True)
    _add_synthetic_args(p_synth)
    p_synth.set_defaults(func=_cmd_synth)

    p_cal = sub.add_parser("calibrate", help="calibrate a diffusion surface from gridded prices")
    p_cal.add_argument("--data", required=True, help="price surface CSV (tau,y,value)")
    p_cal.add_argument("--truth", default=None, help="optional true diffusion surface CSV")
    p_cal.add_argument("--eta", type=float, required=True, help="noise bound delta")
    p_cal.add_argument("--rho", type=float, default=0.0, help="range-discretization bound")
    p_cal.add_argument("--levels", default="3x6,6x12,12x24,24x48,48x96")
    p_cal.add_argument("--out", required=True)
    p_cal.add_argument("--a0", type=float, default=0.08)
    p_cal.add_argument("--a-min", type=float, default=0.005, dest="a_min")
    p_cal.add_argument("--a-max", type=float, default=0.5, dest="a_max")
    _add_market_args(p_cal)
    _add_calibration_args(p_cal)
    p_cal.set_defaults(func=_cmd_calibrate)

    p_sweep = sub.add_parser("meshsweep", help="residual/error curves across the mesh ladder")
    p_sweep.add_argument("--seed", type=int, default=0, help="first seed")
    p_sweep.add_argument("--n-seeds", type=int, default=5, dest="n_seeds")
    p_sweep.add_argument("--noise", type=float, default=0.01)
    p_sweep.add_argument("--levels", default="3x6,6x12,12x24,24x48,48x96")
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.add_argument("--out", required=True)
    _add_synthetic_args(p_sweep)
    _add_calibration_args(p_sweep)
    p_sweep.set_defaults(func=_cmd_meshsweep)

    p_rates = sub.add_parser("rates", help="error vs noise-level convergence study")
    p_rates.add_argument("--octaves", type=int, default=6)
    p_rates.add_argument("--penalties", default="h1")
    p_rates.add_argument("--noise", type=float, default=0.01, help="largest noise fraction")
    p_rates.add_argument("--seed", type=int, default=0)
    p_rates.add_argument("--level", default="24x48")
    p_rates.add_argument("--gamma-sweep", action="store_true", dest="gamma_sweep")
    p_rates.add_argument("--jobs", type=int, default=1)
    p_rates.add_argument("--out", required=True)
    _add_synthetic_args(p_rates)
    _add_calibration_args(p_rates)
    p_rates.set_defaults(func=_cmd_rates)

    p_imp = sub.add_parser("imply", help="Black-Scholes implied volatility of one price")
    p_imp.add_argument("--price", type=float, required=True)
    p_imp.add_argument("--strike", type=float, required=True)
    p_imp.add_argument("--maturity", type=float, required=True)
    p_imp.add_argument("--out", default=None)
    _add_market_args(p_imp)
    p_imp.set_defaults(func=_cmd_imply)

    p_val = sub.add_parser("validate", help="implied-vol comparison of a calibrated surface")
    p_val.add_argument("--quotes", required=True, help="quotes CSV")
    p_val.add_argument("--a-hat", required=True, dest="a_hat", help="calibrated surface CSV")
    p_val.add_argument("--out", required=True)
    _add_market_args(p_val)
    p_val.set_defaults(func=_cmd_validate)

    return parser


def _apply_config_file(parser: _Parser, argv: list[str]) -> list[str]:
    """Fold --config values in as defaults; explicit flags still win."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        raise InvalidInputError("--config needs a file path")
    values = _read_config_file(argv[idx + 1])
    command = values.pop("command", None)
    rest = [a for i, a in enumerate(argv) if i not in (idx, idx + 1)]
    if command and (not rest or rest[0] != command):
        rest = [command] + rest
    extra: list[str] = []
    for key, value in values.items():
        flag = "--" + key.replace("_", "-")
        if flag in rest:
            continue
        if value == "True":
            extra.append(flag)
            continue
        if value in ("None", "False"):
            continue
        extra.extend([flag, value])
    return [rest[0]] + extra + rest[1:] if rest else extra


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except InvalidInputError as exc:
        print(f"localvol: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING)
    try:
        return args.func(args)
    except NumericalFailureError as exc:
        print(f"localvol: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InvalidInputError, LocalVolError, OSError) as exc:
        print(f"localvol: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
