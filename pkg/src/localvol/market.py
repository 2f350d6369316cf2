"""Market quote ingestion, arbitrage-aware gridding and implied-vol validation.

Quotes arrive as (maturity, strike, mid) rows with optional bid/ask/volume.
Per maturity the mids are repaired into a convex, non-increasing function of
the strike (pool-adjacent-violators on the slope sequence), then tensor
spline interpolation spreads them over the PDE grid; nodes outside the convex
hull of the quotes carry zero weight.  Validation prices the calibrated model
at the quote coordinates and compares Black-Scholes implied vols.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_interp_spline
from scipy.optimize import brentq
from scipy.spatial import Delaunay

from . import black_scholes as bs
from .calibrate import CalibrationResult
from .dupire import MarketParams, solve_dupire
from .errors import (
    InsufficientDataError,
    InvalidInputError,
    PriceBoundError,
    QuoteFormatError,
)
from .grids import FloatArray, Grid, Surface, fmt_float, sample_surface, trapezoid_weights

logger = logging.getLogger(__name__)

QUOTE_HEADER = ["maturity", "strike", "mid", "bid", "ask", "volume"]

IV_MIN = 1e-4
IV_MAX = 5.0


@dataclass(frozen=True)
class OptionQuote:
    maturity: float
    strike: float
    mid: float
    bid: float | None = None
    ask: float | None = None
    volume: float | None = None

    def __post_init__(self):
        if not self.maturity > 0.0:
            raise InvalidInputError(f"maturity must be positive, got {self.maturity}")
        if not self.strike > 0.0:
            raise InvalidInputError(f"strike must be positive, got {self.strike}")
        if not np.isfinite(self.mid):
            raise InvalidInputError("mid price must be finite")
        if self.bid is not None and self.ask is not None and self.bid > self.ask:
            raise InvalidInputError(f"bid {self.bid} exceeds ask {self.ask}")
        for side, value in (("bid", self.bid), ("ask", self.ask)):
            if value is not None:
                if side == "bid" and value > self.mid:
                    raise InvalidInputError("bid exceeds mid")
                if side == "ask" and value < self.mid:
                    raise InvalidInputError("ask below mid")
        if self.volume is not None and self.volume < 0:
            raise InvalidInputError("volume must be nonnegative")

    @property
    def half_spread(self) -> float | None:
        if self.bid is None or self.ask is None:
            return None
        return 0.5 * (self.ask - self.bid)


@dataclass(frozen=True)
class QuoteSet:
    """Validated quotes grouped by maturity, strikes strictly increasing."""

    params: MarketParams
    quotes: tuple[OptionQuote, ...]
    dropped: int = 0

    def __post_init__(self):
        quotes = tuple(sorted(self.quotes, key=lambda q: (q.maturity, q.strike)))
        by_mat: dict[float, list[OptionQuote]] = {}
        for q in quotes:
            by_mat.setdefault(q.maturity, []).append(q)
        for mat, group in by_mat.items():
            strikes = [q.strike for q in group]
            if len(strikes) < 2:
                raise InvalidInputError(
                    f"maturity {mat} has fewer than 2 strikes; drop it before building a QuoteSet"
                )
            if any(k2 <= k1 for k1, k2 in zip(strikes, strikes[1:])):
                raise InvalidInputError(f"strikes not strictly increasing at maturity {mat}")
        object.__setattr__(self, "quotes", quotes)

    def maturities(self) -> list[float]:
        return sorted({q.maturity for q in self.quotes})

    def by_maturity(self) -> dict[float, list[OptionQuote]]:
        out: dict[float, list[OptionQuote]] = {}
        for q in self.quotes:
            out.setdefault(q.maturity, []).append(q)
        return out

    def __len__(self) -> int:
        return len(self.quotes)


def _parse_optional(text: str) -> float | None:
    text = text.strip()
    return float(text) if text else None


def load_quotes(path, params: MarketParams) -> QuoteSet:
    """Parse a quote CSV; rows violating quote invariants are dropped and logged.

    Unparseable numerics or a wrong header are hard errors naming the line.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != QUOTE_HEADER:
            raise QuoteFormatError(
                f"{path}: expected header {','.join(QUOTE_HEADER)}", line=1
            )
        parsed: list[OptionQuote] = []
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 3:
                raise QuoteFormatError(f"{path}: too few columns", line=lineno)
            try:
                maturity = float(row[0])
                strike = float(row[1])
                mid = float(row[2])
                bid = _parse_optional(row[3]) if len(row) > 3 else None
                ask = _parse_optional(row[4]) if len(row) > 4 else None
                volume = _parse_optional(row[5]) if len(row) > 5 else None
            except ValueError as exc:
                raise QuoteFormatError(f"{path}: unparseable number", line=lineno) from exc
            try:
                parsed.append(OptionQuote(maturity, strike, mid, bid, ask, volume))
            except InvalidInputError as exc:
                dropped += 1
                logger.info("dropping quote at line %d: %s", lineno, exc)

    by_mat: dict[float, list[OptionQuote]] = {}
    for q in parsed:
        by_mat.setdefault(q.maturity, []).append(q)
    kept: list[OptionQuote] = []
    for mat in sorted(by_mat):
        group = sorted(by_mat[mat], key=lambda q: q.strike)
        unique: list[OptionQuote] = []
        for q in group:
            if unique and q.strike == unique[-1].strike:
                dropped += 1
                logger.info("dropping duplicate strike %s at maturity %s", q.strike, mat)
                continue
            unique.append(q)
        if len(unique) < 2:
            dropped += len(unique)
            logger.info("dropping maturity %s: fewer than 2 strikes", mat)
            continue
        kept.extend(unique)
    return QuoteSet(params=params, quotes=tuple(kept), dropped=dropped)


# ---------------------------------------------------------------------------
# Convexity repair and gridding
# ---------------------------------------------------------------------------

def _pava_nondecreasing(values: FloatArray, weights: FloatArray) -> FloatArray:
    """Weighted least-squares isotonic (non-decreasing) regression."""
    vals: list[float] = []
    wts: list[float] = []
    sizes: list[int] = []
    for v, w in zip(values, weights):
        cur_v, cur_w, cur_n = float(v), float(w), 1
        while vals and vals[-1] > cur_v:
            pv, pw, pn = vals.pop(), wts.pop(), sizes.pop()
            cur_v = (pv * pw + cur_v * cur_w) / (pw + cur_w)
            cur_w += pw
            cur_n += pn
        vals.append(cur_v)
        wts.append(cur_w)
        sizes.append(cur_n)
    out = np.empty(len(values))
    pos = 0
    for v, n in zip(vals, sizes):
        out[pos : pos + n] = v
        pos += n
    return out


def repair_convex_decreasing(strikes: FloatArray, values: FloatArray) -> FloatArray:
    """Closest-in-slope convex, non-increasing repair of a price curve.

    Slopes in strike are projected onto the non-decreasing cone (PAVA on the
    discrete second differences), clipped at zero, re-integrated and shifted
    to the least-squares level.  Feasible inputs pass through unchanged, so
    the repair is idempotent.
    """
    strikes = np.asarray(strikes, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(strikes) < 2:
        return values.copy()
    dk = np.diff(strikes)
    slopes = np.diff(values) / dk
    slopes = _pava_nondecreasing(slopes, dk)
    slopes = np.minimum(slopes, 0.0)
    base = np.concatenate(([0.0], np.cumsum(slopes * dk)))
    return base + float(np.mean(values - base))


def _axis_spline(x: FloatArray, y: FloatArray, x_eval: FloatArray) -> FloatArray:
    """Spline through (x, y) evaluated at clipped abscissae (flat extrapolation)."""
    order = min(3, len(x) - 1)
    spline = make_interp_spline(x, y, k=order, axis=0)
    return spline(np.clip(x_eval, x[0], x[-1]))


def _tensor_interpolate(q: QuoteSet, g: Grid, repair: bool) -> tuple[Surface, Surface]:
    maturities = q.maturities()
    if len(maturities) < 2:
        raise InsufficientDataError("need quotes at two maturities or more")
    s0 = q.params.spot
    by_mat = q.by_maturity()
    ys_grid = g.y_nodes()
    taus_grid = g.tau_nodes()

    per_maturity = np.empty((len(maturities), g.n_y + 1))
    hull_points = []
    for i, mat in enumerate(maturities):
        group = by_mat[mat]
        strikes = np.array([quote.strike for quote in group])
        mids = np.array([quote.mid for quote in group])
        if repair:
            mids = repair_convex_decreasing(strikes, mids)
        ys = np.log(strikes / s0)
        per_maturity[i] = _axis_spline(ys, mids, ys_grid)
        hull_points.extend((mat, y) for y in ys)

    mat_arr = np.asarray(maturities)
    values = np.empty(g.shape)
    for j in range(g.n_y + 1):
        values[:, j] = _axis_spline(mat_arr, per_maturity[:, j], taus_grid)

    hull = Delaunay(np.asarray(hull_points))
    tt, yy = g.node_mesh()
    nodes = np.column_stack([tt.ravel(), yy.ravel()])
    inside = hull.find_simplex(nodes) >= 0
    mask = inside.reshape(g.shape).astype(np.float64)
    return Surface(g, values), Surface(g, mask)


def to_grid_surface(q: QuoteSet, g: Grid) -> tuple[Surface, Surface]:
    """Gridded price surface from quotes plus a 0/1 node-weight mask.

    Quotes are mapped to (tau = maturity, y = log(strike/spot)), repaired for
    convexity per maturity, then tensor-interpolated onto the grid.  The mask
    is 1 inside the convex hull of the quote coordinates and 0 outside, where
    values are flat extrapolations that residuals must ignore.
    """
    return _tensor_interpolate(q, g, repair=True)


def spread_noise_bound(q: QuoteSet, g: Grid) -> float:
    """L2-aggregated half-spread over the masked region; 0 when spreads are absent.

    Used as the noise bound eta when bid/ask information is available.
    """
    spreads = [quote for quote in q.quotes if quote.half_spread is not None]
    if len({quote.maturity for quote in spreads}) < 2:
        return 0.0
    try:
        sub = QuoteSet(
            params=q.params,
            quotes=tuple(
                OptionQuote(quote.maturity, quote.strike, quote.half_spread)
                for quote in spreads
            ),
        )
        surf, mask = _tensor_interpolate(sub, g, repair=False)
    except (InsufficientDataError, InvalidInputError):
        return 0.0
    w = trapezoid_weights(g)
    return float(np.sqrt(np.sum(w * mask.values * surf.values**2)))


# ---------------------------------------------------------------------------
# Implied volatility
# ---------------------------------------------------------------------------

def implied_vol(price: float, strike: float, maturity: float, p: MarketParams) -> float:
    """Black-Scholes vol reproducing ``price`` within 1e-10, by bracketed root find.

    Prices outside the open no-arbitrage band raise :class:`PriceBoundError`;
    a price exactly at intrinsic collapses to the lower vol clamp.
    """
    if maturity <= 0.0 or strike <= 0.0:
        raise InvalidInputError("need positive strike and maturity")
    intrinsic = max(p.spot - strike * np.exp(-p.rate * maturity), 0.0)
    if price >= p.spot:
        raise PriceBoundError(
            f"price {price} >= spot {p.spot}: upper no-arbitrage bound violated",
            bound="upper",
        )
    if price < intrinsic:
        raise PriceBoundError(
            f"price {price} < intrinsic {intrinsic}: lower no-arbitrage bound violated",
            bound="lower",
        )

    def objective(sigma: float) -> float:
        return bs.call_price(p.spot, strike, maturity, p.rate, sigma) - price

    f_lo = objective(IV_MIN)
    if f_lo >= 0.0:
        logger.debug("price at/below the sigma=%g floor; clamping", IV_MIN)
        return IV_MIN
    f_hi = objective(IV_MAX)
    if f_hi <= 0.0:
        logger.debug("price above the sigma=%g ceiling; clamping", IV_MAX)
        return IV_MAX
    sigma = brentq(objective, IV_MIN, IV_MAX, xtol=1e-14, rtol=8.9e-16, maxiter=200)
    # one Newton polish towards |BS(sigma) - price| <= 1e-10
    v = bs.vega(p.spot, strike, maturity, p.rate, sigma)
    if v > 1e-12:
        sigma -= objective(sigma) / v
    return float(min(max(sigma, IV_MIN), IV_MAX))


# ---------------------------------------------------------------------------
# Calibration validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ValidationRow:
    maturity: float
    strike: float
    y: float
    market_iv: float
    model_iv: float
    gap: float
    volume: float | None


def validate_calibration(
    result: CalibrationResult | Surface, q: QuoteSet, p: MarketParams
) -> list[ValidationRow]:
    """Implied-vol comparison of the calibrated model against every quote.

    ``result`` may be a full calibration result or just the calibrated
    diffusion surface.
    """
    rows: list[ValidationRow] = []
    if not q.quotes:
        return rows
    a_hat = result.a_hat if isinstance(result, CalibrationResult) else result
    grid = a_hat.grid
    model_prices = solve_dupire(a_hat, p)
    for quote in q.quotes:
        y = float(np.log(quote.strike / p.spot))
        if not (grid.tau_min <= quote.maturity <= grid.tau_max and grid.y_min <= y <= grid.y_max):
            raise InvalidInputError(
                f"quote ({quote.maturity}, {quote.strike}) outside the calibration grid"
            )
        model_price = sample_surface(model_prices, quote.maturity, y)
        market_iv = implied_vol(quote.mid, quote.strike, quote.maturity, p)
        model_iv = implied_vol(model_price, quote.strike, quote.maturity, p)
        rows.append(
            ValidationRow(
                maturity=quote.maturity,
                strike=quote.strike,
                y=y,
                market_iv=market_iv,
                model_iv=model_iv,
                gap=abs(market_iv - model_iv),
                volume=quote.volume,
            )
        )
    return rows


def write_validation_csv(rows: list[ValidationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("maturity,strike,y,market_iv,model_iv,gap,volume\n")
        for r in rows:
            vol = fmt_float(r.volume) if r.volume is not None else ""
            fh.write(
                f"{fmt_float(r.maturity)},{fmt_float(r.strike)},{fmt_float(r.y)},"
                f"{fmt_float(r.market_iv)},{fmt_float(r.model_iv)},{fmt_float(r.gap)},{vol}\n"
            )
