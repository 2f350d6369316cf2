"""Black-Scholes call pricing, used as a test oracle and for implied vols."""

from __future__ import annotations

import numpy as np
from scipy.stats import norm


def call_price(spot: float, strike: float, maturity: float, rate: float, sigma: float) -> float:
    """European call value; degenerate cases collapse to discounted intrinsic."""
    if maturity <= 0.0 or sigma <= 0.0:
        return max(spot - strike * np.exp(-rate * maturity), 0.0)
    srt = sigma * np.sqrt(maturity)
    d1 = (np.log(spot / strike) + (rate + 0.5 * sigma**2) * maturity) / srt
    d2 = d1 - srt
    return float(spot * norm.cdf(d1) - strike * np.exp(-rate * maturity) * norm.cdf(d2))


def vega(spot: float, strike: float, maturity: float, rate: float, sigma: float) -> float:
    if maturity <= 0.0 or sigma <= 0.0:
        return 0.0
    srt = sigma * np.sqrt(maturity)
    d1 = (np.log(spot / strike) + (rate + 0.5 * sigma**2) * maturity) / srt
    return float(spot * norm.pdf(d1) * np.sqrt(maturity))
