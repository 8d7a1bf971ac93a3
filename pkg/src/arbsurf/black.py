"""Black-Scholes call pricing and implied volatility by bisection.

Used for report rendering (implied-vol contours of decoded surfaces).
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from .grids import DomainError


def bs_call_price(spot: float, strike: float, maturity: float, rate: float,
                  dividend_yield: float, sigma: float) -> float:
    if maturity <= 0 or sigma <= 0:
        raise DomainError("need positive maturity and volatility")
    fwd = spot * np.exp((rate - dividend_yield) * maturity)
    vol = sigma * np.sqrt(maturity)
    d1 = (np.log(fwd / strike) + 0.5 * vol**2) / vol
    d2 = d1 - vol
    return float(np.exp(-rate * maturity) * (fwd * ndtr(d1) - strike * ndtr(d2)))


def implied_vol_bisect(price: float, spot: float, strike: float, maturity: float,
                       rate: float, dividend_yield: float,
                       lo: float = 1e-4, hi: float = 5.0, iters: int = 50) -> float:
    """Bisection on the monotone price-in-vol map; NaN when the price does
    not bracket (outside static bounds or below intrinsic)."""
    try:
        p_lo = bs_call_price(spot, strike, maturity, rate, dividend_yield, lo)
        p_hi = bs_call_price(spot, strike, maturity, rate, dividend_yield, hi)
    except DomainError:
        return float("nan")
    if not (p_lo <= price <= p_hi):
        return float("nan")
    a, b = lo, hi
    for _ in range(iters):
        mid = 0.5 * (a + b)
        if bs_call_price(spot, strike, maturity, rate, dividend_yield, mid) < price:
            a = mid
        else:
            b = mid
    return 0.5 * (a + b)
