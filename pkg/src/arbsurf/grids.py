"""
Maturity/strike lattice, surface containers, forward arithmetic and coverage
accounting.

Conventions:
- maturities are year fractions, strictly increasing, > 0
- rates are continuously compounded (1/year)
- per-maturity strike lists may differ (ragged); the synthetic generator
  always emits a common strike list, in which case `is_uniform` is True and
  the rectangular views `calls_matrix()` etc. are available
- masked (unobserved) cells hold NaN and must never enter any aggregation;
  every aggregation in this package iterates the mask
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

COVERAGE_FLOOR = 0.75  # minimum acceptable per-window observed-cell fraction

MASKED = np.nan


class DomainError(ValueError):
    """Raised when an operation is called outside its domain."""


def _as_float_array(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


@dataclass(frozen=True)
class MarketGrid:
    """Maturity/strike lattice with discounting context.

    maturities: strictly increasing year fractions (length L >= 2)
    strikes_per_maturity: one strictly increasing positive strike array per
        maturity (each length >= 3)
    spot: positive spot price
    rate: continuously compounded short rate
    dividend_yield: continuously compounded dividend yield
    """

    maturities: np.ndarray
    strikes_per_maturity: tuple
    spot: float
    rate: float
    dividend_yield: float = 0.0

    def __post_init__(self):
        mats = _as_float_array(self.maturities)
        object.__setattr__(self, "maturities", mats)
        strikes = tuple(_as_float_array(s) for s in self.strikes_per_maturity)
        object.__setattr__(self, "strikes_per_maturity", strikes)
        if mats.ndim != 1 or len(mats) < 2:
            raise DomainError("need at least 2 maturities")
        if np.any(mats <= 0) or np.any(np.diff(mats) <= 0):
            raise DomainError("maturities must be positive and strictly increasing")
        if len(strikes) != len(mats):
            raise DomainError("one strike list per maturity required")
        for ks in strikes:
            if len(ks) < 3:
                raise DomainError("need at least 3 strikes per maturity")
            if np.any(ks <= 0) or np.any(np.diff(ks) <= 0):
                raise DomainError("strikes must be positive and strictly increasing")
        if not (self.spot > 0):
            raise DomainError("spot must be positive")

    @property
    def n_maturities(self) -> int:
        return len(self.maturities)

    @property
    def is_uniform(self) -> bool:
        """True when all maturities share one strike list."""
        first = self.strikes_per_maturity[0]
        return all(
            len(s) == len(first) and np.array_equal(s, first)
            for s in self.strikes_per_maturity[1:]
        )

    def strikes_matrix(self) -> np.ndarray:
        if not self.is_uniform:
            raise DomainError("grid is ragged; no rectangular strike view")
        return np.tile(self.strikes_per_maturity[0], (self.n_maturities, 1))

    def time_steps(self) -> np.ndarray:
        """Per-maturity propagation steps: dt_0 = T_0, dt_i = T_i - T_{i-1}."""
        return np.diff(self.maturities, prepend=0.0)

    def forwards(self) -> np.ndarray:
        return np.array([forward_price(self, t) for t in self.maturities])


def forward_price(grid: MarketGrid, T: float) -> float:
    """Forward level F_T = S_0 * exp((r - q) * T)."""
    if not (T > 0):
        raise DomainError("maturity must be positive")
    return grid.spot * float(np.exp((grid.rate - grid.dividend_yield) * T))


def nearest_strike_below_forward(grid: MarketGrid, ell: int, mode: str = "below") -> float:
    """Reference strike K_0 for the variance-strip forward adjustment.

    mode="below" (default, exchange convention): largest strike <= F_T; if
    every strike lies above the forward, falls back to the smallest strike
    and emits a boundary warning.
    mode="nearest": strike minimizing |K - F_T| (ties resolved downward).
    """
    strikes = grid.strikes_per_maturity[ell]
    if len(strikes) == 0:
        raise DomainError("empty strike list")
    f = forward_price(grid, grid.maturities[ell])
    if mode == "nearest":
        return float(strikes[int(np.argmin(np.abs(strikes - f)))])
    if mode != "below":
        raise DomainError(f"unknown k0 mode {mode!r}")
    below = strikes[strikes <= f]
    if len(below) == 0:
        warnings.warn(
            f"no strike at or below forward {f:.4f}; using smallest strike",
            RuntimeWarning,
        )
        return float(strikes[0])
    return float(below[-1])


def strike_spacings(strikes: Sequence[float]) -> np.ndarray:
    """Quadrature spacings dK_i = (K_{i+1} - K_{i-1}) / 2, one-sided at the ends."""
    ks = _as_float_array(strikes)
    if ks.ndim != 1 or len(ks) < 2:
        raise DomainError("need at least 2 strikes")
    if np.any(np.diff(ks) <= 0):
        raise DomainError("strikes must be strictly increasing")
    dk = np.empty_like(ks)
    dk[0] = ks[1] - ks[0]
    dk[-1] = ks[-1] - ks[-2]
    if len(ks) > 2:
        dk[1:-1] = 0.5 * (ks[2:] - ks[:-2])
    return dk


@dataclass
class PriceSurface:
    """Call/put surfaces on a grid with an observation mask.

    calls/puts: one float array per maturity, NaN at masked cells
    mask: one boolean array per maturity, True = observed
    """

    grid: MarketGrid
    calls: tuple
    puts: tuple
    mask: tuple
    require_nonnegative: bool = True

    def __post_init__(self):
        self.calls = tuple(_as_float_array(c) for c in self.calls)
        self.puts = tuple(_as_float_array(p) for p in self.puts)
        self.mask = tuple(np.asarray(m, dtype=bool) for m in self.mask)
        L = self.grid.n_maturities
        if not (len(self.calls) == len(self.puts) == len(self.mask) == L):
            raise DomainError("surface shape does not match grid")
        for ell in range(L):
            n = len(self.grid.strikes_per_maturity[ell])
            if not (len(self.calls[ell]) == len(self.puts[ell]) == len(self.mask[ell]) == n):
                raise DomainError("surface row length does not match strike list")
            obs_c = self.calls[ell][self.mask[ell]]
            obs_p = self.puts[ell][self.mask[ell]]
            if not (np.all(np.isfinite(obs_c)) and np.all(np.isfinite(obs_p))):
                raise DomainError("observed prices must be finite")
            if self.require_nonnegative and (np.any(obs_c < 0) or np.any(obs_p < 0)):
                raise DomainError("observed prices must be nonnegative")

    @classmethod
    def from_matrices(
        cls,
        grid: MarketGrid,
        calls: np.ndarray,
        puts: np.ndarray,
        mask: np.ndarray | None = None,
        require_nonnegative: bool = True,
    ) -> "PriceSurface":
        calls = _as_float_array(calls)
        puts = _as_float_array(puts)
        if mask is None:
            mask = np.ones_like(calls, dtype=bool)
        return cls(
            grid,
            tuple(calls[i] for i in range(calls.shape[0])),
            tuple(puts[i] for i in range(puts.shape[0])),
            tuple(np.asarray(mask, dtype=bool)[i] for i in range(calls.shape[0])),
            require_nonnegative=require_nonnegative,
        )

    def calls_matrix(self) -> np.ndarray:
        if not self.grid.is_uniform:
            raise DomainError("ragged surface has no rectangular view")
        return np.stack(self.calls)

    def puts_matrix(self) -> np.ndarray:
        if not self.grid.is_uniform:
            raise DomainError("ragged surface has no rectangular view")
        return np.stack(self.puts)

    def mask_matrix(self) -> np.ndarray:
        if not self.grid.is_uniform:
            raise DomainError("ragged surface has no rectangular view")
        return np.stack(self.mask)

    def n_cells(self) -> int:
        return int(sum(len(m) for m in self.mask))

    def n_observed(self) -> int:
        return int(sum(int(m.sum()) for m in self.mask))

    def observed_fraction(self) -> float:
        return self.n_observed() / self.n_cells()


@dataclass
class CoverageStats:
    """Observed-cell coverage over evaluation windows."""

    coverage_min: float
    coverage_mean: float
    per_window: list = field(default_factory=list)
    flagged: bool = False

    def __post_init__(self):
        if not (self.coverage_min <= self.coverage_mean + 1e-15):
            raise DomainError("coverage_min must not exceed coverage_mean")


def coverage_stats(surfaces: Sequence[PriceSurface], floor: float = COVERAGE_FLOOR) -> CoverageStats:
    """Per-window coverage fractions with min/mean and the low-coverage flag.

    The flag is set when coverage_min < floor (threshold inclusive: exactly
    `floor` does not flag).
    """
    if len(surfaces) == 0:
        raise DomainError("need at least one window")
    per = [s.observed_fraction() for s in surfaces]
    cmin = float(min(per))
    cmean = float(np.mean(per))
    return CoverageStats(cmin, cmean, per, flagged=cmin < floor)


# --- CSV interchange -------------------------------------------------------
#
# Format (one row per cell): T,K,call,put,observed  with observed in {0,1},
# prices in currency units, '.' decimal separator. This is the contract used
# by every CLI subcommand.

CSV_HEADER = ["T", "K", "call", "put", "observed"]


def write_surface_csv(surface: PriceSurface, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        g = surface.grid
        for ell, T in enumerate(g.maturities):
            for j, K in enumerate(g.strikes_per_maturity[ell]):
                obs = bool(surface.mask[ell][j])
                c = surface.calls[ell][j]
                p = surface.puts[ell][j]
                writer.writerow(
                    [
                        f"{T:.12g}",
                        f"{K:.12g}",
                        f"{c:.12g}" if np.isfinite(c) else "nan",
                        f"{p:.12g}" if np.isfinite(p) else "nan",
                        int(obs),
                    ]
                )


def read_surface_csv(path, spot: float, rate: float, dividend_yield: float = 0.0) -> PriceSurface:
    """Read a surface written by `write_surface_csv`.

    The CSV carries no discounting context, so spot/rate/dividend must be
    supplied by the caller (the CLI takes them from its config).
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != CSV_HEADER:
            raise DomainError(f"unexpected surface CSV header: {header}")
        for row in reader:
            if not row:
                continue
            rows.append((float(row[0]), float(row[1]), float(row[2]), float(row[3]), int(row[4])))
    if not rows:
        raise DomainError("empty surface CSV")
    mats = sorted({r[0] for r in rows})
    by_t: dict[float, list] = {t: [] for t in mats}
    for t, k, c, p, o in rows:
        by_t[t].append((k, c, p, o))
    strikes, calls, puts, mask = [], [], [], []
    for t in mats:
        cells = sorted(by_t[t])
        strikes.append(np.array([c[0] for c in cells]))
        calls.append(np.array([c[1] for c in cells]))
        puts.append(np.array([c[2] for c in cells]))
        mask.append(np.array([bool(c[3]) for c in cells]))
    grid = MarketGrid(np.array(mats), tuple(strikes), spot, rate, dividend_yield)
    return PriceSurface(grid, tuple(calls), tuple(puts), tuple(mask))
