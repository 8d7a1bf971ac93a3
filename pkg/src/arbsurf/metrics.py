"""
Dimensionless evaluation metrics, time-series inference (Newey-West
intervals, Holm-Bonferroni control), spectral effective dimension, and the
roughness-switch monitor.

Scale conventions used throughout:
- arbitrage scores normalize per-cell residuals by the maturity's
  at-the-forward price level, and by the cell count, so the scores are
  unit-free;
- surface distances standardize the (T, K) coordinates by the shared grid
  statistics and the value coordinate by the symmetric (average) spread of
  the two surfaces, which keeps the distance symmetric and exactly
  proportional to a constant price shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm as _norm

from .grids import DomainError, MarketGrid, PriceSurface, forward_price

Z_ALPHA_CACHE: dict[float, float] = {}


def _z(confidence: float) -> float:
    if confidence not in Z_ALPHA_CACHE:
        Z_ALPHA_CACHE[confidence] = float(_norm.ppf(0.5 * (1.0 + confidence)))
    return Z_ALPHA_CACHE[confidence]


@dataclass
class CnasShape:
    """Saturating-hinge shaping parameters, frozen across runs."""

    kappa: float = 10.0
    tau: float = 1e-4
    scale: float = 1.0

    def __post_init__(self):
        if self.kappa <= 0 or self.tau < 0 or self.scale <= 0:
            raise DomainError("invalid shape parameters")


@dataclass
class MetricsReport:
    nas: float
    cnas: float
    ni: float
    dual_gap: float
    stability: float
    surface_wasserstein: float
    gen_gap_p95: float
    effective_dims: tuple
    ci_low: dict = field(default_factory=dict)
    ci_high: dict = field(default_factory=dict)
    novik_to_kazamaki_rate: float = float("nan")

    def __post_init__(self):
        d90, d95, d99 = self.effective_dims
        if not (d90 <= d95 <= d99):
            raise DomainError("effective dimensions must be nondecreasing")
        if not (self.nas <= 1.0 + 1e-12 and self.cnas <= 1.0 + 1e-12):
            raise DomainError("arbitrage scores cannot exceed 1")


# --- arbitrage scores -------------------------------------------------------


def _atm_scales(surface: PriceSurface, floor: float = 1e-8) -> np.ndarray:
    """Per-maturity price scale: the call at the strike nearest the forward."""
    grid = surface.grid
    scales = np.empty(grid.n_maturities)
    for ell, T in enumerate(grid.maturities):
        ks = grid.strikes_per_maturity[ell]
        j = int(np.argmin(np.abs(ks - forward_price(grid, T))))
        scales[ell] = max(abs(float(surface.calls[ell][j])), floor)
    return scales


def _scaled_residual_fields(surface: PriceSurface):
    """Finite-difference violation fields, scaled per maturity.

    Returns (mono (L, M-1), conv (L, M-2), cal (L-1, M)) where mono/conv use
    derivative scalings in strike, cal uses the maturity derivative, and all
    rows are divided by the at-the-forward price scale of the maturity the
    stencil is anchored at.
    """
    grid = surface.grid
    if not grid.is_uniform:
        raise DomainError("scores require a uniform strike grid")
    c = surface.calls_matrix()
    ks = grid.strikes_per_maturity[0]
    dk = np.diff(ks)
    scales = _atm_scales(surface)
    slopes = np.diff(c, axis=1) / dk
    mono = np.maximum(slopes, 0.0) / scales[:, None]
    half_span = 0.5 * (ks[2:] - ks[:-2])
    d2 = (slopes[:, 1:] - slopes[:, :-1]) / half_span
    conv = np.maximum(-d2, 0.0) / scales[:, None]
    dT = np.diff(grid.maturities)
    if grid.n_maturities > 1:
        cal_slope = (c[1:] - c[:-1]) / dT[:, None]
        cal = np.maximum(-cal_slope, 0.0) / scales[:-1, None]
    else:
        cal = np.zeros((0, c.shape[1]))
    return mono, conv, cal


def nas(surface: PriceSurface, weights: tuple | None = None) -> float:
    """Static-arbitrage score: 1 minus the cell-averaged scaled violations.

    Equals 1 exactly on violation-free surfaces; unbounded below. Optional
    weights (monotonicity, convexity, calendar) provide the weighted
    variant; the default is the unweighted cell average.
    """
    mono, conv, cal = _scaled_residual_fields(surface)
    n_cells = surface.n_cells()
    if weights is None:
        total = mono.sum() + conv.sum() + cal.sum()
        return float(1.0 - total / n_cells)
    w1, w2, w3 = weights
    if min(w1, w2, w3) < 0 or (w1 + w2 + w3) <= 0:
        raise DomainError("weights must be nonnegative with positive sum")
    total = w1 * mono.sum() + w2 * conv.sum() + w3 * cal.sum()
    return float(1.0 - total / (n_cells * (w1 + w2 + w3) / 3.0))


def saturating_hinge(a, b, c, shape: CnasShape):
    """Smooth bounded penalty of a residual triple: zero at zero, saturating
    at `scale`, kicking in beyond the tolerance `tau` with stiffness
    `kappa`."""
    excess = np.maximum(0.0, np.asarray(a) + np.asarray(b) + np.asarray(c) - shape.tau)
    return shape.scale * (1.0 - np.exp(-shape.kappa * excess))


def cnas_from_residuals(a: np.ndarray, b: np.ndarray, c: np.ndarray, shape: CnasShape) -> float:
    """Shaped score from per-cell residual triples (already scaled)."""
    psi = saturating_hinge(a, b, c, shape)
    return float(1.0 - np.mean(psi))


def cnas(surface: PriceSurface, shape: CnasShape) -> float:
    """Shaped arbitrage score on the cell grid.

    Stencil residuals are assigned to their anchor cell (left strike of a
    pair, center of a curvature stencil, earlier maturity of a calendar
    pair); cells without a stencil contribute zeros.
    """
    mono, conv, cal = _scaled_residual_fields(surface)
    L, M = surface.calls_matrix().shape
    a = np.zeros((L, M))
    b = np.zeros((L, M))
    cc = np.zeros((L, M))
    a[:, : M - 1] = mono
    b[:, 1 : M - 1] = conv
    if L > 1:
        cc[: L - 1, :] = cal
    return cnas_from_residuals(a, b, cc, shape)


# --- forward-unit increment variance ratio ---------------------------------


def _forward_units(surface: PriceSurface) -> np.ndarray:
    grid = surface.grid
    c = surface.calls_matrix()
    out = np.empty_like(c)
    for ell, T in enumerate(grid.maturities):
        out[ell] = c[ell] * np.exp(grid.rate * T) / forward_price(grid, T)
    return out


def _bucket_ids(L: int, M: int, n_t: int = 8, n_k: int = 4) -> np.ndarray:
    """Equal-count bucket index per cell over (maturity, moneyness)."""
    t_groups = np.array_split(np.arange(L), min(n_t, L))
    k_groups = np.array_split(np.arange(M), min(n_k, M))
    ids = np.empty((L, M), dtype=int)
    for ti, rows in enumerate(t_groups):
        for ki, cols in enumerate(k_groups):
            for r in rows:
                ids[r, cols] = ti * len(k_groups) + ki
    return ids


def ni(model_windows: Sequence[PriceSurface], oracle_windows: Sequence[PriceSurface],
       eps: float = 1e-12) -> float:
    """Numeraire-integrity proxy: one minus the bucket-weighted ratio of
    forward-unit increment variances, model over reference, across adjacent
    windows. Uniform bucket weights.
    """
    if len(model_windows) < 2 or len(model_windows) != len(oracle_windows):
        raise DomainError("need at least two aligned windows for increments")
    fm = np.stack([_forward_units(s) for s in model_windows])
    fo = np.stack([_forward_units(s) for s in oracle_windows])
    dm = np.diff(fm, axis=0)
    do = np.diff(fo, axis=0)
    L, M = fm.shape[1], fm.shape[2]
    ids = _bucket_ids(L, M)
    num = 0.0
    den = 0.0
    for b in range(ids.max() + 1):
        sel = ids == b
        num += float(np.var(dm[:, sel]))
        den += float(np.var(do[:, sel]))
    return float(1.0 - num / (den + eps))


def ni_mad(model_windows: Sequence[PriceSurface], eps: float = 1e-12) -> float:
    """Robust-dispersion variant: median absolute deviation of bucket prices
    across the admissible normalizations (money-market discounted and
    forward units), relative to a robust local scale."""
    if len(model_windows) < 1:
        raise DomainError("need at least one window")
    total = 0.0
    count = 0
    for s in model_windows:
        grid = s.grid
        c = s.calls_matrix()
        disc = c * np.exp(grid.rate * grid.maturities)[:, None]
        fwd = _forward_units(s) * grid.spot  # rescale to price-like units
        stackv = np.stack([disc, fwd])
        med = np.median(stackv, axis=0)
        mad = np.median(np.abs(stackv - med), axis=0)
        local = np.maximum(np.abs(med), 1.0)
        total += float(np.mean(mad / local))
        count += 1
    return float(1.0 - total / count)


# --- saddle diagnostics ------------------------------------------------------


def dual_gap(state, heldout_batch, k_inner: int = 5) -> float:
    """Empirical saddle gap at the current iterate: k_inner projected ascent
    steps on the multipliers minus k_inner descent steps on the parameters,
    both on the held-out batch."""
    if k_inner < 1:
        raise DomainError("k_inner must be >= 1")
    from .training import empirical_gap_from_state

    return empirical_gap_from_state(state, heldout_batch, k_inner)


def stability(runs: Sequence, mart_tol: float = 1e-2) -> float:
    """Fraction of runs that stayed spectrally safe (max rho dt <= 1), ended
    with the martingale defect below tolerance, and stopped within budget."""
    if len(runs) == 0:
        raise DomainError("need at least one run")
    ok = 0
    for r in runs:
        get = r.get if isinstance(r, dict) else lambda k, _r=r: getattr(_r, k)
        passed = (
            float(get("max_rho_dt")) <= 1.0
            and float(get("martingale_residual")) <= mart_tol
            and bool(get("stopped"))
        )
        ok += int(passed)
    return ok / len(runs)


# --- distances and quantiles -------------------------------------------------


def _cloud(surface: PriceSurface) -> np.ndarray:
    grid = surface.grid
    pts = []
    for ell, T in enumerate(grid.maturities):
        ks = grid.strikes_per_maturity[ell]
        for j, K in enumerate(ks):
            pts.append((T, K, surface.calls[ell][j]))
    return np.array(pts)


def surface_wasserstein(
    a: PriceSurface, b: PriceSurface, n_projections: int = 64, seed: int = 7
) -> float:
    """Sliced transport distance between (T, K, price) clouds.

    The 1-D distance on each random direction is computed exactly by
    sorting. Deterministic given the seed.
    """
    pa, pb = _cloud(a), _cloud(b)
    if pa.shape != pb.shape:
        raise DomainError("surfaces must share a grid")
    coords = np.vstack([pa[:, :2], pb[:, :2]])
    mu_c = coords.mean(axis=0)
    sd_c = np.maximum(coords.std(axis=0), 1e-12)
    mu_v = 0.5 * (pa[:, 2].mean() + pb[:, 2].mean())
    sd_v = np.maximum(0.5 * (pa[:, 2].std() + pb[:, 2].std()), 1e-12)

    def standardize(p):
        out = np.empty_like(p)
        out[:, :2] = (p[:, :2] - mu_c) / sd_c
        out[:, 2] = (p[:, 2] - mu_v) / sd_v
        return out

    sa, sb = standardize(pa), standardize(pb)
    rng = np.random.Generator(np.random.Philox(key=seed))
    total = 0.0
    for _ in range(n_projections):
        theta = rng.standard_normal(3)
        theta /= np.linalg.norm(theta)
        qa = np.sort(sa @ theta)
        qb = np.sort(sb @ theta)
        total += float(np.sqrt(np.mean((qa - qb) ** 2)))
    return total / n_projections


def gen_gap_p95(train_errors: np.ndarray, oos_errors: np.ndarray) -> float:
    """95th percentile (nearest rank) of |train - OOS| absolute differences."""
    train_errors = np.asarray(train_errors, dtype=float).ravel()
    oos_errors = np.asarray(oos_errors, dtype=float).ravel()
    if train_errors.size == 0 or train_errors.shape != oos_errors.shape:
        raise DomainError("need matched nonempty error series")
    gaps = np.sort(np.abs(train_errors - oos_errors))
    rank = int(np.ceil(0.95 * len(gaps)))
    return float(gaps[rank - 1])


def effective_dimension(gram: np.ndarray, alphas=(0.90, 0.95, 0.99), psd_tol: float = 1e-8):
    """Smallest ranks capturing each alpha-fraction of eigenvalue mass."""
    gram = np.asarray(gram, dtype=float)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise DomainError("gram must be square")
    if not np.allclose(gram, gram.T, atol=1e-10 * max(1.0, np.abs(gram).max())):
        raise DomainError("gram must be symmetric")
    evals = np.linalg.eigvalsh(gram)
    if evals.min(initial=0.0) < -psd_tol * max(evals.max(initial=1.0), 1.0):
        raise DomainError("gram is not positive semidefinite")
    evals = np.sort(np.maximum(evals, 0.0))[::-1]
    total = evals.sum()
    if total <= 0:
        raise DomainError("gram has no spectral mass")
    cum = np.cumsum(evals)
    out = []
    for alpha in alphas:
        target = alpha * total * (1.0 - 1e-12)
        out.append(int(np.searchsorted(cum, target) + 1))
    return tuple(out)


# --- time-series inference ---------------------------------------------------


def newey_west_lrv(series: np.ndarray, lag: int) -> float:
    """Long-run variance with Bartlett weights w_k = 1 - k/(L+1)."""
    x = np.asarray(series, dtype=float)
    t = len(x)
    xc = x - x.mean()
    gamma0 = float(xc @ xc) / t
    lrv = gamma0
    for k in range(1, lag + 1):
        gk = float(xc[k:] @ xc[:-k]) / t
        lrv += 2.0 * (1.0 - k / (lag + 1.0)) * gk
    return max(lrv, 0.0)


def hac_lag(t: int, c: float = 1.0) -> int:
    return int(np.floor(c * t**0.25))


def hac_ci(series: np.ndarray, confidence: float = 0.95, c: float = 1.0):
    """Mean with autocorrelation-robust interval.

    Sample autocovariances use the 1/T convention, so at lag 0 the interval
    coincides exactly with the plain iid interval on the same convention.
    """
    x = np.asarray(series, dtype=float)
    t = len(x)
    if t < 8:
        raise DomainError("need at least 8 observations")
    lag = hac_lag(t, c)
    lrv = newey_west_lrv(x, lag)
    half = _z(confidence) * np.sqrt(lrv / t)
    mean = float(x.mean())
    return mean, mean - half, mean + half


def holm_bonferroni(p_values: Sequence[float], alpha: float = 0.05) -> np.ndarray:
    """Sequential step-down rejections; stops at the first failure."""
    p = np.asarray(p_values, dtype=float)
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise DomainError("p-values must lie in [0, 1]")
    m = len(p)
    reject = np.zeros(m, dtype=bool)
    if m == 0:
        return reject
    order = np.argsort(p, kind="stable")
    for k, idx in enumerate(order):
        if p[idx] <= alpha / (m - k):
            reject[idx] = True
        else:
            break
    return reject


def novikov_kazamaki_rate(
    blocks: Sequence[np.ndarray],
    n_threshold: float | None = None,
    z_cap: float | None = None,
    confidence: float = 0.95,
):
    """Heuristic switch-rate monitor on blocked martingale increments.

    Per block computes the exponential-moment statistics
    log N = 0.5 * sum x^2 and log Z = 0.5 * sum x. A block "switches" when
    log N exceeds `n_threshold` (default: pooled 75th percentile) while
    |log Z| stays within `z_cap` (default: pooled 90th percentile). Returns
    (rate, ci_low, ci_high); the interval is NaN with fewer than 8 blocks.
    """
    clean = [np.asarray(b, dtype=float) for b in blocks if len(b) > 0]
    skipped = len(blocks) - len(clean)
    if skipped:
        import warnings

        warnings.warn(f"skipped {skipped} empty blocks", RuntimeWarning)
    if not clean:
        raise DomainError("no usable blocks")
    log_n = np.array([0.5 * float(b @ b) for b in clean])
    log_z = np.array([0.5 * float(b.sum()) for b in clean])
    if n_threshold is None:
        n_threshold = float(np.quantile(log_n, 0.75))
    if z_cap is None:
        z_cap = float(np.quantile(np.abs(log_z), 0.90))
    switches = (log_n > n_threshold) & (np.abs(log_z) <= z_cap)
    rate = float(switches.mean())
    if len(clean) >= 8:
        _, lo, hi = hac_ci(switches.astype(float), confidence)
    else:
        lo = hi = float("nan")
    return rate, lo, hi


def gap_representer_regression(
    gaps: np.ndarray, rep_errors: np.ndarray, confidence: float = 0.95, c: float = 1.0
):
    """Least squares of fallback error on the saddle gap with a robust slope
    interval. Returns (slope, intercept, (ci_low, ci_high))."""
    g = np.asarray(gaps, dtype=float)
    e = np.asarray(rep_errors, dtype=float)
    t = len(g)
    if t < 8 or g.shape != e.shape:
        raise DomainError("need matched series of length >= 8")
    if np.std(g) < 1e-14:
        raise DomainError("degenerate regressor")
    X = np.column_stack([np.ones(t), g])
    beta, *_ = np.linalg.lstsq(X, e, rcond=None)
    resid = e - X @ beta
    lag = hac_lag(t, c)
    scores = X * resid[:, None]
    s_mat = scores.T @ scores / t
    for k in range(1, lag + 1):
        gam = scores[k:].T @ scores[:-k] / t
        s_mat += (1.0 - k / (lag + 1.0)) * (gam + gam.T)
    xtx_inv = np.linalg.inv(X.T @ X / t)
    cov = xtx_inv @ s_mat @ xtx_inv / t
    half = _z(confidence) * np.sqrt(max(cov[1, 1], 0.0))
    slope = float(beta[1])
    return slope, float(beta[0]), (slope - half, slope + half)
