"""
Convex-in-strike, monotone-in-maturity price decoding.

The potential is an input-convex network: a nonnegative-weight path carries
the strike coordinate, an unconstrained path carries the context (latent
readout plus maturity), and every activation on the convex path is convex
and nondecreasing (softplus on hidden layers, identity at the output).
Convexity in strike therefore holds for any admissible parameters.

The strike coordinate fed to the network is affine in K (moneyness
K/S0 - 1). An affine coordinate is required: the no-arbitrage convexity
constraint lives in K-space, and a convex function of log-moneyness is not
convex in K. Log-moneyness is still used elsewhere (noise shaping,
features); it just cannot enter the convex path.

Maturity monotonicity is built in the same way: the decoded surface is a
base slice plus a cumulative sum of nonnegative increments
softplus(slope_l) * softplus(potential(k; context_l)), so calendar spreads
are nonnegative for any parameters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .grids import DomainError, MarketGrid, PriceSurface
from .mathutil import sigmoid, softplus
from .operator import LatentTrajectory


class InvariantViolation(ValueError):
    """A structural parameter constraint (nonnegative convex-path weights) is broken."""


class ProjectionFailure(RuntimeError):
    """The no-arbitrage projection did not reach its tolerance."""

    def __init__(self, message: str, final_violation: float):
        super().__init__(message)
        self.final_violation = final_violation


@dataclass
class DecoderParams:
    """Input-convex potential weights with maturity-monotone slopes.

    layer_weights_z: convex-path matrices, all entries >= 0, shapes chaining
        (w1, 1), (w2, w1), ..., (1, wD)
    layer_weights_x: unconstrained context-path matrices, shapes
        (w_{i+1}, 1 + context_dim); the first input column is the strike
        coordinate, the rest the context
    biases: one vector per layer
    maturity_slope_raw: per-maturity reals, mapped through softplus to the
        nonnegative calendar increments
    """

    layer_weights_z: list
    layer_weights_x: list
    biases: list
    maturity_slope_raw: np.ndarray

    def __post_init__(self):
        self.layer_weights_z = [np.asarray(w, dtype=float) for w in self.layer_weights_z]
        self.layer_weights_x = [np.asarray(w, dtype=float) for w in self.layer_weights_x]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        self.maturity_slope_raw = np.asarray(self.maturity_slope_raw, dtype=float)
        n = len(self.layer_weights_z)
        if not (len(self.layer_weights_x) == len(self.biases) == n and n >= 1):
            raise DomainError("layer lists must have equal nonzero length")
        prev = 1
        for i, (wz, wx, b) in enumerate(zip(self.layer_weights_z, self.layer_weights_x, self.biases)):
            if wz.shape[1] != prev:
                raise DomainError(f"layer {i}: convex-path shape mismatch")
            if wx.shape[0] != wz.shape[0] or b.shape != (wz.shape[0],):
                raise DomainError(f"layer {i}: context-path/bias shape mismatch")
            prev = wz.shape[0]
        if prev != 1:
            raise DomainError("output layer must have width 1")
        widths = {w.shape[1] for w in self.layer_weights_x}
        if len(widths) != 1:
            raise DomainError("context-path input width must be constant")
        self.validate_nonnegative()

    def validate_nonnegative(self):
        for i, wz in enumerate(self.layer_weights_z):
            if np.any(wz < 0):
                raise InvariantViolation(f"negative entry in convex-path weights of layer {i}")

    @property
    def context_dim(self) -> int:
        return self.layer_weights_x[0].shape[1] - 1

    @property
    def n_layers(self) -> int:
        return len(self.layer_weights_z)

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        context_dim: int,
        n_maturities: int,
        width: int = 16,
        depth: int = 2,
        scale: float = 0.1,
        slope_raw: float = -2.0,
    ) -> "DecoderParams":
        """Random admissible parameters (convex-path weights folded positive)."""
        sizes = [1] + [width] * depth + [1]
        wz = [np.abs(rng.standard_normal((sizes[i + 1], sizes[i]))) * scale for i in range(len(sizes) - 1)]
        wx = [rng.standard_normal((sizes[i + 1], 1 + context_dim)) * scale for i in range(len(sizes) - 1)]
        b = [np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)]
        return cls(wz, wx, b, np.full(n_maturities, slope_raw))


def icnn_forward(params: DecoderParams, k: np.ndarray, context: np.ndarray):
    """Batched potential evaluation.

    k: (n,) strike coordinates; context: (n, context_dim).
    Returns (phi (n,), cache) where the cache holds pre-activations and
    layer inputs for the backward pass.
    """
    k = np.asarray(k, dtype=float)
    context = np.asarray(context, dtype=float)
    x_full = np.concatenate([k[:, None], context], axis=1)
    z = k[:, None]
    zs, pres = [z], []
    n_layers = params.n_layers
    for i in range(n_layers):
        a = z @ params.layer_weights_z[i].T + x_full @ params.layer_weights_x[i].T + params.biases[i]
        pres.append(a)
        z = softplus(a) if i < n_layers - 1 else a
        zs.append(z)
    return z[:, 0], {"zs": zs, "pres": pres, "x_full": x_full}


def icnn_backward(params: DecoderParams, cache: dict, dphi: np.ndarray):
    """Reverse pass for `icnn_forward`.

    dphi: (n,) upstream gradient of the potential values.
    Returns (param_grads, dk, dcontext) where param_grads has keys
    'layer_weights_z', 'layer_weights_x', 'biases' mirroring the parameter
    lists.
    """
    zs, pres, x_full = cache["zs"], cache["pres"], cache["x_full"]
    n_layers = params.n_layers
    dz = dphi[:, None]
    g_wz = [None] * n_layers
    g_wx = [None] * n_layers
    g_b = [None] * n_layers
    dx_full = np.zeros_like(x_full)
    for i in range(n_layers - 1, -1, -1):
        da = dz if i == n_layers - 1 else dz * sigmoid(pres[i])
        g_wz[i] = da.T @ zs[i]
        g_wx[i] = da.T @ x_full
        g_b[i] = da.sum(axis=0)
        dx_full += da @ params.layer_weights_x[i]
        dz = da @ params.layer_weights_z[i]
    dk = dz[:, 0] + dx_full[:, 0]
    dcontext = dx_full[:, 1:]
    return {"layer_weights_z": g_wz, "layer_weights_x": g_wx, "biases": g_b}, dk, dcontext


def icnn_eval(params: DecoderParams, k: float, context: np.ndarray) -> float:
    """Potential value at one strike coordinate for a fixed context."""
    params.validate_nonnegative()
    context = np.atleast_1d(np.asarray(context, dtype=float))
    if context.shape != (params.context_dim,):
        raise DomainError("context dimension mismatch")
    phi, _ = icnn_forward(params, np.array([float(k)]), context[None, :])
    return float(phi[0])


def strike_coordinate(strikes: np.ndarray, spot: float) -> np.ndarray:
    """Affine strike coordinate fed to the convex path: K/S0 - 1."""
    return np.asarray(strikes, dtype=float) / spot - 1.0


def decode_surface(
    params: DecoderParams, trajectory: LatentTrajectory, grid: MarketGrid
) -> PriceSurface:
    """Decode calls on the grid; puts follow by parity.

    C(K, T_l) = S0 * [ phi(km; 0) + sum_{i<=l} sp(s_i) * sp(phi(km; ctx_i)) ]
    with km = K/S0 - 1 and ctx_i = (readout_i, T_i). The cumulative
    nonnegative increments force C nondecreasing in maturity cell by cell.
    """
    if not grid.is_uniform:
        raise DomainError("decoding requires a uniform strike grid")
    L = grid.n_maturities
    if trajectory.outputs.shape[0] != L:
        raise DomainError("trajectory length does not match grid")
    if params.maturity_slope_raw.shape != (L,):
        raise DomainError("maturity slopes do not match grid")
    p = trajectory.outputs.shape[1]
    if params.context_dim != p + 1:
        raise DomainError("decoder context dimension must be readout_dim + 1")
    strikes = grid.strikes_per_maturity[0]
    M = len(strikes)
    km = strike_coordinate(strikes, grid.spot)

    base_ctx = np.zeros((M, p + 1))
    phi0, _ = icnn_forward(params, km, base_ctx)

    ctx = np.concatenate([trajectory.outputs, grid.maturities[:, None]], axis=1)
    k_rep = np.tile(km, L)
    ctx_rep = np.repeat(ctx, M, axis=0)
    phi_i, _ = icnn_forward(params, k_rep, ctx_rep)
    inc = softplus(params.maturity_slope_raw)[:, None] * softplus(phi_i.reshape(L, M))
    cnorm = phi0[None, :] + np.cumsum(inc, axis=0)

    calls = grid.spot * cnorm
    T = grid.maturities[:, None]
    puts = calls - grid.spot * np.exp(-grid.dividend_yield * T) + np.exp(-grid.rate * T) * strikes[None, :]
    return PriceSurface.from_matrices(grid, calls, puts, require_nonnegative=False)


def legendre_conjugate(
    potential,
    p: float,
    context: np.ndarray | None,
    k_domain: tuple[float, float],
    n_grid: int = 512,
    refine_iters: int = 80,
) -> float:
    """Convex conjugate sup_k { p*k - phi(k) } over a bounded domain.

    `potential` is either DecoderParams (evaluated at the given context) or
    any convex callable phi(k). Dense-grid maximization refined by ternary
    search (the objective is concave since phi is convex). A maximizer at
    the domain boundary means the true conjugate lives outside the domain;
    a truncation warning is emitted in that case.
    """
    lo, hi = float(k_domain[0]), float(k_domain[1])
    if not (hi > lo):
        raise DomainError("k_domain must be a nonempty interval")
    if isinstance(potential, DecoderParams):
        ctx = np.atleast_1d(np.asarray(context, dtype=float))

        def phi_vec(ks):
            vals, _ = icnn_forward(potential, ks, np.tile(ctx, (len(ks), 1)))
            return vals

    else:

        def phi_vec(ks):
            return np.array([float(potential(k)) for k in ks])

    ks = np.linspace(lo, hi, n_grid)
    obj = p * ks - phi_vec(ks)
    j = int(np.argmax(obj))
    if j in (0, n_grid - 1):
        warnings.warn("conjugate maximizer at domain boundary; value is truncated", RuntimeWarning)
        return float(obj[j])
    a, b = ks[j - 1], ks[j + 1]

    def f(k):
        return p * k - float(phi_vec(np.array([k]))[0])

    for _ in range(refine_iters):
        m1 = a + (b - a) / 3.0
        m2 = b - (b - a) / 3.0
        if f(m1) < f(m2):
            a = m1
        else:
            b = m2
    return f(0.5 * (a + b))


def bl_density(surface: PriceSurface, ell: int) -> np.ndarray:
    """Implied density at interior strikes from discrete call curvature:
    f(K_i) = e^{rT} (C_{i-1} - 2 C_i + C_{i+1}) / ((K_{i+1}-K_i)(K_i-K_{i-1}))."""
    grid = surface.grid
    strikes = grid.strikes_per_maturity[ell]
    if len(strikes) < 3:
        raise DomainError("need at least 3 strikes for a density")
    c = surface.calls[ell]
    if not np.all(surface.mask[ell]):
        raise DomainError("density needs a fully observed maturity row")
    num = c[:-2] - 2.0 * c[1:-1] + c[2:]
    den = (strikes[2:] - strikes[1:-1]) * (strikes[1:-1] - strikes[:-2])
    return np.exp(grid.rate * grid.maturities[ell]) * num / den


@dataclass
class ArbResiduals:
    """Nonnegative static-arbitrage defect fields.

    monotonicity[l][t]: positive part of the call slope on strike pair t
    convexity[l][i]: positive part of the slope decrease at interior strike i
    calendar[l][j]: positive part of the price drop from maturity l to l+1
    bounds[l][j]: price-range violations against [0, S0]
    """

    monotonicity: np.ndarray
    convexity: np.ndarray
    calendar: np.ndarray
    bounds: np.ndarray

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [self.monotonicity.ravel(), self.convexity.ravel(), self.calendar.ravel(), self.bounds.ravel()]
        )

    def max_violation(self) -> float:
        flat = self.flatten()
        return float(flat.max()) if flat.size else 0.0


def arb_residual_arrays(calls: np.ndarray, strikes: np.ndarray, spot: float,
                        calendar_decreasing: bool = False) -> ArbResiduals:
    """Residuals for a rectangular call matrix (rows = maturities).

    calendar_decreasing flips the audited calendar direction (prices
    nonincreasing in maturity); the default is the standard nondecreasing
    condition.
    """
    c = np.asarray(calls, dtype=float)
    ks = np.asarray(strikes, dtype=float)
    dk = np.diff(ks)
    slopes = np.diff(c, axis=1) / dk
    mono = np.maximum(slopes, 0.0)
    conv = np.maximum(-(slopes[:, 1:] - slopes[:, :-1]), 0.0)
    if c.shape[0] > 1:
        cal_diff = c[1:] - c[:-1]
        cal = np.maximum(cal_diff if calendar_decreasing else -cal_diff, 0.0)
    else:
        cal = np.zeros((0, c.shape[1]))
    bounds = np.maximum(-c, 0.0) + np.maximum(c - spot, 0.0)
    return ArbResiduals(mono, conv, cal, bounds)


def static_arb_residuals(surface: PriceSurface, calendar_decreasing: bool = False) -> ArbResiduals:
    """Finite-difference static-arbitrage residuals of a call surface.

    Requires a fully observed uniform-grid surface (the model pipeline only
    scores decoded or oracle surfaces, which are both).
    """
    if not surface.grid.is_uniform:
        raise DomainError("residuals require a uniform strike grid")
    if surface.n_observed() != surface.n_cells():
        raise DomainError("residuals require a fully observed surface")
    return arb_residual_arrays(
        surface.calls_matrix(), surface.grid.strikes_per_maturity[0], surface.grid.spot,
        calendar_decreasing=calendar_decreasing,
    )


def pava(y: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """L2 projection onto nondecreasing sequences (pooled adjacent violators)."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    if weights is None:
        weights = np.ones(n)
    w = np.asarray(weights, dtype=float)
    means: list[float] = []
    wsum: list[float] = []
    count: list[int] = []
    for i in range(n):
        means.append(y[i])
        wsum.append(w[i])
        count.append(1)
        while len(means) >= 2 and means[-2] > means[-1]:
            m2, w2, c2 = means.pop(), wsum.pop(), count.pop()
            m1, w1, c1 = means.pop(), wsum.pop(), count.pop()
            wt = w1 + w2
            means.append((m1 * w1 + m2 * w2) / wt)
            wsum.append(wt)
            count.append(c1 + c2)
    out = np.empty(n)
    pos = 0
    for m, c in zip(means, count):
        out[pos : pos + c] = m
        pos += c
    return out


def _convexity_rows(strikes: np.ndarray):
    """Sparse slope-difference constraint rows d_i . x >= 0."""
    dk = np.diff(strikes)
    rows = []
    for i in range(1, len(strikes) - 1):
        dl, dr = dk[i - 1], dk[i]
        coef = np.array([1.0 / dl, -1.0 / dl - 1.0 / dr, 1.0 / dr])
        rows.append(((i - 1, i, i + 1), coef, float(coef @ coef)))
    return rows


def _project_convex_1d(c: np.ndarray, strikes: np.ndarray, tol: float, max_cycles: int = 2000) -> np.ndarray:
    """Exact (to tol) L2 projection of one maturity slice onto convexity,
    by Hildreth coordinate ascent on the constraint multipliers."""
    x = np.asarray(c, dtype=float).copy()
    rows = _convexity_rows(strikes)
    if not rows:
        return x
    lam = np.zeros(len(rows))
    for _ in range(max_cycles):
        max_move = 0.0
        for r, ((i0, i1, i2), coef, nrm2) in enumerate(rows):
            g = coef[0] * x[i0] + coef[1] * x[i1] + coef[2] * x[i2]
            new_lam = max(0.0, lam[r] - g / nrm2)
            step = new_lam - lam[r]
            if step != 0.0:
                x[i0] += step * coef[0]
                x[i1] += step * coef[1]
                x[i2] += step * coef[2]
                lam[r] = new_lam
                max_move = max(max_move, abs(step) * np.sqrt(nrm2))
        if max_move <= tol:
            break
    return x


def _surface_violation(calls: np.ndarray, strikes: np.ndarray) -> float:
    dk = np.diff(strikes)
    slopes = np.diff(calls, axis=1) / dk
    conv = np.maximum(-(slopes[:, 1:] - slopes[:, :-1]), 0.0)
    cal = np.maximum(-(calls[1:] - calls[:-1]), 0.0) if calls.shape[0] > 1 else np.zeros(1)
    return float(max(conv.max(initial=0.0), cal.max(initial=0.0)))


def noarb_project(
    surface: PriceSurface, tol: float = 1e-8, max_rounds: int = 1000
) -> tuple[PriceSurface, dict]:
    """Least-squares nearest surface that is convex in strike and
    nondecreasing in maturity.

    Alternates the per-maturity convexity projection with per-strike pooled
    adjacent violators, with Dykstra corrections carried between rounds so
    the limit is the projection onto the intersection rather than merely a
    feasible point. Puts of the output are rebuilt by parity.
    """
    grid = surface.grid
    if not grid.is_uniform:
        raise DomainError("projection requires a uniform strike grid")
    if surface.n_observed() != surface.n_cells():
        raise DomainError("projection requires a fully observed surface")
    strikes = grid.strikes_per_maturity[0]
    x = surface.calls_matrix().copy()
    L, M = x.shape
    p = np.zeros_like(x)
    q = np.zeros_like(x)
    inner_tol = min(tol * 1e-2, 1e-10)
    viol = np.inf
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        xp = x + p
        y = np.vstack([_project_convex_1d(xp[ell], strikes, inner_tol) for ell in range(L)])
        p = xp - y
        yq = y + q
        z = np.column_stack([pava(yq[:, j]) for j in range(M)])
        q = yq - z
        delta = float(np.max(np.abs(z - x)))
        x = z
        viol = _surface_violation(x, strikes)
        if viol <= tol and delta <= tol:
            break
    else:
        raise ProjectionFailure(
            f"no-arbitrage projection did not converge in {max_rounds} rounds "
            f"(violation {viol:.3e})",
            final_violation=viol,
        )
    T = grid.maturities[:, None]
    puts = x - grid.spot * np.exp(-grid.dividend_yield * T) + np.exp(-grid.rate * T) * strikes[None, :]
    projected = PriceSurface.from_matrices(grid, x, puts, require_nonnegative=False)
    return projected, {"projection_rounds": rounds, "final_violation": viol}
