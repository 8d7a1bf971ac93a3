"""
Risk-neutral scan operator: latent recursion over maturities, the discrete
Green kernel it unrolls into, the strike-normalized measure gate, the
discounted price functional and the martingale defect of the gate-implied
forward.

Indexing convention (0-based): states[0] is the initial latent state;
transitions[i] propagates the state across (T_{i-1}, T_i] (with T_{-1} = 0),
injections[i] feeds the maturity-i features into the state read at T_i:

    states[i+1] = transitions[i] @ states[i] + injections[i] @ u[i]
    outputs[i]  = readouts[i] @ states[i+1]

so the kernel mapping u[s] to the state at maturity ell is
injections[ell] for s == ell and transitions[ell] ... transitions[s+1] @
injections[s] for s < ell. Runtime of the scan is O(L m^2) with dense
transitions (the diagonal-plus-rank-one constructor below restores the
O(L m) profile when wanted).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .grids import DomainError, MarketGrid, PriceSurface, strike_spacings
from .mathutil import softplus
from .qalign import GuardConfig, spectral_norm


@dataclass
class OperatorParams:
    """Per-maturity transition/injection/readout maps plus the measure gate.

    transitions: (L, m, m); injections: (L, m, d) storing the composed
    injection-times-embedding map; readouts: (L, p, m); gate_raw: (L, M)
    pre-activation of the measure gate on a uniform strike grid.
    """

    rank: int
    transitions: np.ndarray
    injections: np.ndarray
    readouts: np.ndarray
    gate_raw: np.ndarray

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.injections = np.asarray(self.injections, dtype=float)
        self.readouts = np.asarray(self.readouts, dtype=float)
        self.gate_raw = np.asarray(self.gate_raw, dtype=float)
        if self.rank < 1:
            raise DomainError("rank must be >= 1")
        L, m, m2 = self.transitions.shape
        if m != m2 or m != self.rank:
            raise DomainError("transitions must be (L, m, m) with m == rank")
        if self.injections.shape[0] != L or self.injections.shape[1] != m:
            raise DomainError("injections must be (L, m, d)")
        if self.readouts.shape[0] != L or self.readouts.shape[2] != m:
            raise DomainError("readouts must be (L, p, m)")
        if self.gate_raw.shape[0] != L:
            raise DomainError("gate_raw must have one row per maturity")
        for arr in (self.transitions, self.injections, self.readouts, self.gate_raw):
            if not np.all(np.isfinite(arr)):
                raise DomainError("operator parameters must be finite")

    @property
    def n_maturities(self) -> int:
        return self.transitions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.injections.shape[2]

    @property
    def readout_dim(self) -> int:
        return self.readouts.shape[1]


@dataclass
class LatentTrajectory:
    """Scan results: L+1 latent states and L readout vectors."""

    states: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        if self.states.shape[0] != self.outputs.shape[0] + 1:
            raise DomainError("need exactly one more state than outputs")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.outputs))):
            raise DomainError("trajectory must be finite")


def transitions_from_diag_lowrank(diags: np.ndarray, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Dense transitions from a diagonal-plus-rank-one parameterization.

    diags: (L, m) diagonal entries; us, vs: (L, m) rank-one factors.
    """
    diags = np.asarray(diags, dtype=float)
    us = np.asarray(us, dtype=float)
    vs = np.asarray(vs, dtype=float)
    L, m = diags.shape
    out = np.zeros((L, m, m))
    for i in range(L):
        out[i] = np.diag(diags[i]) + np.outer(us[i], vs[i])
    return out


def scan_forward(params: OperatorParams, inputs: np.ndarray, h0: np.ndarray | None = None) -> LatentTrajectory:
    """Run the latent recursion over all maturities.

    inputs: (L, d) one feature vector per maturity; h0 defaults to zero.
    """
    inputs = np.asarray(inputs, dtype=float)
    L = params.n_maturities
    m = params.rank
    if inputs.shape != (L, params.feature_dim):
        raise DomainError(f"inputs must be (L, d) = ({L}, {params.feature_dim})")
    if not np.all(np.isfinite(inputs)):
        raise DomainError("inputs must be finite")
    if h0 is None:
        h0 = np.zeros(m)
    h0 = np.asarray(h0, dtype=float)
    if h0.shape != (m,):
        raise DomainError("h0 must be an m-vector")
    states = np.zeros((L + 1, m))
    outputs = np.zeros((L, params.readout_dim))
    states[0] = h0
    for i in range(L):
        states[i + 1] = params.transitions[i] @ states[i] + params.injections[i] @ inputs[i]
        outputs[i] = params.readouts[i] @ states[i + 1]
    return LatentTrajectory(states, outputs)


def green_kernel(params: OperatorParams, ell: int, s: int) -> np.ndarray:
    """Kernel mapping the maturity-s features to the maturity-ell state.

    Causal: s must not exceed ell. Equals injections[ell] at s == ell and
    the time-ordered transition product applied to injections[s] otherwise.
    """
    L = params.n_maturities
    if not (0 <= ell < L) or not (0 <= s < L):
        raise DomainError("indices out of range")
    if s > ell:
        raise DomainError("green kernel is causal: need s <= ell")
    G = params.injections[s].copy()
    for j in range(s + 1, ell + 1):
        G = params.transitions[j] @ G
    return G


def green_sum(params: OperatorParams, ell: int, cfg: GuardConfig | None = None) -> float:
    """Sum of spectral norms of the Green kernels feeding maturity ell.

    The running stability diagnostic: finite and bounded across ell once the
    transitions respect the safety projection.
    """
    cfg = cfg or GuardConfig()
    if not (0 <= ell < params.n_maturities):
        raise DomainError("index out of range")
    total = spectral_norm(params.injections[ell], cfg)
    prod = None  # transitions[ell] @ ... @ transitions[s+1], built incrementally
    for s in range(ell - 1, -1, -1):
        prod = params.transitions[ell].copy() if prod is None else prod @ params.transitions[s + 1]
        total += spectral_norm(prod @ params.injections[s], cfg)
    return float(total)


def measure_gate(params: OperatorParams, grid: MarketGrid) -> np.ndarray:
    """Strike-normalized gate density w(K, T) with sum_j w[l, j] dK_j = 1.

    Softplus squashing followed by per-maturity normalization against the
    quadrature spacings. Requires a uniform strike grid (the model pipeline
    always runs on one).
    """
    if not grid.is_uniform:
        raise DomainError("measure gate requires a uniform strike grid")
    strikes = grid.strikes_per_maturity[0]
    if params.gate_raw.shape != (grid.n_maturities, len(strikes)):
        raise DomainError("gate_raw shape does not match grid")
    dk = strike_spacings(strikes)
    sp = softplus(params.gate_raw)
    denom = sp @ dk
    if np.any(denom <= 0.0) or not np.all(np.isfinite(denom)):
        raise DomainError("degenerate gate row: softplus mass vanished")
    return sp / denom[:, None]


def price_functional(w: np.ndarray, payoff: np.ndarray, grid: MarketGrid, ell: int) -> float:
    """Quadrature of the payoff against the gate density at maturity ell:
    sum_j payoff[j] * w[ell, j] * dK_j."""
    strikes = grid.strikes_per_maturity[0 if grid.is_uniform else ell]
    payoff = np.asarray(payoff, dtype=float)
    if payoff.shape != (len(strikes),):
        raise DomainError("payoff shape does not match strike list")
    if not np.all(np.isfinite(payoff)):
        raise DomainError("payoff must be finite")
    dk = strike_spacings(strikes)
    return float(np.sum(payoff * w[ell] * dk))


def martingale_residual(w: np.ndarray, grid: MarketGrid, ell: int) -> float:
    """Relative defect of the gate-implied forward at maturity ell:
    |sum_j K_j w[l, j] dK_j - F_T| / F_T."""
    strikes = grid.strikes_per_maturity[0 if grid.is_uniform else ell]
    f_gate = price_functional(w, strikes, grid, ell)
    f = grid.spot * float(np.exp((grid.rate - grid.dividend_yield) * grid.maturities[ell]))
    return abs(f_gate - f) / f


@dataclass
class RepresenterRecord:
    """Audit record for the coverage-deficit fallback."""

    enter_representer_at_step: int
    coverage_at_trigger: float


def _maturity_similarity(params: OperatorParams) -> np.ndarray:
    """Cosine similarity between maturities in Green-kernel feature space."""
    L = params.n_maturities
    feats = np.zeros((L, L))
    for ell in range(L):
        for s in range(ell + 1):
            feats[ell, s] = np.linalg.norm(green_kernel(params, ell, s))
    sim = np.eye(L)
    norms = np.linalg.norm(feats, axis=1)
    for a in range(L):
        for b in range(L):
            if norms[a] > 0 and norms[b] > 0:
                sim[a, b] = float(feats[a] @ feats[b] / (norms[a] * norms[b]))
            elif a == b:
                sim[a, b] = 1.0
    return sim


def representer_fallback(
    surface: PriceSurface, params: OperatorParams, step: int = 0
) -> tuple[PriceSurface, RepresenterRecord | None]:
    """Fill masked cells by kernel-weighted interpolation over observed cells.

    Weights combine the Green-kernel similarity between maturities with a
    Gaussian kernel in strike. A surface with no masked cells is returned
    unchanged with no trigger record. A maturity row with no observed cell
    at all cannot be recovered.
    """
    grid = surface.grid
    L = grid.n_maturities
    n_masked = surface.n_cells() - surface.n_observed()
    if n_masked == 0:
        return surface, None
    for ell in range(L):
        if not surface.mask[ell].any():
            raise DomainError(f"maturity row {ell} has no observed cells; coverage unrecoverable")
    coverage = surface.observed_fraction()
    sim = _maturity_similarity(params)
    all_strikes = np.concatenate(grid.strikes_per_maturity)
    spacing = np.median(np.diff(np.unique(all_strikes)))
    bw = max(2.0 * spacing, 1e-12)

    obs_cells = []  # (ell, strike, call, put)
    for ell in range(L):
        ks = grid.strikes_per_maturity[ell]
        for j in np.nonzero(surface.mask[ell])[0]:
            obs_cells.append((ell, ks[j], surface.calls[ell][j], surface.puts[ell][j]))
    obs_ell = np.array([c[0] for c in obs_cells], dtype=int)
    obs_k = np.array([c[1] for c in obs_cells])
    obs_c = np.array([c[2] for c in obs_cells])
    obs_p = np.array([c[3] for c in obs_cells])

    calls = [c.copy() for c in surface.calls]
    puts = [p.copy() for p in surface.puts]
    mask = [np.ones_like(m, dtype=bool) for m in surface.mask]
    for ell in range(L):
        ks = grid.strikes_per_maturity[ell]
        for j in np.nonzero(~surface.mask[ell])[0]:
            w = sim[ell, obs_ell] * np.exp(-0.5 * ((ks[j] - obs_k) / bw) ** 2)
            total = w.sum()
            if total <= 0:
                raise DomainError("interpolation weights vanished")
            calls[ell][j] = float(w @ obs_c / total)
            puts[ell][j] = float(w @ obs_p / total)
    filled = PriceSurface(grid, tuple(calls), tuple(puts), tuple(mask),
                          require_nonnegative=surface.require_nonnegative)
    return filled, RepresenterRecord(step, coverage)
