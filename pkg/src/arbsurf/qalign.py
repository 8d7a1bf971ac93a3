"""
Spectral-norm estimation, projection of linear maps onto a spectral ball,
and the transition-matrix safety projection (spectral radius x time step
kept below 1 - epsilon), with audit counters.

All estimators are deterministic: power iterations start from a fixed
vector (normalized all-ones, plus a tiny ramp for the radius estimator so
the start is never exactly orthogonal to the dominant eigenspace).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import DomainError


@dataclass
class GuardConfig:
    """Projection parameters.

    tau: spectral-ball radius in (0, 1]
    epsilon: safety margin in (0, 1); transitions are kept at rho*dt <= 1-eps
    power_iters: iteration budget for the norm/radius estimators
    power_tol: relative tolerance for early termination
    """

    tau: float = 1.0
    epsilon: float = 0.1
    power_iters: int = 50
    power_tol: float = 1e-9

    def __post_init__(self):
        if not (0.0 < self.tau <= 1.0):
            raise DomainError("tau must be in (0, 1]")
        if not (0.0 < self.epsilon < 1.0):
            raise DomainError("epsilon must be in (0, 1)")
        if self.power_iters < 1:
            raise DomainError("power_iters must be >= 1")


@dataclass
class GuardLog:
    """Counters emitted verbatim into the run log.

    hits and distance are sums, max_rho_dt is a max; merging logs from
    parallel workers is associative in those operations. Within one run the
    log has a single writer.
    """

    spec_guard_hits: int = 0
    projection_distance: float = 0.0
    max_rho_dt: float = 0.0
    lambda_lip_before: float = float("nan")
    lambda_lip_after: float = float("nan")
    clamp_hits: int = field(default=0)


def spectral_norm(W: np.ndarray, cfg: GuardConfig | None = None, v0: np.ndarray | None = None) -> float:
    """Largest singular value of W by power iteration on W^T W.

    Runs at most cfg.power_iters iterations, stopping early once the
    estimate moves by less than cfg.power_tol relatively. Exact 0 for the
    zero matrix.
    """
    cfg = cfg or GuardConfig()
    W = np.asarray(W, dtype=float)
    if W.ndim != 2:
        raise DomainError("spectral_norm expects a matrix")
    if not np.all(np.isfinite(W)):
        raise DomainError("matrix must be finite")
    if not np.any(W):
        return 0.0
    n = W.shape[1]
    v = np.ones(n) / np.sqrt(n) if v0 is None else v0 / np.linalg.norm(v0)
    sigma = 0.0
    for _ in range(cfg.power_iters):
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            # start vector lies in the null space; perturb deterministically
            v = v + np.linspace(1e-6, 2e-6, n)
            v /= np.linalg.norm(v)
            continue
        v_new = W.T @ (u / nu)
        sigma_new = np.linalg.norm(v_new)
        if sigma_new == 0.0:
            return 0.0
        v = v_new / sigma_new
        if abs(sigma_new - sigma) <= cfg.power_tol * max(sigma_new, 1e-300):
            return float(sigma_new)
        sigma = sigma_new
    return float(sigma)


def _power_norm_step(W: np.ndarray, v: np.ndarray) -> tuple[float, np.ndarray]:
    """One persisted-vector power step; returns (sigma estimate, new v)."""
    u = W @ v
    nu = np.linalg.norm(u)
    if nu == 0.0:
        return 0.0, v
    v_new = W.T @ (u / nu)
    s = np.linalg.norm(v_new)
    if s == 0.0:
        return 0.0, v
    return float(s), v_new / s


def spectral_radius(A: np.ndarray, cfg: GuardConfig | None = None) -> float:
    """Dominant-eigenvalue modulus of a square matrix.

    Power iteration refined with a two-vector Krylov Rayleigh quotient so
    that complex-conjugate dominant pairs are resolved (their modulus is the
    max root modulus of the 2x2 projected block, computed by the quadratic
    formula). Deflation is not used.
    """
    cfg = cfg or GuardConfig()
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError("spectral_radius expects a square matrix")
    n = A.shape[0]
    if not np.any(A):
        return 0.0
    if n == 1:
        return abs(float(A[0, 0]))
    x = np.ones(n) + np.linspace(0.0, 1e-3, n)
    x /= np.linalg.norm(x)
    rho = 0.0
    for _ in range(max(cfg.power_iters, 8)):
        b1 = x
        w1 = A @ b1
        h11 = float(b1 @ w1)
        r = w1 - h11 * b1
        h21 = float(np.linalg.norm(r))
        if h21 <= 1e-14 * max(abs(h11), 1.0):
            rho_new = abs(h11)
        else:
            b2 = r / h21
            w2 = A @ b2
            h12 = float(b1 @ w2)
            h22 = float(b2 @ w2)
            tr = h11 + h22
            det = h11 * h22 - h12 * h21
            disc = tr * tr - 4.0 * det
            if disc >= 0.0:
                sq = np.sqrt(disc)
                rho_new = max(abs((tr + sq) / 2.0), abs((tr - sq) / 2.0))
            else:
                # conjugate pair: |lambda|^2 = det
                rho_new = float(np.sqrt(det))
        nw = np.linalg.norm(w1)
        if nw == 0.0:
            return 0.0
        x = w1 / nw
        if abs(rho_new - rho) <= cfg.power_tol * max(rho_new, 1e-300):
            return float(rho_new)
        rho = rho_new
    return float(rho)


def lipschitz_project(W: np.ndarray, cfg: GuardConfig | None = None) -> tuple[np.ndarray, float]:
    """Scale W onto the spectral ball of radius tau.

    Returns (W_hat, distance) with W_hat = tau / max(||W||_2, tau) * W and
    distance = ||W - W_hat||_F. Points inside the ball are unchanged.
    """
    cfg = cfg or GuardConfig()
    W = np.asarray(W, dtype=float)
    sigma = spectral_norm(W, cfg)
    if sigma <= cfg.tau:
        return W, 0.0
    W_hat = (cfg.tau / sigma) * W
    return W_hat, float(np.linalg.norm(W - W_hat))


def cfl_indicator(A: np.ndarray, dt: float, cfg: GuardConfig | None = None) -> float:
    """Safety quantity rho(A) * dt (spectral radius; equals ||A||_2 dt for symmetric A)."""
    if not (dt > 0):
        raise DomainError("dt must be positive")
    return spectral_radius(A, cfg) * dt


def spec_guard_project(
    A: np.ndarray, dt: float, cfg: GuardConfig, log: GuardLog
) -> np.ndarray:
    """Shrink A when rho(A) dt exceeds 1 - epsilon (strict trigger).

    The minimal Frobenius-distance correction is the scaling
    A <- A * (1 - eps) / (rho(A) dt). Counters are updated in both branches
    (max_rho_dt tracks the post-projection indicator).
    """
    if not (dt > 0):
        raise DomainError("dt must be positive")
    A = np.asarray(A, dtype=float)
    rho_dt = spectral_radius(A, cfg) * dt
    if rho_dt > 1.0 - cfg.epsilon:
        scale = (1.0 - cfg.epsilon) / rho_dt
        A_hat = scale * A
        log.spec_guard_hits += 1
        log.projection_distance += float(np.linalg.norm(A - A_hat))
        log.max_rho_dt = max(log.max_rho_dt, rho_dt * scale)
        return A_hat
    log.max_rho_dt = max(log.max_rho_dt, rho_dt)
    return A


def global_lip_surrogate(maps, green_bound: float, cfg: GuardConfig | None = None) -> float:
    """Product of spectral norms of all linear maps, times the kernel-sum bound.

    The closed-form constant of the kernel-summability bound is not
    computable, so callers pass the empirically measured Green sum as
    `green_bound`; the result is what gets logged as the before/after
    Lipschitz surrogate.
    """
    cfg = cfg or GuardConfig()
    prod = 1.0
    for W in maps:
        prod *= spectral_norm(W, cfg)
    return float(prod * green_bound)
