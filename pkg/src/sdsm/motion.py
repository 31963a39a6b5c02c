"""Correlated m-particle diffusion and killed-semigroup Monte Carlo.

Particles share a common noise whose spatial covariance is the interaction
autocorrelation rho; each also carries an individual noise of strength c.
The joint increment covariance is Sigma_ii = a(x_i), Sigma_ij = rho(x_i-x_j).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from sdsm.kernels import ModelSpec


class NumericalDegeneracyError(RuntimeError):
    """Covariance factorization failed even after the jitter ladder."""


@dataclass
class StepperConfig:
    dt: float = 1e-3
    jitter_ladder: tuple = (1e-12, 1e-10, 1e-8)
    scheme: str = "euler-maruyama"
    factor: str = "cholesky"       # "cholesky" or "sqrt" (symmetric psd root)


@dataclass
class FactorStats:
    """Counters surfaced in run metadata."""
    cholesky_calls: int = 0
    psd_projections: int = 0
    jitter_escalations: int = 0

    def merge(self, other: "FactorStats") -> None:
        self.cholesky_calls += other.cholesky_calls
        self.psd_projections += other.psd_projections
        self.jitter_escalations += other.jitter_escalations


def covariance_matrix(spec: ModelSpec, pos: np.ndarray) -> np.ndarray:
    """Joint increment covariance of the m-particle motion at `pos`."""
    pos = np.asarray(pos, dtype=float)
    m = pos.shape[0]
    diffs = pos[:, None] - pos[None, :]
    cov = np.asarray(spec.rho(diffs), dtype=float).reshape(m, m)
    cvals = np.asarray(spec.c(pos), dtype=float)
    np.fill_diagonal(cov, cvals * cvals + spec.rho0)
    return cov

def _sym_psd_root(cov: np.ndarray, symmetric: bool = False) -> Optional[np.ndarray]:
    w, v = np.linalg.eigh(cov)
    wmax = max(float(w[-1]), 0.0)
    if w[0] < -1e-10 * max(wmax, 1.0):
        return None
    # zero out the numerically-degenerate directions entirely so exact
    # rank deficiency (coincident particles) yields exactly equal increments
    w = np.where(w < 1e-12 * max(wmax, 1e-300), 0.0, w)
    root = v * np.sqrt(w)[None, :]
    if symmetric:
        # V sqrt(L) V^T commutes with coordinate permutations of cov
        return root @ v.T
    return root


def psd_factor(cov: np.ndarray, cfg: StepperConfig,
               stats: Optional[FactorStats] = None) -> np.ndarray:
    """Square root L of the covariance with L L^T = cov.

    Cholesky first; on failure (coincident particles make cov exactly
    singular) an eigenvalue psd root, which reproduces the degenerate law
    exactly; a diagonal jitter ladder remains as the last resort.
    """
    if stats is not None:
        stats.cholesky_calls += 1
    if cfg.factor == "cholesky":
        try:
            L = np.linalg.cholesky(cov)
            d = np.diagonal(L)
            # an eps-level pivot means the matrix is numerically rank
            # deficient and the factor column is noise; use the psd root
            if d.min() > 1e-7 * d.max():
                return L
        except np.linalg.LinAlgError:
            pass
    root = _sym_psd_root(cov, symmetric=(cfg.factor == "sqrt"))
    if root is not None:
        if stats is not None and cfg.factor == "cholesky":
            stats.psd_projections += 1
        return root
    for jitter in cfg.jitter_ladder:
        if stats is not None:
            stats.jitter_escalations += 1
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError:
            continue
    eigs = np.linalg.eigvalsh(cov)
    raise NumericalDegeneracyError(
        f"covariance not factorizable: m={cov.shape[0]}, "
        f"eig range [{eigs[0]:.3e}, {eigs[-1]:.3e}], "
        f"ladder={cfg.jitter_ladder}")


def step(spec: ModelSpec, pos: np.ndarray, dt: float,
         rng: np.random.Generator, cfg: Optional[StepperConfig] = None,
         stats: Optional[FactorStats] = None) -> np.ndarray:
    """One Euler step of the joint motion; the generator has no drift term."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = cfg or StepperConfig()
    pos = np.asarray(pos, dtype=float)
    z = rng.standard_normal(pos.shape[0])
    if spec.interaction.trivial:
        cvals = np.asarray(spec.c(pos), dtype=float)
        return pos + cvals * math.sqrt(dt) * z
    L = psd_factor(covariance_matrix(spec, pos), cfg, stats)
    return pos + math.sqrt(dt) * (L @ z)


def killing_rate_at(spec: ModelSpec, pos: np.ndarray) -> float:
    """b evaluated at the m-point configuration: sum of per-site tail means."""
    return float(np.sum(spec.levy.tail_mean(np.asarray(pos, dtype=float))))


def simulate_path(spec: ModelSpec, pos0: np.ndarray, duration: float,
                  stepper: Optional[StepperConfig] = None,
                  rng: Optional[np.random.Generator] = None,
                  killed: bool = False,
                  stats: Optional[FactorStats] = None) -> tuple[np.ndarray, float]:
    """Endpoint after `duration`, with the accumulated killed log-weight.

    The killing integral uses the left-point rule, so the weight for constant
    b is exact.
    """
    if duration < 0:
        raise ValueError("duration must be nonnegative")
    cfg = stepper or StepperConfig()
    rng = rng or np.random.default_rng()
    pos = np.asarray(pos0, dtype=float).copy()
    log_weight = 0.0
    if duration == 0.0:
        return pos, log_weight
    if (spec.interaction.trivial and spec.c.is_constant
            and (not killed or spec.levy.x_independent())):
        # independent constant-volatility motions: the endpoint law and the
        # constant-rate killing weight are exact in one draw
        c0 = spec.c.constant_value()
        pos = pos + c0 * math.sqrt(duration) * rng.standard_normal(pos.shape[0])
        if killed:
            log_weight = -float(spec.levy.tail_mean(0.0)) * pos.shape[0] * duration
        return pos, log_weight
    n_steps = max(1, int(math.ceil(duration / cfg.dt)))
    remaining = duration
    for _ in range(n_steps):
        h = min(cfg.dt, remaining)
        if killed:
            log_weight -= killing_rate_at(spec, pos) * h
        pos = step(spec, pos, h, rng, cfg, stats)
        remaining -= h
        if remaining <= 0:
            break
    return pos, log_weight


# ---------------------------------------------------------------------------
# Batched semigroup estimation
# ---------------------------------------------------------------------------

def _batched_factor(covs: np.ndarray, cfg: StepperConfig,
                    stats: Optional[FactorStats]) -> np.ndarray:
    try:
        if stats is not None:
            stats.cholesky_calls += 1
        return np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        out = np.empty_like(covs)
        for i in range(covs.shape[0]):
            out[i] = psd_factor(covs[i], cfg, stats)
        return out


def batched_paths(spec: ModelSpec, starts: np.ndarray, duration: float,
                  cfg: StepperConfig, rng: np.random.Generator,
                  killed: bool = False,
                  stats: Optional[FactorStats] = None) -> tuple[np.ndarray, np.ndarray]:
    """Advance a (paths, m) block of independent m-particle configurations.

    Returns endpoints and per-path killed log-weights. All paths share the
    step loop; each path uses its own noise.
    """
    pos = np.array(starts, dtype=float)
    npaths, m = pos.shape
    log_w = np.zeros(npaths)
    if duration == 0.0:
        return pos, log_w
    n_steps = max(1, int(math.ceil(duration / cfg.dt)))
    remaining = duration
    diagonal = spec.interaction.trivial
    for _ in range(n_steps):
        h = min(cfg.dt, remaining)
        if killed:
            tm = spec.levy.tail_mean(pos)
            log_w -= np.sum(np.atleast_2d(tm), axis=1) * h
        z = rng.standard_normal((npaths, m))
        if diagonal or m == 1:
            cvals = np.asarray(spec.c(pos), dtype=float).reshape(npaths, m)
            scale = np.sqrt(cvals * cvals + spec.rho0)
            pos = pos + math.sqrt(h) * scale * z
        else:
            diffs = pos[:, :, None] - pos[:, None, :]
            covs = np.asarray(spec.rho(diffs), dtype=float)
            cvals = np.asarray(spec.c(pos), dtype=float).reshape(npaths, m)
            ii = np.arange(m)
            covs[:, ii, ii] = cvals * cvals + spec.rho0
            L = _batched_factor(covs, cfg, stats)
            pos = pos + math.sqrt(h) * np.einsum("pij,pj->pi", L, z)
        remaining -= h
        if remaining <= 0:
            break
    return pos, log_w


def semigroup_mc(spec: ModelSpec, m: int, f: Callable, t: float, x,
                 n_paths: int, killed: bool = False,
                 rng: Optional[np.random.Generator] = None,
                 stepper: Optional[StepperConfig] = None) -> tuple[float, float]:
    """Monte Carlo estimate of the m-particle semigroup applied to f at x.

    f must accept a (paths, m) array and return a length-paths vector.
    Returns (estimate, standard error).
    """
    rng = rng or np.random.default_rng()
    cfg = stepper or StepperConfig()
    x = np.asarray(x, dtype=float).reshape(1, m)
    starts = np.repeat(x, n_paths, axis=0)
    ends, log_w = batched_paths(spec, starts, t, cfg, rng, killed=killed)
    vals = np.asarray(f(ends), dtype=float) * np.exp(log_w)
    est = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
    return est, se
