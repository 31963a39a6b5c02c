"""Per-site offspring distributions and their scaling certification.

The offspring law at mass scale k mixes two generating functions: a critical
component carrying the diffusive and small-jump branching, and a pure-death
component carrying the mass-killing rate of the killed process. Probabilities
are extracted analytically from the series coefficients; tail mass beyond the
truncation order is folded into the top bucket.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import poisson

from sdsm.kernels import ConfigurationError, ModelSpec

DEFAULT_J_MAX = 40
REMAINDER_HARD_LIMIT = 1e-6
NORM_B_EPS = 1e-14
FD_DERIV_STEP = 1e-6


@dataclass(frozen=True)
class OffspringLaw:
    """Offspring-count distribution of one branch event at a given site."""

    x: float
    k: int
    lambda_k: float
    probs: np.ndarray
    truncation_remainder: float
    components: tuple[float, float]   # (lambda_1k, lambda_2k)
    cum: np.ndarray

    def mean(self) -> float:
        return float(np.dot(np.arange(len(self.probs)), self.probs))

    def second_factorial_scale(self) -> float:
        """lambda_k * E[j(j-1)] / k, the curvature seen by the scaling limit."""
        j = np.arange(len(self.probs))
        return float(self.lambda_k * np.dot(j * (j - 1), self.probs) / self.k)


@dataclass(frozen=True)
class ScalingReport:
    k_values: tuple[int, ...]
    sup_errors: tuple[float, ...]
    derivative_errors: tuple[float, ...]


def sup_sigma(spec: ModelSpec) -> float:
    return spec.sup_on_grid(spec.sigma)


def norm_b(spec: ModelSpec) -> float:
    """Sup over the x-grid of the per-site killing rate b(x)."""
    return spec.sup_levy(lambda x: spec.levy.tail_mean(x))


def psi_small(spec: ModelSpec, x, z):
    """sigma(x) z^2 / 2 plus the compensated small-jump integral."""
    zv = np.asarray(z, dtype=float)
    return 0.5 * spec.sigma(x) * zv * zv + spec.levy.compensated_small(x, zv)


def dz_psi_small(spec: ModelSpec, x, z):
    """z-derivative of psi_small: sigma z + integral of xi(1 - e^{-z xi})."""
    return spec.sigma(x) * z + spec.levy.small_linear_decay(x, z)


def lambda1_of_k(spec: ModelSpec, k: int) -> float:
    """Rate of the critical component: 1 + k sup(sigma) + sup of the
    small-jump linear decay, with the sups taken over the configured x-grid."""
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    decay_sup = spec.sup_levy(lambda x: spec.levy.small_linear_decay(x, k))
    return 1.0 + k * sup_sigma(spec) + decay_sup


def g1_eval(spec: ModelSpec, k: int, x: float, z) -> float:
    """Generating function of the critical component; fixes g1(x, 1) = 1."""
    zv = np.asarray(z, dtype=float)
    if np.any((zv < 0) | (zv > 1)):
        raise ConfigurationError("z must lie in [0, 1]")
    lam1 = lambda1_of_k(spec, k)
    out = zv + psi_small(spec, x, k * (1.0 - zv)) / (k * lam1)
    return float(out) if np.ndim(out) == 0 else out


def g2_eval(spec: ModelSpec, x: float, z, nb: Optional[float] = None):
    """Generating function of the pure-death component: z + b(x)(1-z)/||b||."""
    nb = norm_b(spec) if nb is None else nb
    zv = np.asarray(z, dtype=float)
    out = zv + spec.levy.tail_mean(x) * (1.0 - zv) / nb
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class BranchingScheme:
    """Precomputed mixture data for one (spec, k) pair."""

    spec: ModelSpec
    k: int
    lambda1: float
    lambda2: float
    psi1_trivial: bool     # no sigma and no small-jump mass anywhere

    @staticmethod
    def build(spec: ModelSpec, k: int) -> "BranchingScheme":
        lam2 = norm_b(spec)
        if lam2 < NORM_B_EPS:
            lam2 = 0.0
        trivial = (sup_sigma(spec) == 0.0
                   and not spec.levy.has_small_part())
        return BranchingScheme(spec=spec, k=k, lambda1=lambda1_of_k(spec, k),
                               lambda2=lam2, psi1_trivial=trivial)

    @property
    def lambda_k(self) -> float:
        # when the critical component is an exact identity and killing is
        # present, the no-op component is dropped: same process law, fewer
        # events
        if self.psi1_trivial and self.lambda2 > 0.0:
            return self.lambda2
        return self.lambda1 + self.lambda2

    def mixture_weights(self) -> tuple[float, float]:
        if self.psi1_trivial and self.lambda2 > 0.0:
            return 0.0, 1.0
        lam = self.lambda_k
        return self.lambda1 / lam, self.lambda2 / lam

    def gk(self, x: float, z):
        w1, w2 = self.mixture_weights()
        zv = np.asarray(z, dtype=float)
        out = np.zeros_like(zv, dtype=float)
        if w1 > 0.0:
            out = out + w1 * g1_eval(self.spec, self.k, x, zv)
        if w2 > 0.0:
            out = out + w2 * g2_eval(self.spec, x, zv, nb=self.lambda2)
        if w1 == 0.0 and w2 == 0.0:
            out = zv.astype(float)
        return float(out) if np.ndim(out) == 0 else out


def build_offspring_law(spec: ModelSpec, k: int, x: float,
                        j_max: int = DEFAULT_J_MAX,
                        scheme: Optional[BranchingScheme] = None) -> OffspringLaw:
    """Extract offspring probabilities analytically from the mixture series.

    Critical component: p0 = psi_small(x,k)/(k lam1), p1 = 1 - psi_small'(x,k)/lam1,
    and for j >= 2 the coefficients reduce to sigma at j=2 plus Poisson(k xi)
    masses of the small-jump atoms (scaled by weight/(k lam1)); the density
    part integrates the same Poisson weight. Death component: p0 = b(x)/||b||,
    p1 = 1 - b(x)/||b||. Tail mass beyond j_max folds into the top bucket.
    """
    if j_max < 2:
        raise ConfigurationError("j_max must be >= 2")
    if scheme is None:
        scheme = BranchingScheme.build(spec, k)
    w1, w2 = scheme.mixture_weights()
    probs = np.zeros(j_max + 1)

    if w1 > 0.0:
        lam1 = scheme.lambda1
        p = np.zeros(j_max + 1)
        p[0] = psi_small(spec, x, float(k)) / (k * lam1)
        p[1] = 1.0 - dz_psi_small(spec, x, float(k)) / lam1
        p[2] = spec.sigma(x) * k / (2.0 * lam1)
        js = np.arange(2, j_max + 1)
        for atom in spec.levy.atoms:
            if atom.xi < spec.levy.l:
                p[2:] += (atom.weight(x) / (k * lam1)) * poisson.pmf(js, k * atom.xi)
        if spec.levy.density is not None:
            rng = spec.levy._density_range(tail=False)
            if rng is not None:
                from scipy import integrate as _int
                lo, hi = rng
                wx = spec.levy.density.weight(x)
                for j in js:
                    val, _ = _int.quad(
                        lambda t, jj=int(j): poisson.pmf(jj, k * t) * spec.levy.density.q(t),
                        lo, hi, epsabs=spec.levy.quad_tol, limit=200)
                    p[j] += wx * val / (k * lam1)
        probs += w1 * p

    if w2 > 0.0:
        frac = spec.levy.tail_mean(x) / scheme.lambda2
        p2 = np.zeros(j_max + 1)
        p2[0] = frac
        p2[1] = 1.0 - frac
        probs += w2 * p2

    if w1 == 0.0 and w2 == 0.0:
        probs[1] = 1.0

    if probs.min() < -1e-12:
        raise RuntimeError(
            f"negative extracted probability {probs.min():.3e}: construction bug")
    probs = np.clip(probs, 0.0, None)
    remainder = max(0.0, 1.0 - float(probs.sum()))
    if remainder > REMAINDER_HARD_LIMIT:
        raise ConfigurationError(
            f"truncation remainder {remainder:.3e} exceeds {REMAINDER_HARD_LIMIT}: "
            f"j_max={j_max} too small for k={k}")
    probs[j_max] += remainder
    probs = probs / probs.sum()
    cum = np.cumsum(probs)
    cum[-1] = 1.0
    return OffspringLaw(x=float(x), k=k, lambda_k=scheme.lambda_k, probs=probs,
                        truncation_remainder=remainder,
                        components=(scheme.lambda1, scheme.lambda2), cum=cum)


def suggest_j_max(spec: ModelSpec, k: int) -> int:
    """Truncation order large enough that sub-threshold jump atoms keep
    remainder below the law invariant (Poisson tails die past k * xi)."""
    xi_max = spec.levy.sub_l_max_size()
    if xi_max == 0.0:
        return DEFAULT_J_MAX
    mean = k * xi_max
    return max(DEFAULT_J_MAX, int(math.ceil(mean + 12.0 * math.sqrt(mean) + 20)))


def psi_k_eval(spec: ModelSpec, k: int, x: float, z,
               scheme: Optional[BranchingScheme] = None):
    """Scaled mechanism k lambda_k [g_k(x, 1 - z/k) - (1 - z/k)] on [0, k]."""
    zv = np.asarray(z, dtype=float)
    if np.any((zv < 0) | (zv > k)):
        raise ConfigurationError("z must lie in [0, k]")
    if scheme is None:
        scheme = BranchingScheme.build(spec, k)
    w = 1.0 - zv / k
    out = k * scheme.lambda_k * (scheme.gk(x, w) - w)
    return float(out) if np.ndim(out) == 0 else out


def dz_psi_k_at_zero(spec: ModelSpec, k: int, x: float,
                     scheme: Optional[BranchingScheme] = None) -> float:
    """Analytic derivative at z=0+: lambda_k (1 - g_k'(x, 1))."""
    if scheme is None:
        scheme = BranchingScheme.build(spec, k)
    w1, w2 = scheme.mixture_weights()
    dgk = 0.0
    if w1 > 0.0:
        dgk += w1 * (1.0 - dz_psi_small(spec, x, 0.0) / scheme.lambda1)
    if w2 > 0.0:
        dgk += w2 * (1.0 - spec.levy.tail_mean(x) / scheme.lambda2)
    if w1 == 0.0 and w2 == 0.0:
        dgk = 1.0
    return float(scheme.lambda_k * (1.0 - dgk))


def convergence_report(spec: ModelSpec, k_values: Sequence[int],
                       z_max: float = 5.0, grid: int = 101) -> ScalingReport:
    """Sup-grid distance between the scaled mechanism and the killed target,
    plus the one-sided finite-difference derivative mismatch at z = 0+."""
    from sdsm.kernels import psi_killed

    xs = np.linspace(spec.x_grid[0], spec.x_grid[-1], grid)
    sups = []
    derivs = []
    for k in k_values:
        scheme = BranchingScheme.build(spec, k)
        zs = np.linspace(0.0, min(z_max, float(k)), grid)
        err = 0.0
        for x in xs:
            got = psi_k_eval(spec, k, float(x), zs, scheme=scheme)
            want = psi_killed(spec, float(x), zs)
            err = max(err, float(np.max(np.abs(got - want))))
        sups.append(err)
        d = 0.0
        h = FD_DERIV_STEP
        for x in xs:
            fd = psi_k_eval(spec, k, float(x), h, scheme=scheme) / h
            target = float(spec.levy.tail_mean(x))  # killed mechanism slope at 0
            d = max(d, abs(fd - target))
        derivs.append(d)
    return ScalingReport(k_values=tuple(int(k) for k in k_values),
                         sup_errors=tuple(sups),
                         derivative_errors=tuple(derivs))


def sample_offspring(law: OffspringLaw, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from the precomputed cumulative table."""
    return int(np.searchsorted(law.cum, rng.random(), side="right"))


class LawTable:
    """Site-bucketed cache of offspring laws for one (spec, k) pair.

    Bucket width follows the interaction table step; homogeneous coefficients
    collapse to a single shared law. Exact per-site construction is available
    behind the exact flag for validation runs.
    """

    def __init__(self, spec: ModelSpec, k: int, j_max: Optional[int] = None,
                 exact: bool = False):
        self.spec = spec
        self.k = k
        self.j_max = suggest_j_max(spec, k) if j_max is None else j_max
        self.exact = exact
        self.scheme = BranchingScheme.build(spec, k)
        self.bucket_width = spec.interaction.step if not spec.interaction.trivial else 0.05
        self.homogeneous = (spec.sigma.is_constant and spec.levy.x_independent())
        self._cache: dict[int, OffspringLaw] = {}

    @property
    def lambda_k(self) -> float:
        return self.scheme.lambda_k

    def law_at(self, x: float) -> OffspringLaw:
        if self.homogeneous:
            key = 0
            site = 0.0
        elif self.exact:
            return build_offspring_law(self.spec, self.k, x, self.j_max,
                                       scheme=self.scheme)
        else:
            key = int(round(x / self.bucket_width))
            site = key * self.bucket_width
        law = self._cache.get(key)
        if law is None:
            law = build_offspring_law(self.spec, self.k, site, self.j_max,
                                      scheme=self.scheme)
            self._cache[key] = law
        return law
