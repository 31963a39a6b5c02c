"""Model coefficients and kernels.

Houses the diffusion coefficient c, the interaction kernel h with its
autocorrelation rho, the branching variance sigma, the jump kernel gamma,
and the validated parameter bundle (ModelSpec) that every other module
consumes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.interpolate import CubicSpline

QUAD_TOL = 1e-10
DEFAULT_J_CAP = 64
RHO_SPAN_FACTOR = 8.0
RHO_GRID_POINTS = 2049
X_GRID_POINTS = 513
X_GRID_MARGIN = 6.0


class ConfigurationError(ValueError):
    """A kernel or operation was configured with inconsistent parameters."""


class SpecValidationError(ValueError):
    """Model specification rejected; carries a machine-readable error list."""

    def __init__(self, errors: list[dict]):
        self.errors = errors
        lines = "; ".join(f"{e['field']}: {e['message']}" for e in errors)
        super().__init__(f"invalid model spec ({len(errors)} errors): {lines}")


# ---------------------------------------------------------------------------
# Scalar coefficient functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientFn:
    """Bounded scalar function on the real line with finite limits at +-inf.

    Supported kinds:
      constant                    params = (value,)
      gaussian-bump               params = (amp, center, width)
      piecewise-table             params = (left, x0, y0, x1, y1, ...), a step
                                  function: `left` before x0, y_i on
                                  [x_i, x_{i+1}), y_last from x_last on
      compactly-supported-smooth  params = (amp, center, radius), the classic
                                  mollifier bump scaled to peak `amp`
    """

    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in ("constant", "gaussian-bump", "piecewise-table",
                             "compactly-supported-smooth"):
            raise ConfigurationError(f"unknown coefficient kind {self.kind!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.kind == "constant" and len(self.params) != 1:
            raise ConfigurationError("constant takes one parameter")
        if self.kind == "gaussian-bump":
            if len(self.params) != 3 or self.params[2] <= 0:
                raise ConfigurationError("gaussian-bump takes (amp, center, width>0)")
        if self.kind == "compactly-supported-smooth":
            if len(self.params) != 3 or self.params[2] <= 0:
                raise ConfigurationError("bump takes (amp, center, radius>0)")
        if self.kind == "piecewise-table":
            if len(self.params) < 3 or len(self.params) % 2 == 0:
                raise ConfigurationError("table takes (left, x0, y0, x1, y1, ...)")
            xs = self.params[1::2]
            if any(b <= a for a, b in zip(xs, xs[1:])):
                raise ConfigurationError("table knots must be strictly increasing")

    # -- constructors ------------------------------------------------------

    @staticmethod
    def constant(value: float) -> "CoefficientFn":
        return CoefficientFn("constant", (value,))

    @staticmethod
    def zero() -> "CoefficientFn":
        return CoefficientFn("constant", (0.0,))

    @staticmethod
    def gaussian(amp: float, center: float = 0.0, width: float = 1.0) -> "CoefficientFn":
        return CoefficientFn("gaussian-bump", (amp, center, width))

    @staticmethod
    def indicator(lo: float, hi: float, height: float = 1.0) -> "CoefficientFn":
        return CoefficientFn("piecewise-table", (0.0, lo, height, hi, 0.0))

    @staticmethod
    def table(left: float, knots: Sequence[tuple]) -> "CoefficientFn":
        flat = [left]
        for x, y in knots:
            flat.extend((x, y))
        return CoefficientFn("piecewise-table", tuple(flat))

    @staticmethod
    def bump(amp: float, center: float = 0.0, radius: float = 1.0) -> "CoefficientFn":
        return CoefficientFn("compactly-supported-smooth", (amp, center, radius))

    # -- evaluation --------------------------------------------------------

    def __call__(self, x):
        xv = np.atleast_1d(np.asarray(x, dtype=float))
        if self.kind == "constant":
            out = np.full_like(xv, self.params[0])
        elif self.kind == "gaussian-bump":
            amp, c, w = self.params
            out = amp * np.exp(-((xv - c) / w) ** 2)
        elif self.kind == "piecewise-table":
            left = self.params[0]
            xs = np.asarray(self.params[1::2])
            ys = np.asarray(self.params[2::2])
            idx = np.searchsorted(xs, xv, side="right")
            out = np.where(idx == 0, left, ys[np.maximum(idx - 1, 0)])
        else:
            amp, c, r = self.params
            u = (xv - c) / r
            out = np.zeros_like(xv)
            inside = np.abs(u) < 1.0
            out[inside] = amp * np.exp(1.0 - 1.0 / (1.0 - u[inside] ** 2))
        if np.ndim(x) == 0:
            return float(out[0])
        return out.reshape(np.shape(x))

    # -- structural queries --------------------------------------------------

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def constant_value(self) -> float:
        if not self.is_constant:
            raise ConfigurationError("not a constant coefficient")
        return self.params[0]

    def limits(self) -> tuple[float, float]:
        """Values at -inf and +inf."""
        if self.kind == "constant":
            v = self.params[0]
            return v, v
        if self.kind in ("gaussian-bump", "compactly-supported-smooth"):
            return 0.0, 0.0
        return self.params[0], self.params[-1]

    def sup_abs(self) -> float:
        if self.kind == "constant":
            return abs(self.params[0])
        if self.kind in ("gaussian-bump", "compactly-supported-smooth"):
            return abs(self.params[0])
        return max(abs(v) for v in (self.params[0],) + self.params[2::2])

    def support(self) -> Optional[tuple[float, float]]:
        """Interval outside which the function vanishes, or None."""
        if self.kind == "constant":
            return (0.0, 0.0) if self.params[0] == 0.0 else None
        if self.kind == "gaussian-bump":
            return None
        if self.kind == "compactly-supported-smooth":
            amp, c, r = self.params
            return (c, c) if amp == 0.0 else (c - r, c + r)
        left = self.params[0]
        xs = self.params[1::2]
        ys = self.params[2::2]
        if left != 0.0 or ys[-1] != 0.0:
            return None
        nz = [i for i, y in enumerate(ys[:-1]) if y != 0.0]
        if not nz:
            return (xs[0], xs[0])
        return (xs[nz[0]], xs[nz[-1] + 1])

    def length_scale(self) -> float:
        if self.kind == "constant":
            return 1.0
        if self.kind == "gaussian-bump":
            return self.params[2]
        if self.kind == "compactly-supported-smooth":
            return self.params[2]
        xs = self.params[1::2]
        return max(xs[-1] - xs[0], 1e-6)

    def square_integral(self) -> float:
        """Integral of f^2 over the line; inf when not square-integrable."""
        if self.kind == "constant":
            return 0.0 if self.params[0] == 0.0 else math.inf
        if self.kind == "gaussian-bump":
            amp, _, w = self.params
            return amp * amp * w * math.sqrt(math.pi / 2.0)
        if self.kind == "piecewise-table":
            left = self.params[0]
            xs = self.params[1::2]
            ys = self.params[2::2]
            if left != 0.0 or ys[-1] != 0.0:
                return math.inf
            return float(sum(y * y * (b - a)
                             for a, b, y in zip(xs, xs[1:], ys)))
        amp, c, r = self.params
        if amp == 0.0:
            return 0.0
        val, _ = integrate.quad(lambda x: self(x) ** 2, c - r, c + r,
                                epsabs=QUAD_TOL)
        return float(val)

    def min_abs_on(self, grid: np.ndarray) -> float:
        vals = np.abs(self(grid))
        lims = self.limits()
        return float(min(vals.min(), abs(lims[0]), abs(lims[1])))

    def is_nonnegative(self) -> bool:
        if self.kind == "constant":
            return self.params[0] >= 0.0
        if self.kind in ("gaussian-bump", "compactly-supported-smooth"):
            return self.params[0] >= 0.0
        return self.params[0] >= 0.0 and all(y >= 0.0 for y in self.params[2::2])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params)}


# ---------------------------------------------------------------------------
# Interaction kernel: rho(x) = integral of h(y-x) h(y) dy
# ---------------------------------------------------------------------------

def compute_rho(h: CoefficientFn, x: float) -> float:
    """Autocorrelation of h at lag x, closed form where available.

    Gaussian and step-table kernels have exact closed forms; other kinds fall
    back to adaptive quadrature at absolute tolerance QUAD_TOL.
    """
    if h.kind == "constant":
        if h.params[0] == 0.0:
            return 0.0
        raise ConfigurationError("constant nonzero h is not square-integrable")
    if h.kind == "gaussian-bump":
        amp, _, w = h.params
        return float(amp * amp * w * math.sqrt(math.pi / 2.0)
                     * math.exp(-x * x / (2.0 * w * w)))
    if h.kind == "piecewise-table":
        if h.square_integral() == math.inf:
            raise ConfigurationError("step table h must have compact support")
        xs = h.params[1::2]
        ys = h.params[2::2]
        total = 0.0
        for a_i, b_i, y_i in zip(xs, xs[1:], ys):
            if y_i == 0.0:
                continue
            for a_j, b_j, y_j in zip(xs, xs[1:], ys):
                if y_j == 0.0:
                    continue
                overlap = min(b_i, b_j + x) - max(a_i, a_j + x)
                if overlap > 0.0:
                    total += y_i * y_j * overlap
        return float(total)
    # compactly supported smooth bump: quadrature over the overlap interval
    sup = h.support()
    lo = max(sup[0], sup[0] + x)
    hi = min(sup[1], sup[1] + x)
    if hi <= lo:
        return 0.0
    val, _ = integrate.quad(lambda y: h(y - x) * h(y), lo, hi, epsabs=QUAD_TOL)
    return float(val)


@dataclass(frozen=True, eq=False)
class InteractionKernel:
    """Precomputed autocorrelation table of h with cubic interpolation.

    rho is evaluated O(m^2) per diffusion step, so values are tabulated once
    on a symmetric grid and interpolated; the table is mirrored about zero so
    rho(x) == rho(-x) holds to machine precision.
    """

    h: CoefficientFn
    rho0: float
    grid: np.ndarray
    values: np.ndarray
    radius: float
    step: float
    _spline: object = field(repr=False, default=None)

    @staticmethod
    def from_h(h: CoefficientFn, span_factor: float = RHO_SPAN_FACTOR,
               n_points: int = RHO_GRID_POINTS) -> "InteractionKernel":
        if h.square_integral() == math.inf:
            raise ConfigurationError("h must be square-integrable")
        radius = span_factor * h.length_scale()
        half = np.linspace(0.0, radius, n_points // 2 + 1)
        vals_half = np.array([compute_rho(h, float(x)) for x in half])
        grid = np.concatenate([-half[::-1], half[1:]])
        values = np.concatenate([vals_half[::-1], vals_half[1:]])
        spline = CubicSpline(grid, values, extrapolate=False)
        return InteractionKernel(h=h, rho0=float(vals_half[0]), grid=grid,
                                 values=values, radius=radius,
                                 step=float(half[1] - half[0]) if len(half) > 1 else 1.0,
                                 _spline=spline)

    @property
    def trivial(self) -> bool:
        return self.rho0 == 0.0

    def rho(self, x):
        """Interpolated rho; zero beyond the tabulated radius."""
        if self.trivial:
            return np.zeros_like(np.asarray(x, dtype=float)) if np.ndim(x) else 0.0
        xv = np.asarray(x, dtype=float)
        out = self._spline(np.clip(xv, -self.radius, self.radius))
        out = np.where(np.abs(xv) >= self.radius, 0.0, out)
        if np.ndim(x) == 0:
            return float(out)
        return out


# ---------------------------------------------------------------------------
# Jump kernel gamma(x, dxi)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LevyAtom:
    weight: CoefficientFn     # x-dependent intensity of the atom
    xi: float                 # jump size, > 0


@dataclass(frozen=True)
class LevyDensity:
    """Optional absolutely-continuous component: weight(x) * q(xi) dxi.

    Families:
      exponential  params = (rate,)               q(xi) = rate*exp(-rate*xi) on (0, inf)
      uniform      params = (lo, hi)              q uniform on (lo, hi)
      power        params = (beta, xi_max)        q(xi) = xi^(-1-beta) on (0, xi_max),
                                                  0 < beta < 2  (unnormalized)
    """

    weight: CoefficientFn
    family: str
    params: tuple

    def __post_init__(self):
        if self.family not in ("exponential", "uniform", "power"):
            raise ConfigurationError(f"unknown density family {self.family!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if self.family == "exponential" and (len(self.params) != 1 or self.params[0] <= 0):
            raise ConfigurationError("exponential takes (rate>0,)")
        if self.family == "uniform":
            if len(self.params) != 2 or not (0 <= self.params[0] < self.params[1]):
                raise ConfigurationError("uniform takes (lo>=0, hi>lo)")
        if self.family == "power":
            if len(self.params) != 2 or not (0 < self.params[0] < 2) or self.params[1] <= 0:
                raise ConfigurationError("power takes (0<beta<2, xi_max>0)")

    def q(self, xi):
        xv = np.asarray(xi, dtype=float)
        if self.family == "exponential":
            rate = self.params[0]
            return rate * np.exp(-rate * xv)
        if self.family == "uniform":
            lo, hi = self.params
            return np.where((xv >= lo) & (xv < hi), 1.0 / (hi - lo), 0.0)
        beta, xi_max = self.params
        return np.where((xv > 0) & (xv < xi_max), xv ** (-1.0 - beta), 0.0)

    def bounds(self) -> tuple[float, float]:
        if self.family == "exponential":
            return 0.0, math.inf
        if self.family == "uniform":
            return self.params[0], self.params[1]
        return 0.0, self.params[1]

    def moment_diverges(self, j: int, u: float, lo: float, hi: float) -> bool:
        """True when integral of xi^j exp(-u xi) q(xi) over (lo, hi) is infinite."""
        if self.family == "power" and lo == 0.0:
            # near zero the integrand behaves like xi^(j-1-beta)
            return j - self.params[0] <= 0.0
        if self.family == "exponential" and hi == math.inf and u == 0.0:
            return False  # exponential tail always integrable
        return False


@dataclass(frozen=True, eq=False)
class LevyKernel:
    """Jump kernel gamma(x, dxi): finite atomic mixture plus optional density.

    The split threshold l > 1 separates the small-jump part (0, l) from the
    tail [l, inf); the convention is open at l on the left and closed on the
    right.
    """

    atoms: tuple[LevyAtom, ...]
    l: float
    density: Optional[LevyDensity] = None
    quad_tol: float = QUAD_TOL
    j_cap: int = DEFAULT_J_CAP

    def __post_init__(self):
        if self.l <= 1.0:
            raise ConfigurationError("threshold l must exceed 1")
        for a in self.atoms:
            if a.xi <= 0.0:
                raise ConfigurationError("atom sizes must be positive")

    @staticmethod
    def empty(l: float = 2.0) -> "LevyKernel":
        return LevyKernel(atoms=(), l=l)

    @staticmethod
    def atomic(entries: Sequence[tuple], l: float = 2.0) -> "LevyKernel":
        """entries: (weight, xi) pairs, weight a number or CoefficientFn."""
        atoms = []
        for w, xi in entries:
            if not isinstance(w, CoefficientFn):
                w = CoefficientFn.constant(w)
            atoms.append(LevyAtom(weight=w, xi=float(xi)))
        return LevyKernel(atoms=tuple(atoms), l=l)

    # -- part selection ------------------------------------------------------

    def _atom_mask(self, tail: bool):
        return [(a, (a.xi >= self.l) == tail) for a in self.atoms]

    def _density_range(self, tail: bool) -> Optional[tuple[float, float]]:
        if self.density is None:
            return None
        lo, hi = self.density.bounds()
        if tail:
            lo = max(lo, self.l)
        else:
            hi = min(hi, self.l)
        if hi <= lo:
            return None
        return lo, hi

    # -- moments ---------------------------------------------------------------

    def exp_moment(self, x, j: int, u: float, tail: bool):
        """Integral of xi^j exp(-u xi) gamma(x, dxi) over (0,l) or [l,inf).

        Atomic part summed exactly; density part by quadrature. Vectorized
        over x. Raises ConfigurationError when the density part diverges.
        """
        if j < 0 or j > self.j_cap:
            raise ConfigurationError(f"moment order {j} outside [0, {self.j_cap}]")
        if u < 0:
            raise ConfigurationError("u must be nonnegative")
        xv = np.asarray(x, dtype=float)
        out = np.zeros_like(xv)
        for a, included in self._atom_mask(tail):
            if included:
                out = out + a.weight(xv) * a.xi ** j * math.exp(-u * a.xi)
        rng = self._density_range(tail)
        if rng is not None:
            lo, hi = rng
            if self.density.moment_diverges(j, u, lo, hi):
                raise ConfigurationError(
                    f"density moment j={j}, u={u} diverges on ({lo}, {hi})")
            val = self._density_quad(lambda t: t ** j * np.exp(-u * t), lo, hi)
            out = out + self.density.weight(xv) * val
        if np.ndim(x) == 0:
            return float(out)
        return out

    def _density_quad(self, g, lo: float, hi: float) -> float:
        f = lambda t: g(t) * self.density.q(t)
        if hi == math.inf:
            val, _ = integrate.quad(f, lo, hi, epsabs=self.quad_tol, limit=200)
        else:
            val, _ = integrate.quad(f, lo, hi, epsabs=self.quad_tol, limit=200,
                                    points=[lo, hi])
        return float(val)

    def tail_mass(self, x):
        """gamma(x, [l, inf)); the big-jump event intensity per unit mass."""
        return self.exp_moment(x, 0, 0.0, tail=True)

    def tail_mean(self, x):
        """Integral of xi over the tail; the per-site killing rate b(x)."""
        return self.exp_moment(x, 1, 0.0, tail=True)

    def compensated_small(self, x, z):
        """Integral of (exp(-z xi) - 1 + z xi) gamma(x, dxi) over (0, l).

        Stable combined integrand, convergent for every supported density.
        Broadcasts over x and z.
        """
        xv = np.asarray(x, dtype=float)
        zv = np.asarray(z, dtype=float)
        out = np.zeros(np.broadcast(xv, zv).shape)
        for a, included in self._atom_mask(tail=False):
            if included:
                out = out + a.weight(xv) * (np.expm1(-zv * a.xi) + zv * a.xi)
        rng = self._density_range(tail=False)
        if rng is not None:
            lo, hi = rng
            if np.ndim(zv) == 0:
                val = self._density_quad(
                    lambda t: np.expm1(-float(zv) * t) + float(zv) * t, lo, hi)
                out = out + self.density.weight(xv) * val
            else:
                flat = zv.reshape(-1)
                vals = np.array([self._density_quad(
                    lambda t, zz=float(zz): np.expm1(-zz * t) + zz * t, lo, hi)
                    for zz in flat]).reshape(zv.shape)
                out = out + self.density.weight(xv) * vals
        if out.shape == ():
            return float(out)
        return out

    def compensated_tail(self, x, z):
        """Integral of (exp(-z xi) - 1 + z xi) gamma(x, dxi) over [l, inf)."""
        xv = np.asarray(x, dtype=float)
        zv = np.asarray(z, dtype=float)
        out = np.zeros(np.broadcast(xv, zv).shape)
        for a, included in self._atom_mask(tail=True):
            if included:
                out = out + a.weight(xv) * (np.expm1(-zv * a.xi) + zv * a.xi)
        rng = self._density_range(tail=True)
        if rng is not None:
            lo, hi = rng
            if np.ndim(zv) == 0:
                val = self._density_quad(
                    lambda t: np.expm1(-float(zv) * t) + float(zv) * t, lo, hi)
                out = out + self.density.weight(xv) * val
            else:
                flat = zv.reshape(-1)
                vals = np.array([self._density_quad(
                    lambda t, zz=float(zz): np.expm1(-zz * t) + zz * t, lo, hi)
                    for zz in flat]).reshape(zv.shape)
                out = out + self.density.weight(xv) * vals
        if out.shape == ():
            return float(out)
        return out

    def small_linear_decay(self, x, k: float):
        """Integral of xi (1 - exp(-k xi)) gamma(x, dxi) over (0, l)."""
        xv = np.asarray(x, dtype=float)
        out = np.zeros_like(xv)
        for a, included in self._atom_mask(tail=False):
            if included:
                out = out + a.weight(xv) * a.xi * (-math.expm1(-k * a.xi))
        rng = self._density_range(tail=False)
        if rng is not None:
            lo, hi = rng
            val = self._density_quad(lambda t: t * (-np.expm1(-k * t)), lo, hi)
            out = out + self.density.weight(xv) * val
        if np.ndim(x) == 0:
            return float(out)
        return out

    def xi_squared_total(self, x):
        """Integral of xi^2 gamma(x, dxi) over all of (0, inf)."""
        return (self.exp_moment(x, 2, 0.0, tail=False)
                + self.exp_moment(x, 2, 0.0, tail=True))

    def has_small_part(self) -> bool:
        if any(inc for _, inc in self._atom_mask(tail=False)):
            return True
        return self._density_range(tail=False) is not None

    def has_tail_part(self) -> bool:
        if any(inc for _, inc in self._atom_mask(tail=True)):
            return True
        return self._density_range(tail=True) is not None

    def x_independent(self) -> bool:
        consts = all(a.weight.is_constant for a in self.atoms)
        if self.density is not None:
            consts = consts and self.density.weight.is_constant
        return consts

    def sub_l_max_size(self) -> float:
        """Largest jump size carrying small-part mass (for law truncation)."""
        best = 0.0
        for a, included in self._atom_mask(tail=False):
            if included:
                best = max(best, a.xi)
        rng = self._density_range(tail=False)
        if rng is not None:
            best = max(best, rng[1])
        return best

    # -- tail sampling ----------------------------------------------------------

    def sample_tail(self, x: float, rng: np.random.Generator) -> float:
        """Draw a jump size from the normalized tail gamma(x,.)|[l,inf)."""
        weights = []
        sizes = []
        for a, included in self._atom_mask(tail=True):
            if included:
                weights.append(a.weight(x))
                sizes.append(a.xi)
        dens_mass = 0.0
        rng_d = self._density_range(tail=True)
        if rng_d is not None:
            dens_mass = self.density.weight(x) * self._density_quad(
                lambda t: np.ones_like(t), rng_d[0], rng_d[1])
        total = sum(weights) + dens_mass
        if total <= 0.0:
            raise ConfigurationError("tail has no mass at this site")
        u = rng.random() * total
        for w, s in zip(weights, sizes):
            u -= w
            if u < 0.0:
                return s
        return self._sample_tail_density(rng, rng_d)

    def _sample_tail_density(self, rng: np.random.Generator,
                             bounds: tuple[float, float]) -> float:
        lo, hi = bounds
        u = rng.random()
        if self.density.family == "exponential":
            rate = self.density.params[0]
            if hi == math.inf:
                return lo + rng.exponential(1.0 / rate)
            # inverse cdf of the exponential truncated to [lo, hi)
            span_mass = -math.expm1(-rate * (hi - lo))
            return lo - math.log1p(-u * span_mass) / rate
        if self.density.family == "uniform":
            return lo + u * (hi - lo)
        beta, _ = self.density.params
        # q ~ xi^(-1-beta) on (lo, hi): invert the truncated cdf
        a = lo ** (-beta)
        b = hi ** (-beta)
        return (a - u * (a - b)) ** (-1.0 / beta)

    def to_dict(self) -> dict:
        d = {"l": self.l,
             "atoms": [{"weight": a.weight.to_dict(), "xi": a.xi} for a in self.atoms]}
        if self.density is not None:
            d["density"] = {"weight": self.density.weight.to_dict(),
                            "family": self.density.family,
                            "params": list(self.density.params)}
        return d


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Validated parameter bundle defining one model instance.

    Immutable after construction; safe for concurrent reads.
    """

    c: CoefficientFn
    sigma: CoefficientFn
    interaction: InteractionKernel
    levy: LevyKernel
    k: int
    branch_lambda: Optional[float]   # None: use the scaled construction rate
    initial: tuple[tuple[float, float], ...]
    horizon: float
    mode: str
    uniformly_elliptic: bool
    x_grid: np.ndarray
    notes: tuple[str, ...] = ()

    @property
    def h(self) -> CoefficientFn:
        return self.interaction.h

    def rho(self, x):
        return self.interaction.rho(x)

    @property
    def rho0(self) -> float:
        return self.interaction.rho0

    def total_mass(self) -> float:
        return float(sum(w for _, w in self.initial))

    def sup_on_grid(self, fn: CoefficientFn) -> float:
        """max over the configured x-grid and the two limits at infinity."""
        vals = fn(self.x_grid)
        lims = fn.limits()
        return float(max(vals.max(), lims[0], lims[1]))

    def sup_levy(self, evaluator) -> float:
        """max over the x-grid and limits of a vectorized kernel functional."""
        vals = np.asarray(evaluator(self.x_grid))
        ends = [float(evaluator(x)) for x in (self.x_grid[0], self.x_grid[-1])]
        return float(max(vals.max(initial=0.0), *ends))

    def spec_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "c": self.c.to_dict(),
            "sigma": self.sigma.to_dict(),
            "h": self.h.to_dict(),
            "levy": self.levy.to_dict(),
            "k": self.k,
            "lambda": self.branch_lambda,
            "initial": [[x, w] for x, w in self.initial],
            "horizon": self.horizon,
            "mode": self.mode,
            "uniformly_elliptic": self.uniformly_elliptic,
        }


def make_spec(c: CoefficientFn,
              sigma: CoefficientFn,
              h: CoefficientFn,
              levy: LevyKernel,
              initial: Sequence[tuple],
              k: int = 1,
              branch_lambda: Optional[float] = 1.0,
              horizon: float = 1.0,
              mode: str = "killed",
              uniformly_elliptic: bool = False,
              x_grid_points: int = X_GRID_POINTS) -> ModelSpec:
    """Validate parameters and build a ModelSpec; raises SpecValidationError
    with the full machine-readable error list on any violation."""
    errors: list[dict] = []
    notes: list[str] = []

    if mode not in ("killed", "full"):
        errors.append({"field": "mode", "message": f"unknown mode {mode!r}"})
    if k < 1:
        errors.append({"field": "k", "message": "mass scale k must be >= 1"})
    if horizon <= 0:
        errors.append({"field": "horizon", "message": "horizon must be positive"})
    if branch_lambda is not None and branch_lambda < 0:
        errors.append({"field": "lambda", "message": "branch rate must be >= 0"})
    initial = tuple((float(x), float(w)) for x, w in initial)
    if not initial:
        errors.append({"field": "initial", "message": "initial measure is empty"})
    if any(w <= 0 for _, w in initial):
        errors.append({"field": "initial", "message": "atom weights must be > 0"})
    if not sigma.is_nonnegative():
        errors.append({"field": "sigma", "message": "sigma must be nonnegative"})
    if h.square_integral() == math.inf:
        errors.append({"field": "h", "message": "h must be square-integrable"})

    interaction = None
    if not any(e["field"] == "h" for e in errors):
        interaction = InteractionKernel.from_h(h)

    # x-grid spanning the initial support plus margins, per the sup-estimates
    scale = max(h.length_scale(), 1.0)
    if initial:
        lo = min(x for x, _ in initial) - X_GRID_MARGIN * scale
        hi = max(x for x, _ in initial) + X_GRID_MARGIN * scale
    else:
        lo, hi = -X_GRID_MARGIN * scale, X_GRID_MARGIN * scale
    x_grid = np.linspace(lo, hi, x_grid_points)

    if uniformly_elliptic and c.min_abs_on(x_grid) <= 0.0:
        errors.append({"field": "c",
                       "message": "uniformly-elliptic flag set but |c| reaches 0"})
    if not uniformly_elliptic and c.min_abs_on(x_grid) == 0.0:
        notes.append("c vanishes somewhere: run is outside the "
                     "proved-uniqueness regime")

    if errors:
        raise SpecValidationError(errors)

    return ModelSpec(c=c, sigma=sigma, interaction=interaction, levy=levy,
                     k=int(k), branch_lambda=branch_lambda, initial=initial,
                     horizon=float(horizon), mode=mode,
                     uniformly_elliptic=uniformly_elliptic, x_grid=x_grid,
                     notes=tuple(notes))


# ---------------------------------------------------------------------------
# Mechanism evaluations
# ---------------------------------------------------------------------------

def a_of(spec: ModelSpec, x) -> float:
    """Diffusion speed a(x) = c(x)^2 + rho(0)."""
    cx = spec.c(x)
    return cx * cx + spec.rho0


def levy_exp_moment(levy: LevyKernel, x, j: int, u: float,
                    upper: str = "l"):
    """xi-moment of the jump kernel: upper='l' integrates (0,l), 'inf' [l,inf)."""
    if upper not in ("l", "inf"):
        raise ConfigurationError("upper must be 'l' or 'inf'")
    return levy.exp_moment(x, j, u, tail=(upper == "inf"))


def killing_rate_b(levy: LevyKernel, xs) -> float:
    """Killing rate of the m-point motion: sum of tail means over coordinates."""
    xv = np.atleast_1d(np.asarray(xs, dtype=float))
    return float(np.sum(levy.tail_mean(xv)))


def psi_full(spec: ModelSpec, x, z):
    """Branching mechanism: sigma(x) z^2 / 2 plus the full compensated jump term."""
    zv = np.asarray(z, dtype=float)
    if np.any(zv < 0):
        raise ConfigurationError("z must be nonnegative")
    out = (0.5 * spec.sigma(x) * zv * zv
           + spec.levy.compensated_small(x, zv)
           + spec.levy.compensated_tail(x, zv))
    return float(out) if np.ndim(out) == 0 else out


def psi_killed(spec: ModelSpec, x, z):
    """Killed mechanism: big jumps replaced by the linear mass-killing term."""
    zv = np.asarray(z, dtype=float)
    if np.any(zv < 0):
        raise ConfigurationError("z must be nonnegative")
    out = (0.5 * spec.sigma(x) * zv * zv
           + spec.levy.tail_mean(x) * zv
           + spec.levy.compensated_small(x, zv))
    return float(out) if np.ndim(out) == 0 else out
