"""Function-valued dual process and the moment identity estimator.

The dual pairs a nonincreasing integer jump chain with a composition of
m-particle semigroups and coordinate-merge operators. Moments of the
measure-valued process equal expectations over the dual of the composed
function integrated against product measures, times a deterministic
exponential of the chain's sojourn pattern.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product as iter_product
from typing import Callable, Optional, Sequence

import numpy as np

from sdsm.harness.streams import child_stream
from sdsm.kernels import ConfigurationError, ModelSpec
from sdsm.motion import StepperConfig, simulate_path

DEFAULT_M_CAP = 4


@dataclass(frozen=True)
class OperatorTag:
    """Coordinate-merge operator drawn at one chain jump.

    kind "pair": two coordinates collapse, weighted by sigma at the merge
    point. kind "subset": a >= 2 coordinates collapse, weighted by the a-th
    small-jump moment at the merge point. `slots` are 0-based positions
    within the pre-jump arity.
    """

    kind: str
    slots: tuple[int, ...]
    pre_arity: int

    def __post_init__(self):
        if self.kind not in ("pair", "subset"):
            raise ConfigurationError(f"unknown operator kind {self.kind!r}")
        if len(set(self.slots)) != len(self.slots):
            raise ConfigurationError("slots must be distinct")
        if any(s < 0 or s >= self.pre_arity for s in self.slots):
            raise ConfigurationError("slot outside pre-jump arity")
        if self.kind == "pair" and len(self.slots) != 2:
            raise ConfigurationError("pair operator takes two slots")
        if self.kind == "subset" and len(self.slots) < 2:
            raise ConfigurationError("subset operator takes >= 2 slots")

    @property
    def arity_drop(self) -> int:
        return len(self.slots) - 1


@dataclass(frozen=True)
class DualPath:
    """One realization of the jump chain with its merge operators."""

    m0: int
    horizon: float
    jump_times: tuple[float, ...]
    m_values: tuple[int, ...]          # arity after each jump
    operators: tuple[OperatorTag, ...]

    def __post_init__(self):
        ms = (self.m0,) + self.m_values
        if any(b >= a for a, b in zip(ms, ms[1:])):
            raise ConfigurationError("arities must strictly decrease")
        if any(m < 1 for m in ms):
            raise ConfigurationError("arities must stay >= 1")

    @property
    def final_arity(self) -> int:
        return self.m_values[-1] if self.m_values else self.m0

    def arity_sequence(self) -> tuple[int, ...]:
        return (self.m0,) + self.m_values

    def exponent_integral(self) -> float:
        """Piecewise-exact integral of 2^m + m(m-1)/2 - m - 1 along the chain."""
        bounds = (0.0,) + self.jump_times + (self.horizon,)
        total = 0.0
        for m, lo, hi in zip(self.arity_sequence(), bounds, bounds[1:]):
            total += (hi - lo) * exponent_rate(m)
        return total


def exponent_rate(m: int) -> float:
    return 2.0 ** m + m * (m - 1) / 2.0 - m - 1.0


def jump_chain_rates(i: int) -> dict[int, float]:
    """Transition intensities out of arity i: i(i-1) to i-1 and binomial
    subset rates to lower states; arity 1 is absorbing."""
    if i < 1:
        raise ConfigurationError("arity must be >= 1")
    rates: dict[int, float] = {}
    if i >= 2:
        rates[i - 1] = float(i * (i - 1))
        for a in range(3, i + 1):
            rates[i - a + 1] = float(math.comb(i, a))
    return rates


def sample_dual_path(m0: int, T: float, rng: np.random.Generator) -> DualPath:
    """Exponential holding times; at a one-step drop the operator is a pair
    merge of either kind with equal total probability, ordered pairs and
    unordered pairs each uniform within their class; larger drops pick the
    merge subset uniformly."""
    if m0 < 1:
        raise ConfigurationError("m0 must be >= 1")
    t = 0.0
    i = m0
    times: list[float] = []
    ms: list[int] = []
    ops: list[OperatorTag] = []
    while i > 1:
        rates = jump_chain_rates(i)
        total = sum(rates.values())
        t += rng.exponential(1.0 / total)
        if t >= T:
            break
        u = rng.random() * total
        pair_rate = rates[i - 1]
        if u < pair_rate:
            if rng.random() < 0.5:
                # sigma-weighted merge: ordered pair uniform on i(i-1)
                a_idx = int(rng.integers(i))
                b_idx = int(rng.integers(i - 1))
                if b_idx >= a_idx:
                    b_idx += 1
                op = OperatorTag("pair", (a_idx, b_idx), i)
            else:
                pair = np.sort(rng.choice(i, size=2, replace=False))
                op = OperatorTag("subset", (int(pair[0]), int(pair[1])), i)
            j = i - 1
        else:
            u -= pair_rate
            j = None
            for a in range(3, i + 1):
                r = rates[i - a + 1]
                if u < r:
                    subset = np.sort(rng.choice(i, size=a, replace=False))
                    op = OperatorTag("subset", tuple(int(s) for s in subset), i)
                    j = i - a + 1
                    break
                u -= r
            if j is None:   # numerical edge: fold into the last class
                subset = tuple(range(i))
                op = OperatorTag("subset", subset, i)
                j = 1
        times.append(t)
        ms.append(j)
        ops.append(op)
        i = j
    return DualPath(m0=m0, horizon=T, jump_times=tuple(times),
                    m_values=tuple(ms), operators=tuple(ops))


def apply_operator_to_point(tag: OperatorTag, y: np.ndarray,
                            spec: ModelSpec) -> tuple[np.ndarray, float]:
    """Expand a merged point back to the pre-jump arity.

    The last coordinate of y fills every merge slot; the remaining
    coordinates fill the other slots in order. The scalar factor is sigma at
    the merge point for pair merges, and the a-th small-jump moment there for
    subset merges.
    """
    y = np.asarray(y, dtype=float)
    m = tag.pre_arity
    a = len(tag.slots)
    if y.shape[0] != m - a + 1:
        raise ConfigurationError(
            f"point has dim {y.shape[0]}, operator expects {m - a + 1}")
    merged = float(y[-1])
    out = np.empty(m)
    slot_set = set(tag.slots)
    out[list(tag.slots)] = merged
    rest = [i for i in range(m) if i not in slot_set]
    out[rest] = y[:-1]
    if tag.kind == "pair":
        factor = float(spec.sigma(merged))
    else:
        factor = float(spec.levy.exp_moment(merged, a, 0.0, tail=False))
    return out, factor


def validate_moment_condition(spec: ModelSpec, m: int) -> None:
    """Full-process duality at order m needs a finite m-th jump moment."""
    if m < 2:
        return
    try:
        sup = spec.sup_levy(
            lambda x: (spec.levy.exp_moment(x, m, 0.0, tail=False)
                       + spec.levy.exp_moment(x, m, 0.0, tail=True)))
    except ConfigurationError as exc:
        raise ConfigurationError(
            f"order-{m} moment condition fails: {exc}") from exc
    if not math.isfinite(sup):
        raise ConfigurationError(f"order-{m} jump moment is infinite")


def evaluate_dual_functional(path: DualPath,
                             f: Callable,
                             mu_atoms: Sequence[tuple],
                             spec: ModelSpec,
                             mode: str,
                             rng: np.random.Generator,
                             stepper: Optional[StepperConfig] = None,
                             inner_paths: int = 1,
                             enumerate_atoms: bool = False) -> float:
    """One unbiased sample of the dual moment functional.

    Consumes the composition outermost-first: the sampled product-measure
    point diffuses through the latest segment, each merge operator expands it
    with its scalar factor, and f evaluates at the innermost point. Killed
    mode accumulates the Feynman-Kac weight exp(-int b) per segment; full
    mode runs the free semigroups.
    """
    if mode not in ("killed", "full"):
        raise ConfigurationError("mode must be 'killed' or 'full'")
    stepper = stepper or StepperConfig()
    killed = mode == "killed"
    m_seq = path.arity_sequence()
    bounds = (0.0,) + path.jump_times + (path.horizon,)
    durations = [hi - lo for lo, hi in zip(bounds, bounds[1:])]
    m_final = path.final_arity

    def eval_from(point: np.ndarray, level: int) -> float:
        # level K..0 indexes segments outermost-first
        duration = durations[level]
        vals = 0.0
        for _ in range(inner_paths):
            end, lw = simulate_path(spec, point, duration, stepper, rng,
                                    killed=killed)
            if level == 0:
                vals += math.exp(lw) * float(f(end[None, :])[0])
            else:
                expanded, fac = apply_operator_to_point(
                    path.operators[level - 1], end, spec)
                if fac == 0.0:
                    continue
                vals += math.exp(lw) * fac * eval_from(expanded, level - 1)
        return vals / inner_paths

    K = len(path.jump_times)
    weights = np.array([w for _, w in mu_atoms], dtype=float)
    sites = np.array([x for x, _ in mu_atoms], dtype=float)
    total_mass = float(weights.sum())
    grower = math.exp(path.exponent_integral())

    if enumerate_atoms:
        total = 0.0
        for combo in iter_product(range(len(sites)), repeat=m_final):
            wprod = float(np.prod(weights[list(combo)]))
            total += wprod * eval_from(sites[list(combo)], K)
        return grower * total
    idx = rng.integers(len(sites), size=m_final) if len(sites) > 1 else \
        np.zeros(m_final, dtype=int)
    if len(sites) > 1:
        # weighted sampling from the normalized initial measure
        cum = np.cumsum(weights) / total_mass
        idx = np.searchsorted(cum, rng.random(m_final), side="right")
    point = sites[idx]
    return grower * total_mass ** m_final * eval_from(point, K)


def dual_moment(spec: ModelSpec,
                m: int,
                f: Callable,
                t: float,
                mu_atoms: Optional[Sequence[tuple]] = None,
                outer_paths: int = 1000,
                inner_paths: int = 1,
                mode: str = "killed",
                master_seed: int = 0,
                label: str = "dual",
                stepper: Optional[StepperConfig] = None,
                enumerate_atoms: bool = False,
                m_cap: int = DEFAULT_M_CAP) -> tuple[float, float]:
    """Mean and standard error of the dual estimator over outer paths.

    Each outer path owns a counter-derived sub-stream, so estimates are
    reproducible and mode comparisons can share noise via a common label.
    """
    if m < 1:
        raise ConfigurationError("m must be >= 1")
    if m > m_cap:
        raise ConfigurationError(
            f"m={m} above the cap {m_cap}: the exponential factor makes the "
            f"estimator statistically useless at this order")
    if mode == "full":
        validate_moment_condition(spec, m)
    mu_atoms = list(mu_atoms if mu_atoms is not None else spec.initial)
    if t == 0.0:
        # no jumps, no diffusion: the moment of the initial measure is exact
        point_val = _moment_at_zero(f, mu_atoms, m)
        return point_val, 0.0
    vals = np.empty(outer_paths)
    for i in range(outer_paths):
        rng = child_stream(master_seed, f"{label}/outer{i}")
        path = sample_dual_path(m, t, rng)
        vals[i] = evaluate_dual_functional(path, f, mu_atoms, spec, mode, rng,
                                           stepper, inner_paths,
                                           enumerate_atoms)
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(outer_paths)) if outer_paths > 1 else 0.0
    return est, se


def _moment_at_zero(f: Callable, mu_atoms: Sequence[tuple], m: int) -> float:
    sites = np.array([x for x, _ in mu_atoms])
    weights = np.array([w for _, w in mu_atoms])
    total = 0.0
    for combo in iter_product(range(len(sites)), repeat=m):
        total += float(np.prod(weights[list(combo)])) * \
            float(f(sites[list(combo)][None, :])[0])
    return total
