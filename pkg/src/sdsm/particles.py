"""Interacting-branching particle system with optional big-jump insertion.

Event-driven loop: between events every particle diffuses jointly; branch and
big-jump rates are constant between events (counts change only at events), so
waiting times are exact exponentials. In killed mode offspring laws carry the
subcritical death component; in full mode big jumps re-insert mass at rate
(1/k) * sum of per-site tail intensities.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from sdsm.branching import LawTable, sample_offspring
from sdsm.harness.streams import child_stream
from sdsm.kernels import ModelSpec
from sdsm.motion import FactorStats, StepperConfig, step

HARD_CAP_DEFAULT = 10 ** 6
_BLOCK = 8192


@dataclass
class Event:
    time: float
    kind: str          # "branch" or "big_jump"
    site: float
    delta: int         # particle-count change
    xi: Optional[float] = None


@dataclass
class ParticleState:
    """Weighted atomic measure: unit-weight particles at `positions`."""

    positions: np.ndarray
    k: int
    time: float = 0.0
    event_log: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def mass(self) -> float:
        return self.count / self.k

    def is_null(self) -> bool:
        return self.count == 0


@dataclass
class Trajectory:
    times: np.ndarray
    states: list               # particle position arrays per snapshot
    k: int
    events: Optional[list]     # Event list when kept
    n_branch: int
    n_big_jump: int
    jump_sizes: list
    rate_integral_branch: float
    rate_integral_jump: float
    status: str                # "complete" or "aborted-cap"
    stats: FactorStats
    seed_label: str = ""
    spec_hash: str = ""

    def state_at(self, t: float) -> np.ndarray:
        idx = _snapshot_index(self.times, t)
        return self.states[idx]


@dataclass
class JumpCensus:
    count: int
    sizes: list
    expected_count: float      # time integral of the big-jump rate


def _snapshot_index(times: np.ndarray, t: float) -> int:
    idx = int(np.argmin(np.abs(times - t))) if len(times) else -1
    if idx < 0 or abs(times[idx] - t) > 1e-9:
        raise ValueError(f"{t} is not a snapshot time")
    return idx


# ---------------------------------------------------------------------------
# Single-event operations on explicit states (exercised directly by tests;
# the run loop below applies the same transitions on packed arrays)
# ---------------------------------------------------------------------------

def branch_rate(state: ParticleState, lam: float, k: int) -> float:
    """Total branch intensity lam * k * (k ^ mass), constant between events."""
    if state.is_null():
        return 0.0
    return lam * k * min(float(k), state.mass)


def execute_branch(state: ParticleState, laws: LawTable,
                   rng: np.random.Generator) -> ParticleState:
    """Replace one uniformly chosen particle by j offspring at its site."""
    if state.is_null():
        raise ValueError("cannot branch the null state")
    idx = int(rng.integers(state.count))
    x = float(state.positions[idx])
    j = sample_offspring(laws.law_at(x), rng)
    pos = state.positions
    if j == 0:
        new = np.delete(pos, idx)
    elif j == 1:
        new = pos.copy()
    else:
        new = np.concatenate([pos, np.full(j - 1, x)])
    log = state.event_log + [Event(state.time, "branch", x, j - 1)]
    return ParticleState(positions=new, k=state.k, time=state.time, event_log=log)


def big_jump_rate(state: ParticleState, levy) -> float:
    """Mass-weighted tail intensity: (1/k) * sum of gamma(x_i, [l, inf))."""
    if state.is_null():
        return 0.0
    return float(np.sum(levy.tail_mass(state.positions))) / state.k


def execute_big_jump(state: ParticleState, levy,
                     rng: np.random.Generator) -> ParticleState:
    """Insert round(k xi) (at least one) particles at a tail-weighted site."""
    weights = np.asarray(levy.tail_mass(state.positions), dtype=float)
    total = weights.sum()
    if total <= 0:
        raise ValueError("no tail intensity anywhere")
    idx = int(np.searchsorted(np.cumsum(weights) / total, rng.random()))
    x = float(state.positions[idx])
    xi = levy.sample_tail(x, rng)
    count = max(1, int(round(state.k * xi)))
    new = np.concatenate([state.positions, np.full(count, x)])
    log = state.event_log + [Event(state.time, "big_jump", x, count, xi=xi)]
    return ParticleState(positions=new, k=state.k, time=state.time, event_log=log)


# ---------------------------------------------------------------------------
# Event-driven trajectory simulation
# ---------------------------------------------------------------------------

class _Blocks:
    """Pre-drawn scalar variates; refills keep the draw order deterministic."""

    __slots__ = ("rng", "_exp", "_ei", "_uni", "_ui", "_nrm", "_ni")

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._exp = rng.exponential(size=_BLOCK)
        self._uni = rng.random(size=_BLOCK)
        self._nrm = rng.standard_normal(size=_BLOCK)
        self._ei = self._ui = self._ni = 0

    def exponential(self) -> float:
        i = self._ei
        if i == _BLOCK:
            self._exp = self.rng.exponential(size=_BLOCK)
            self._ei = i = 0
        self._ei = i + 1
        return self._exp[i]

    def uniform(self) -> float:
        i = self._ui
        if i == _BLOCK:
            self._uni = self.rng.random(size=_BLOCK)
            self._ui = i = 0
        self._ui = i + 1
        return self._uni[i]

    def normal(self) -> float:
        i = self._ni
        if i == _BLOCK:
            self._nrm = self.rng.standard_normal(size=_BLOCK)
            self._ni = i = 0
        self._ni = i + 1
        return self._nrm[i]


class _Motion:
    """Particle store plus the motion integrator for one trajectory.

    Modes: "lazy" (no interaction, constant c: exact deferred Gaussian
    updates), "diagonal" (no interaction: vectorized independent steps),
    "joint" (full covariance steps).
    """

    def __init__(self, spec: ModelSpec, stepper: StepperConfig,
                 rng: np.random.Generator, blocks: _Blocks, initial: np.ndarray):
        self.spec = spec
        self.stepper = stepper
        self.rng = rng
        self.blocks = blocks
        self.stats = FactorStats()
        if spec.interaction.trivial:
            self.mode = "lazy" if spec.c.is_constant else "diagonal"
        else:
            self.mode = "joint"
        self.c0 = spec.c.constant_value() if spec.c.is_constant else 0.0
        cap = max(64, 4 * len(initial))
        self.pos = np.empty(cap)
        self.pos[:len(initial)] = initial
        self.n = len(initial)
        self.time = 0.0
        if self.mode == "lazy":
            self.upd = np.zeros(cap)

    def _grow(self, need: int) -> None:
        cap = len(self.pos)
        if self.n + need <= cap:
            return
        new_cap = max(2 * cap, self.n + need + 64)
        pos = np.empty(new_cap)
        pos[:self.n] = self.pos[:self.n]
        self.pos = pos
        if self.mode == "lazy":
            upd = np.empty(new_cap)
            upd[:self.n] = self.upd[:self.n]
            self.upd = upd

    def positions(self) -> np.ndarray:
        return self.pos[:self.n]

    def advance_all(self, t: float) -> None:
        """Bring every particle to time t."""
        if t <= self.time and self.mode != "lazy":
            self.time = max(self.time, t)
            return
        n = self.n
        if self.mode == "lazy":
            if n:
                dt = t - self.upd[:n]
                live = dt > 0
                if np.any(live):
                    z = self.rng.standard_normal(int(np.count_nonzero(live)))
                    self.pos[:n][live] += self.c0 * np.sqrt(dt[live]) * z
                self.upd[:n] = t
            self.time = t
            return
        duration = t - self.time
        if duration <= 0 or n == 0:
            self.time = t
            return
        steps = max(1, int(math.ceil(duration / self.stepper.dt)))
        h = duration / steps
        if self.mode == "diagonal":
            sq = math.sqrt(h)
            for _ in range(steps):
                cv = np.asarray(self.spec.c(self.pos[:n]), dtype=float)
                self.pos[:n] += cv * sq * self.rng.standard_normal(n)
        else:
            p = self.pos[:n]
            for _ in range(steps):
                p = step(self.spec, p, h, self.rng, self.stepper, self.stats)
            self.pos[:n] = p
        self.time = t

    def touch(self, i: int, t: float) -> float:
        """Current position of particle i at time t (updates it if deferred)."""
        if self.mode == "lazy":
            dt = t - self.upd[i]
            if dt > 0:
                self.pos[i] += self.c0 * math.sqrt(dt) * self.blocks.normal()
            self.upd[i] = t
        return float(self.pos[i])

    def remove(self, i: int) -> None:
        last = self.n - 1
        self.pos[i] = self.pos[last]
        if self.mode == "lazy":
            self.upd[i] = self.upd[last]
        self.n = last

    def add_copies(self, x: float, count: int, t: float) -> None:
        self._grow(count)
        self.pos[self.n:self.n + count] = x
        if self.mode == "lazy":
            self.upd[self.n:self.n + count] = t
        self.n += count


def run(spec: ModelSpec,
        stepper: Optional[StepperConfig] = None,
        snapshot_times: Optional[Sequence[float]] = None,
        rng: Optional[np.random.Generator] = None,
        laws: Optional[LawTable] = None,
        hard_cap: int = HARD_CAP_DEFAULT,
        keep_events: bool = False,
        seed_label: str = "",
        spec_hash: str = "") -> Trajectory:
    """Simulate one trajectory, recording particle snapshots at the
    requested times (each reached by diffusing to it exactly)."""
    stepper = stepper or StepperConfig()
    rng = rng or np.random.default_rng()
    if snapshot_times is None:
        snapshot_times = [spec.horizon]
    snaps = sorted(float(t) for t in snapshot_times)
    if snaps and (snaps[0] < 0 or snaps[-1] > spec.horizon + 1e-12):
        raise ValueError("snapshot times must lie in [0, horizon]")
    laws = laws or LawTable(spec, spec.k)
    lam = spec.branch_lambda if spec.branch_lambda is not None else laws.lambda_k
    k = spec.k
    full = spec.mode == "full"

    blocks = _Blocks(rng)
    initial = np.repeat([x for x, _ in spec.initial],
                        [int(round(w * k)) for _, w in spec.initial]).astype(float)
    if len(initial) == 0:
        raise ValueError("initial measure carries no particles at this k; "
                         "weights must be multiples of 1/k of at least 1/k")
    engine = _Motion(spec, stepper, rng, blocks, initial)

    tail_const = spec.levy.x_independent()
    tail_unit = float(spec.levy.tail_mass(0.0)) if tail_const else 0.0
    law_const = laws.homogeneous
    the_law = laws.law_at(0.0) if law_const else None

    events: Optional[list] = [] if keep_events else None
    jump_sizes: list = []
    n_branch = 0
    n_jump = 0
    ri_branch = 0.0
    ri_jump = 0.0
    out_times = []
    out_states = []
    status = "complete"

    t = 0.0
    si = 0
    horizon = spec.horizon
    while si < len(snaps) and snaps[si] <= 1e-15:
        out_times.append(snaps[si])
        out_states.append(engine.positions().copy())
        si += 1

    while t < horizon:
        n = engine.n
        rb = lam * min(k * k, n)
        if full and n:
            if tail_const:
                rj = n * tail_unit / k
            else:
                engine.advance_all(t)
                rj = float(np.sum(spec.levy.tail_mass(engine.positions()))) / k
        else:
            rj = 0.0
        total = rb + rj
        t_event = t + (blocks.exponential() / total if total > 0 else math.inf)

        # snapshots and the horizon cut the waiting interval; the exponential
        # clock is memoryless so it is redrawn after each boundary
        boundary = min(t_event, horizon, snaps[si] if si < len(snaps) else math.inf)
        ri_branch += rb * (boundary - t)
        ri_jump += rj * (boundary - t)

        if boundary < t_event:
            engine.advance_all(boundary)
            t = boundary
            while si < len(snaps) and snaps[si] <= t + 1e-15:
                out_times.append(snaps[si])
                out_states.append(engine.positions().copy())
                si += 1
            continue

        # an event fires at t_event
        if engine.mode != "lazy":
            engine.advance_all(t_event)
        t = t_event
        if blocks.uniform() * total < rb:
            idx = int(blocks.uniform() * n)
            x = engine.touch(idx, t)
            law = the_law if law_const else laws.law_at(x)
            u = blocks.uniform()
            j = int(np.searchsorted(law.cum, u, side="right"))
            n_branch += 1
            if j == 0:
                engine.remove(idx)
            elif j >= 2:
                engine.add_copies(x, j - 1, t)
            if events is not None:
                events.append(Event(t, "branch", x, j - 1))
        else:
            if tail_const:
                idx = int(blocks.uniform() * n)
            else:
                w = np.asarray(spec.levy.tail_mass(engine.positions()), dtype=float)
                idx = int(np.searchsorted(np.cumsum(w) / w.sum(), blocks.uniform()))
            x = engine.touch(idx, t)
            xi = spec.levy.sample_tail(x, rng)
            count = max(1, int(round(k * xi)))
            engine.add_copies(x, count, t)
            n_jump += 1
            jump_sizes.append(xi)
            if events is not None:
                events.append(Event(t, "big_jump", x, count, xi=xi))
        if engine.n > hard_cap:
            status = "aborted-cap"
            break
        if engine.n == 0:
            # null measure is absorbing: record remaining snapshots as empty
            while si < len(snaps):
                out_times.append(snaps[si])
                out_states.append(np.empty(0))
                si += 1
            t = horizon
            break

    if status == "complete":
        while si < len(snaps):
            engine.advance_all(snaps[si])
            out_times.append(snaps[si])
            out_states.append(engine.positions().copy())
            si += 1

    return Trajectory(times=np.array(out_times), states=out_states, k=k,
                      events=events, n_branch=n_branch, n_big_jump=n_jump,
                      jump_sizes=jump_sizes, rate_integral_branch=ri_branch,
                      rate_integral_jump=ri_jump, status=status,
                      stats=engine.stats, seed_label=seed_label,
                      spec_hash=spec_hash)


def observe(traj: Trajectory, phi: Callable, t: float) -> float:
    """<phi, X_t> = (1/k) sum of phi over particles at a recorded snapshot."""
    pos = traj.state_at(t)
    if len(pos) == 0:
        return 0.0
    return float(np.sum(phi(pos)) / traj.k)


def mass_at(traj: Trajectory, t: float) -> float:
    return len(traj.state_at(t)) / traj.k


def jump_census(traj: Trajectory, threshold: Optional[float] = None) -> JumpCensus:
    """Logged big-jump events next to the trajectory's integrated intensity."""
    sizes = list(traj.jump_sizes)
    if threshold is not None:
        sizes = [s for s in sizes if s >= threshold]
    return JumpCensus(count=traj.n_big_jump, sizes=sizes,
                      expected_count=traj.rate_integral_jump)


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

@dataclass
class EnsembleResult:
    columns: list
    rows: np.ndarray                 # (paths * snapshots, columns)
    snapshot_times: np.ndarray
    jump_counts: np.ndarray
    jump_integrals: np.ndarray
    n_events: int
    stats: FactorStats
    statuses: list

    def observable_matrix(self, name: str) -> np.ndarray:
        """(paths, snapshots) matrix of one observable column."""
        j = self.columns.index(name)
        npaths = len(self.jump_counts)
        nsnap = len(self.snapshot_times)
        return self.rows[:, j].reshape(npaths, nsnap)


def _ensemble_worker(args) -> tuple:
    (spec, stepper, snaps, master_seed, label, idx_list, phis, keep_events,
     hard_cap, j_max) = args
    laws = LawTable(spec, spec.k, j_max=j_max)
    rows = []
    counts = []
    integrals = []
    statuses = []
    stats = FactorStats()
    n_events = 0
    for i in idx_list:
        rng = child_stream(master_seed, f"{label}/path{i}")
        traj = run(spec, stepper, snaps, rng, laws=laws, hard_cap=hard_cap,
                   keep_events=keep_events, seed_label=f"{label}/path{i}")
        for s_i, ts in enumerate(traj.times):
            pos = traj.states[s_i]
            row = [float(i), float(ts), len(pos) / spec.k]
            for _, fn in phis:
                row.append(float(np.sum(fn(pos)) / spec.k) if len(pos) else 0.0)
            rows.append(row)
        counts.append(traj.n_big_jump)
        integrals.append(traj.rate_integral_jump)
        statuses.append(traj.status)
        stats.merge(traj.stats)
        n_events += traj.n_branch + traj.n_big_jump
    return rows, counts, integrals, statuses, stats, n_events


def default_threads() -> int:
    env = os.environ.get("SDSM_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def run_ensemble(spec: ModelSpec,
                 stepper: Optional[StepperConfig] = None,
                 snapshot_times: Optional[Sequence[float]] = None,
                 n_paths: int = 100,
                 master_seed: int = 0,
                 label: str = "simulate",
                 phis: Optional[dict] = None,
                 threads: Optional[int] = None,
                 keep_events: bool = False,
                 hard_cap: int = HARD_CAP_DEFAULT,
                 j_max: Optional[int] = None) -> EnsembleResult:
    """Independent trajectories on counter-derived sub-streams; results do
    not depend on the number of workers."""
    stepper = stepper or StepperConfig()
    snaps = sorted(float(t) for t in (snapshot_times or [spec.horizon]))
    phis = phis or {}
    phi_items = tuple(phis.items())
    threads = default_threads() if threads is None else max(1, threads)
    idx = list(range(n_paths))
    if threads == 1 or n_paths < 8:
        parts = [_ensemble_worker((spec, stepper, snaps, master_seed, label,
                                   idx, phi_items, keep_events, hard_cap, j_max))]
    else:
        chunks = [idx[i::threads] for i in range(threads)]
        args = [(spec, stepper, snaps, master_seed, label, ch, phi_items,
                 keep_events, hard_cap, j_max) for ch in chunks if ch]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_ensemble_worker, args))

    all_rows = []
    counts = np.empty(n_paths, dtype=int)
    integrals = np.empty(n_paths)
    statuses = [""] * n_paths
    stats = FactorStats()
    n_events = 0
    for rows, _, _, _, st, ne in parts:
        all_rows.extend(rows)
        stats.merge(st)
        n_events += ne
    # reassemble in path order regardless of worker scheduling
    all_rows.sort(key=lambda r: (r[0], r[1]))
    if threads == 1 or n_paths < 8:
        chunk_layout = [idx]
    else:
        chunk_layout = [c for c in (idx[i::threads] for i in range(threads)) if c]
    for chunk, part in zip(chunk_layout, parts):
        _, cs, ints, sts, _, _ = part
        for j, path_id in enumerate(chunk):
            counts[path_id] = cs[j]
            integrals[path_id] = ints[j]
            statuses[path_id] = sts[j]

    columns = ["path", "t", "mass"] + [name for name, _ in phi_items]
    rows_arr = np.array(all_rows) if all_rows else np.empty((0, len(columns)))
    return EnsembleResult(columns=columns, rows=rows_arr,
                          snapshot_times=np.array(snaps),
                          jump_counts=counts, jump_integrals=integrals,
                          n_events=n_events, stats=stats, statuses=statuses)
