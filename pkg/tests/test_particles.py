"""Particle-system event dynamics and trajectory statistics."""

import math

import numpy as np
import pytest
from scipy import stats as spstats

from sdsm.branching import LawTable
from sdsm.harness.streams import child_stream
from sdsm.kernels import CoefficientFn, LevyKernel, make_spec
from sdsm.motion import StepperConfig
from sdsm.particles import (
    ParticleState,
    big_jump_rate,
    branch_rate,
    execute_big_jump,
    execute_branch,
    jump_census,
    mass_at,
    observe,
    run,
    run_ensemble,
)


def spec_with(sigma=1.0, levy=None, k=1, lam=1.0, mode="killed",
              initial=((0.0, 1.0),), h=None, c=1.0, horizon=1.0):
    return make_spec(c=CoefficientFn.constant(c),
                     sigma=CoefficientFn.constant(sigma),
                     h=h if h is not None else CoefficientFn.zero(),
                     levy=levy if levy is not None else LevyKernel.empty(),
                     initial=list(initial), k=k, branch_lambda=lam,
                     horizon=horizon, mode=mode)


TAIL = LevyKernel.atomic([(1.0, 3.0)], l=2.0)


class TestRates:
    def test_cap_active(self):
        state = ParticleState(np.zeros(250), k=5)   # mass 50 >= k
        assert branch_rate(state, 2.0, 5) == pytest.approx(2.0 * 5 * 5)

    def test_below_cap_per_particle(self):
        state = ParticleState(np.zeros(7), k=5)     # mass 7/5 < 5
        assert branch_rate(state, 2.0, 5) == pytest.approx(2.0 * 7)

    def test_null_state(self):
        state = ParticleState(np.empty(0), k=5)
        assert branch_rate(state, 2.0, 5) == 0.0
        assert big_jump_rate(state, TAIL) == 0.0

    def test_big_jump_rate(self):
        state = ParticleState(np.zeros(6), k=4)
        assert big_jump_rate(state, TAIL) == pytest.approx(6 / 4)

    def test_no_tail_mass(self):
        levy = LevyKernel.atomic([(1.0, 0.5)], l=2.0)
        state = ParticleState(np.zeros(6), k=4)
        assert big_jump_rate(state, levy) == 0.0


class TestBranchEvent:
    def test_identity_law_noop(self):
        spec = spec_with(sigma=0.0, k=3)
        laws = LawTable(spec, 3)
        state = ParticleState(np.array([0.0, 1.0, 2.0]), k=3)
        new = execute_branch(state, laws, np.random.default_rng(0))
        assert np.array_equal(np.sort(new.positions), np.sort(state.positions))

    def test_pure_death(self):
        spec = spec_with(sigma=0.0, levy=TAIL, k=3)
        laws = LawTable(spec, 3)
        state = ParticleState(np.array([0.0, 1.0, 2.0]), k=3)
        new = execute_branch(state, laws, np.random.default_rng(1))
        assert new.count == 2
        assert new.event_log[-1].delta == -1

    def test_delta_frequencies(self):
        spec = spec_with(sigma=1.0, k=4)
        laws = LawTable(spec, 4)
        rng = np.random.default_rng(2)
        n = 10 ** 5
        deltas = np.empty(n)
        state = ParticleState(np.zeros(5), k=4)
        for i in range(n):
            deltas[i] = execute_branch(state, laws, rng).count - 5
        for d, p in ((-1, 0.4), (0, 0.2), (1, 0.4)):
            freq = np.mean(deltas == d)
            se = math.sqrt(p * (1 - p) / n)
            assert abs(freq - p) < 4 * se


class TestBigJumpEvent:
    def test_insertion_count(self):
        state = ParticleState(np.array([0.5, 1.5]), k=4)
        new = execute_big_jump(state, TAIL, np.random.default_rng(3))
        assert new.count == 2 + 12          # round(4 * 3)
        assert new.event_log[-1].xi == 3.0

    def test_site_selection_frequencies(self):
        w = CoefficientFn.table(0.0, [(-10.0, 1.0), (0.0, 3.0), (10.0, 0.0)])
        levy = LevyKernel.atomic([(w, 3.0)], l=2.0)
        state = ParticleState(np.array([-5.0, 5.0]), k=1)
        rng = np.random.default_rng(4)
        n = 10 ** 4
        picks = np.empty(n)
        for i in range(n):
            picks[i] = execute_big_jump(state, levy, rng).event_log[-1].site
        # intensity 1 at -5, 3 at +5: selection probability 0.75 on the right
        p = 0.75
        freq = np.mean(picks == 5.0)
        assert abs(freq - p) < 4 * math.sqrt(p * (1 - p) / n)


class TestRun:
    def test_pure_diffusion_mass_constant(self):
        spec = spec_with(sigma=0.0, lam=0.0, k=5, h=CoefficientFn.gaussian(0.5))
        traj = run(spec, StepperConfig(dt=1e-2), [0.0, 0.5, 1.0],
                   np.random.default_rng(5))
        assert [len(s) for s in traj.states] == [5, 5, 5]
        assert traj.n_branch == 0

    def test_pure_death_mean(self):
        # p0 = 1 laws with mass below the rate cap: linear death process,
        # count mean n0 exp(-lambda_k t) with lambda_k = ||b|| = 3
        spec = spec_with(sigma=0.0, levy=TAIL, k=10, lam=None,
                         initial=[(0.0, 2.0)])
        res = run_ensemble(spec, StepperConfig(dt=1e-2), [1.0], n_paths=3000,
                           master_seed=11, threads=1)
        masses = res.observable_matrix("mass")[:, 0]
        want = 2.0 * math.exp(-3.0)
        se = masses.std(ddof=1) / math.sqrt(len(masses))
        assert abs(masses.mean() - want) < 3 * se

    def test_critical_mass_mean(self):
        spec = spec_with(sigma=1.0, k=20, lam=None, initial=[(0.0, 1.0)])
        res = run_ensemble(spec, StepperConfig(dt=1e-2), [1.0], n_paths=2000,
                           master_seed=12, threads=1)
        masses = res.observable_matrix("mass")[:, 0]
        se = masses.std(ddof=1) / math.sqrt(len(masses))
        assert abs(masses.mean() - 1.0) < 3 * se

    def test_killed_mean_decay(self):
        spec = spec_with(sigma=0.5, levy=TAIL, k=25, lam=None, mode="killed")
        res = run_ensemble(spec, StepperConfig(dt=1e-2), [0.5], n_paths=1500,
                           master_seed=13, threads=1)
        masses = res.observable_matrix("mass")[:, 0]
        want = math.exp(-3.0 * 0.5)
        se = masses.std(ddof=1) / math.sqrt(len(masses))
        assert abs(masses.mean() - want) < 3 * se

    def test_full_mode_martingale(self):
        # tail weight kept small so mass stays far below the rate cap at k
        tail = LevyKernel.atomic([(0.25, 3.0)], l=2.0)
        spec = spec_with(sigma=0.5, levy=tail, k=50, lam=None, mode="full")
        res = run_ensemble(spec, StepperConfig(dt=1e-2), [0.25, 0.5, 1.0],
                           n_paths=2000, master_seed=14, threads=1)
        m = res.observable_matrix("mass")
        for j_lo, j_hi in ((0, 1), (1, 2), (0, 2)):
            diff = m[:, j_hi] - m[:, j_lo]
            se = diff.std(ddof=1) / math.sqrt(len(diff))
            assert abs(diff.mean()) < 3 * se

    def test_mass_variance(self):
        spec = spec_with(sigma=1.0, k=50, lam=None)
        res = run_ensemble(spec, StepperConfig(dt=1e-2), [1.0], n_paths=3000,
                           master_seed=15, threads=1)
        masses = res.observable_matrix("mass")[:, 0]
        var = masses.var(ddof=1)
        n = len(masses)
        m4 = spstats.moment(masses, 4)
        se_var = math.sqrt(max(m4 - var ** 2 * (n - 3) / (n - 1), 0.0) / n)
        assert abs(var - 1.0) < 3 * se_var + 1.0 / 50

    def test_hard_cap_aborts(self):
        spec = spec_with(sigma=0.0, levy=TAIL, k=100, lam=0.0, mode="full",
                         initial=[(0.0, 2.0)], horizon=50.0)
        traj = run(spec, StepperConfig(dt=1e-2), [50.0],
                   np.random.default_rng(16), hard_cap=1000)
        assert traj.status == "aborted-cap"

    def test_replay_determinism(self):
        spec = spec_with(sigma=1.0, levy=TAIL, k=8, lam=None, mode="full",
                         h=CoefficientFn.gaussian(0.5))
        t1 = run(spec, StepperConfig(dt=1e-2), [0.5, 1.0],
                 child_stream(99, "replay"), keep_events=True)
        t2 = run(spec, StepperConfig(dt=1e-2), [0.5, 1.0],
                 child_stream(99, "replay"), keep_events=True)
        assert len(t1.events) == len(t2.events)
        for a, b in zip(t1.events, t2.events):
            assert (a.time, a.kind, a.site, a.delta, a.xi) == \
                (b.time, b.kind, b.site, b.delta, b.xi)
        for s1, s2 in zip(t1.states, t2.states):
            assert np.array_equal(s1, s2)

    def test_lazy_and_eager_match_in_law(self):
        """The deferred-update fast path and the stepped path agree on the
        endpoint distribution (seed-paired KS on positions)."""
        base = dict(sigma=1.0, k=10, lam=None, initial=[(0.0, 1.0)])
        spec_lazy = spec_with(**base, c=1.0)
        # a table c that evaluates to 1 everywhere but is not marked constant
        c_tab = CoefficientFn.table(1.0, [(-100.0, 1.0), (100.0, 1.0)])
        spec_eager = make_spec(c=c_tab, sigma=CoefficientFn.constant(1.0),
                               h=CoefficientFn.zero(), levy=LevyKernel.empty(),
                               initial=[(0.0, 1.0)], k=10, branch_lambda=None,
                               horizon=1.0, mode="killed")
        obs_l, obs_e = [], []
        for i in range(400):
            t_l = run(spec_lazy, StepperConfig(dt=1e-2), [1.0],
                      child_stream(7, f"lz/{i}"))
            t_e = run(spec_eager, StepperConfig(dt=1e-2), [1.0],
                      child_stream(8, f"eg/{i}"))
            obs_l.append(t_l.states[0].sum() / 10)
            obs_e.append(t_e.states[0].sum() / 10)
        ks = spstats.ks_2samp(obs_l, obs_e)
        assert ks.pvalue > 1e-3

    def test_exchangeability_of_initial_labels(self):
        """Permuting initial atoms leaves observable laws unchanged
        (seed-paired KS over ensembles)."""
        spec_a = spec_with(sigma=0.5, k=6, lam=None,
                           initial=[(-1.0, 0.5), (1.0, 0.5)],
                           h=CoefficientFn.gaussian(0.5))
        spec_b = spec_with(sigma=0.5, k=6, lam=None,
                           initial=[(1.0, 0.5), (-1.0, 0.5)],
                           h=CoefficientFn.gaussian(0.5))
        phi = {"m1": lambda x: x}
        ra = run_ensemble(spec_a, StepperConfig(dt=1e-2), [1.0], 400,
                          master_seed=21, label="a", phis=phi, threads=1)
        rb = run_ensemble(spec_b, StepperConfig(dt=1e-2), [1.0], 400,
                          master_seed=22, label="b", phis=phi, threads=1)
        ks = spstats.ks_2samp(ra.observable_matrix("m1")[:, 0],
                              rb.observable_matrix("m1")[:, 0])
        assert ks.pvalue > 1e-3


class TestObserve:
    def _traj(self):
        spec = spec_with(sigma=0.0, lam=0.0, k=4, initial=[(0.0, 0.5), (2.0, 0.5)])
        return run(spec, StepperConfig(dt=1e-2), [0.0, 1.0],
                   np.random.default_rng(17))

    def test_total_mass(self):
        traj = self._traj()
        assert observe(traj, lambda x: np.ones_like(x), 0.0) == pytest.approx(1.0)
        assert mass_at(traj, 1.0) == pytest.approx(1.0)

    def test_point_observable_at_zero(self):
        spec = spec_with(sigma=0.0, lam=0.0, k=1)
        traj = run(spec, StepperConfig(dt=1e-2), [0.0], np.random.default_rng(18))
        assert observe(traj, lambda x: x ** 2, 0.0) == 0.0

    def test_non_snapshot_rejected(self):
        traj = self._traj()
        with pytest.raises(ValueError):
            observe(traj, lambda x: x, 0.37)

    def test_halfline_symmetry(self):
        spec = spec_with(sigma=0.5, k=10, lam=None, initial=[(0.0, 1.0)])
        res = run_ensemble(spec, StepperConfig(dt=1e-2), [1.0], 1200,
                           master_seed=23, threads=1,
                           phis={"right": lambda x: (x >= 0).astype(float)})
        right = res.observable_matrix("right")[:, 0]
        mass = res.observable_matrix("mass")[:, 0]
        diff = right - 0.5 * mass
        se = diff.std(ddof=1) / math.sqrt(len(diff))
        assert abs(diff.mean()) < 3 * se


class TestCensus:
    def test_killed_mode_no_jumps(self):
        spec = spec_with(sigma=0.5, levy=TAIL, k=10, lam=None, mode="killed")
        traj = run(spec, StepperConfig(dt=1e-2), [1.0], np.random.default_rng(19))
        census = jump_census(traj)
        assert census.count == 0

    def test_sizes_at_least_threshold(self):
        spec = spec_with(sigma=0.2, levy=TAIL, k=5, lam=None, mode="full",
                         initial=[(0.0, 3.0)], horizon=2.0)
        traj = run(spec, StepperConfig(dt=1e-2), [2.0], np.random.default_rng(20))
        census = jump_census(traj, threshold=2.0)
        assert all(s >= 2.0 for s in census.sizes)
        assert len(census.sizes) == census.count

    def test_count_matches_compensator(self):
        spec = spec_with(sigma=0.2, levy=LevyKernel.atomic([(0.5, 3.0)], l=2.0),
                         k=20, lam=None, mode="full")
        res = run_ensemble(spec, StepperConfig(dt=1e-2), [1.0], 2000,
                           master_seed=24, threads=1)
        diff = res.jump_counts - res.jump_integrals
        se = diff.std(ddof=1) / math.sqrt(len(diff))
        assert abs(diff.mean()) < 3 * se


class TestEnsembleParallel:
    def test_threads_do_not_change_results(self):
        spec = spec_with(sigma=1.0, levy=TAIL, k=8, lam=None, mode="full")
        r1 = run_ensemble(spec, StepperConfig(dt=1e-2), [0.5, 1.0], 64,
                          master_seed=31, threads=1)
        r2 = run_ensemble(spec, StepperConfig(dt=1e-2), [0.5, 1.0], 64,
                          master_seed=31, threads=2)
        assert np.array_equal(r1.rows, r2.rows)
        assert np.array_equal(r1.jump_counts, r2.jump_counts)
