"""Offspring-law construction and scaling tests.

The high-precision oracle re-evaluates the mixture generating function with
mpmath arithmetic and extracts series coefficients by high-precision
differentiation, independently of the Poisson-form analytic extraction.
"""

import math

import mpmath
import numpy as np
import pytest

from sdsm.branching import (
    BranchingScheme,
    LawTable,
    build_offspring_law,
    convergence_report,
    dz_psi_k_at_zero,
    g1_eval,
    lambda1_of_k,
    psi_k_eval,
    sample_offspring,
    suggest_j_max,
)
from sdsm.kernels import (
    CoefficientFn,
    ConfigurationError,
    LevyKernel,
    make_spec,
    psi_killed,
)


def spec_with(sigma=1.0, levy=None, lam=1.0):
    return make_spec(c=CoefficientFn.constant(1.0),
                     sigma=CoefficientFn.constant(sigma),
                     h=CoefficientFn.zero(),
                     levy=levy if levy is not None else LevyKernel.empty(),
                     initial=[(0.0, 1.0)],
                     branch_lambda=lam)


PURE_KILL = LevyKernel.atomic([(1.0, 3.0)], l=2.0)
SMALL_ATOM = LevyKernel.atomic([(1.0, 1.0)], l=2.0)
MIXED = LevyKernel.atomic([(1.0, 0.5), (1.0, 3.0)], l=2.0)


class TestLambda1:
    def test_sigma_only(self):
        assert lambda1_of_k(spec_with(sigma=1.0), 4) == pytest.approx(5.0)

    def test_trivial(self):
        assert lambda1_of_k(spec_with(sigma=0.0), 7) == pytest.approx(1.0)

    def test_small_atom(self):
        got = lambda1_of_k(spec_with(sigma=0.0, levy=SMALL_ATOM), 1)
        assert got == pytest.approx(1.0 + (1.0 - math.exp(-1.0)), rel=1e-12)


class TestG1:
    def test_fixed_point_at_one(self):
        spec = spec_with(sigma=0.7, levy=SMALL_ATOM)
        for k in (1, 5, 20):
            assert g1_eval(spec, k, 0.0, 1.0) == pytest.approx(1.0, abs=1e-14)

    def test_sigma_value_at_zero(self):
        # psi_small(x, 4) / (4 * 5) = 8/20
        assert g1_eval(spec_with(sigma=1.0), 4, 0.0, 0.0) == pytest.approx(0.4)

    def test_identity_when_trivial(self):
        spec = spec_with(sigma=0.0)
        zs = np.linspace(0, 1, 11)
        assert np.allclose(g1_eval(spec, 3, 0.0, zs), zs, atol=1e-15)


class TestBuildLaw:
    def test_sigma_closed_form(self):
        law = build_offspring_law(spec_with(sigma=1.0), 4, 0.0)
        assert law.probs[0] == pytest.approx(0.4, abs=1e-14)
        assert law.probs[1] == pytest.approx(0.2, abs=1e-14)
        assert law.probs[2] == pytest.approx(0.4, abs=1e-14)
        assert law.mean() == pytest.approx(1.0, abs=1e-12)
        assert law.probs[3:].sum() == 0.0

    def test_general_k_closed_form(self):
        for k in (1, 3, 10, 57):
            law = build_offspring_law(spec_with(sigma=1.0), k, 0.0)
            assert law.probs[0] == pytest.approx(k / (2.0 * (k + 1)), abs=1e-13)
            assert law.probs[1] == pytest.approx(1.0 / (k + 1), abs=1e-13)

    def test_identity_when_no_branching(self):
        law = build_offspring_law(spec_with(sigma=0.0), 5, 0.0)
        assert law.probs[1] == 1.0
        assert law.mean() == 1.0

    def test_pure_killing_site(self):
        law = build_offspring_law(spec_with(sigma=0.0, levy=PURE_KILL), 5, 0.0)
        assert law.lambda_k == pytest.approx(3.0)
        assert law.probs[0] == pytest.approx(1.0)
        assert law.probs[1:].sum() == pytest.approx(0.0)

    def test_remainder_guard(self):
        # sub-threshold atom at xi=0.5 with k=100 concentrates offspring near
        # j=50; a 10-bucket truncation must be refused
        spec = spec_with(sigma=0.0, levy=MIXED)
        with pytest.raises(ConfigurationError):
            build_offspring_law(spec, 100, 0.0, j_max=10)
        law = build_offspring_law(spec, 100, 0.0, j_max=suggest_j_max(spec, 100))
        assert law.truncation_remainder < 1e-8

    def test_subcriticality(self):
        for levy in (LevyKernel.empty(), SMALL_ATOM, MIXED, PURE_KILL):
            spec = spec_with(sigma=0.5, levy=levy)
            law = build_offspring_law(spec, 20, 0.0,
                                      j_max=suggest_j_max(spec, 20))
            assert law.mean() <= 1.0 + 1e-9
            if levy.has_tail_part():
                assert law.mean() < 1.0 - 1e-6
            else:
                assert law.mean() == pytest.approx(1.0, abs=1e-9)

    def test_generating_function_consistency(self):
        spec = spec_with(sigma=0.8, levy=MIXED)
        k = 12
        scheme = BranchingScheme.build(spec, k)
        law = build_offspring_law(spec, k, 0.0, j_max=suggest_j_max(spec, k),
                                  scheme=scheme)
        zs = np.linspace(0.0, 1.0, 41)
        series = np.array([np.dot(law.probs, z ** np.arange(len(law.probs)))
                           for z in zs])
        direct = scheme.gk(0.0, zs)
        assert np.max(np.abs(series - direct)) <= law.truncation_remainder + 1e-9

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_extraction_against_mpmath_oracle(self, seed):
        """Series coefficients from high-precision differentiation of the
        mixture generating function agree with the analytic extraction."""
        rng = np.random.default_rng(seed)
        entries = [(float(rng.uniform(0.1, 1.5)), float(rng.uniform(0.1, 1.9)))
                   for _ in range(rng.integers(1, 4))]
        entries.append((float(rng.uniform(0.1, 1.0)), float(rng.uniform(2.0, 5.0))))
        sig = float(rng.uniform(0.0, 2.0))
        spec = spec_with(sigma=sig, levy=LevyKernel.atomic(entries, l=2.0))
        k = int(rng.integers(1, 8))
        scheme = BranchingScheme.build(spec, k)
        law = build_offspring_law(spec, k, 0.0, j_max=suggest_j_max(spec, k),
                                  scheme=scheme)

        mpmath.mp.dps = 40
        sub = [(w, xi) for w, xi in entries if xi < 2.0]
        b = sum(w * xi for w, xi in entries if xi >= 2.0)
        lam1 = mpmath.mpf(scheme.lambda1)
        lam2 = mpmath.mpf(scheme.lambda2)
        lamk = lam1 + lam2

        def psi1(u):
            return (mpmath.mpf(sig) * u * u / 2
                    + sum(w * (mpmath.expm1(-u * xi) + u * xi) for w, xi in sub))

        def gk(z):
            g1 = z + psi1(k * (1 - z)) / (k * lam1)
            g2 = z + b * (1 - z) / lam2 if lam2 > 0 else 0
            return (lam1 * g1 + lam2 * g2) / lamk

        coeffs = mpmath.taylor(gk, 0, 6)
        for j in range(7):
            assert float(coeffs[j]) == pytest.approx(float(law.probs[j]),
                                                     abs=1e-8)


class TestPsiK:
    def test_zero(self):
        assert psi_k_eval(spec_with(sigma=1.0), 4, 0.0, 0.0) == 0.0

    def test_sigma_exact(self):
        for k in (2, 4, 16):
            assert psi_k_eval(spec_with(sigma=1.0), k, 0.0, 2.0) == \
                pytest.approx(2.0, abs=1e-12)

    def test_pure_killing(self):
        spec = spec_with(sigma=0.0, levy=PURE_KILL)
        assert psi_k_eval(spec, 5, 0.0, 1.0) == pytest.approx(3.0, abs=1e-12)

    def test_domain_enforced(self):
        with pytest.raises(ConfigurationError):
            psi_k_eval(spec_with(), 4, 0.0, 5.0)

    def test_matches_killed_mechanism_exactly(self):
        """The two-component construction reproduces the killed mechanism
        identically on [0, k], for every kernel shape."""
        for levy in (LevyKernel.empty(), SMALL_ATOM, PURE_KILL, MIXED):
            spec = spec_with(sigma=0.7, levy=levy)
            for k in (2, 10, 100):
                zs = np.linspace(0.0, min(k, 8.0), 101)
                got = psi_k_eval(spec, k, 0.3, zs)
                want = psi_killed(spec, 0.3, zs)
                assert np.max(np.abs(got - want)) < 1e-10

    def test_analytic_derivative_at_zero(self):
        spec = spec_with(sigma=0.4, levy=MIXED)
        for k in (3, 30):
            got = dz_psi_k_at_zero(spec, k, 0.0)
            assert got == pytest.approx(spec.levy.tail_mean(0.0), abs=1e-10)


class TestConvergenceReport:
    def test_empty_kernel_exact(self):
        rep = convergence_report(spec_with(sigma=1.0), [2, 8, 32])
        assert all(e < 1e-10 for e in rep.sup_errors)

    def test_single_k(self):
        rep = convergence_report(spec_with(sigma=0.5), [7])
        assert len(rep.sup_errors) == 1 and len(rep.k_values) == 1

    def test_sub_threshold_atoms_stay_exact(self):
        # the construction is exact for every atomic kernel, so the report
        # certifies machine-level agreement rather than a decaying error
        spec = spec_with(sigma=0.5, levy=MIXED)
        rep = convergence_report(spec, [10, 100])
        assert all(e < 1e-9 for e in rep.sup_errors)
        assert all(d < 1e-4 for d in rep.derivative_errors)


class TestSampling:
    def test_deterministic_laws(self):
        law1 = build_offspring_law(spec_with(sigma=0.0), 3, 0.0)
        rng = np.random.default_rng(5)
        assert all(sample_offspring(law1, rng) == 1 for _ in range(100))
        law0 = build_offspring_law(spec_with(sigma=0.0, levy=PURE_KILL), 3, 0.0)
        assert all(sample_offspring(law0, rng) == 0 for _ in range(100))

    def test_empirical_frequencies(self):
        law = build_offspring_law(spec_with(sigma=1.0), 4, 0.0)
        rng = np.random.default_rng(42)
        n = 10 ** 6
        draws = np.searchsorted(law.cum, rng.random(n), side="right")
        for j, p in ((0, 0.4), (1, 0.2), (2, 0.4)):
            freq = np.mean(draws == j)
            se = math.sqrt(p * (1 - p) / n)
            assert abs(freq - p) < 4 * se


class TestLawTable:
    def test_homogeneous_single_bucket(self):
        table = LawTable(spec_with(sigma=1.0), 4)
        a = table.law_at(0.0)
        b = table.law_at(17.3)
        assert a is b

    def test_bucketed_vs_exact(self):
        sig = CoefficientFn.gaussian(1.0, 0.0, 2.0)
        spec = make_spec(c=CoefficientFn.constant(1.0), sigma=sig,
                         h=CoefficientFn.gaussian(0.5, 0.0, 1.0),
                         levy=LevyKernel.empty(), initial=[(0.0, 1.0)])
        table = LawTable(spec, 4)
        exact = LawTable(spec, 4, exact=True)
        x = 0.73
        lb = table.law_at(x)
        le = exact.law_at(x)
        # bucket center within one grid step of the site
        assert abs(lb.x - x) <= table.bucket_width
        assert np.max(np.abs(lb.probs[:3] - le.probs[:3])) < 0.05
