"""Epsilon estimators: tail bounds, trade-off recursion, serialization.

The pinned estimate values were frozen from Monte Carlo validation against
randomized response run at a known privacy level; see the acceptance tests
for the live soundness checks.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from dpaudit.bounds import (
    EpsilonEstimate,
    TradeoffCurve,
    binom_tail,
    estimate_from_record,
    fdp_guess_test,
    pairs_epsilon_lb,
    simulate_rr_audit,
    steinke_epsilon_lb,
    steinke_prob_bound,
)
from dpaudit.errors import BudgetError, DimensionError, FormatError
from dpaudit.game import GuessRecord


class TestBinomTail:
    def test_edge_cases(self):
        assert binom_tail(0, 10, 1.0) == 1.0
        assert binom_tail(-3, 10, 1.0) == 1.0
        assert binom_tail(11, 10, 1.0) == 0.0
        with pytest.raises(BudgetError):
            binom_tail(1, -1, 1.0)

    def test_matches_direct_sum(self):
        eps, r = 0.7, 12
        p = 1.0 / (1.0 + math.exp(-eps))
        for v in range(1, r + 1):
            direct = sum(
                special.comb(r, j, exact=True) * p**j * (1 - p) ** (r - j)
                for j in range(v, r + 1)
            )
            assert binom_tail(v, r, eps) == pytest.approx(direct, rel=1e-10)

    def test_zero_eps_is_fair_coin(self):
        assert binom_tail(1, 1, 0.0) == pytest.approx(0.5)

    @given(st.integers(1, 30), st.floats(0, 10), st.floats(0, 10))
    @settings(max_examples=40, deadline=None)
    def test_monotone_increasing_in_eps(self, r, e1, e2):
        lo, hi = sorted([e1, e2])
        v = r // 2 + 1
        assert binom_tail(v, r, lo) <= binom_tail(v, r, hi) + 1e-15


class TestProbBound:
    def test_delta_zero_is_plain_tail(self):
        assert steinke_prob_bound(6, 10, 20, 1.0, 0.0) == binom_tail(6, 10, 1.0)

    def test_delta_only_increases(self):
        base = steinke_prob_bound(6, 10, 20, 1.0, 0.0)
        assert steinke_prob_bound(6, 10, 20, 1.0, 1e-4) >= base

    def test_clipped_to_unit_interval(self):
        assert steinke_prob_bound(1, 10, 10, 0.0, 0.3) == 1.0

    def test_validation(self):
        with pytest.raises(BudgetError):
            steinke_prob_bound(1, 0, 10, 1.0, 0.0)
        with pytest.raises(BudgetError):
            steinke_prob_bound(1, 11, 10, 1.0, 0.0)
        with pytest.raises(DimensionError):
            steinke_prob_bound(1, 5, 10, -0.1, 0.0)
        with pytest.raises(DimensionError):
            steinke_prob_bound(1, 5, 10, 1.0, -1e-9)


class TestSteinkeEstimator:
    def test_pinned_values(self):
        got = steinke_epsilon_lb(30, 40, 200, delta=1e-5, tau=0.05)
        assert got.epsilon_lb == pytest.approx(0.458, abs=2e-3)
        assert not got.saturated
        got = steinke_epsilon_lb(296, 400, 400, delta=0.0, tau=0.05)
        assert got.epsilon_lb == pytest.approx(0.854, abs=2e-3)

    def test_chance_performance_gives_zero(self):
        assert steinke_epsilon_lb(20, 40, 200, delta=0.0).epsilon_lb == 0.0
        assert steinke_epsilon_lb(0, 40, 200, delta=0.0).epsilon_lb == 0.0

    def test_estimate_is_boundary_of_rejection_region(self):
        est = steinke_epsilon_lb(30, 40, 200, delta=1e-5, tau=0.05, tol=1e-4)
        assert steinke_prob_bound(30, 40, 200, est.epsilon_lb, 1e-5) < 0.05
        assert steinke_prob_bound(30, 40, 200, est.epsilon_lb + 3e-4, 1e-5) >= 0.05

    def test_saturation_flagged(self):
        est = steinke_epsilon_lb(100, 100, 100, delta=0.0, eps_max=0.5)
        assert est.saturated and est.epsilon_lb == 0.5

    def test_monotone_in_correct_count(self):
        prev = -1.0
        for v in range(20, 41, 4):
            cur = steinke_epsilon_lb(v, 40, 200, delta=1e-5).epsilon_lb
            assert cur >= prev
            prev = cur

    def test_tau_validation(self):
        with pytest.raises(DimensionError):
            steinke_epsilon_lb(30, 40, 200, delta=0.0, tau=0.0)
        with pytest.raises(DimensionError):
            steinke_epsilon_lb(30, 40, 200, delta=0.0, tau=1.0)

    def test_metadata(self):
        est = steinke_epsilon_lb(30, 40, 200, delta=1e-5)
        assert est.procedure == "steinke"
        assert est.m == 200 and est.guess_budget == 40 and est.correct == 30


class TestTradeoffCurve:
    def test_validation(self):
        with pytest.raises(DimensionError):
            TradeoffCurve(-1.0)
        with pytest.raises(DimensionError):
            TradeoffCurve(1.0, delta=1.0)
        with pytest.raises(DimensionError):
            TradeoffCurve(1.0, form="exact")

    def test_perfect_privacy_is_diagonal(self):
        curve = TradeoffCurve(0.0, 0.0)
        x = np.linspace(0, 1, 11)
        assert np.allclose(curve.f(x), 1 - x)
        assert np.allclose(curve.f_inv(x), 1 - x)

    def test_range_and_monotonicity(self):
        for form in ("symmetric", "one_sided"):
            curve = TradeoffCurve(1.3, 1e-4, form=form)
            x = np.linspace(0, 1, 201)
            y = curve.f(x)
            assert (y >= 0).all() and (y <= 1).all()
            assert (np.diff(y) <= 1e-15).all()
            assert curve.f(0.0) == pytest.approx(1 - 1e-4)

    def test_symmetric_involution_on_support(self):
        curve = TradeoffCurve(0.8, 0.0)
        x = np.linspace(0.01, 0.5, 40)
        inside = curve.f(x) > 0
        assert np.allclose(curve.f(curve.f(x[inside])), x[inside], atol=1e-12)

    def test_one_sided_below_symmetric(self):
        x = np.linspace(0, 1, 101)
        sym = TradeoffCurve(1.1, 1e-5, form="symmetric")
        one = TradeoffCurve(1.1, 1e-5, form="one_sided")
        assert (one.f(x) <= sym.f(x) + 1e-15).all()

    def test_f_inv_is_least_preimage(self):
        curve = TradeoffCurve(1.5, 1e-4)
        for y in (0.05, 0.2, 0.6):
            x = float(curve.f_inv(y))
            assert curve.f(x) <= y + 1e-12
            if x > 1e-9:
                assert curve.f(x - 1e-9) > y - 1e-12


class TestPairedTest:
    def test_perfect_guesser_rejects_low_eps_accepts_high(self):
        curve_lo = TradeoffCurve(0.1, 0.0)
        curve_hi = TradeoffCurve(10.0, 0.0)
        assert fdp_guess_test(curve_lo, 0.05, 30, 30, 200)
        assert not fdp_guess_test(curve_hi, 0.05, 30, 30, 200)

    def test_validation(self):
        curve = TradeoffCurve(1.0)
        with pytest.raises(BudgetError):
            fdp_guess_test(curve, 0.05, 0, 1, 10)
        with pytest.raises(BudgetError):
            fdp_guess_test(curve, 0.05, 11, 5, 10)
        with pytest.raises(BudgetError):
            fdp_guess_test(curve, 0.05, 5, 6, 10)
        with pytest.raises(BudgetError):
            fdp_guess_test(curve, 0.05, 5, 0, 10)
        with pytest.raises(DimensionError):
            fdp_guess_test(curve, 0.0, 5, 3, 10)
        with pytest.raises(DimensionError):
            fdp_guess_test(curve, 0.05, 5, 3, 10, s=1)

    def test_scalar_matches_grid_estimator(self):
        from dpaudit.bounds import _guess_test_grid

        # the vectorized grid sweep must agree with the scalar recursion
        grid = np.arange(0.0, 4.0, 0.1)
        for kprime, k, m, delta in ((30, 30, 200, 1e-5), (25, 30, 200, 0.0)):
            vec = _guess_test_grid(grid, delta, 0.05, k, kprime, m)
            scalar = [
                fdp_guess_test(TradeoffCurve(e, delta), 0.05, k, kprime, m)
                for e in grid
            ]
            assert list(vec) == scalar

    def test_estimate_is_last_rejected_grid_point(self):
        for kprime, k, m, delta in ((30, 30, 200, 1e-5), (25, 30, 200, 1e-5)):
            est = pairs_epsilon_lb(kprime, k, m, delta)
            assert fdp_guess_test(TradeoffCurve(est.epsilon_lb, delta), 0.05, k, kprime, m)
            assert not fdp_guess_test(
                TradeoffCurve(est.epsilon_lb + 0.01, delta), 0.05, k, kprime, m
            )


class TestPairsEstimator:
    def test_pinned_values(self):
        assert pairs_epsilon_lb(30, 30, 200, delta=1e-5).epsilon_lb == pytest.approx(
            2.25, abs=1e-9
        )
        assert pairs_epsilon_lb(25, 30, 200, delta=1e-5).epsilon_lb == pytest.approx(
            0.73, abs=1e-9
        )
        assert pairs_epsilon_lb(200, 200, 200, delta=1e-5).epsilon_lb == pytest.approx(
            4.19, abs=1e-9
        )

    def test_zero_correct_gives_zero(self):
        est = pairs_epsilon_lb(0, 30, 200, delta=0.0)
        assert est.epsilon_lb == 0.0 and est.correct == 0

    def test_chance_performance_gives_zero(self):
        assert pairs_epsilon_lb(15, 30, 200, delta=0.0).epsilon_lb == 0.0

    def test_rejection_region_is_a_prefix_of_the_grid(self):
        from dpaudit.bounds import _guess_test_grid

        grid = np.arange(0.0, 8.0, 0.01)
        for kprime, k in ((30, 30), (25, 30), (28, 40)):
            verdicts = _guess_test_grid(grid, 1e-5, 0.05, k, kprime, 200)
            flips = np.diff(verdicts.astype(int))
            assert (flips <= 0).all()

    def test_saturation_flagged(self):
        est = pairs_epsilon_lb(30, 30, 200, delta=0.0, eps_max=1.0)
        assert est.saturated and est.epsilon_lb == 1.0

    def test_monotone_in_correct_count(self):
        prev = -1.0
        for kprime in range(15, 31, 3):
            cur = pairs_epsilon_lb(kprime, 30, 200, delta=1e-5).epsilon_lb
            assert cur >= prev
            prev = cur

    def test_one_sided_is_no_tighter(self):
        sym = pairs_epsilon_lb(28, 30, 200, delta=0.0, form="symmetric").epsilon_lb
        one = pairs_epsilon_lb(28, 30, 200, delta=0.0, form="one_sided").epsilon_lb
        assert one <= sym


class TestDispatchAndSerialization:
    def steinke_record(self):
        return GuessRecord(
            variant="steinke",
            S=np.array([1, -1, 1, -1, 1, -1], dtype=np.int8),
            T=np.array([1, 0, 1, -1, 0, 0], dtype=np.int8),
            v=3,
            k_pos=2,
            k_neg=1,
            m_canaries=6,
            unit_ids=np.arange(6),
            scores=np.linspace(1, 0, 6),
        )

    def pairs_record(self):
        return GuessRecord(
            variant="pairs",
            S=np.array([1, -1, 1], dtype=np.int8),
            T=np.array([1, -1, 0], dtype=np.int8),
            v=2,
            k_pos=2,
            k_neg=0,
            m_canaries=6,
            unit_ids=np.arange(3),
            scores=np.array([0.9, 0.5, 0.1]),
            pair_member_ids=np.array([[0, 1], [2, 3], [4, 5]]),
        )

    def test_steinke_dispatch(self):
        rec = self.steinke_record()
        est = estimate_from_record(rec, tau=0.05, delta=0.0)
        want = steinke_epsilon_lb(3, 3, 6, delta=0.0, tau=0.05)
        assert est.epsilon_lb == want.epsilon_lb
        assert est.record is rec

    def test_pairs_dispatch_uses_pair_count(self):
        rec = self.pairs_record()
        est = estimate_from_record(rec, tau=0.05, delta=0.0)
        want = pairs_epsilon_lb(2, 2, 3, delta=0.0, tau=0.05)
        assert est.epsilon_lb == want.epsilon_lb
        assert est.m == 3 and est.guess_budget == 2 and est.correct == 2

    def test_json_round_trip(self):
        est = steinke_epsilon_lb(30, 40, 200, delta=1e-5)
        back = EpsilonEstimate.from_json_line(est.to_json_line())
        assert back == est

    def test_json_errors(self):
        with pytest.raises(FormatError):
            EpsilonEstimate.from_json_line("{not json")
        with pytest.raises(FormatError):
            EpsilonEstimate.from_json_line('{"procedure": "steinke"}')


class TestSimulator:
    def test_odd_budget_rejected(self):
        with pytest.raises(BudgetError):
            simulate_rr_audit(1.0, 50, 11, 5, procedure="steinke")

    def test_unknown_procedure(self):
        with pytest.raises(DimensionError):
            simulate_rr_audit(1.0, 50, 10, 5, procedure="shokri")

    def test_smoke_violation_rates_small(self):
        for proc, m, budget in (("steinke", 100, 20), ("pairs", 60, 12)):
            rate, ests = simulate_rr_audit(
                1.0, m, budget, trials=60, procedure=proc, seed=4
            )
            assert ests.shape == (60,)
            assert np.isfinite(ests).all()
            assert rate <= 0.2

    def test_deterministic(self):
        r1, e1 = simulate_rr_audit(0.5, 40, 10, 20, procedure="pairs", seed=9)
        r2, e2 = simulate_rr_audit(0.5, 40, 10, 20, procedure="pairs", seed=9)
        assert r1 == r2 and np.array_equal(e1, e2)
