"""Guessing games: rankings, tie rules, budgets, and the record format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dpaudit.canary import CanarySet
from dpaudit.errors import AssignmentError, BudgetError, DimensionError, FormatError
from dpaudit.game import (
    GuessRecord,
    PairAssignment,
    guess_pairs,
    guess_top_bottom,
    load_guess_record,
    make_pairs,
    run_audit_game,
    save_guess_record,
    split_canaries,
)
from dpaudit.models import ModelSpec, init_params

SPEC = ModelSpec(kind="logreg", input_dim=3, num_classes=2)


def canaries(m=8, split_seed=0):
    rng = np.random.default_rng(7)
    c = CanarySet(
        z=rng.uniform(size=(m, 3)),
        labels=rng.integers(0, 2, size=m).astype(np.int64),
        ids=100 + np.arange(m, dtype=np.int64),
    )
    assigned, membership = split_canaries(c, split_seed)
    assert np.array_equal(membership, assigned.membership)
    return assigned


class TestTopBottom:
    def test_known_ranking(self):
        scores = np.array([5.0, -2.0, 3.0, 0.0, -9.0])
        ids = np.arange(5)
        T = guess_top_bottom(scores, ids, k_pos=2, k_neg=1)
        assert list(T) == [1, 0, 1, 0, -1]

    def test_score_ties_break_by_ascending_id(self):
        scores = np.array([1.0, 1.0, 1.0, 0.0])
        ids = np.array([30, 10, 20, 40])
        T = guess_top_bottom(scores, ids, k_pos=1, k_neg=1)
        assert list(T) == [0, 1, 0, -1]

    def test_budget_zero_abstains_everywhere(self):
        T = guess_top_bottom(np.arange(6.0), np.arange(6), 0, 0)
        assert not T.any()

    def test_budget_overflow_rejected(self):
        with pytest.raises(BudgetError):
            guess_top_bottom(np.arange(4.0), np.arange(4), 3, 2)
        with pytest.raises(BudgetError):
            guess_top_bottom(np.arange(4.0), np.arange(4), -1, 0)

    @given(
        hnp.arrays(np.float64, st.integers(2, 30),
                   elements=st.floats(-100, 100, allow_nan=False)),
        st.data(),
    )
    @settings(max_examples=50, deadline=None)
    def test_budgets_always_exhausted_without_overlap(self, scores, data):
        m = len(scores)
        k_pos = data.draw(st.integers(0, m))
        k_neg = data.draw(st.integers(0, m - k_pos))
        T = guess_top_bottom(scores, np.arange(m), k_pos, k_neg)
        assert int((T == 1).sum()) == k_pos
        assert int((T == -1).sum()) == k_neg

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_permutation_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        m = 12
        scores = rng.standard_normal(m)
        ids = rng.permutation(1000 + np.arange(m))
        T = guess_top_bottom(scores, ids, 3, 4)
        perm = rng.permutation(m)
        T_perm = guess_top_bottom(scores[perm], ids[perm], 3, 4)
        assert np.array_equal(T_perm, T[perm])


class TestPairs:
    def test_widest_gaps_win(self):
        scores = np.array([10.0, 0.0, 5.0, 4.0, -3.0, 3.0])
        pairs = PairAssignment(np.array([[0, 1], [2, 3], [4, 5]]))
        T, k = guess_pairs(scores, pairs, 2)
        assert k == 2
        assert list(T) == [1, 0, -1]

    def test_equal_scores_guess_second_member(self):
        scores = np.array([2.0, 2.0])
        T, _ = guess_pairs(scores, PairAssignment(np.array([[0, 1]])), 1)
        assert list(T) == [-1]

    def test_gap_ties_rank_by_pair_position(self):
        scores = np.array([1.0, 0.0, 3.0, 2.0, 9.0, 8.0])
        pairs = PairAssignment(np.array([[0, 1], [2, 3], [4, 5]]))
        T, _ = guess_pairs(scores, pairs, 2)
        assert list(T) == [1, 1, 0]

    def test_budget_bounds(self):
        pairs = PairAssignment(np.array([[0, 1]]))
        with pytest.raises(BudgetError):
            guess_pairs(np.zeros(2), pairs, 2)
        with pytest.raises(BudgetError):
            guess_pairs(np.zeros(2), pairs, -1)

    def test_duplicate_canary_rejected(self):
        with pytest.raises(AssignmentError):
            PairAssignment(np.array([[0, 1], [1, 2]]))

    def test_make_pairs_one_in_one_out(self):
        c = canaries(m=10)
        for seed in range(5):
            pairs = make_pairs(c, seed).pairs
            assert pairs.shape == (5, 2)
            assert np.array_equal(np.sort(pairs.ravel()), np.arange(10))
            memb = c.in_mask[pairs]
            assert np.all(memb.sum(axis=1) == 1)

    def test_make_pairs_shuffles_member_order(self):
        c = canaries(m=40)
        firsts = np.concatenate([c.in_mask[make_pairs(c, s).pairs[:, 0]] for s in range(10)])
        assert 0.2 < firsts.mean() < 0.8

    def test_make_pairs_deterministic(self):
        c = canaries(m=10)
        assert np.array_equal(make_pairs(c, 3).pairs, make_pairs(c, 3).pairs)


class TestRunGame:
    def test_steinke_record(self):
        c = canaries()
        w = init_params(SPEC, 0)
        rec = run_audit_game(SPEC, w, c, "steinke", (2, 3))
        assert rec.variant == "steinke"
        assert rec.m_canaries == 8 and rec.n_units == 8
        assert rec.guess_budget == 5
        assert np.array_equal(rec.unit_ids, c.ids)
        assert np.array_equal(rec.S, c.membership)
        assert rec.v == int(((rec.T == rec.S) & (rec.T != 0)).sum())

    def test_pairs_record(self):
        c = canaries()
        w = init_params(SPEC, 0)
        rec = run_audit_game(SPEC, w, c, "pairs", 3, seed=1)
        assert rec.variant == "pairs"
        assert rec.m_canaries == 8 and rec.n_units == 4
        assert rec.k_pos == 3 and rec.k_neg == 0
        assert rec.pair_member_ids.shape == (4, 2)
        # S says whether the first listed member is the IN one
        id_to_in = dict(zip(c.ids.tolist(), c.in_mask.tolist()))
        for s, (a, b) in zip(rec.S, rec.pair_member_ids):
            assert id_to_in[int(a)] == (s == 1)
            assert id_to_in[int(b)] == (s == -1)
        assert (rec.scores >= 0).all()

    def test_budget_shape_enforced_per_variant(self):
        c = canaries()
        w = init_params(SPEC, 0)
        with pytest.raises(BudgetError):
            run_audit_game(SPEC, w, c, "steinke", 4)
        with pytest.raises(BudgetError):
            run_audit_game(SPEC, w, c, "pairs", (2, 2))
        with pytest.raises(DimensionError):
            run_audit_game(SPEC, w, c, "shadow", (2, 2))

    def test_unsplit_set_rejected(self):
        rng = np.random.default_rng(0)
        c = CanarySet(rng.uniform(size=(4, 3)), np.zeros(4, dtype=np.int64),
                      np.arange(4, dtype=np.int64))
        with pytest.raises(AssignmentError):
            run_audit_game(SPEC, init_params(SPEC, 0), c, "steinke", (1, 1))


class TestGuessRecordValidation:
    def base(self, **kw):
        fields = dict(
            variant="steinke",
            S=np.array([1, -1, 1, -1], dtype=np.int8),
            T=np.array([1, 0, 0, -1], dtype=np.int8),
            v=2,
            k_pos=1,
            k_neg=1,
            m_canaries=4,
            unit_ids=np.arange(4),
            scores=np.linspace(1, 0, 4),
        )
        fields.update(kw)
        return GuessRecord(**fields)

    def test_valid(self):
        rec = self.base()
        assert rec.n_units == 4

    def test_bad_membership_value(self):
        with pytest.raises(DimensionError):
            self.base(S=np.array([1, -1, 2, -1], dtype=np.int8))

    def test_budget_mismatch(self):
        with pytest.raises(BudgetError):
            self.base(k_pos=2)

    def test_wrong_v(self):
        with pytest.raises(DimensionError):
            self.base(v=3)

    def test_unknown_variant(self):
        with pytest.raises(DimensionError):
            self.base(variant="top5")


class TestRecordIO:
    def test_round_trip_both_variants(self, tmp_path):
        c = canaries()
        w = init_params(SPEC, 3)
        for variant, budget in (("steinke", (2, 2)), ("pairs", 3)):
            rec = run_audit_game(SPEC, w, c, variant, budget, seed=5)
            p = str(tmp_path / f"{variant}.txt")
            save_guess_record(rec, p)
            back = load_guess_record(p)
            assert back.variant == rec.variant
            assert back.v == rec.v
            assert back.k_pos == rec.k_pos and back.k_neg == rec.k_neg
            assert back.m_canaries == rec.m_canaries
            assert np.array_equal(back.S, rec.S)
            assert np.array_equal(back.T, rec.T)
            assert np.array_equal(back.unit_ids, rec.unit_ids)
            # repr round trip keeps scores bit-exact
            assert back.scores.tobytes() == rec.scores.tobytes()
            if variant == "pairs":
                assert np.array_equal(back.pair_member_ids, rec.pair_member_ids)
            else:
                assert back.pair_member_ids is None

    def test_missing_header_field(self, tmp_path):
        p = tmp_path / "r.txt"
        p.write_text("# dpaudit-guess-record v1\n# variant=steinke\n1 1 1 0.5\n")
        with pytest.raises(FormatError):
            load_guess_record(str(p))

    def test_wrong_column_count(self, tmp_path):
        p = tmp_path / "r.txt"
        p.write_text(
            "# dpaudit-guess-record v1\n# variant=steinke\n# m_canaries=1\n"
            "# k_pos=1\n# k_neg=0\n# v=1\n1 1 1 0.5 9\n"
        )
        with pytest.raises(FormatError) as ei:
            load_guess_record(str(p))
        assert "columns" in str(ei.value)

    def test_no_rows(self, tmp_path):
        p = tmp_path / "r.txt"
        p.write_text(
            "# dpaudit-guess-record v1\n# variant=steinke\n# m_canaries=2\n"
            "# k_pos=0\n# k_neg=0\n# v=0\n"
        )
        with pytest.raises(FormatError):
            load_guess_record(str(p))

    def test_inconsistent_payload_rejected_on_load(self, tmp_path):
        # the loader revalidates v against S and T
        p = tmp_path / "r.txt"
        p.write_text(
            "# dpaudit-guess-record v1\n# variant=steinke\n# m_canaries=2\n"
            "# k_pos=1\n# k_neg=0\n# v=0\n10 1 1 0.5\n11 -1 0 0.25\n"
        )
        with pytest.raises(DimensionError):
            load_guess_record(str(p))
