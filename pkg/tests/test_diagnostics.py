import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpc_decode import Action, TabularPolicy, TabularPolicySpec
from mpc_decode.diagnostics import (
    CalibrationRecord,
    DiagnosticsError,
    diversity,
    ece,
    ece_binary,
    flops,
    myopic_gap_approx,
    myopic_gap_exact,
    pass_at_k,
    rouge_l_f1,
    spearman_rho,
)

from helpers import myopic_trap_tables, random_tabular_policy, tabular_policy_from_tables


def policy_from(tables, texts=("a", "b")):
    return tabular_policy_from_tables(texts, tables)


class TestMyopicGapExact:
    def test_deterministic_chain_has_zero_gap(self):
        pol = policy_from({(): (1.0, 0.0), ("a",): (1.0, 0.0), ("b",): (1.0, 0.0)})
        assert myopic_gap_exact(pol, 2) == 0.0

    def test_spec_example_greedy_finds_max(self):
        # joint table {aa: .2, ab: .25, ba: .3, bb: .25}; greedy picks b then
        # a, which is also the global max, so the gap vanishes
        tables = {
            (): (0.45, 0.55),
            ("a",): (0.2 / 0.45, 0.25 / 0.45),
            ("b",): (0.3 / 0.55, 0.25 / 0.55),
        }
        assert abs(myopic_gap_exact(policy_from(tables), 2)) <= 1e-12

    def test_trap_fixture_gap_is_point_one(self):
        texts, tables = myopic_trap_tables()
        gap = myopic_gap_exact(policy_from(tables, texts), 2)
        assert gap == pytest.approx(0.1, abs=1e-12)

    def test_gap_never_negative(self):
        for seed in range(12):
            pol, _ = random_tabular_policy(3, 3, seed=seed)
            assert myopic_gap_exact(pol, 3) >= 0.0

    def test_enumeration_guard(self):
        pol, _ = random_tabular_policy(4, 3, seed=0)
        with pytest.raises(DiagnosticsError, match="guard"):
            myopic_gap_exact(pol, 50)


class TestMyopicGapApprox:
    def full_candidates(self, texts, horizon):
        import itertools

        return [
            [Action(t) for t in seq]
            for seq in itertools.product(texts, repeat=horizon)
        ]

    def test_greedy_only_candidate_set_is_non_myopic(self):
        texts, tables = myopic_trap_tables()
        pol = policy_from(tables, texts)
        gap, myopic = myopic_gap_approx(pol, [[Action("a"), Action("a")]])
        assert gap == 0.0 and not myopic

    def test_agrees_with_exact_under_full_enumeration(self):
        for seed in range(8):
            pol, (texts, _) = random_tabular_policy(3, 3, seed=seed)
            exact = myopic_gap_exact(pol, 3)
            approx, _ = myopic_gap_approx(pol, self.full_candidates(texts, 3))
            assert approx == pytest.approx(exact, abs=1e-12)

    def test_classification_threshold_is_strict(self):
        tables = {
            (): (0.5, 0.5),
            ("a",): (0.5, 0.5),        # joints 0.25, 0.25 (greedy path)
            ("b",): (0.5625, 0.4375),  # joints 0.28125, 0.21875
        }
        pol = policy_from(tables)
        cands = self.full_candidates(("a", "b"), 2)
        gap, _ = myopic_gap_approx(pol, cands)
        assert gap == pytest.approx(0.03125, abs=1e-12)
        # classification uses a strict inequality against the threshold
        _, myopic_at_gap = myopic_gap_approx(pol, cands, threshold=gap)
        assert not myopic_at_gap
        _, myopic_below = myopic_gap_approx(pol, cands, threshold=math.nextafter(gap, 0.0))
        assert myopic_below
        _, myopic_default = myopic_gap_approx(pol, cands)  # 0.03125 > 0.01
        assert myopic_default

    def test_small_gap_classified_non_myopic(self):
        texts, tables = myopic_trap_tables()
        pol = policy_from(tables, texts)
        cands = self.full_candidates(texts, 2)
        gap, myopic = myopic_gap_approx(pol, cands)
        assert gap == pytest.approx(0.1, abs=1e-12)
        assert myopic  # 0.1 > 0.01
        # shrink the advantage below the threshold via a candidate subset
        gap, myopic = myopic_gap_approx(pol, [[Action("a"), Action("b")]])
        assert gap <= 0.0 and not myopic


class TestECE:
    def test_perfectly_calibrated_is_zero(self):
        records = [
            CalibrationRecord("t", i, s, s) for i, s in enumerate((0.0, 0.25, 0.5, 0.75, 1.0))
        ]
        assert ece(records, bins=10) == 0.0

    def test_maximal_miscalibration(self):
        records = [
            CalibrationRecord("t", 0, 1.0, 0.0),
            CalibrationRecord("t", 1, 0.0, 1.0),
        ]
        # the two records land in different bins for any bins >= 2
        assert ece(records, bins=2) == 1.0
        assert ece(records, bins=10) == 1.0
        # binned averaging cancels them when they share the single bin
        assert ece(records, bins=1) == 0.0

    def test_twenty_record_fixture_matches_hand_value(self):
        # bins of width .1; per-bin contributions worked out by hand:
        #   [0.0,0.1): scores .05,.05      labels 0,.25          -> |.05-.125|  *2 = .15
        #   [0.2,0.3): scores .25 x4       labels 0,0,.5,.25     -> |.25-.1875| *4 = .25
        #   [0.5,0.6): .5,.55,.5,.55       labels .5,.75,.25,.5  -> |.525-.5|   *4 = .10
        #   [0.7,0.8): .75 x5              labels 1,.75,.5,.75,1 -> |.75-.8|    *5 = .25
        #   [0.9,1.0]: .95,1,.9,.95,1      labels 1 x5           -> |.96-1|     *5 = .20
        # total = 0.95 / 20 = 0.0475
        rows = [
            (0.05, 0.0), (0.05, 0.25),
            (0.25, 0.0), (0.25, 0.0), (0.25, 0.5), (0.25, 0.25),
            (0.5, 0.5), (0.55, 0.75), (0.5, 0.25), (0.55, 0.5),
            (0.75, 1.0), (0.75, 0.75), (0.75, 0.5), (0.75, 0.75), (0.75, 1.0),
            (0.95, 1.0), (1.0, 1.0), (0.9, 1.0), (0.95, 1.0), (1.0, 1.0),
        ]
        records = [CalibrationRecord("t", i, s, l) for i, (s, l) in enumerate(rows)]
        assert ece(records, bins=10) == pytest.approx(0.0475, abs=1e-12)

    def test_binary_mode_thresholds_scores(self):
        # scores binarized at 0.5: group 0 = {0.2->0.25}, group 1 = {0.8->1, 0.6->0.5}
        records = [
            CalibrationRecord("t", 0, 0.2, 0.25),
            CalibrationRecord("t", 1, 0.8, 1.0),
            CalibrationRecord("t", 2, 0.6, 0.5),
        ]
        # hand: group0 |0 - .25| * 1; group1 |1 - .75| * 2; total (0.25 + 0.5)/3
        assert ece_binary(records, threshold=0.5) == pytest.approx(0.25, abs=1e-12)

    def test_empty_records_error(self):
        with pytest.raises(DiagnosticsError):
            ece([], bins=10)

    def test_bounds(self):
        rng = np.random.default_rng(0)
        records = [
            CalibrationRecord("t", i, float(rng.random()), float(rng.integers(2)))
            for i in range(200)
        ]
        assert 0.0 <= ece(records, bins=10) <= 1.0


class TestSpearman:
    def test_perfectly_concordant(self):
        assert spearman_rho([0.1, 0.2, 0.3], [0, 1, 2]) == pytest.approx(1.0, abs=1e-12)

    def test_perfectly_discordant(self):
        assert spearman_rho([0.3, 0.2, 0.1], [0, 1, 2]) == pytest.approx(-1.0, abs=1e-12)

    def test_tie_fixture_matches_hand_value(self):
        # score ranks (1, 2.5, 2.5, 4, 5); label ranks (1, 2, 3.5, 3.5, 5)
        # rho = 8.75 / 9.5 = 35/38
        rho = spearman_rho([0.1, 0.4, 0.4, 0.8, 0.9], [0.0, 0.25, 0.5, 0.5, 1.0])
        assert rho == pytest.approx(35 / 38, abs=1e-12)

    def test_constant_input_is_undefined(self):
        with pytest.raises(DiagnosticsError, match="constant"):
            spearman_rho([0.5, 0.5], [0, 1])
        with pytest.raises(DiagnosticsError):
            spearman_rho([0.1, 0.2], [1, 1])

    def test_needs_two_records(self):
        with pytest.raises(DiagnosticsError):
            spearman_rho([0.5], [1])


class TestDiversity:
    def test_identical_outputs(self):
        assert diversity(["a b c", "a b c", "a b c"]) == 0.0

    def test_disjoint_outputs(self):
        assert diversity(["a b", "c d"]) == 1.0

    def test_hand_lcs_fixture(self):
        assert diversity(["a b c", "a b d"]) == pytest.approx(1 / 3, abs=1e-12)

    def test_three_way_mean(self):
        # pairs: (1,2) identical -> f1 = 1; (1,3) and (2,3) disjoint -> 0
        assert diversity(["a b c d", "a b c d", "x y"]) == pytest.approx(2 / 3, abs=1e-12)

    def test_rouge_l_uses_lcs_not_contiguity(self):
        assert rouge_l_f1("a x b y c", "a b c") == pytest.approx(2 * 3 / 8, abs=1e-12)

    def test_requires_two_outputs(self):
        with pytest.raises(DiagnosticsError):
            diversity(["just one"])

    @given(st.lists(st.text(alphabet="ab ", min_size=0, max_size=12), min_size=2, max_size=5))
    @settings(max_examples=100, deadline=None)
    def test_bounds_property(self, outputs):
        assert 0.0 <= diversity(outputs) <= 1.0 + 1e-12


class TestFlops:
    def test_zero_tokens(self):
        assert flops(0, 8_000_000_000) == 0.0

    def test_reference_point(self):
        assert flops(1000, 8_000_000_000) == 4.8e13

    def test_linearity(self):
        parts = [120, 7, 93]
        assert flops(sum(parts), 5) == pytest.approx(sum(flops(p, 5) for p in parts), abs=0)
        assert flops(10, 6) * 3 == flops(10, 18)

    def test_negative_rejected(self):
        with pytest.raises(DiagnosticsError):
            flops(-1, 10)


class TestPassAtK:
    def test_all_correct(self):
        assert pass_at_k([(5, 5)], 3) == 1.0

    def test_none_correct(self):
        assert pass_at_k([(5, 0)], 3) == 0.0

    def test_binomial_fixture(self):
        assert pass_at_k([(4, 1)], 2) == pytest.approx(0.5, abs=1e-12)

    def test_mean_over_problems(self):
        got = pass_at_k([(4, 1), (4, 4), (4, 0)], 2)
        assert got == pytest.approx((0.5 + 1.0 + 0.0) / 3, abs=1e-12)

    def test_exact_mode_when_n_equals_k(self):
        assert pass_at_k([(5, 1)], 5) == 1.0
        assert pass_at_k([(5, 0)], 5) == 0.0

    def test_k_exceeding_n_is_an_error(self):
        with pytest.raises(DiagnosticsError):
            pass_at_k([(3, 1)], 4)

    @given(
        n=st.integers(1, 30),
        c=st.integers(0, 30),
        k=st.integers(1, 30),
    )
    @settings(max_examples=200, deadline=None)
    def test_matches_monte_carlo_free_identity(self, n, c, k):
        c = min(c, n)
        k = min(k, n)
        got = pass_at_k([(n, c)], k)
        # independent combinatorial identity: 1 - C(n-c,k)/C(n,k)
        expect = 1.0 - (math.comb(n - c, k) / math.comb(n, k) if n - c >= k else 0.0)
        assert got == pytest.approx(expect, abs=1e-12)
        assert 0.0 <= got <= 1.0
