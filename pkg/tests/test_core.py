"""Grading model: condition counting, policy lookup, challenge combination."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gauntlet.core import (
    Challenge,
    ConditionClass,
    GradeCondition,
    GradePolicy,
    ImageTile,
    PromptType,
    challenge_pass_probability,
    classify_condition,
    condition_of,
)
from gauntlet.errors import ConfigError, InvalidSelectionError


def make_tiles(n_targets: int, m: int, target: str = "truck", other: str = "car"):
    tiles = []
    for i in range(m):
        truth = target if i < n_targets else other
        bitmap = np.full((64, 64), 128, dtype=np.uint8)
        tiles.append(ImageTile(f"t{i}", bitmap, truth, f"slot{i}"))
    return tiles


class TestConditionOf:
    def test_exact_solution(self):
        tiles = make_tiles(3, 9)
        cond = condition_of(tiles, "truck", {"t0", "t1", "t2"}, PromptType.SINGLE)
        assert (cond.round_target_count, cond.correct_selected, cond.wrong_selected) == (3, 3, 0)
        assert cond.condition_class is ConditionClass.EXACT

    def test_all_correct_plus_one_wrong(self):
        tiles = make_tiles(3, 9)
        cond = condition_of(tiles, "truck", {"t0", "t1", "t2", "t5"}, PromptType.SINGLE)
        assert (cond.round_target_count, cond.correct_selected, cond.wrong_selected) == (3, 3, 1)
        assert cond.condition_class is ConditionClass.ALL_CORRECT_PLUS_WRONG

    def test_missing_one_requires_three_targets(self):
        tiles = make_tiles(3, 9)
        cond = condition_of(tiles, "truck", {"t0", "t1"}, PromptType.SINGLE)
        assert (cond.round_target_count, cond.correct_selected, cond.wrong_selected) == (3, 2, 0)
        assert cond.condition_class is ConditionClass.MISSING_ONE

        # With only two targets the same shape is not a tolerated miss.
        tiles2 = make_tiles(2, 9)
        cond2 = condition_of(tiles2, "truck", {"t0"}, PromptType.SINGLE)
        assert cond2.condition_class is ConditionClass.OTHER

    def test_unknown_tile_id_rejected(self):
        tiles = make_tiles(3, 9)
        with pytest.raises(InvalidSelectionError):
            condition_of(tiles, "truck", {"t0", "nope"}, PromptType.SINGLE)

    def test_purity(self):
        tiles = make_tiles(4, 9)
        chosen = {"t0", "t1", "t8"}
        first = condition_of(tiles, "truck", chosen, PromptType.DOUBLE)
        second = condition_of(tiles, "truck", chosen, PromptType.DOUBLE)
        assert first == second

    @given(
        n_targets=st.integers(min_value=1, max_value=9),
        chosen_mask=st.integers(min_value=0, max_value=2**9 - 1),
    )
    def test_counts_partition_chosen(self, n_targets, chosen_mask):
        tiles = make_tiles(n_targets, 9)
        chosen = {f"t{i}" for i in range(9) if chosen_mask >> i & 1}
        cond = condition_of(tiles, "truck", chosen, PromptType.SINGLE)
        assert cond.correct_selected + cond.wrong_selected == len(chosen)
        assert cond.correct_selected <= cond.round_target_count


class TestClassifyCondition:
    def test_exact_always_passes(self):
        policy = GradePolicy.default()
        cond = GradeCondition(4, 4, 0, PromptType.SINGLE)
        assert classify_condition(cond, policy) == (ConditionClass.EXACT, 1.0)

    def test_flexibility_rows(self):
        policy = GradePolicy.default()
        acw = GradeCondition(3, 3, 1, PromptType.SINGLE)
        assert classify_condition(acw, policy) == (ConditionClass.ALL_CORRECT_PLUS_WRONG, 0.735)
        m1 = GradeCondition(4, 3, 0, PromptType.DOUBLE)
        assert classify_condition(m1, policy) == (ConditionClass.MISSING_ONE, 0.615)

    def test_hopeless_conditions_fail(self):
        policy = GradePolicy.default()
        for cond in (
            GradeCondition(4, 4, 2, PromptType.SINGLE),  # two wrong
            GradeCondition(4, 2, 0, PromptType.SINGLE),  # missing two
            GradeCondition(1, 0, 0, PromptType.SINGLE),  # missing one but N < 3
        ):
            assert classify_condition(cond, policy)[1] == 0.0

    def test_strict_policy_only_exact(self):
        policy = GradePolicy.strict()
        assert classify_condition(GradeCondition(3, 3, 0, PromptType.SINGLE), policy)[1] == 1.0
        assert classify_condition(GradeCondition(3, 3, 1, PromptType.SINGLE), policy)[1] == 0.0

    def test_policy_validation(self):
        table = dict(GradePolicy.default().table)
        table[(PromptType.SINGLE, ConditionClass.EXACT)] = 0.9
        with pytest.raises(ConfigError):
            GradePolicy(table)
        table = dict(GradePolicy.default().table)
        table[(PromptType.DOUBLE, ConditionClass.OTHER)] = 0.1
        with pytest.raises(ConfigError):
            GradePolicy(table)

    def test_scaled_touches_only_non_exact(self):
        policy = GradePolicy.default().scaled(0.8)
        assert policy.probability(PromptType.SINGLE, ConditionClass.EXACT) == 1.0
        assert policy.probability(PromptType.SINGLE, ConditionClass.ALL_CORRECT_PLUS_WRONG) == pytest.approx(0.588)


class TestChallengePassProbability:
    def test_single_round_is_table_lookup(self):
        policy = GradePolicy.default()
        cond = GradeCondition(3, 2, 0, PromptType.SINGLE)
        assert challenge_pass_probability([cond], policy) == 0.715

    def test_double_both_exact_passes(self):
        policy = GradePolicy.default()
        conds = [GradeCondition(3, 3, 0, PromptType.DOUBLE)] * 2
        assert challenge_pass_probability(conds, policy) == 1.0

    def test_double_exact_round_transparent(self):
        policy = GradePolicy.default()
        conds = [
            GradeCondition(3, 3, 0, PromptType.DOUBLE),
            GradeCondition(4, 3, 0, PromptType.DOUBLE),
        ]
        assert challenge_pass_probability(conds, policy) == 0.615

    def test_double_worst_round_drives(self):
        policy = GradePolicy.default()
        conds = [
            GradeCondition(4, 3, 0, PromptType.DOUBLE),  # missing one: 0.615
            GradeCondition(4, 4, 1, PromptType.DOUBLE),  # all correct + wrong: 0.245
        ]
        assert challenge_pass_probability(conds, policy) == 0.245

    def test_double_other_round_fails_challenge(self):
        policy = GradePolicy.default()
        conds = [
            GradeCondition(4, 4, 0, PromptType.DOUBLE),
            GradeCondition(4, 1, 3, PromptType.DOUBLE),
        ]
        assert challenge_pass_probability(conds, policy) == 0.0


class TestChallengeInvariants:
    def test_round_needs_target_tile(self):
        tiles = tuple(make_tiles(0, 9))
        with pytest.raises(ConfigError):
            Challenge("c1", "prompt", "truck", 1, (tiles,), 0, 5000)

    def test_expiry_after_issue(self):
        tiles = tuple(make_tiles(3, 9))
        with pytest.raises(ConfigError):
            Challenge("c1", "prompt", "truck", 1, (tiles,), 100, 100)

    def test_target_ids(self):
        tiles = tuple(make_tiles(2, 9))
        ch = Challenge("c1", "prompt", "truck", 1, (tiles,), 0, 5000)
        assert ch.target_ids(0) == {"t0", "t1"}
        assert len(ch.tile_ids(0)) == 9
