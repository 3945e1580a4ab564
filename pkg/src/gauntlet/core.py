"""Domain model for challenges, selections and the grading policy.

Everything here is an immutable value object plus pure functions; the
service, solver and analysis layers all share this vocabulary so that the
empirical system and the probability oracle provably grade the same way.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InvalidSelectionError

# Category labels are plain lowercase strings; the default set has nine
# transport classes (the simulated service only ever serves these).
Category = str

DEFAULT_CATEGORIES: tuple[Category, ...] = (
    "airplane",
    "bicycle",
    "boat",
    "bus",
    "car",
    "motorcycle",
    "seaplane",
    "train",
    "truck",
)


def validate_categories(categories: Sequence[Category]) -> tuple[Category, ...]:
    cats = tuple(categories)
    if not cats:
        raise ConfigError("category set must be non-empty")
    if len(set(cats)) != len(cats):
        raise ConfigError("category names must be unique")
    for name in cats:
        if not name or name != name.lower():
            raise ConfigError(f"category name must be non-empty lowercase: {name!r}")
    return cats


class PromptType(str, Enum):
    SINGLE = "single"
    DOUBLE = "double"


class ConditionClass(str, Enum):
    """Grading buckets for a (correct, wrong) selection count pair."""

    EXACT = "exact"                                # C == N, W == 0
    ALL_CORRECT_PLUS_WRONG = "all_correct_plus_wrong"  # C == N, W == 1
    MISSING_ONE = "missing_one"                    # C == N-1, W == 0, N >= 3
    MISSING_ONE_PLUS_WRONG = "missing_one_plus_wrong"  # C == N-1, W == 1, N >= 3
    OTHER = "other"


@dataclass(frozen=True)
class ImageTile:
    """One candidate image. ``truth`` is server-side only and never leaves
    the service over the wire."""

    tile_id: str
    bitmap: np.ndarray
    truth: Category
    pool_origin: str

    def __post_init__(self):
        bmp = self.bitmap
        if bmp.dtype != np.uint8 or bmp.ndim != 2:
            raise ConfigError("tile bitmap must be a 2-D uint8 array")
        if bmp.shape != (64, 64):
            raise ConfigError(f"tile bitmap must be 64x64, got {bmp.shape}")
        bmp.setflags(write=False)


@dataclass(frozen=True)
class Challenge:
    """A served puzzle: one target category, one or two rounds of tiles."""

    challenge_id: str
    prompt_text: str
    target: Category
    rounds: int
    tile_rounds: tuple[tuple[ImageTile, ...], ...]
    issued_at: int
    expires_at: int

    def __post_init__(self):
        if self.rounds not in (1, 2) or len(self.tile_rounds) != self.rounds:
            raise ConfigError("challenge must carry 1 or 2 tile rounds")
        if self.expires_at <= self.issued_at:
            raise ConfigError("expires_at must be after issued_at")
        for tiles in self.tile_rounds:
            if not tiles:
                raise ConfigError("round has no tiles")
            n_targets = sum(1 for t in tiles if t.truth == self.target)
            if not 1 <= n_targets <= len(tiles):
                raise ConfigError("each round needs 1..m target tiles")

    @property
    def prompt_type(self) -> PromptType:
        return PromptType.DOUBLE if self.rounds == 2 else PromptType.SINGLE

    def target_ids(self, round_index: int) -> frozenset[str]:
        return frozenset(
            t.tile_id for t in self.tile_rounds[round_index] if t.truth == self.target
        )

    def tile_ids(self, round_index: int) -> frozenset[str]:
        return frozenset(t.tile_id for t in self.tile_rounds[round_index])


@dataclass(frozen=True)
class Selection:
    """Chosen tile ids per round for one challenge."""

    challenge_id: str
    rounds_chosen: tuple[frozenset[str], ...]


@dataclass(frozen=True)
class GradeCondition:
    """Counts describing one round's submitted selection.

    ``round_target_count`` is the number of target tiles present (N),
    ``correct_selected`` (C) and ``wrong_selected`` (W) partition the
    chosen set against ground truth.
    """

    round_target_count: int
    correct_selected: int
    wrong_selected: int
    prompt_type: PromptType

    def __post_init__(self):
        n, c, w = self.round_target_count, self.correct_selected, self.wrong_selected
        if n < 0 or c < 0 or w < 0 or c > n:
            raise ConfigError(f"invalid grade condition ({n=}, {c=}, {w=})")

    @property
    def condition_class(self) -> ConditionClass:
        n, c, w = self.round_target_count, self.correct_selected, self.wrong_selected
        if c == n and w == 0:
            return ConditionClass.EXACT
        if c == n and w == 1:
            return ConditionClass.ALL_CORRECT_PLUS_WRONG
        if n >= 3 and c == n - 1 and w == 0:
            return ConditionClass.MISSING_ONE
        if n >= 3 and c == n - 1 and w == 1:
            return ConditionClass.MISSING_ONE_PLUS_WRONG
        return ConditionClass.OTHER


# Acceptance table of the simulated service: flexibility percentages per
# (prompt type, condition class). Exact is always 1.0 and unmatched
# combinations always 0.0.
_DEFAULT_TABLE: dict[tuple[PromptType, ConditionClass], float] = {
    (PromptType.SINGLE, ConditionClass.EXACT): 1.0,
    (PromptType.DOUBLE, ConditionClass.EXACT): 1.0,
    (PromptType.SINGLE, ConditionClass.ALL_CORRECT_PLUS_WRONG): 0.735,
    (PromptType.DOUBLE, ConditionClass.ALL_CORRECT_PLUS_WRONG): 0.245,
    (PromptType.SINGLE, ConditionClass.MISSING_ONE): 0.715,
    (PromptType.DOUBLE, ConditionClass.MISSING_ONE): 0.615,
    (PromptType.SINGLE, ConditionClass.MISSING_ONE_PLUS_WRONG): 0.200,
    (PromptType.DOUBLE, ConditionClass.MISSING_ONE_PLUS_WRONG): 0.305,
    (PromptType.SINGLE, ConditionClass.OTHER): 0.0,
    (PromptType.DOUBLE, ConditionClass.OTHER): 0.0,
}


@dataclass(frozen=True)
class GradePolicy:
    """Pass probability per (prompt type, condition class)."""

    table: Mapping[tuple[PromptType, ConditionClass], float]

    def __post_init__(self):
        for pt in PromptType:
            for cc in ConditionClass:
                p = self.table.get((pt, cc))
                if p is None:
                    raise ConfigError(f"policy missing entry for ({pt.value}, {cc.value})")
                if not 0.0 <= p <= 1.0:
                    raise ConfigError(f"policy probability out of range: {p}")
            if self.table[(pt, ConditionClass.EXACT)] != 1.0:
                raise ConfigError("exact solutions must pass with probability 1.0")
            if self.table[(pt, ConditionClass.OTHER)] != 0.0:
                raise ConfigError("unmatched conditions must fail with probability 0.0")

    @classmethod
    def default(cls) -> "GradePolicy":
        return cls(dict(_DEFAULT_TABLE))

    @classmethod
    def strict(cls) -> "GradePolicy":
        table = {key: 0.0 for key in _DEFAULT_TABLE}
        table[(PromptType.SINGLE, ConditionClass.EXACT)] = 1.0
        table[(PromptType.DOUBLE, ConditionClass.EXACT)] = 1.0
        return cls(table)

    def probability(self, prompt_type: PromptType, cls_: ConditionClass) -> float:
        return self.table[(prompt_type, cls_)]

    def scaled(self, flexibility_scale: float) -> "GradePolicy":
        """Multiply every non-exact pass probability by ``flexibility_scale``."""
        if not 0.0 < flexibility_scale <= 1.0:
            raise ConfigError("flexibility_scale must be in (0, 1]")
        if flexibility_scale == 1.0:
            return self
        table = {}
        for (pt, cc), p in self.table.items():
            table[(pt, cc)] = p if cc is ConditionClass.EXACT else p * flexibility_scale
        return GradePolicy(table)

    def to_json_dict(self) -> dict:
        return {
            f"{pt.value}/{cc.value}": p for (pt, cc), p in sorted(
                self.table.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value)
            )
        }


def condition_of(
    tiles: Sequence[ImageTile],
    target: Category,
    chosen: Iterable[str],
    prompt_type: PromptType,
) -> GradeCondition:
    """Classify a chosen tile-id set against one round's ground truth."""
    chosen_set = set(chosen)
    known = {t.tile_id for t in tiles}
    unknown = chosen_set - known
    if unknown:
        raise InvalidSelectionError(f"unknown tile ids in selection: {sorted(unknown)}")
    target_ids = {t.tile_id for t in tiles if t.truth == target}
    correct = len(chosen_set & target_ids)
    wrong = len(chosen_set) - correct
    return GradeCondition(
        round_target_count=len(target_ids),
        correct_selected=correct,
        wrong_selected=wrong,
        prompt_type=prompt_type,
    )


def classify_condition(
    cond: GradeCondition, policy: GradePolicy
) -> tuple[ConditionClass, float]:
    """Deterministic policy lookup for one round condition."""
    cls_ = cond.condition_class
    return cls_, policy.probability(cond.prompt_type, cls_)


def challenge_pass_probability(
    conditions: Sequence[GradeCondition], policy: GradePolicy
) -> float:
    """Pass probability for a whole challenge.

    Single-prompt challenges use their one round's table entry. For
    double-prompt challenges the double-row probability applies once at
    challenge level, keyed on the worst round's condition class; rounds
    solved exactly are transparent, and a round outside the table fails
    the whole challenge.
    """
    if not conditions:
        raise ConfigError("challenge has no graded rounds")
    if len(conditions) == 1:
        return classify_condition(conditions[0], policy)[1]
    classes = [cond.condition_class for cond in conditions]
    if any(c is ConditionClass.OTHER for c in classes):
        return 0.0
    non_exact = [c for c in classes if c is not ConditionClass.EXACT]
    if not non_exact:
        return 1.0
    worst = min(non_exact, key=lambda c: policy.probability(PromptType.DOUBLE, c))
    return policy.probability(PromptType.DOUBLE, worst)
