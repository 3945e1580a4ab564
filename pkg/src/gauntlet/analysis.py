"""Ground-truth mathematics and campaign reporting.

Two independent routes compute the exact pass probability of a
(classifier, policy, challenge shape) triple: full enumeration over all
2^m per-round selection outcomes, and a dynamic program over (correct
count, capped wrong count). Their agreement to 1e-12 is an acceptance
gate, and the expected campaign accuracy derived here is the target every
seeded empirical campaign is checked against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .backends import ConfusionMatrix
from .core import ConditionClass, GradeCondition, GradePolicy, PromptType
from .errors import ConfigError
from .hashkit import (
    DuplicateReport,
    cluster_by_digest,
    cluster_duplicates,
    exact_hash,
    phash64,
    scan_corpus_dir,
)
from .solver import SessionRecord

BRUTE_FORCE_LIMIT = 20


@dataclass(frozen=True)
class SelectionModel:
    """Per-tile selection probabilities induced by a classifier and target.

    ``p_target`` is the probability a target tile is selected (the
    target's confusion diagonal); ``p_nontarget`` the probability a
    non-target tile is selected (mean target-column mass over the other
    rows, matching the service's uniform draw of non-target categories).
    Tiles decide independently, exactly like the solver's per-tile
    classification.
    """

    p_target: float
    p_nontarget: float

    def __post_init__(self):
        for p in (self.p_target, self.p_nontarget):
            if not 0.0 <= p <= 1.0:
                raise ConfigError("selection probabilities must be in [0, 1]")

    @classmethod
    def from_confusion(cls, matrix: ConfusionMatrix, target: str) -> "SelectionModel":
        idx = matrix.index(target)
        column = matrix.matrix[:, idx]
        k = len(matrix.categories)
        p_t = float(matrix.matrix[idx, idx])
        p_f = float((column.sum() - column[idx]) / (k - 1)) if k > 1 else 0.0
        return cls(p_t, p_f)


_CLASS_KEYS = (
    ConditionClass.EXACT,
    ConditionClass.ALL_CORRECT_PLUS_WRONG,
    ConditionClass.MISSING_ONE,
    ConditionClass.MISSING_ONE_PLUS_WRONG,
    ConditionClass.OTHER,
)


def _condition_class(n: int, c: int, w: int) -> ConditionClass:
    return GradeCondition(n, c, w, PromptType.SINGLE).condition_class


def bruteforce_class_distribution(
    model: SelectionModel, n_targets: int, m: int, tile_order: Sequence[bool] | None = None
) -> dict[ConditionClass, float]:
    """Exact per-round condition-class distribution by enumerating all 2^m
    selection outcomes. ``tile_order`` optionally fixes which positions are
    targets (defaults to the first ``n_targets``); the result is invariant
    to it by exchangeability."""
    if m > BRUTE_FORCE_LIMIT:
        raise ConfigError(
            f"m={m} exceeds the 2^{BRUTE_FORCE_LIMIT} enumeration limit; use the DP variant"
        )
    if not 0 <= n_targets <= m:
        raise ConfigError("need 0 <= n_targets <= m")
    if tile_order is None:
        tile_order = [True] * n_targets + [False] * (m - n_targets)
    elif sum(tile_order) != n_targets or len(tile_order) != m:
        raise ConfigError("tile_order inconsistent with (n_targets, m)")

    target_mask = 0
    for i, is_target in enumerate(tile_order):
        if is_target:
            target_mask |= 1 << i
    nontarget_mask = ((1 << m) - 1) ^ target_mask

    pt, pf = model.p_target, model.p_nontarget
    pow_t = [pt**k * (1 - pt) ** (n_targets - k) for k in range(n_targets + 1)]
    pow_f = [pf**k * (1 - pf) ** (m - n_targets - k) for k in range(m - n_targets + 1)]

    dist = {key: 0.0 for key in _CLASS_KEYS}
    for outcome in range(1 << m):
        c = (outcome & target_mask).bit_count()
        w = (outcome & nontarget_mask).bit_count()
        dist[_condition_class(n_targets, c, w)] += pow_t[c] * pow_f[w]
    return dist


def dp_class_distribution(
    model: SelectionModel, n_targets: int, m: int
) -> dict[ConditionClass, float]:
    """Per-round condition-class distribution via a dynamic program over
    (correct-selected count, wrong-selected count capped at 2)."""
    if not 0 <= n_targets <= m:
        raise ConfigError("need 0 <= n_targets <= m")
    pt, pf = model.p_target, model.p_nontarget

    # state[(c, w_capped)] -> probability, tiles folded in one at a time
    state: dict[tuple[int, int], float] = {(0, 0): 1.0}
    for tile_idx in range(m):
        is_target = tile_idx < n_targets
        p_sel = pt if is_target else pf
        nxt: dict[tuple[int, int], float] = {}
        for (c, w), prob in state.items():
            skip = (c, w)
            nxt[skip] = nxt.get(skip, 0.0) + prob * (1 - p_sel)
            if is_target:
                take = (c + 1, w)
            else:
                take = (c, min(w + 1, 2))
            nxt[take] = nxt.get(take, 0.0) + prob * p_sel
        state = nxt

    dist = {key: 0.0 for key in _CLASS_KEYS}
    for (c, w), prob in state.items():
        dist[_condition_class(n_targets, c, w)] += prob
    return dist


def _single_pass(dist: Mapping[ConditionClass, float], policy: GradePolicy) -> float:
    return sum(
        prob * policy.probability(PromptType.SINGLE, cls_) for cls_, prob in dist.items()
    )


def combine_double_rounds(
    dist1: Mapping[ConditionClass, float],
    dist2: Mapping[ConditionClass, float],
    policy: GradePolicy,
) -> float:
    """Challenge-level double-prompt pass probability from two independent
    per-round class distributions, applying the double-row probability once
    keyed on the worst round class (exact rounds transparent)."""
    total = 0.0
    for c1, p1 in dist1.items():
        if p1 == 0.0:
            continue
        for c2, p2 in dist2.items():
            if p2 == 0.0:
                continue
            classes = [c for c in (c1, c2) if c is not ConditionClass.EXACT]
            if not classes:
                total += p1 * p2
                continue
            if ConditionClass.OTHER in classes:
                continue
            worst = min(classes, key=lambda c: policy.probability(PromptType.DOUBLE, c))
            total += p1 * p2 * policy.probability(PromptType.DOUBLE, worst)
    return total


def pass_probability_bruteforce(
    model: SelectionModel,
    n_targets: int,
    m: int,
    policy: GradePolicy,
    prompt_type: PromptType = PromptType.SINGLE,
) -> float:
    """Exact challenge pass probability by outcome enumeration (m <= 20).

    Double prompts assume both rounds share the (n_targets, m) shape."""
    dist = bruteforce_class_distribution(model, n_targets, m)
    if prompt_type is PromptType.SINGLE:
        return _single_pass(dist, policy)
    return combine_double_rounds(dist, dist, policy)


def pass_probability_dp(
    model: SelectionModel,
    n_targets: int,
    m: int,
    policy: GradePolicy,
    prompt_type: PromptType = PromptType.SINGLE,
) -> float:
    """Scalable equivalent of the brute force; agrees to 1e-12."""
    dist = dp_class_distribution(model, n_targets, m)
    if prompt_type is PromptType.SINGLE:
        return _single_pass(dist, policy)
    return combine_double_rounds(dist, dist, policy)


def expected_campaign_accuracy(
    model: SelectionModel | ConfusionMatrix,
    policy: GradePolicy,
    shape_distribution: Mapping[int, float],
    double_prompt_probability: float,
    m: int = 9,
) -> float:
    """Mixture of exact pass probabilities over the challenge shape.

    Target counts are drawn per round from ``shape_distribution``; double
    prompts occur with the given probability and draw both rounds
    independently. A ConfusionMatrix mixes uniformly over target
    categories, mirroring the service's uniform category choice.
    """
    total_weight = sum(shape_distribution.values())
    if abs(total_weight - 1.0) > 1e-9:
        raise ConfigError("shape distribution must sum to 1")
    if not 0.0 <= double_prompt_probability <= 1.0:
        raise ConfigError("double_prompt_probability must be in [0, 1]")

    if isinstance(model, ConfusionMatrix):
        models = [SelectionModel.from_confusion(model, t) for t in model.categories]
    else:
        models = [model]

    acc = 0.0
    for sel_model in models:
        dists = {
            n: dp_class_distribution(sel_model, min(n, m), m)
            for n in shape_distribution
        }
        single = sum(
            w * _single_pass(dists[n], policy) for n, w in shape_distribution.items()
        )
        double = 0.0
        for n1, w1 in shape_distribution.items():
            for n2, w2 in shape_distribution.items():
                double += w1 * w2 * combine_double_rounds(dists[n1], dists[n2], policy)
        acc += (
            (1 - double_prompt_probability) * single + double_prompt_probability * double
        ) / len(models)
    return acc


def binomial_ci_halfwidth(p: float, n: int, z: float = 2.5758293035489004) -> float:
    """Normal-approximation half width; default z is the 99% two-sided level."""
    return z * math.sqrt(max(p * (1 - p), 1e-12) / n)


# -- campaign aggregation -----------------------------------------------------

@dataclass
class CampaignReport:
    attempted: int
    passed: int
    failed: int
    blocked: int
    errors: int
    accuracy: float
    accuracy_pct_4sig: float
    per_category: dict[str, dict]
    selection_histogram: dict[int, int]
    stage_cdf: dict[str, list[tuple[int, float]]]
    hmt_balance: str | None
    solves: int | None

    def to_json_dict(self) -> dict:
        return {
            "attempted": self.attempted,
            "passed": self.passed,
            "failed": self.failed,
            "blocked": self.blocked,
            "errors": self.errors,
            "accuracy": self.accuracy,
            "accuracy_pct": self.accuracy_pct_4sig,
            "per_category": self.per_category,
            "selection_histogram": {str(k): v for k, v in sorted(self.selection_histogram.items())},
            "stage_cdf": {
                stage: [[v, round(f, 9)] for v, f in series]
                for stage, series in self.stage_cdf.items()
            },
            "hmt_balance": self.hmt_balance,
            "solves": self.solves,
        }

    def to_csv_rows(self) -> list[tuple[str, str]]:
        rows = [
            ("attempted", str(self.attempted)),
            ("passed", str(self.passed)),
            ("failed", str(self.failed)),
            ("blocked", str(self.blocked)),
            ("errors", str(self.errors)),
            ("accuracy", f"{self.accuracy:.6f}"),
            ("accuracy_pct", f"{self.accuracy_pct_4sig}"),
            ("hmt_balance", self.hmt_balance or ""),
            ("solves", "" if self.solves is None else str(self.solves)),
        ]
        for cat, stats in sorted(self.per_category.items()):
            rows.append((f"category.{cat}.attempted", str(stats["attempted"])))
            rows.append((f"category.{cat}.passed", str(stats["passed"])))
            rows.append((f"category.{cat}.accuracy", f"{stats['accuracy']:.6f}"))
        return rows


def _cdf_series(values: list[int]) -> list[tuple[int, float]]:
    ordered = sorted(values)
    n = len(ordered)
    return [(v, (i + 1) / n) for i, v in enumerate(ordered)]


def round_sig(x: float, digits: int = 4) -> float:
    if x == 0:
        return 0.0
    return float(f"{x:.{digits}g}")


def aggregate_campaign(
    records: Sequence[SessionRecord], ledger_snapshot: Mapping | None = None
) -> CampaignReport:
    """Exact counting over session records.

    ``attempted`` counts graded challenges (pass or fail); blocked and
    errored sessions are tallied separately. Per-category stats attribute
    each challenge to its prompted target, so their frequency-weighted
    mean equals the total accuracy identically."""
    graded = [r for r in records if r.outcome in ("pass", "fail")]
    passed = sum(1 for r in graded if r.outcome == "pass")
    blocked = sum(1 for r in records if r.outcome == "blocked")
    errors = sum(1 for r in records if r.outcome == "error")

    per_category: dict[str, dict] = {}
    for rec in graded:
        assert rec.target is not None
        stats = per_category.setdefault(rec.target, {"attempted": 0, "passed": 0})
        stats["attempted"] += 1
        stats["passed"] += 1 if rec.outcome == "pass" else 0
    for stats in per_category.values():
        stats["accuracy"] = stats["passed"] / stats["attempted"]

    histogram: dict[int, int] = {}
    for rec in graded:
        for count in rec.selections_per_round:
            histogram[count] = histogram.get(count, 0) + 1

    accuracy = passed / len(graded) if graded else 0.0
    return CampaignReport(
        attempted=len(graded),
        passed=passed,
        failed=len(graded) - passed,
        blocked=blocked,
        errors=errors,
        accuracy=accuracy,
        accuracy_pct_4sig=round_sig(accuracy * 100.0, 4),
        per_category=per_category,
        selection_histogram=histogram,
        stage_cdf={
            "acquire": _cdf_series([r.acquire_ms for r in graded]),
            "solve": _cdf_series([r.solve_ms for r in graded]),
            "submit_verify": _cdf_series([r.submit_verify_ms for r in graded]),
        },
        hmt_balance=None if ledger_snapshot is None else str(ledger_snapshot["hmt_balance"]),
        solves=None if ledger_snapshot is None else int(ledger_snapshot["solves"]),
    )


# -- duplicate analysis ----------------------------------------------------------

def dedup_report(
    corpus: str | Path | Iterable[tuple[str, np.ndarray]],
    threshold: int = 0,
    ground_truth_clusters: Sequence[Sequence[str]] | None = None,
) -> dict:
    """Run exact-digest and perceptual-hash clustering over a corpus.

    ``corpus`` is a directory of PGM files or an in-memory iterable of
    (image id, bitmap). At threshold 0 the two partitions must be
    identical; when a generation log is supplied its clusters are compared
    too. Returns a JSON-ready report."""
    if isinstance(corpus, (str, Path)):
        items = scan_corpus_dir(corpus)
    else:
        items = corpus

    hashed: list[tuple[str, int, str]] = []
    for image_id, bitmap in items:
        hashed.append((image_id, phash64(bitmap), exact_hash(bitmap)))

    digest_report = cluster_by_digest([(i, d) for i, _, d in hashed])
    phash_report = cluster_duplicates(hashed, threshold)

    partitions_equal = digest_report.partition_key() == phash_report.partition_key()
    if threshold == 0 and not partitions_equal:
        raise AssertionError(
            "perceptual-hash clustering at threshold 0 diverged from exact digests"
        )

    result = {
        "total": len(hashed),
        "exact": digest_report.to_json_dict(),
        "phash": phash_report.to_json_dict(),
        "threshold": threshold,
        "partitions_equal": partitions_equal,
    }
    if ground_truth_clusters is not None:
        truth_key = frozenset(frozenset(c) for c in ground_truth_clusters if len(c) >= 2)
        result["matches_ground_truth"] = truth_key == digest_report.partition_key()
        result["ground_truth_clusters"] = len(truth_key)
    return result
