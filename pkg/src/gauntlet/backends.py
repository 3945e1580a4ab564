"""Per-tile classification backends.

The deep-learning classifier of the attacked pipeline is replaced by a
two-stage stand-in: a matched filter recovers the true category from the
tile's grating (exact on clean tiles), then a confusion-matrix row draw
injects the configured error rate. An API-style backend emits multi-label
sets with confidence scores instead, resolved to a category through a
synonym mapping.
"""
from __future__ import annotations

import json
import random
import urllib.request
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import Category, DEFAULT_CATEGORIES
from .errors import ConfigError
from .pgm import pgm_b64
from .tiles import SynthSpec, _freq_basis


# -- feature extraction ----------------------------------------------------

def extract_category(bitmap: np.ndarray, spec: SynthSpec) -> Category:
    """Matched filter over the per-category grating frequencies.

    Computes quadrature correlation energy at each category's (fx, fy)
    and returns the argmax; phase and additive low-frequency content do
    not disturb it because the basis pairs are orthogonal."""
    img = bitmap.astype(np.float64)
    img -= img.mean()
    best, best_energy = None, -1.0
    for category, (fx, fy) in spec.waves.items():
        cx, sx = _freq_basis(spec.size, fx)
        cy, sy = _freq_basis(spec.size, fy)
        # cos component: cos(ax+by) = cos ax cos by - sin ax sin by
        i_part = cy @ img @ cx - sy @ img @ sx
        q_part = sy @ img @ cx + cy @ img @ sx
        energy = i_part * i_part + q_part * q_part
        if energy > best_energy:
            best, best_energy = category, energy
    assert best is not None
    return best


# -- confusion-matrix backend ------------------------------------------------

@dataclass(frozen=True)
class ConfusionMatrix:
    """Row-stochastic matrix: entry (i, j) is P(label j | true class i)."""

    categories: tuple[Category, ...]
    matrix: np.ndarray

    def __post_init__(self):
        k = len(self.categories)
        if self.matrix.shape != (k, k):
            raise ConfigError(f"confusion matrix must be {k}x{k}")
        if np.any(self.matrix < 0):
            raise ConfigError("confusion matrix entries must be >= 0")
        sums = self.matrix.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ConfigError(f"confusion matrix rows must sum to 1, got {sums}")
        self.matrix.setflags(write=False)

    @classmethod
    def identity(cls, categories: Sequence[Category] = DEFAULT_CATEGORIES) -> "ConfusionMatrix":
        cats = tuple(categories)
        return cls(cats, np.eye(len(cats)))

    @classmethod
    def uniform_diagonal(
        cls, diagonal: float, categories: Sequence[Category] = DEFAULT_CATEGORIES
    ) -> "ConfusionMatrix":
        """``diagonal`` on-target mass, the rest spread evenly off-diagonal."""
        cats = tuple(categories)
        k = len(cats)
        if not 0.0 <= diagonal <= 1.0:
            raise ConfigError("diagonal must be in [0, 1]")
        off = (1.0 - diagonal) / (k - 1) if k > 1 else 0.0
        m = np.full((k, k), off)
        np.fill_diagonal(m, diagonal)
        return cls(cats, m)

    @classmethod
    def from_diagonals(
        cls, diagonals: Mapping[Category, float], categories: Sequence[Category] = DEFAULT_CATEGORIES
    ) -> "ConfusionMatrix":
        """Per-category diagonal overrides, off-diagonal mass uniform."""
        cats = tuple(categories)
        k = len(cats)
        m = np.zeros((k, k))
        for i, cat in enumerate(cats):
            d = diagonals[cat]
            if not 0.0 <= d <= 1.0:
                raise ConfigError(f"diagonal for {cat!r} out of range")
            m[i, :] = (1.0 - d) / (k - 1) if k > 1 else 0.0
            m[i, i] = d
        return cls(cats, m)

    def index(self, category: Category) -> int:
        try:
            return self.categories.index(category)
        except ValueError:
            raise ConfigError(f"unknown category {category!r}") from None

    def row(self, category: Category) -> np.ndarray:
        return self.matrix[self.index(category)]


class OracleBackend:
    """Classifier stand-in: matched-filter truth recovery + confusion noise."""

    def __init__(self, matrix: ConfusionMatrix, spec: SynthSpec | None = None):
        self.matrix = matrix
        self.spec = spec if spec is not None else SynthSpec()
        if set(matrix.categories) != set(self.spec.waves):
            raise ConfigError("confusion matrix categories must match the synth spec")
        self._cumrows = {
            cat: np.cumsum(matrix.row(cat)) for cat in matrix.categories
        }

    def label(self, bitmap: np.ndarray, rng: random.Random) -> Category:
        true = extract_category(bitmap, self.spec)
        cum = self._cumrows[true]
        u = rng.random()
        idx = int(np.searchsorted(cum, u, side="right"))
        return self.matrix.categories[min(idx, len(cum) - 1)]


def classify(backend: OracleBackend, bitmap: np.ndarray, rng: random.Random) -> Category:
    return backend.label(bitmap, rng)


# -- multi-label API-style backend -------------------------------------------

@dataclass(frozen=True)
class LabelSet:
    """Unordered labels with confidence scores in [0, 1]; names unique."""

    scores: Mapping[str, float]

    def __post_init__(self):
        for name, score in self.scores.items():
            if not 0.0 <= score <= 1.0:
                raise ConfigError(f"label score out of range: {name}={score}")

    @property
    def names(self) -> frozenset[str]:
        return frozenset(self.scores)

    def to_json_dict(self) -> dict:
        return {
            "labels": [
                {"name": name, "score": round(score, 6)}
                for name, score in sorted(self.scores.items())
            ]
        }


# Synonyms per category, matched case-insensitively. The truck entries
# mirror labels commercial vision APIs return for truck photos; "person"
# and "human" style labels belong to the distractor pool instead.
DEFAULT_LABEL_MAPPING: dict[Category, frozenset[str]] = {
    "airplane": frozenset({"airplane", "plane", "aircraft", "jet", "air vehicle"}),
    "bicycle": frozenset({"bicycle", "bike", "cycling", "wheel"}),
    "boat": frozenset({"boat", "watercraft", "vessel", "sailboat"}),
    "bus": frozenset({"bus", "motorbus", "coach", "double decker"}),
    "car": frozenset({"car", "automobile", "sedan", "sports car"}),
    "motorcycle": frozenset({"motorcycle", "motorbike", "moped"}),
    "seaplane": frozenset({"seaplane", "floatplane"}),
    "train": frozenset({"train", "locomotive", "railway"}),
    "truck": frozenset({"truck", "transportation", "vehicle", "tow truck", "trailer truck"}),
}

DEFAULT_DISTRACTORS: tuple[str, ...] = (
    "outdoor", "road", "street", "sky", "person", "human", "asphalt", "city",
)


def validate_label_mapping(mapping: Mapping[Category, frozenset[str]]) -> None:
    for cat, synonyms in mapping.items():
        if not synonyms:
            raise ConfigError(f"category {cat!r} needs at least one synonym")


def match_target(
    labels: LabelSet, mapping: Mapping[Category, frozenset[str]], target: Category
) -> bool:
    """True iff any label matches a synonym of the target, ignoring case."""
    if target not in mapping:
        raise ConfigError(f"target {target!r} missing from label mapping")
    synonyms = {s.lower() for s in mapping[target]}
    return any(name.lower() in synonyms for name in labels.names)


def resolve_label_set(
    labels: LabelSet, mapping: Mapping[Category, frozenset[str]]
) -> Category:
    """Map a label set to a category: most synonym matches wins, ties break
    by mapping order; no match resolves to "unknown"."""
    lowered = {name.lower() for name in labels.names}
    best: Category = "unknown"
    best_hits = 0
    for category, synonyms in mapping.items():
        hits = len(lowered & {s.lower() for s in synonyms})
        if hits > best_hits:
            best, best_hits = category, hits
    return best


class MultiLabelBackend:
    """API-style backend emitting the true category's synonyms plus noise."""

    def __init__(
        self,
        mapping: Mapping[Category, frozenset[str]] | None = None,
        spec: SynthSpec | None = None,
        dropout: float = 0.0,
        distractor_rate: float = 0.0,
        distractors: Sequence[str] = DEFAULT_DISTRACTORS,
    ):
        self.mapping = dict(mapping) if mapping is not None else dict(DEFAULT_LABEL_MAPPING)
        validate_label_mapping(self.mapping)
        self.spec = spec if spec is not None else SynthSpec()
        if not 0.0 <= dropout <= 1.0 or not 0.0 <= distractor_rate <= 1.0:
            raise ConfigError("dropout and distractor_rate must be in [0, 1]")
        self.dropout = dropout
        self.distractor_rate = distractor_rate
        self.distractors = tuple(distractors)

    def classify_multilabel(self, bitmap: np.ndarray, rng: random.Random) -> LabelSet:
        true = extract_category(bitmap, self.spec)
        scores: dict[str, float] = {}
        for synonym in sorted(self.mapping[true]):
            if rng.random() >= self.dropout:
                scores[synonym.title()] = round(rng.uniform(0.6, 1.0), 6)
        for distractor in self.distractors:
            if rng.random() < self.distractor_rate:
                scores[distractor.title()] = round(rng.uniform(0.1, 0.9), 6)
        return LabelSet(scores)

    def label(self, bitmap: np.ndarray, rng: random.Random) -> Category:
        return resolve_label_set(self.classify_multilabel(bitmap, rng), self.mapping)


def classify_multilabel(
    backend: MultiLabelBackend, bitmap: np.ndarray, rng: random.Random
) -> LabelSet:
    return backend.classify_multilabel(bitmap, rng)


class RemoteLabelBackend:
    """Adapter for an external vision service.

    Wire contract: POST {"image": "<base64 PGM>"} to ``url``; the service
    answers {"labels": [{"name": str, "score": float}, ...]}. No vendor
    client ships here; anything honoring the contract plugs in.
    """

    def __init__(
        self,
        url: str,
        mapping: Mapping[Category, frozenset[str]] | None = None,
        timeout_s: float = 10.0,
    ):
        self.url = url
        self.mapping = dict(mapping) if mapping is not None else dict(DEFAULT_LABEL_MAPPING)
        validate_label_mapping(self.mapping)
        self.timeout_s = timeout_s

    def classify_multilabel(self, bitmap: np.ndarray, rng: random.Random | None = None) -> LabelSet:
        payload = json.dumps({"image": pgm_b64(bitmap)}).encode("utf-8")
        req = urllib.request.Request(
            self.url, data=payload, headers={"Content-Type": "application/json"}
        )
        with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
            body = json.loads(resp.read().decode("utf-8"))
        return LabelSet({item["name"]: float(item["score"]) for item in body["labels"]})

    def label(self, bitmap: np.ndarray, rng: random.Random | None = None) -> Category:
        return resolve_label_set(self.classify_multilabel(bitmap), self.mapping)


Backend = OracleBackend | MultiLabelBackend | RemoteLabelBackend
