"""Procedural tile synthesis and the finite reuse pool.

Tiles are 64x64 grayscale textures: one category-specific sinusoidal
grating (integer cycle counts, frequencies well above the perceptual-hash
band) plus a per-instance low-frequency field and pixel noise. The grating
makes the true category recoverable by a matched filter; the instance
field and noise make every fresh tile unique under both exact and
perceptual hashing.

The pool reuses previously synthesized slots with a configurable
probability and logs every draw, so duplicate clusters recovered later by
hashing can be checked against exact ground truth.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import Category, DEFAULT_CATEGORIES, ImageTile, validate_categories
from .errors import ConfigError, PoolError

TILE_SIZE = 64

# Integer (fx, fy) cycle counts per tile edge. All are >= 4 cycles on at
# least one axis, keeping grating energy out of the 8x8 low-frequency DCT
# block that the perceptual hash reads.
DEFAULT_WAVES: dict[Category, tuple[int, int]] = {
    "airplane": (8, 0),
    "bicycle": (0, 8),
    "boat": (8, 8),
    "bus": (12, 0),
    "car": (0, 12),
    "motorcycle": (12, 12),
    "seaplane": (12, 4),
    "train": (4, 12),
    "truck": (10, 10),
}


@dataclass(frozen=True)
class SynthSpec:
    """Per-category texture parameters plus instance-variation knobs.

    ``amplitude`` is a master gain: zero yields a constant bitmap. The
    instance field is ``component_count`` random low-frequency cosines
    (cycle counts 0..3) whose relative amplitude is ``component_rel``;
    ``noise_rel`` scales per-pixel gaussian noise.
    """

    waves: dict[Category, tuple[int, int]] = field(
        default_factory=lambda: dict(DEFAULT_WAVES)
    )
    amplitude: float = 50.0
    component_count: int = 3
    component_rel: float = 0.35
    noise_rel: float = 0.16
    base_level: int = 128
    size: int = TILE_SIZE

    def __post_init__(self):
        validate_categories(tuple(self.waves))
        if len(set(self.waves.values())) != len(self.waves):
            raise ConfigError("categories must have distinct wave vectors")
        if self.amplitude < 0:
            raise ConfigError("amplitude must be >= 0")

    @property
    def categories(self) -> tuple[Category, ...]:
        return tuple(self.waves)


def _freq_basis(size: int, freq: int) -> tuple[np.ndarray, np.ndarray]:
    """(cos, sin) of 2*pi*freq*n/size over n = 0..size-1, cached."""
    got = _basis_cache.get((size, freq))
    if got is None:
        arg = (2.0 * math.pi * freq / size) * np.arange(size, dtype=np.float64)
        got = (np.cos(arg), np.sin(arg))
        got[0].setflags(write=False)
        got[1].setflags(write=False)
        _basis_cache[(size, freq)] = got
    return got


_basis_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _wave_grid(size: int, fx: int, fy: int, phase: float) -> np.ndarray:
    # cos(ax + by + phase) built separably: fold the phase into the x
    # factor, then combine with two outer products.
    cx, sx = _freq_basis(size, fx)
    cy, sy = _freq_basis(size, fy)
    cxp = math.cos(phase) * cx - math.sin(phase) * sx
    sxp = math.sin(phase) * cx + math.cos(phase) * sx
    return np.outer(cy, cxp) - np.outer(sy, sxp)


def synth_tile(category: Category, instance_seed: int, spec: SynthSpec) -> np.ndarray:
    """Deterministic texture for (category, seed, spec); uint8, size x size."""
    if category not in spec.waves:
        raise ConfigError(f"unknown category {category!r}")
    rng = np.random.Generator(np.random.PCG64(instance_seed))
    size = spec.size
    fx, fy = spec.waves[category]

    texture = _wave_grid(size, fx, fy, rng.uniform(0.0, 2.0 * math.pi))
    for _ in range(spec.component_count):
        u = int(rng.integers(0, 4))
        v = int(rng.integers(0, 4))
        amp = spec.component_rel * rng.normal()
        psi = rng.uniform(0.0, 2.0 * math.pi)
        texture += amp * _wave_grid(size, u, v, psi)
    texture += spec.noise_rel * rng.standard_normal((size, size), dtype=np.float32)

    img = spec.base_level + spec.amplitude * texture
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


@dataclass
class DrawRecord:
    index: int
    tile_id: str
    slot_id: str
    fresh: bool


@dataclass
class _Slot:
    slot_id: str
    category: Category
    instance_seed: int
    bitmap: np.ndarray


class TilePool:
    """Open-ended pool of synthesized slots with probabilistic reuse.

    Fresh slots are appended on non-reuse draws; reuse returns a bit-exact
    copy of an existing slot's bitmap. ``draw_log`` records every draw and
    is the ground-truth oracle for duplicate analysis. Not thread-safe:
    the owning service serializes access.
    """

    def __init__(
        self,
        spec: SynthSpec,
        reuse_probability: float,
        rng: random.Random,
        seed_base: int = 0,
    ):
        if not 0.0 <= reuse_probability <= 1.0:
            raise ConfigError("reuse_probability must be in [0, 1]")
        self.spec = spec
        self.reuse_probability = reuse_probability
        self.rng = rng
        self.slots: list[_Slot] = []
        self.draw_log: list[DrawRecord] = []
        self._by_category: dict[Category, list[int]] = {}
        self._key_index: dict[str, int] = {}
        self._seed_base = seed_base
        self._slot_counter = 0
        self._tile_counter = 0

    # -- slot management -------------------------------------------------

    def _new_slot(self, category: Category, key: str | None = None) -> _Slot:
        instance_seed = self._seed_base + self._slot_counter
        slot_id = key if key is not None else f"slot{self._slot_counter:07d}"
        slot = _Slot(slot_id, category, instance_seed, synth_tile(category, instance_seed, self.spec))
        self._slot_counter += 1
        self._by_category.setdefault(category, []).append(len(self.slots))
        self.slots.append(slot)
        return slot

    def seed_category(self, category: Category, count: int) -> None:
        """Pre-populate slots without logging draws."""
        for _ in range(count):
            self._new_slot(category)

    # -- draws ------------------------------------------------------------

    def _emit(self, slot: _Slot, fresh: bool) -> ImageTile:
        tile_id = f"t{self._tile_counter:08d}"
        self._tile_counter += 1
        self.draw_log.append(DrawRecord(len(self.draw_log), tile_id, slot.slot_id, fresh))
        return ImageTile(tile_id=tile_id, bitmap=slot.bitmap, truth=slot.category, pool_origin=slot.slot_id)

    def draw(self, category: Category) -> ImageTile:
        if category not in self.spec.waves:
            raise ConfigError(f"unknown category {category!r}")
        indices = self._by_category.get(category, ())
        want_reuse = self.rng.random() < self.reuse_probability
        if want_reuse and indices:
            slot = self.slots[indices[self.rng.randrange(len(indices))]]
            return self._emit(slot, fresh=False)
        if want_reuse and self.reuse_probability >= 1.0:
            raise PoolError(f"no slots to reuse for category {category!r} with r == 1")
        return self._emit(self._new_slot(category), fresh=True)

    def draw_scripted(self, category: Category, slot_key: str | None) -> ImageTile:
        """Planned draw: reuse the named slot if it exists, synthesize it
        otherwise (first occurrence), or draw a fresh anonymous slot when
        ``slot_key`` is None. Used by corpus generators that need an exact
        duplication structure."""
        if slot_key is None:
            return self._emit(self._new_slot(category), fresh=True)
        idx = self._key_index.get(slot_key)
        if idx is None:
            slot = self._new_slot(category, key=slot_key)
            self._key_index[slot_key] = len(self.slots) - 1
            return self._emit(slot, fresh=True)
        slot = self.slots[idx]
        if slot.category != category:
            raise PoolError(f"slot {slot_key!r} holds category {slot.category!r}")
        return self._emit(slot, fresh=False)

    # -- ground truth ------------------------------------------------------

    @property
    def draw_count(self) -> int:
        return len(self.draw_log)

    def ground_truth_clusters(self) -> list[list[str]]:
        """Tile-id clusters (size >= 2) implied by the draw log."""
        by_slot: dict[str, list[str]] = {}
        for rec in self.draw_log:
            by_slot.setdefault(rec.slot_id, []).append(rec.tile_id)
        clusters = [sorted(ids) for ids in by_slot.values() if len(ids) >= 2]
        clusters.sort(key=lambda ids: ids[0])
        return clusters

    def redundant_draws(self) -> int:
        return sum(1 for rec in self.draw_log if not rec.fresh)


def generate_repetition_corpus(
    total_draws: int,
    cluster_count: int,
    redundant_total: int,
    seed: int,
    spec: SynthSpec | None = None,
    categories: Sequence[Category] = DEFAULT_CATEGORIES,
) -> tuple[TilePool, list[ImageTile]]:
    """Draw a corpus with an exact duplication structure.

    Produces ``total_draws`` tiles containing exactly ``cluster_count``
    reuse clusters whose sizes sum to ``cluster_count + redundant_total``;
    every other tile is unique. Draw order is a seeded shuffle, and the
    pool's draw log is the ground-truth oracle.
    """
    if spec is None:
        spec = SynthSpec()
    cats = validate_categories(categories)
    unique_slots = total_draws - redundant_total
    if cluster_count < 0 or redundant_total < cluster_count or unique_slots < cluster_count:
        raise ConfigError("infeasible corpus plan")

    base, extra = divmod(redundant_total, cluster_count) if cluster_count else (0, 0)
    events: list[tuple[Category, str]] = []
    for slot_idx in range(unique_slots):
        category = cats[slot_idx % len(cats)]
        key = f"plan{slot_idx:07d}"
        copies = 1
        if slot_idx < cluster_count:
            copies += base + (1 if slot_idx < extra else 0)
        events.extend((category, key) for _ in range(copies))

    rng = random.Random(seed)
    rng.shuffle(events)

    pool = TilePool(spec, reuse_probability=0.0, rng=random.Random(seed ^ 0x5EED), seed_base=seed << 20)
    tiles = [pool.draw_scripted(category, key) for category, key in events]
    return pool, tiles
