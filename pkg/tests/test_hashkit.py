"""Hashing: exact digests, perceptual hash construction, clustering."""

import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gauntlet.errors import ConfigError
from gauntlet.hashkit import (
    DuplicateReport,
    box_downsample,
    cluster_by_digest,
    cluster_duplicates,
    exact_hash,
    hamming,
    phash64,
)
from gauntlet.tiles import SynthSpec, TilePool, synth_tile


class TestExactHash:
    def test_identical_bitmaps_identical_digest(self, spec):
        a = synth_tile("car", 1, spec)
        assert exact_hash(a) == exact_hash(a.copy())

    def test_single_pixel_flip_changes_digest(self, spec):
        a = synth_tile("car", 2, spec)
        b = a.copy()
        b[10, 10] ^= 1
        assert exact_hash(a) != exact_hash(b)

    def test_thousand_distinct_tiles_distinct_digests(self, spec):
        digests = {exact_hash(synth_tile("train", s, spec)) for s in range(1000)}
        assert len(digests) == 1000


class TestPhash:
    def test_constant_zero_image_hashes_to_zero(self):
        assert phash64(np.zeros((64, 64), dtype=np.uint8)) == 0

    def test_copies_distance_zero(self, spec):
        a = synth_tile("boat", 77, spec)
        assert hamming(phash64(a), phash64(a.copy())) == 0

    def test_pgm_roundtrip_preserves_hash(self, spec):
        from gauntlet.pgm import parse_pgm, pgm_bytes

        a = synth_tile("seaplane", 13, spec)
        assert phash64(parse_pgm(pgm_bytes(a))) == phash64(a)

    def test_small_bitmap_rejected(self):
        with pytest.raises(ConfigError):
            phash64(np.zeros((16, 16), dtype=np.uint8))

    def test_any_size_at_least_32(self):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 256, (50, 37)).astype(np.uint8)
        assert 0 <= phash64(img) < 2**64

    def test_noise_pair_mean_distance(self):
        rng = np.random.default_rng(42)
        distances = []
        for _ in range(1000):
            a = rng.integers(0, 256, (64, 64)).astype(np.uint8)
            b = rng.integers(0, 256, (64, 64)).astype(np.uint8)
            distances.append(hamming(phash64(a), phash64(b)))
        mean = sum(distances) / len(distances)
        assert 24 <= mean <= 40

    def test_downsample_averages_blocks(self):
        img = np.arange(64 * 64, dtype=np.uint8).reshape(64, 64)
        small = box_downsample(img, 32)
        block = img[:2, :2].astype(np.float64)
        assert small[0, 0] == pytest.approx(block.mean())


class TestHamming:
    def test_basics(self):
        assert hamming(0x0, 0x0) == 0
        assert hamming((1 << 64) - 1, 0x0) == 64
        assert hamming(0b1010, 0b0110) == 2

    @given(
        a=st.integers(min_value=0, max_value=2**64 - 1),
        b=st.integers(min_value=0, max_value=2**64 - 1),
        c=st.integers(min_value=0, max_value=2**64 - 1),
    )
    def test_metric_axioms(self, a, b, c):
        assert hamming(a, b) == hamming(b, a)
        assert (hamming(a, b) == 0) == (a == b)
        assert hamming(a, c) <= hamming(a, b) + hamming(b, c)


class TestClustering:
    def test_distinct_corpus_no_clusters(self):
        rng = np.random.default_rng(1)
        items = []
        for i in range(100):
            img = rng.integers(0, 256, (64, 64)).astype(np.uint8)
            items.append((f"img{i}", phash64(img), exact_hash(img)))
        report = cluster_duplicates(items, threshold=0)
        assert report.cluster_count == 0 and report.redundant_images == 0

    def test_pool_duplicates_recovered_exactly(self):
        pool = TilePool(SynthSpec(), reuse_probability=0.5, rng=random.Random(9))
        tiles = [pool.draw("truck") for _ in range(400)]
        items = [(t.tile_id, phash64(t.bitmap), exact_hash(t.bitmap)) for t in tiles]
        phash_report = cluster_duplicates(items, threshold=0)
        digest_report = cluster_by_digest([(t.tile_id, exact_hash(t.bitmap)) for t in tiles])
        truth = {frozenset(c) for c in pool.ground_truth_clusters()}
        assert phash_report.partition_key() == digest_report.partition_key() == truth

    def test_threshold_merges_near_duplicates(self):
        items = [("a", 0b0000, "d1"), ("b", 0b0001, "d2"), ("c", 0b1111000011, "d3")]
        loose = cluster_duplicates(items, threshold=1)
        assert loose.clusters == (("a", "b"),)
        strict = cluster_duplicates(items, threshold=0)
        assert strict.cluster_count == 0

    def test_threshold_range_checked(self):
        with pytest.raises(ConfigError):
            cluster_duplicates([], threshold=65)

    def test_report_invariant_enforced(self):
        with pytest.raises(ConfigError):
            DuplicateReport(total_images=3, redundant_images=2, clusters=(("a", "b"),))

    def test_report_json_schema(self):
        report = DuplicateReport(3, 1, (("a", "b"),))
        assert report.to_json_dict() == {"total": 3, "redundant": 1, "clusters": [["a", "b"]]}
