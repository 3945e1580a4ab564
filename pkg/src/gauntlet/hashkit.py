"""Exact and perceptual image hashing with duplicate clustering.

The perceptual hash is the classic DCT construction: box-filter the image
down to 32x32, take the 2-D type-II DCT, keep the top-left 8x8 coefficient
block (DC included), and set bit i when coefficient i exceeds the median
of those 64 values. Hashes compare by Hamming distance; clustering at
distance 0 must agree exactly with MD5 clustering on bit-exact corpora.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.fft import dctn

from .errors import ConfigError
from .pgm import pgm_bytes, read_pgm

PHash64 = int


def exact_hash(bitmap: np.ndarray) -> str:
    """128-bit MD5 digest (hex) of the canonical PGM encoding."""
    return hashlib.md5(pgm_bytes(bitmap)).hexdigest()


def box_downsample(bitmap: np.ndarray, out_size: int = 32) -> np.ndarray:
    """Area-average resample to out_size x out_size (float64).

    Each output pixel is the exact mean of its (possibly fractional)
    source cell, computed with separable overlap-weight matrices, so the
    result is deterministic for any input size.
    """
    h, w = bitmap.shape
    if h < out_size or w < out_size:
        raise ConfigError(f"bitmap must be at least {out_size}x{out_size}, got {h}x{w}")
    rows = _overlap_weights(h, out_size)
    cols = _overlap_weights(w, out_size)
    return rows @ bitmap.astype(np.float64) @ cols.T


@lru_cache(maxsize=64)
def _overlap_weights(n_in: int, n_out: int) -> np.ndarray:
    # weights[i, k] = overlap of output cell [i*n_in/n_out, (i+1)*n_in/n_out)
    # with input pixel [k, k+1), normalized by the cell length.
    edges = np.arange(n_out + 1) * (n_in / n_out)
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges[i], edges[i + 1]
        k0, k1 = int(np.floor(lo)), int(np.ceil(hi))
        for k in range(k0, min(k1, n_in)):
            weights[i, k] = min(hi, k + 1) - max(lo, k)
    weights /= n_in / n_out
    weights.setflags(write=False)
    return weights


def phash64(bitmap: np.ndarray) -> PHash64:
    """64-bit perceptual hash; requires an 8-bit grayscale bitmap >= 32x32.

    Bit i (row-major coefficient order, DC first) lands at position 63-i
    of the returned integer, so the first coefficient is the MSB.
    """
    if bitmap.dtype != np.uint8 or bitmap.ndim != 2:
        raise ConfigError("phash64 requires a 2-D uint8 bitmap")
    small = box_downsample(bitmap, 32)
    coeffs = dctn(small, type=2)
    block = coeffs[:8, :8].ravel()
    median = np.median(block)
    bits = np.packbits(block > median)
    return int.from_bytes(bits.tobytes(), "big")


def hamming(a: PHash64, b: PHash64) -> int:
    return (a ^ b).bit_count()


@dataclass(frozen=True)
class DuplicateReport:
    """Clusters of size >= 2 plus the redundancy counts they imply."""

    total_images: int
    redundant_images: int
    clusters: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        expected = sum(len(c) - 1 for c in self.clusters)
        if expected != self.redundant_images:
            raise ConfigError("redundant count does not match clusters")

    @property
    def cluster_count(self) -> int:
        return len(self.clusters)

    def partition_key(self) -> frozenset[frozenset[str]]:
        return frozenset(frozenset(c) for c in self.clusters)

    def to_json_dict(self) -> dict:
        return {
            "total": self.total_images,
            "redundant": self.redundant_images,
            "clusters": [list(c) for c in self.clusters],
        }


def _report_from_groups(total: int, groups: Iterable[list[str]]) -> DuplicateReport:
    clusters = [tuple(sorted(g)) for g in groups if len(g) >= 2]
    clusters.sort()
    return DuplicateReport(
        total_images=total,
        redundant_images=sum(len(c) - 1 for c in clusters),
        clusters=tuple(clusters),
    )


def cluster_by_digest(items: Sequence[tuple[str, str]]) -> DuplicateReport:
    """Group image ids by identical content digest."""
    groups: dict[str, list[str]] = {}
    for image_id, digest in items:
        groups.setdefault(digest, []).append(image_id)
    return _report_from_groups(len(items), groups.values())


def cluster_duplicates(
    items: Sequence[tuple[str, PHash64, str]], threshold: int = 0
) -> DuplicateReport:
    """Union-find clustering: two images join iff Hamming(pHash) <= threshold.

    The digest in each (id, phash, digest) triple is carried for
    cross-checks by callers; joining uses the perceptual hash only. The
    threshold > 0 path compares all pairs and is meant for small
    near-duplicate studies.
    """
    if not 0 <= threshold <= 64:
        raise ConfigError("threshold must be in [0, 64]")
    n = len(items)
    if threshold == 0:
        groups: dict[PHash64, list[str]] = {}
        for image_id, ph, _digest in items:
            groups.setdefault(ph, []).append(image_id)
        return _report_from_groups(n, groups.values())

    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if hamming(items[i][1], items[j][1]) <= threshold:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[rj] = ri
    groups_idx: dict[int, list[str]] = {}
    for i in range(n):
        groups_idx.setdefault(find(i), []).append(items[i][0])
    return _report_from_groups(n, groups_idx.values())


def scan_corpus_dir(path: str | Path) -> Iterator[tuple[str, np.ndarray]]:
    """Yield (image id, bitmap) for every .pgm file, sorted by name."""
    root = Path(path)
    if not root.is_dir():
        raise IOError(f"corpus directory not readable: {root}")
    for file in sorted(root.glob("*.pgm")):
        yield file.stem, read_pgm(file)
