"""Duplicate-loop removal via average hash, layout refinement, pairing.

Loop template spectrograms from the same song are hashed down to 64 bits;
pairs closer than 5 bits are duplicates. Duplicate activations merge into
the surviving loop's layout row, bars are max-normalized, and loops that
co-occur above a 0.2 activation threshold become positive pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput

HAMMING_DUPLICATE_THRESHOLD = 5
PAIR_ACTIVATION_THRESHOLD = 0.2


@dataclass(frozen=True)
class SpectrogramHash:
    """64-bit average hash of an 8x8 downsampled spectrogram."""

    bits: int

    def hamming(self, other: "SpectrogramHash") -> int:
        return (self.bits ^ other.bits).bit_count()


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic resize weights: output cell j averages the input
    cells its interval [j, j+1) * n_in/n_out overlaps, by overlap length.

    Point sampling would alias away narrow spectral peaks (a tonal loop
    lights only a few mel bins), so every input cell must contribute.
    """
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    for j in range(n_out):
        start, end = j * scale, (j + 1) * scale
        lo, hi = int(np.floor(start)), min(int(np.ceil(end)), n_in)
        for i in range(lo, hi):
            w[j, i] = max(0.0, min(end, i + 1) - max(start, i))
    return w / scale


def _area_resize(matrix: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact pixel-area-weighted resampling (identity when sizes match)."""
    in_h, in_w = matrix.shape
    return _area_weights(in_h, out_h) @ matrix @ _area_weights(in_w, out_w).T


def average_hash(matrix: np.ndarray) -> SpectrogramHash:
    """Downsample to 8x8, set bit i iff cell i is strictly above the mean."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.size == 0:
        raise InvalidInput("average_hash needs a non-empty 2-D matrix")
    small = _area_resize(matrix, 8, 8)
    mean = small.mean()
    # tolerance keeps cells equal to the mean (up to round-off) at 0
    tol = 1e-9 * max(1.0, abs(mean))
    bits = 0
    for i, cell in enumerate(small.ravel()):
        if cell > mean + tol:
            bits |= 1 << i
    return SpectrogramHash(bits=bits)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


@dataclass
class DedupResult:
    kept: list[int] = field(default_factory=list)
    merge_map: dict[int, int] = field(default_factory=dict)  # loser -> winner


def dedup_loops(spectrograms: list[np.ndarray],
                activation_totals: np.ndarray | list[float] | None = None,
                threshold: int = HAMMING_DUPLICATE_THRESHOLD) -> DedupResult:
    """Merge loops whose hash Hamming distance is strictly below threshold.

    Duplicate chains are resolved transitively (union-find); within each
    group the loop with the largest total activation survives.
    """
    n = len(spectrograms)
    if n == 0:
        return DedupResult()
    totals = (np.asarray(activation_totals, dtype=np.float64)
              if activation_totals is not None else np.zeros(n))
    hashes = [average_hash(s) for s in spectrograms]
    uf = _UnionFind(n)
    for i in range(n):
        for j in range(i + 1, n):
            if hashes[i].hamming(hashes[j]) < threshold:
                uf.union(i, j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(uf.find(i), []).append(i)
    result = DedupResult()
    for members in groups.values():
        winner = max(members, key=lambda i: (totals[i], -i))
        result.kept.append(winner)
        for m in members:
            if m != winner:
                result.merge_map[m] = winner
    result.kept.sort()
    return result


def refine_layout(activations: np.ndarray, merge_map: dict[int, int]) -> np.ndarray:
    """Fold duplicate rows into their survivors, then max-normalize each bar.

    Returns a loops x bars matrix over the surviving rows only (original
    row order preserved); all-zero bars are left untouched.
    """
    activations = np.asarray(activations, dtype=np.float64)
    merged = activations.copy()
    for loser, winner in merge_map.items():
        merged[winner] += merged[loser]
    survivors = [i for i in range(merged.shape[0]) if i not in merge_map]
    out = merged[survivors]
    col_max = out.max(axis=0, initial=0.0)
    scale = np.where(col_max > 0, col_max, 1.0)
    return out / scale


def derive_pairs(layout: np.ndarray,
                 threshold: float = PAIR_ACTIVATION_THRESHOLD) -> set[tuple[int, int]]:
    """Unordered index pairs of loops co-active (>= threshold) in some bar."""
    layout = np.asarray(layout, dtype=np.float64)
    pairs: set[tuple[int, int]] = set()
    for bar in range(layout.shape[1]):
        active = np.flatnonzero(layout[:, bar] >= threshold)
        for a_idx in range(len(active)):
            for b_idx in range(a_idx + 1, len(active)):
                pairs.add((int(active[a_idx]), int(active[b_idx])))
    return pairs
