"""2D discrete cosine basis grids and DCT-weighted pooling.

Basis grids use the unnormalized DCT-II form
``cos(pi*i*(f+1/2)/F) * cos(pi*j*(t+1/2)/T)``; no orthonormalization
constants are applied, so the (0, 0) grid is all ones and pooling with it
degenerates to a plain sum (F*T times the channel mean). Any missing scale
is absorbed by the learnable channel transform downstream.

Map sizes here are tiny (default grid 8x25), so pooling is a direct
contraction rather than a fast transform.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


def basis_weight(i: int, j: int, f: int, t: int, big_f: int, big_t: int) -> float:
    """Single grid entry of basis (i, j) at location (f, t) on an FxT map."""
    if not (0 <= i < big_f and 0 <= f < big_f):
        raise IndexError(f"frequency index out of range: i={i}, f={f}, F={big_f}")
    if not (0 <= j < big_t and 0 <= t < big_t):
        raise IndexError(f"time index out of range: j={j}, t={t}, T={big_t}")
    return math.cos(math.pi * i * (f + 0.5) / big_f) * math.cos(math.pi * j * (t + 0.5) / big_t)


@dataclass(frozen=True)
class DctBasis:
    """One pre-computed cosine grid over an FxT map."""

    i: int
    j: int
    big_f: int
    big_t: int
    weights: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def build(cls, i: int, j: int, big_f: int, big_t: int) -> "DctBasis":
        fr = np.cos(np.pi * i * (np.arange(big_f) + 0.5) / big_f)
        tr = np.cos(np.pi * j * (np.arange(big_t) + 0.5) / big_t)
        return cls(i, j, big_f, big_t, np.outer(fr, tr))


@dataclass(frozen=True)
class DctBasisSet:
    """The K lowest basis grids, ordered by ascending i+j with smaller i
    breaking ties."""

    components: tuple[DctBasis, ...]
    big_f: int
    big_t: int

    def __len__(self) -> int:
        return len(self.components)

    @property
    def index_pairs(self) -> list[tuple[int, int]]:
        return [(b.i, b.j) for b in self.components]

    def stacked(self) -> np.ndarray:
        """(K, F, T) array of the grids, in order."""
        return np.stack([b.weights for b in self.components])


def component_order(big_f: int, big_t: int) -> list[tuple[int, int]]:
    """All (i, j) pairs sorted ascending by i+j, ties to the smaller i."""
    pairs = [(i, j) for i in range(big_f) for j in range(big_t)]
    pairs.sort(key=lambda p: (p[0] + p[1], p[0]))
    return pairs


_BASIS_CACHE: dict[tuple[int, int, int], DctBasisSet] = {}


def build_basis_set(big_f: int, big_t: int, k: int) -> DctBasisSet:
    """First K components under the low-frequency-first order. Grids are
    computed once per (F, T, K) and cached; they are immutable afterwards."""
    if not 1 <= k <= big_f * big_t:
        raise ValueError(f"K={k} out of range [1, {big_f * big_t}] for a {big_f}x{big_t} grid")
    key = (big_f, big_t, k)
    if key not in _BASIS_CACHE:
        comps = tuple(DctBasis.build(i, j, big_f, big_t) for i, j in component_order(big_f, big_t)[:k])
        _BASIS_CACHE[key] = DctBasisSet(comps, big_f, big_t)
    return _BASIS_CACHE[key]


def dct2_pool(channel_map: np.ndarray, basis: DctBasis) -> float:
    """Project one FxT channel map onto a basis grid (plain dot product)."""
    channel_map = np.asarray(channel_map)
    if channel_map.shape != (basis.big_f, basis.big_t):
        raise ShapeError(
            f"map extents {channel_map.shape} do not match basis grid ({basis.big_f}, {basis.big_t})")
    return float(np.sum(basis.weights * channel_map))


def export_basis_csv(big_f: int, big_t: int, k: int, out_dir: str) -> list[str]:
    """Write each of the K lowest grids as a CSV file (one line per grid
    row), named by rank and (i, j). Returns the paths in component order."""
    basis_set = build_basis_set(big_f, big_t, k)
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for rank, basis in enumerate(basis_set.components):
        path = os.path.join(out_dir, f"dct_basis_{rank:03d}_i{basis.i}_j{basis.j}.csv")
        with open(path, "w") as f:
            for row in basis.weights:
                f.write(",".join(f"{v:.17g}" for v in row) + "\n")
        paths.append(path)
    return paths
