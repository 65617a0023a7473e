"""Sparse voxel grids, level hierarchies, serialization and feature sampling.

Only occupied voxels are stored.  Keys of a grid are kept in lexicographic
order so that a packed 63-bit code of each key is sorted too, which turns
key lookup into a binary search.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .curves import CURVES, DEFAULT_BITS, curve_code
from .errors import ContractError, EmptySceneError

_PACK_BITS = 21
_PACK_OFFSET = 1 << (_PACK_BITS - 1)

# offset id = (dx + 1) * 9 + (dy + 1) * 3 + (dz + 1); the center is 13
KERNEL_OFFSETS = np.array([(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
                          dtype=np.int64)
CENTER_OFFSET = 13


def pack_keys(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64) + _PACK_OFFSET
    if k.size and (k.min() < 0 or k.max() >= (1 << _PACK_BITS)):
        raise ContractError("voxel key outside the packable range")
    return (k[:, 0] << (2 * _PACK_BITS)) | (k[:, 1] << _PACK_BITS) | k[:, 2]


def octant_of(keys: np.ndarray) -> np.ndarray:
    """Child slot (0..7) of each key inside its parent: x bit 0, y bit 1, z bit 2."""
    k = np.asarray(keys, dtype=np.int64)
    return (k[:, 0] & 1) | ((k[:, 1] & 1) << 1) | ((k[:, 2] & 1) << 2)


def _csr_groups(group_of: np.ndarray, n_groups: int) -> tuple[np.ndarray, np.ndarray]:
    """(offsets, members) such that members[offsets[g]:offsets[g+1]] belong to g."""
    order = np.argsort(group_of, kind="stable")
    counts = np.bincount(group_of, minlength=n_groups)
    offsets = np.zeros(n_groups + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return offsets, order


@dataclass
class VoxelGrid:
    keys: np.ndarray
    voxel_size: float
    level: int = 0
    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    point_map: np.ndarray | None = None
    point_ids: np.ndarray | None = None
    parent_rows: np.ndarray | None = None
    _codes: np.ndarray = field(default=None, repr=False)
    _key_index: dict | None = field(default=None, repr=False)
    _sources: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 3)
        self._codes = pack_keys(self.keys)
        if self._codes.size > 1 and not np.all(np.diff(self._codes) > 0):
            raise ContractError("voxel keys must be unique and lexicographically sorted")

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def num_voxels(self) -> int:
        return self.keys.shape[0]

    @property
    def num_points(self) -> int:
        return 0 if self.point_map is None else self.point_map.shape[0]

    @property
    def key_index(self) -> dict:
        if self._key_index is None:
            self._key_index = {tuple(k): i for i, k in enumerate(self.keys.tolist())}
        return self._key_index

    def lookup(self, keys) -> np.ndarray:
        """Row of each key, -1 where the voxel is unoccupied."""
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        out = np.full(keys.shape[0], -1, dtype=np.int64)
        if not len(self) or not keys.shape[0]:
            return out
        inside = np.all((keys + _PACK_OFFSET >= 0) & (keys + _PACK_OFFSET < (1 << _PACK_BITS)), axis=1)
        codes = pack_keys(keys[inside])
        pos = np.searchsorted(self._codes, codes)
        pos_c = np.minimum(pos, len(self) - 1)
        hit = self._codes[pos_c] == codes
        rows = np.where(hit, pos_c, -1)
        out[inside] = rows
        return out

    def centers(self) -> np.ndarray:
        return (self.keys + 0.5) * self.voxel_size

    def _source_csr(self):
        if self._sources is None:
            if self.point_map is None:
                raise ContractError("grid carries no point map")
            self._sources = _csr_groups(self.point_map, len(self))
        return self._sources

    def source_points(self, row: int) -> np.ndarray:
        """Global ids of the points that fall into voxel ``row``."""
        offsets, order = self._source_csr()
        members = order[offsets[row]:offsets[row + 1]]
        return self.point_ids[members]

    def points_per_voxel(self) -> np.ndarray:
        return np.bincount(self.point_map, minlength=len(self))

    def subset(self, rows) -> "VoxelGrid":
        """Grid restricted to ``rows`` (kept in key order); points follow their voxels."""
        rows = np.unique(np.asarray(rows, dtype=np.int64))
        remap = np.full(len(self), -1, dtype=np.int64)
        remap[rows] = np.arange(rows.shape[0])
        point_map = point_ids = None
        if self.point_map is not None:
            keep = remap[self.point_map] >= 0
            point_map = remap[self.point_map[keep]]
            point_ids = self.point_ids[keep]
        base = rows if self.parent_rows is None else self.parent_rows[rows]
        return VoxelGrid(
            keys=self.keys[rows], voxel_size=self.voxel_size, level=self.level,
            features=None if self.features is None else self.features[rows],
            labels=None if self.labels is None else self.labels[rows],
            point_map=point_map, point_ids=point_ids, parent_rows=base,
        )


def voxelize(positions, attributes, labels, voxel_size: float, point_ids=None) -> VoxelGrid:
    """Quantize points to voxels of edge ``voxel_size``.

    Voxel features are the mean attribute of the contributing points and the
    voxel label is the majority label (ties go to the smallest class id,
    ignore labels -1 do not vote).
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = pos.shape[0]
    if n == 0:
        raise EmptySceneError("cannot voxelize an empty point set")
    if not voxel_size > 0:
        raise ContractError(f"voxel size must be positive, got {voxel_size}")
    attrs = np.asarray(attributes, dtype=np.float64).reshape(n, -1)
    lab = np.asarray(labels, dtype=np.int64).reshape(n)
    keys = np.floor(pos / voxel_size).astype(np.int64)
    ukeys, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = ukeys.shape[0]
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    feats = np.zeros((m, attrs.shape[1]))
    for c in range(attrs.shape[1]):
        feats[:, c] = np.bincount(inverse, weights=attrs[:, c], minlength=m) / counts
    vox_labels = np.full(m, -1, dtype=np.int64)
    valid = lab >= 0
    if valid.any():
        k = int(lab[valid].max()) + 1
        votes = np.bincount(inverse[valid] * k + lab[valid], minlength=m * k).reshape(m, k)
        has = votes.sum(axis=1) > 0
        vox_labels[has] = np.argmax(votes[has], axis=1)
    ids = np.arange(n, dtype=np.int64) if point_ids is None else np.asarray(point_ids, dtype=np.int64)
    return VoxelGrid(keys=ukeys, voxel_size=float(voxel_size), level=0, features=feats,
                     labels=vox_labels, point_map=inverse.astype(np.int64), point_ids=ids)


@dataclass
class GridHierarchy:
    levels: list[VoxelGrid]
    parent_of: list[np.ndarray]
    child_offsets: list[np.ndarray]
    child_rows: list[np.ndarray]

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def children(self, level: int, row: int) -> np.ndarray:
        """Fine rows (at ``level``) whose parent is ``row`` at ``level + 1``."""
        off = self.child_offsets[level]
        return self.child_rows[level][off[row]:off[row + 1]]

    def child_of(self, level: int) -> dict[int, list[int]]:
        return {r: self.children(level, r).tolist() for r in range(len(self.levels[level + 1]))}

    def ancestor(self, level: int, rows, target: int) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64)
        for lv in range(level, target):
            rows = self.parent_of[lv][rows]
        return rows

    def octants(self, level: int) -> np.ndarray:
        return octant_of(self.levels[level].keys)

    def subset(self, keep: list[np.ndarray]) -> "GridHierarchy":
        """Restrict every level to ``keep[l]`` (boolean).  Parents of kept rows must be kept."""
        grids = [g.subset(np.flatnonzero(k)) for g, k in zip(self.levels, keep)]
        parent_of, offsets, childs = [], [], []
        for lv in range(len(grids) - 1):
            remap = np.full(len(self.levels[lv + 1]), -1, dtype=np.int64)
            remap[keep[lv + 1]] = np.arange(int(keep[lv + 1].sum()))
            par = remap[self.parent_of[lv][keep[lv]]]
            if (par < 0).any():
                raise ContractError("subset drops the parent of a kept voxel")
            parent_of.append(par)
            off, rows = _csr_groups(par, len(grids[lv + 1]))
            offsets.append(off)
            childs.append(rows)
        return GridHierarchy(grids, parent_of, offsets, childs)


def build_hierarchy(grid: VoxelGrid, num_levels: int) -> GridHierarchy:
    """Stack ``num_levels`` grids by repeatedly floor-halving keys."""
    if num_levels < 2:
        raise ContractError("a hierarchy needs at least two levels")
    grids, parent_of, offsets, childs = [grid], [], [], []
    for lv in range(num_levels - 1):
        fine = grids[-1]
        pkeys, inverse = np.unique(np.floor_divide(fine.keys, 2), axis=0, return_inverse=True)
        inverse = inverse.reshape(-1).astype(np.int64)
        coarse = VoxelGrid(
            keys=pkeys, voxel_size=fine.voxel_size * 2.0, level=lv + 1,
            point_map=None if fine.point_map is None else inverse[fine.point_map],
            point_ids=fine.point_ids,
        )
        grids.append(coarse)
        parent_of.append(inverse)
        off, rows = _csr_groups(inverse, len(coarse))
        offsets.append(off)
        childs.append(rows)
    return GridHierarchy(grids, parent_of, offsets, childs)


@dataclass(frozen=True)
class SerializationOrder:
    curve: str
    permutation: np.ndarray

    def positions(self) -> np.ndarray:
        """Inverse permutation: sequence position of each row."""
        pos = np.empty_like(self.permutation)
        pos[self.permutation] = np.arange(self.permutation.shape[0])
        return pos


def serialize(grid: VoxelGrid, curve: str, bits: int = DEFAULT_BITS) -> SerializationOrder:
    """Order rows along a space-filling curve after shifting keys to the grid minimum."""
    if curve not in CURVES:
        raise ValueError(f"unknown curve {curve!r}")
    keys = grid.keys
    if not len(grid):
        return SerializationOrder(curve, np.zeros(0, dtype=np.int64))
    codes = curve_code(keys - keys.min(axis=0), curve, bits)
    return SerializationOrder(curve, np.argsort(codes, kind="stable"))


def kernel_neighbors(grid: VoxelGrid) -> np.ndarray:
    """(N, 27) table of occupied neighbor rows for the 3x3x3 stencil, -1 where empty."""
    n = len(grid)
    table = np.empty((n, 27), dtype=np.int64)
    for o, off in enumerate(KERNEL_OFFSETS):
        table[:, o] = grid.lookup(grid.keys + off)
    return table


def neighbor_pairs(table: np.ndarray) -> list[list[tuple[int, int]]]:
    """Per-voxel list of (offset id, neighbor row) from a neighbor table."""
    return [[(int(o), int(r)) for o, r in enumerate(row) if r >= 0] for row in table]


_CORNERS = np.array([(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)], dtype=np.int64)


def trilinear_weights(grid: VoxelGrid, queries) -> tuple[np.ndarray, np.ndarray]:
    """Corner rows (M, 8) and renormalized weights (M, 8) for each query.

    Unoccupied corners are dropped and the remaining weights rescaled to sum
    to one; queries with no occupied corner take their nearest voxel center.
    """
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    u = q / grid.voxel_size - 0.5
    base = np.floor(u).astype(np.int64)
    t = u - base
    rows = np.empty((q.shape[0], 8), dtype=np.int64)
    weights = np.empty((q.shape[0], 8))
    for c, corner in enumerate(_CORNERS):
        rows[:, c] = grid.lookup(base + corner)
        w = np.ones(q.shape[0])
        for axis in range(3):
            w = w * (t[:, axis] if corner[axis] else 1.0 - t[:, axis])
        weights[:, c] = w
    weights = np.where(rows >= 0, weights, 0.0)
    total = weights.sum(axis=1)
    empty = total <= 0.0
    weights[~empty] /= total[~empty, None]
    if empty.any():
        _, nearest = cKDTree(grid.centers()).query(q[empty])
        rows[empty] = -1
        rows[empty, 0] = nearest
        weights[empty] = 0.0
        weights[empty, 0] = 1.0
    return rows, weights


def trilinear_sample(grid: VoxelGrid, features, queries) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape[0] != len(grid):
        raise ContractError(f"{feats.shape[0]} feature rows for {len(grid)} voxels")
    rows, weights = trilinear_weights(grid, queries)
    out = np.zeros((rows.shape[0], feats.shape[1]))
    for c in range(8):
        present = rows[:, c] >= 0
        out[present] += weights[present, c, None] * feats[rows[present, c]]
    return out
