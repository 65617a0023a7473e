"""Student/teacher inputs: augmented views, crops, consistent masks, matching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateViewError
from .scene import PointCloud
from .voxel import GridHierarchy, VoxelGrid, build_hierarchy, voxelize


@dataclass(frozen=True)
class AugmentationParams:
    rotation: float = 0.0
    scale: float = 1.0
    flip: tuple[bool, bool, bool] = (False, False, False)
    jitter_sigma: float = 0.0
    color_sigma: float = 0.0
    elastic: bool = False

    def __post_init__(self):
        if not 0.8 <= self.scale <= 1.2:
            raise ContractError(f"scale {self.scale} outside [0.8, 1.2]")
        if self.jitter_sigma < 0 or self.color_sigma < 0:
            raise ContractError("jitter sigmas must be non-negative")


@dataclass
class AugConfig:
    rotation: float = 2 * math.pi
    scale_min: float = 0.9
    scale_max: float = 1.1
    flip_p: float = 0.5
    jitter_sigma: float = 0.005
    color_sigma: float = 0.05
    elastic: bool = False


def sample_augmentation(cfg: AugConfig, rng: np.random.Generator) -> AugmentationParams:
    """Draw one parameter set; only the horizontal axes are ever flipped."""
    return AugmentationParams(
        rotation=float(rng.uniform(0.0, cfg.rotation)) if cfg.rotation > 0 else 0.0,
        scale=float(rng.uniform(cfg.scale_min, cfg.scale_max)),
        flip=(bool(rng.random() < cfg.flip_p), bool(rng.random() < cfg.flip_p), False),
        jitter_sigma=cfg.jitter_sigma,
        color_sigma=cfg.color_sigma,
        elastic=cfg.elastic,
    )


def _elastic(pos: np.ndarray, rng: np.random.Generator, granularity=0.2, magnitude=0.4) -> np.ndarray:
    from scipy.interpolate import RegularGridInterpolator
    from scipy.ndimage import gaussian_filter

    lo = pos.min(axis=0) - 2 * granularity
    dims = ((pos.max(axis=0) - lo) / granularity).astype(int) + 4
    noise = rng.standard_normal((3, *dims))
    noise = np.stack([gaussian_filter(n, sigma=1.0, mode="nearest") for n in noise])
    axes = [lo[i] + granularity * np.arange(dims[i]) for i in range(3)]
    disp = np.stack([RegularGridInterpolator(axes, noise[c], bounds_error=False, fill_value=0.0)(pos)
                     for c in range(3)], axis=1)
    return pos + disp * magnitude * granularity


def augment(cloud: PointCloud, params: AugmentationParams, seed) -> PointCloud:
    """Rotate about z through the origin, scale, flip, then jitter; point order is kept."""
    rng = np.random.default_rng(seed)
    c, s = math.cos(params.rotation), math.sin(params.rotation)
    pos = cloud.positions
    if params.rotation != 0.0:
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        pos = pos @ rot.T
    if params.scale != 1.0:
        pos = pos * params.scale
    if any(params.flip):
        pos = pos * np.where(params.flip, -1.0, 1.0)
    if params.elastic:
        pos = _elastic(pos, rng)
    if params.jitter_sigma > 0:
        pos = pos + rng.normal(0.0, params.jitter_sigma, pos.shape)
    colors = cloud.colors
    if params.color_sigma > 0:
        colors = np.clip(colors + rng.normal(0.0, params.color_sigma, colors.shape), 0.0, 1.0)
    return PointCloud(pos, colors, cloud.labels, cloud.instance_ids, cloud.scene_id)


def crop(grid: VoxelGrid, max_points: int, seed) -> VoxelGrid:
    """Grow a ball of voxels around a random seed voxel until ``max_points`` points are covered."""
    if max_points < 1:
        raise ContractError("max_points must be >= 1")
    rng = np.random.default_rng(seed)
    start = int(rng.integers(len(grid)))
    d2 = np.sum((grid.keys - grid.keys[start]) ** 2, axis=1)
    order = np.lexsort((np.arange(len(grid)), d2))
    covered = np.cumsum(grid.points_per_voxel()[order])
    n_take = int(np.searchsorted(covered, max_points)) + 1
    return grid.subset(order[:min(n_take, len(grid))])


@dataclass
class MaskSpec:
    masked: list[np.ndarray]
    patches: np.ndarray

    @property
    def num_levels(self) -> int:
        return len(self.masked)

    def masked_rows(self, level: int) -> np.ndarray:
        return np.flatnonzero(self.masked[level])

    def unmasked_rows(self, level: int) -> np.ndarray:
        return np.flatnonzero(~self.masked[level])

    @property
    def empty(self) -> bool:
        return not any(m.any() for m in self.masked)

    @classmethod
    def none(cls, hier: GridHierarchy) -> "MaskSpec":
        return cls([np.zeros(len(g), dtype=bool) for g in hier.levels], np.zeros((0, 3), dtype=np.int64))


def mask_count(ratio: float, k: int) -> int:
    # guard against 0.7 * 10 == 7.000000000000001
    return min(k, int(math.ceil(ratio * k - 1e-9)))


def make_mask(hier: GridHierarchy, ratio: float, seed) -> MaskSpec:
    """Mask ceil(ratio * K) coarsest voxels and every descendant of them."""
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"mask ratio {ratio} outside [0, 1]")
    rng = np.random.default_rng(seed)
    top = hier.num_levels - 1
    k = len(hier.levels[top])
    chosen = rng.choice(k, size=mask_count(ratio, k), replace=False)
    masked = [None] * hier.num_levels
    masked[top] = np.zeros(k, dtype=bool)
    masked[top][chosen] = True
    for lv in range(top - 1, -1, -1):
        masked[lv] = masked[lv + 1][hier.parent_of[lv]]
    return MaskSpec(masked, hier.levels[top].keys[np.sort(chosen)])


def correspondence(h1: GridHierarchy, h2: GridHierarchy) -> list[tuple[np.ndarray, np.ndarray]]:
    """Mutual-plurality voxel pairs per level, matched through shared point ids."""
    out = []
    for g1, g2 in zip(h1.levels, h2.levels):
        _, i1, i2 = np.intersect1d(g1.point_ids, g2.point_ids, assume_unique=True, return_indices=True)
        r1, r2 = g1.point_map[i1], g2.point_map[i2]
        n2 = len(g2)
        pairs, counts = np.unique(r1 * n2 + r2, return_counts=True)
        a, b = pairs // n2, pairs % n2
        # best partner per side: highest count, ties to the smallest row
        o1 = np.lexsort((b, -counts, a))
        first1 = np.r_[True, a[o1][1:] != a[o1][:-1]]
        best_for_a = dict(zip(a[o1][first1].tolist(), b[o1][first1].tolist()))
        o2 = np.lexsort((a, -counts, b))
        first2 = np.r_[True, b[o2][1:] != b[o2][:-1]]
        best_b = b[o2][first2]
        best_for_b = np.full(n2, -1, dtype=np.int64)
        best_for_b[best_b] = a[o2][first2]
        rows_a = np.array(sorted(best_for_a), dtype=np.int64)
        if rows_a.size:
            partner = np.array([best_for_a[x] for x in rows_a.tolist()], dtype=np.int64)
            mutual = best_for_b[partner] == rows_a
            out.append((rows_a[mutual], partner[mutual]))
        else:
            out.append((np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)))
    return out


@dataclass
class ViewConfig:
    aug: AugConfig = field(default_factory=AugConfig)
    voxel_size: float = 0.1
    levels: int = 4
    crop_max_points: int = 1600
    mask_ratio: float = 0.4


@dataclass
class StudentView:
    hierarchy: GridHierarchy
    mask: MaskSpec
    full_rows: list[np.ndarray]


@dataclass
class ViewPair:
    students: tuple[StudentView, StudentView]
    teachers: tuple[GridHierarchy, GridHierarchy]
    correspondence: list[tuple[np.ndarray, np.ndarray]]
    source_id: str


INPUT_CHANNELS = 4


def voxel_inputs(grid: VoxelGrid) -> np.ndarray:
    """Network input per voxel: mean color mapped to [-1, 1] plus a constant occupancy channel.

    The occupancy channel keeps the stem response away from zero for gray
    voxels, which the per-voxel normalization would otherwise blow up into noise.
    """
    colors = 2.0 * grid.features[:, :3] - 1.0
    return np.concatenate([colors, np.ones((len(grid), 1))], axis=1)


def build_view_pair(cloud: PointCloud, config: ViewConfig, seed) -> ViewPair:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_aug, s_j1, s_j2, s_c1, s_c2, s_m1, s_m2 = ss.spawn(7)
    rng = np.random.default_rng(s_aug)
    params = [sample_augmentation(config.aug, rng) for _ in range(2)]
    teachers, students = [], []
    for p, s_j, s_c, s_m in zip(params, (s_j1, s_j2), (s_c1, s_c2), (s_m1, s_m2)):
        view = augment(cloud, p, s_j)
        grid = voxelize(view.positions, view.colors, view.labels, config.voxel_size)
        full = build_hierarchy(grid, config.levels)
        cropped = build_hierarchy(crop(grid, config.crop_max_points, s_c), config.levels)
        if len(cropped.levels[-1]) < 2:
            raise DegenerateViewError(
                f"crop of {cloud.scene_id} covers {len(cropped.levels[-1])} coarse voxel(s)")
        full_rows = [cropped.levels[0].parent_rows] + [
            full.levels[lv].lookup(cropped.levels[lv].keys) for lv in range(1, config.levels)]
        mask = make_mask(cropped, config.mask_ratio, s_m)
        teachers.append(full)
        students.append(StudentView(cropped, mask, full_rows))
    return ViewPair(tuple(students), tuple(teachers), correspondence(teachers[0], teachers[1]),
                    cloud.scene_id)
