"""Augmentation, cropping, consistent masks, cross-view matching and view pairs."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import pdist

from msm3d.errors import ContractError, DegenerateViewError
from msm3d.scene import PointCloud, SceneSpec, generate_scene
from msm3d.views import (AugConfig, AugmentationParams, ViewConfig, augment, build_view_pair, correspondence,
                         crop, make_mask, mask_count, sample_augmentation)
from msm3d.voxel import build_hierarchy, voxelize
from oracles import ball_growth_crop, mask_by_ancestor_walk, plurality_matching, voxel_point_sets


def random_cloud(rng, n=300, extent=2.0):
    return PointCloud(rng.random((n, 3)) * extent, rng.random((n, 3)), rng.integers(0, 7, n),
                      rng.integers(0, 5, n), "r")


def hierarchy_of(cloud, size=0.1, levels=4):
    return build_hierarchy(voxelize(cloud.positions, cloud.colors, cloud.labels, size), levels)


class TestAugment:
    def test_identity(self):
        c = random_cloud(np.random.default_rng(0))
        out = augment(c, AugmentationParams(), seed=1)
        np.testing.assert_array_equal(out.positions, c.positions)
        np.testing.assert_array_equal(out.colors, c.colors)

    def test_half_turn_about_z(self):
        c = PointCloud([[1.0, 0.0, 0.0]], [[0, 0, 0]], [0], [0])
        out = augment(c, AugmentationParams(rotation=math.pi), seed=0)
        np.testing.assert_allclose(out.positions, [[-1.0, 0.0, 0.0]], atol=1e-12)

    def test_scale_multiplies_pairwise_distances(self):
        c = random_cloud(np.random.default_rng(1), 200)
        out = augment(c, AugmentationParams(rotation=0.7, scale=1.1, flip=(True, False, False)), seed=0)
        np.testing.assert_allclose(pdist(out.positions), 1.1 * pdist(c.positions), rtol=1e-9)

    @settings(max_examples=30)
    @given(seed=st.integers(0, 10**6))
    def test_preserves_count_labels_and_identity(self, seed):
        rng = np.random.default_rng(seed)
        c = random_cloud(rng, 150)
        params = sample_augmentation(AugConfig(elastic=True), rng)
        out = augment(c, params, seed)
        assert len(out) == len(c)
        np.testing.assert_array_equal(out.labels, c.labels)
        np.testing.assert_array_equal(out.instance_ids, c.instance_ids)
        assert 0.9 <= params.scale <= 1.1 and not params.flip[2]
        again = augment(c, params, seed)
        assert again.positions.tobytes() == out.positions.tobytes()

    def test_parameter_ranges_checked(self):
        with pytest.raises(ContractError):
            AugmentationParams(scale=1.5)
        with pytest.raises(ContractError):
            AugmentationParams(jitter_sigma=-0.1)


class TestCrop:
    def grid(self, seed=2):
        c = random_cloud(np.random.default_rng(seed), 600)
        return voxelize(c.positions, c.colors, c.labels, 0.2)

    def test_large_budget_keeps_everything(self):
        g = self.grid()
        out = crop(g, g.num_points, seed=0)
        np.testing.assert_array_equal(out.keys, g.keys)

    def test_budget_one_is_the_seed_voxel(self):
        g = self.grid()
        out = crop(g, 1, seed=5)
        start = int(np.random.default_rng(5).integers(len(g)))
        np.testing.assert_array_equal(out.keys, g.keys[[start]])

    @pytest.mark.parametrize("seed", range(5))
    def test_half_budget_matches_sort_oracle(self, seed):
        g = self.grid(seed)
        out = crop(g, g.num_points // 2, seed=seed)
        start = int(np.random.default_rng(seed).integers(len(g)))
        expected = ball_growth_crop(g.keys, g.points_per_voxel(), start, g.num_points // 2)
        assert {tuple(k) for k in out.keys.tolist()} == {tuple(g.keys[r]) for r in expected}
        assert out.num_points >= g.num_points // 2

    def test_rows_remapped(self):
        g = self.grid()
        out = crop(g, 100, seed=3)
        assert out.point_map.max() == len(out) - 1
        np.testing.assert_array_equal(g.keys[out.parent_rows], out.keys)


class TestMask:
    def test_mask_count_rounds_up(self):
        assert mask_count(0.4, 10) == 4
        assert mask_count(0.4, 3) == 2
        assert mask_count(0.7, 10) == 7
        assert mask_count(0.0, 5) == 0 and mask_count(1.0, 5) == 5

    def test_ratio_zero_and_one(self):
        h = hierarchy_of(random_cloud(np.random.default_rng(3)))
        assert make_mask(h, 0.0, seed=0).empty
        full = make_mask(h, 1.0, seed=0)
        assert all(m.all() for m in full.masked)

    def test_ten_patches_at_ratio_point_four(self):
        keys = np.array([[8 * i, 0, 0] for i in range(10)])
        fine = np.concatenate([keys * 8 + d for d in ([0, 0, 0], [1, 2, 3], [5, 5, 5])])
        g = voxelize(fine + 0.5, np.zeros((len(fine), 1)), np.zeros(len(fine)), 1.0)
        h = build_hierarchy(g, 4)
        assert len(h.levels[3]) == 10
        m = make_mask(h, 0.4, seed=11)
        assert m.masked[3].sum() == 4
        walk = mask_by_ancestor_walk([lv.keys for lv in h.levels], m.patches)
        for lv in range(4):
            assert {tuple(k) for k in h.levels[lv].keys[m.masked[lv]].tolist()} == walk[lv]

    @settings(max_examples=60)
    @given(seed=st.integers(0, 10**6), ratio=st.sampled_from([0.2, 0.3, 0.4, 0.5, 0.6, 0.7]))
    def test_consistency_property(self, seed, ratio):
        h = hierarchy_of(random_cloud(np.random.default_rng(seed), 200), size=0.08)
        m = make_mask(h, ratio, seed)
        k = len(h.levels[-1])
        assert m.masked[-1].sum() == math.ceil(ratio * k - 1e-9)
        walk = mask_by_ancestor_walk([lv.keys for lv in h.levels], m.patches)
        for lv in range(h.num_levels):
            assert {tuple(x) for x in h.levels[lv].keys[m.masked[lv]].tolist()} == walk[lv]
            rows = np.concatenate([m.masked_rows(lv), m.unmasked_rows(lv)])
            assert sorted(rows.tolist()) == list(range(len(h.levels[lv])))

    def test_bad_ratio(self):
        with pytest.raises(ContractError):
            make_mask(hierarchy_of(random_cloud(np.random.default_rng(0))), 1.5, 0)


class TestCorrespondence:
    def test_identical_views_pair_identically(self):
        h = hierarchy_of(random_cloud(np.random.default_rng(4)))
        for a, b in correspondence(h, h):
            np.testing.assert_array_equal(a, b)
            assert len(a) > 0

    def test_deleted_voxel_is_unmatched(self):
        c = random_cloud(np.random.default_rng(5))
        g = voxelize(c.positions, c.colors, c.labels, 0.1)
        drop = g.source_points(7)
        keep = np.setdiff1d(np.arange(len(c)), drop)
        g2 = voxelize(c.positions[keep], c.colors[keep], c.labels[keep], 0.1, point_ids=keep)
        a, b = correspondence(build_hierarchy(g, 2), build_hierarchy(g2, 2))[0]
        assert 7 not in a.tolist()
        np.testing.assert_array_equal(g.keys[a], g2.keys[b])
        assert len(a) == len(g) - 1

    @pytest.mark.parametrize("seed", range(4))
    def test_rotated_views_match_exhaustive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        c = random_cloud(rng, 400)
        v1 = augment(c, AugmentationParams(rotation=float(rng.uniform(0, 6.28))), 0)
        v2 = augment(c, AugmentationParams(rotation=float(rng.uniform(0, 6.28)), scale=1.05), 0)
        h1, h2 = hierarchy_of(v1, 0.15, 3), hierarchy_of(v2, 0.15, 3)
        for lv, (a, b) in enumerate(correspondence(h1, h2)):
            expected = plurality_matching(voxel_point_sets(h1.levels[lv]), voxel_point_sets(h2.levels[lv]))
            assert set(zip(a.tolist(), b.tolist())) == expected

    def test_symmetric_and_injective(self):
        rng = np.random.default_rng(9)
        c = random_cloud(rng, 400)
        h1 = hierarchy_of(augment(c, AugmentationParams(rotation=1.0), 0), 0.15, 3)
        h2 = hierarchy_of(augment(c, AugmentationParams(rotation=2.0), 0), 0.15, 3)
        for (a, b), (b2, a2) in zip(correspondence(h1, h2), correspondence(h2, h1)):
            assert set(zip(a.tolist(), b.tolist())) == set(zip(a2.tolist(), b2.tolist()))
            assert len(set(a.tolist())) == len(a) and len(set(b.tolist())) == len(b)


class TestViewPair:
    def test_identity_views_share_keys(self):
        cloud = generate_scene(SceneSpec(seed=1))
        aug = AugConfig(rotation=0.0, scale_min=1.0, scale_max=1.0, flip_p=0.0, jitter_sigma=0.0, color_sigma=0.0)
        cfg = ViewConfig(aug=aug, crop_max_points=len(cloud), mask_ratio=0.0)
        pair = build_view_pair(cloud, cfg, seed=0)
        np.testing.assert_array_equal(pair.teachers[0].levels[0].keys, pair.teachers[1].levels[0].keys)
        assert all(s.mask.empty for s in pair.students)

    def test_same_seed_same_pair(self):
        cloud = generate_scene(SceneSpec(seed=2))
        a, b = build_view_pair(cloud, ViewConfig(), 3), build_view_pair(cloud, ViewConfig(), 3)
        for v in range(2):
            for lv in range(4):
                np.testing.assert_array_equal(a.students[v].hierarchy.levels[lv].keys,
                                              b.students[v].hierarchy.levels[lv].keys)
                np.testing.assert_array_equal(a.students[v].mask.masked[lv], b.students[v].mask.masked[lv])
            np.testing.assert_array_equal(a.correspondence[0][0], b.correspondence[0][0])

    def test_pairs_share_source_points(self):
        cloud = generate_scene(SceneSpec(seed=4))
        pair = build_view_pair(cloud, ViewConfig(), 0)
        for lv, (a, b) in enumerate(pair.correspondence):
            s1 = voxel_point_sets(pair.teachers[0].levels[lv])
            s2 = voxel_point_sets(pair.teachers[1].levels[lv])
            assert all(s1[i] & s2[j] for i, j in zip(a.tolist(), b.tolist()))

    def test_student_rows_locate_teacher_voxels(self):
        pair = build_view_pair(generate_scene(SceneSpec(seed=5)), ViewConfig(), 1)
        for sv, th in zip(pair.students, pair.teachers):
            for lv in range(4):
                rows = sv.full_rows[lv]
                assert (rows >= 0).all()
                np.testing.assert_array_equal(th.levels[lv].keys[rows], sv.hierarchy.levels[lv].keys)

    def test_tiny_crop_is_degenerate(self):
        with pytest.raises(DegenerateViewError):
            build_view_pair(generate_scene(SceneSpec(seed=6)), ViewConfig(crop_max_points=1), 0)
