import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pointacl.geometry import (
    PointCloud, Perturbation, farthest_point_sample, knn_group, pairwise_distances,
    patchify, perturb, synth_shape,
)


def brute_knn(points, center, k):
    d = [(float(np.sum((p - points[center]) ** 2)), i) for i, p in enumerate(points)]
    return [i for _, i in sorted(d)[:k]]


def min_pairwise(points):
    d = pairwise_distances(points)
    return d[np.triu_indices(len(points), 1)].min()


class TestPointCloud:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            PointCloud([[0, 0, np.nan]])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((0, 3)))

    def test_rejects_bad_shape(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((4, 2)))


class TestFPS:
    def test_single_center_is_seeded_first_index(self):
        cloud = PointCloud(np.random.default_rng(0).normal(size=(20, 3)))
        expected = int(np.random.default_rng(5).integers(20))
        assert farthest_point_sample(cloud, 1, seed=5).tolist() == [expected]

    def test_hand_traced(self):
        cloud = PointCloud([(0, 0, 0), (1, 1, 0), (0.1, 0, 0), (0.5, 0.5, 0)])
        assert farthest_point_sample(cloud, 2, first_index=0).tolist() == [0, 1]

    def test_exhaustion(self):
        cloud = PointCloud(np.random.default_rng(1).normal(size=(9, 3)))
        idx = farthest_point_sample(cloud, 9, seed=2)
        assert sorted(idx.tolist()) == list(range(9))

    def test_tie_goes_to_lowest_index(self):
        cloud = PointCloud([(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0)])
        assert farthest_point_sample(cloud, 2, first_index=0).tolist() == [0, 1]

    @pytest.mark.parametrize("n", [0, 5])
    def test_out_of_range(self, n):
        with pytest.raises(ValueError):
            farthest_point_sample(PointCloud(np.zeros((4, 3)) + np.arange(4)[:, None]), n)

    def test_greedy_max_min_rule(self):
        pts = np.random.default_rng(3).uniform(size=(60, 3))
        idx = farthest_point_sample(PointCloud(pts), 10, seed=4)
        for i in range(1, 10):
            chosen = pts[idx[:i]]
            dmin = np.min(np.linalg.norm(pts[:, None] - chosen[None], axis=-1), axis=1)
            assert dmin[idx[i]] == pytest.approx(dmin.max(), abs=0)

    def test_spread_beats_random_subsets(self):
        wins = 0
        for trial in range(100):
            rng = np.random.default_rng(1000 + trial)
            pts = rng.uniform(-1, 1, size=(512, 3))
            fps = pts[farthest_point_sample(PointCloud(pts), 32, seed=trial)]
            rand = pts[rng.choice(512, 32, replace=False)]
            wins += min_pairwise(fps) >= min_pairwise(rand)
        assert wins >= 95


class TestKNN:
    def test_k1_is_self(self):
        cloud = PointCloud(np.random.default_rng(0).normal(size=(10, 3)))
        patches = knn_group(cloud, [2, 5, 7], 1)
        assert patches.neighbor_indices[:, 0].tolist() == [2, 5, 7]

    def test_five_point_cloud_matches_sort(self):
        pts = np.random.default_rng(7).normal(size=(5, 3))
        patches = knn_group(PointCloud(pts), [0, 3], 3)
        assert patches.neighbor_indices.tolist() == [brute_knn(pts, 0, 3), brute_knn(pts, 3, 3)]

    def test_exhaustion(self):
        pts = np.random.default_rng(8).normal(size=(6, 3))
        patches = knn_group(PointCloud(pts), [1, 4], 6)
        for row in patches.neighbor_indices:
            assert sorted(row.tolist()) == list(range(6))

    def test_tie_rule(self):
        pts = np.array([(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (5, 5, 5)], dtype=float)
        patches = knn_group(PointCloud(pts), [0], 3)
        assert patches.neighbor_indices.tolist() == [[0, 1, 2]]

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            knn_group(PointCloud(np.zeros((3, 3))), [0], 4)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 64), st.integers(0, 10_000), st.data())
    def test_matches_brute_force(self, n, seed, data):
        rng = np.random.default_rng(seed)
        # coarse grid coordinates produce many exact distance ties
        pts = rng.integers(-2, 3, size=(n, 3)).astype(float)
        k = data.draw(st.integers(1, n))
        centers = rng.choice(n, size=min(n, 4), replace=False)
        patches = knn_group(PointCloud(pts), centers, k)
        for c, row in zip(centers, patches.neighbor_indices):
            assert row.tolist() == brute_knn(pts, c, k)

    def test_local_coords_exact(self):
        pts = np.random.default_rng(9).normal(size=(40, 3))
        ps = patchify(PointCloud(pts), 8, 5, seed=1)
        assert len(set(ps.center_indices.tolist())) == 8
        for p in range(8):
            for j in range(5):
                expected = pts[ps.neighbor_indices[p, j]] - pts[ps.center_indices[p]]
                assert np.array_equal(ps.local_coords[p, j], expected)


class TestPerturb:
    cloud = PointCloud(np.random.default_rng(11).normal(size=(1000, 3)), label="x")

    def test_zero_noise_identity(self):
        out = perturb(self.cloud, Perturbation.gaussian_noise(0.0, seed=3))
        assert np.array_equal(out.points, self.cloud.points)

    def test_noise_statistics(self):
        out = perturb(self.cloud, Perturbation.gaussian_noise(0.05, seed=3))
        delta = out.points - self.cloud.points
        # 3000 draws: sample std within ~3 standard errors of sigma
        assert abs(delta.std() - 0.05) < 3 * 0.05 / math.sqrt(2 * 3000)
        assert abs(delta.mean()) < 3 * 0.05 / math.sqrt(3000)

    def test_rotation_z_90(self):
        out = perturb(PointCloud([(1.0, 0.0, 0.0)]), Perturbation.rotation("z", 90, 90))
        np.testing.assert_allclose(out.points[0], [0, 1, 0], atol=1e-12)

    def test_drop_points(self):
        out = perturb(self.cloud, Perturbation.drop_points(0.2, seed=4))
        assert len(out) == 800
        original = {tuple(p) for p in self.cloud.points}
        assert all(tuple(p) in original for p in out.points)
        assert out.label == "x"

    @pytest.mark.parametrize("axis", ["x", "y", "z"])
    def test_rotation_preserves_distances(self, axis):
        pts = self.cloud.points[:50]
        out = perturb(PointCloud(pts), Perturbation.rotation(axis, seed=5))
        np.testing.assert_allclose(pairwise_distances(out.points), pairwise_distances(pts), atol=1e-9)

    def test_scaling_scales_distances(self):
        pts = self.cloud.points[:50]
        p = Perturbation.scaling(seed=6)
        s = np.random.default_rng(6).uniform(0.5, 1.5)
        out = perturb(PointCloud(pts), p)
        np.testing.assert_allclose(pairwise_distances(out.points), s * pairwise_distances(pts), atol=1e-9)

    @pytest.mark.parametrize("p", [
        Perturbation.gaussian_noise(0.02, seed=1), Perturbation.rotation("x", seed=2),
        Perturbation.scaling(seed=3), Perturbation.drop_points(0.6, seed=4),
    ])
    def test_pure(self, p):
        a, b = perturb(self.cloud, p), perturb(self.cloud, p)
        assert a.points.tobytes() == b.points.tobytes()

    @pytest.mark.parametrize("kwargs", [
        dict(kind="gaussian_noise", sigma=-1.0), dict(kind="drop_points", ratio=1.0),
        dict(kind="scaling", scale_range=(0.0, 1.0)), dict(kind="warp"),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            Perturbation(**kwargs)


class TestSynthShape:
    def test_sphere_on_unit_sphere(self):
        pts = synth_shape("sphere", 500, seed=1).points
        np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("kind", ["sphere", "cube", "torus"])
    def test_deterministic_and_inscribed(self, kind):
        a, b = synth_shape(kind, 300, seed=9), synth_shape(kind, 300, seed=9)
        assert a.points.tobytes() == b.points.tobytes()
        assert a.label == kind
        assert np.all(np.linalg.norm(a.points, axis=1) <= 1.0 + 1e-12)

    def test_cube_face_counts_uniform(self):
        pts = synth_shape("cube", 10_000, seed=2).points
        half = 1 / math.sqrt(3)
        on_face = np.isclose(np.abs(pts), half, atol=1e-12)
        assert np.all(on_face.sum(axis=1) >= 1)
        axis = np.argmax(on_face, axis=1)
        face = 2 * axis + (pts[np.arange(len(pts)), axis] < 0)
        counts = np.bincount(face, minlength=6)
        n, p = 10_000, 1 / 6
        sigma = math.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= 3 * sigma)

    def test_torus_surface(self):
        pts = synth_shape("torus", 2000, seed=3).points
        ring = np.sqrt(pts[:, 0] ** 2 + pts[:, 1] ** 2)
        np.testing.assert_allclose((ring - 0.7) ** 2 + pts[:, 2] ** 2, 0.09, atol=1e-12)
        # uniform area density: outer half (x.n > 0) carries more mass than the inner half
        outer = np.mean(ring > 0.7)
        expected = 0.5 + 0.3 / (0.7 * math.pi)
        assert abs(outer - expected) < 3 * math.sqrt(expected * (1 - expected) / 2000)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            synth_shape("cone", 10)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(3, 30), st.just(3)), elements=st.floats(-5, 5)))
def test_patchify_invariants(pts):
    n = len(pts)
    ps = patchify(PointCloud(pts), min(4, n), min(3, n), seed=0)
    assert len(set(ps.center_indices.tolist())) == len(ps.center_indices)
    assert np.all((ps.neighbor_indices >= 0) & (ps.neighbor_indices < n))
    assert np.array_equal(ps.local_coords, pts[ps.neighbor_indices] - pts[ps.center_indices][:, None])
