import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from salreg.errors import DegenerateInputError, ParameterError
from salreg.geom import (
    RigidTransform,
    apply_transform,
    assign_to_nodes,
    build_hierarchy,
    compose,
    grid_subsample,
    invert,
    knn,
    random_rotation,
    rotation_about_axis,
)


def random_transform(seed):
    rng = np.random.default_rng(seed)
    return RigidTransform(random_rotation(rng), rng.uniform(-1, 1, 3))


def brute_grid(points, voxel):
    groups = {}
    for p in points:
        key = tuple(np.floor(p / voxel).astype(int))
        groups.setdefault(key, []).append(p)
    keys = sorted(groups, key=lambda k: (k[2], k[1], k[0]))
    return np.array([np.mean(groups[k], axis=0) for k in keys])


class TestRigidTransform:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ParameterError):
            RigidTransform(np.diag([1.0, 1.0, 2.0]), np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(ParameterError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_dict_round_trip(self):
        t = random_transform(1)
        back = RigidTransform.from_dict(t.to_dict())
        assert np.array_equal(back.rotation, t.rotation)
        assert np.array_equal(back.translation, t.translation)
        assert len(t.to_dict()["rotation"]) == 9

    def test_matrix_round_trip(self):
        t = random_transform(2)
        back = RigidTransform.from_matrix(t.as_matrix())
        assert np.allclose(back.rotation, t.rotation)

    def test_random_rotation_is_valid(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            r = random_rotation(rng)
            assert np.abs(r.T @ r - np.eye(3)).max() < 1e-12
            assert abs(np.linalg.det(r) - 1) < 1e-12


class TestApplyCompose:
    def test_identity_leaves_points(self):
        pts = np.random.default_rng(0).random((10, 3))
        assert np.array_equal(apply_transform(RigidTransform.identity(), pts), pts)

    def test_quarter_turn_about_z(self):
        t = RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2), np.zeros(3))
        assert np.allclose(apply_transform(t, [1.0, 0.0, 0.0]), [[0, 1, 0]], atol=1e-12)

    def test_compose_matches_sequential(self):
        pts = np.random.default_rng(3).random((50, 3))
        t1, t2 = random_transform(10), random_transform(11)
        once = apply_transform(compose(t2, t1), pts)
        twice = apply_transform(t2, apply_transform(t1, pts))
        assert np.abs(once - twice).max() < 1e-12

    def test_invert_identity(self):
        inv = invert(RigidTransform.identity())
        assert np.array_equal(inv.rotation, np.eye(3))
        assert np.allclose(inv.translation, 0)

    def test_invert_quarter_turn(self):
        t = RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2), np.array([1.0, 0, 0]))
        c = compose(invert(t), t)
        assert np.abs(c.rotation - np.eye(3)).max() < 1e-12
        assert np.abs(c.translation).max() < 1e-12

    def test_round_trip_seed_5(self):
        t = random_transform(5)
        c = compose(invert(t), t)
        assert np.abs(c.rotation - np.eye(3)).max() < 1e-9
        assert np.abs(c.translation).max() < 1e-9

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_rigidity_preserves_distances(self, seed):
        pts = np.random.default_rng(seed).normal(size=(20, 3))
        moved = apply_transform(random_transform(seed), pts)
        d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        d1 = np.linalg.norm(moved[:, None] - moved[None], axis=-1)
        assert np.abs(d0 - d1).max() < 1e-9


class TestGridSubsample:
    def test_cube_corners_single_voxel(self):
        corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
        out = grid_subsample(corners, 2.0)
        assert out.shape == (1, 3)
        assert np.allclose(out, 0.5)

    def test_single_point(self):
        p = np.array([[0.3, -2.0, 5.5]])
        assert np.array_equal(grid_subsample(p, 0.7), p)

    def test_matches_hash_map_grouping(self):
        pts = np.random.default_rng(7).random((1000, 3))
        out = grid_subsample(pts, 0.25)
        ref = brute_grid(pts, 0.25)
        assert out.shape == ref.shape
        assert np.abs(out - ref).max() < 1e-12

    def test_rejects_bad_voxel(self):
        with pytest.raises(ParameterError):
            grid_subsample(np.zeros((2, 3)), 0.0)

    def test_rejects_empty(self):
        with pytest.raises(DegenerateInputError):
            grid_subsample(np.zeros((0, 3)), 0.1)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.05, 1.0))
    def test_output_near_input(self, seed, voxel):
        pts = np.random.default_rng(seed).random((200, 3)) * 2
        out = grid_subsample(pts, voxel)
        assert len(out) <= len(pts)
        d = np.linalg.norm(out[:, None] - pts[None], axis=-1).min(1)
        assert d.max() <= voxel * np.sqrt(3) / 2 + 1e-12


class TestKnn:
    def test_collinear_self_nearest(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
        assert knn(pts, pts, 1)[:, 0].tolist() == [0, 1, 2]

    def test_tie_goes_to_lower_index(self):
        base = np.array([[5.0, 5, 5]] * 8)
        base[2] = [1, 0, 0]
        base[5] = [-1, 0, 0]
        assert knn(np.zeros((1, 3)), base, 1)[0, 0] == 2

    def test_matches_brute_force(self):
        pts = np.random.default_rng(11).random((200, 3))
        idx, dist = knn(pts, pts, 5, return_distances=True)
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        for i in range(len(pts)):
            ref = sorted(range(len(pts)), key=lambda j: (d[i, j], j))[:5]
            assert idx[i].tolist() == ref
        assert np.all(np.diff(dist, axis=1) >= 0)

    @pytest.mark.parametrize("n_base", [300, 2000])
    def test_tree_path_equals_exhaustive_with_ties(self, n_base, monkeypatch):
        import salreg.geom as g

        rng = np.random.default_rng(n_base)
        base = np.round(rng.random((n_base, 3)) * 8) / 8  # many exact ties
        query = np.round(rng.random((400, 3)) * 8) / 8
        fast = knn(query, base, 7, return_distances=True)
        monkeypatch.setattr(g, "_TREE_MIN", 10 ** 9)
        slow = knn(query, base, 7, return_distances=True)
        assert np.array_equal(fast[0], slow[0])
        assert np.array_equal(fast[1], slow[1])

    def test_k_too_large(self):
        with pytest.raises(ParameterError):
            knn(np.zeros((1, 3)), np.zeros((2, 3)), 3)


class TestHierarchy:
    def test_counts_decrease(self):
        pts = np.random.default_rng(7).random((1000, 3))
        h = build_hierarchy(pts, 0.1, 3)
        counts = [len(level) for level in h.levels]
        assert len(counts) == 3 and counts[0] == 1000
        assert counts[0] > counts[1] > counts[2]

    def test_single_point(self):
        h = build_hierarchy(np.array([[1.0, 2, 3]]), 0.1, 3)
        assert all(len(level) == 1 for level in h.levels)
        assert [g.tolist() for g in h.groups] == [[0]]

    def test_groups_match_nearest_superpoint(self):
        pts = np.random.default_rng(7).random((1000, 3))
        h = build_hierarchy(pts, 0.1, 3)
        d = np.linalg.norm(h.dense[:, None] - h.superpoints[None], axis=-1)
        ref = np.array([min(range(d.shape[1]), key=lambda j: (d[i, j], j)) for i in range(len(d))])
        assert np.array_equal(h.assignments, ref)
        flat = np.sort(np.concatenate(h.groups))
        assert np.array_equal(flat, np.arange(len(h.dense)))
        for j, g in enumerate(h.groups):
            assert np.all(h.assignments[g] == j)

    def test_levels_must_be_at_least_two(self):
        with pytest.raises(ParameterError):
            build_hierarchy(np.zeros((3, 3)), 0.1, 1)

    def test_assign_to_nodes_returns_sorted_groups(self):
        dense = np.random.default_rng(1).random((50, 3))
        nodes = dense[:5]
        assign, groups = assign_to_nodes(dense, nodes)
        assert all(np.all(np.diff(g) > 0) for g in groups if len(g) > 1)
        assert sum(len(g) for g in groups) == 50
        assert np.array_equal(assign[:5], np.arange(5))
