import numpy as np
import pytest

from graphsurf.field import (
    EmptyLevelSet,
    Field,
    FieldConfig,
    NoIntersection,
    PsnrTracker,
    dir_feature_count,
    dir_features,
    extract_mesh,
    ray_cube_intersect,
    read_ply,
    render_batch,
    render_ray,
    sdf_query,
    stratified_depths,
    write_ply,
)


def sphere_field(res=16, radius=0.5, octaves=1):
    return Field.create(FieldConfig(res=res, dir_octaves=octaves, init_radius=radius))


def random_field(rng, res=10, octaves=1):
    f = sphere_field(res=res, octaves=octaves)
    f.sdf += 0.05 * rng.normal(size=f.sdf.shape)
    f.color_view[..., :3] = rng.uniform(0.25, 0.75, size=f.color_view[..., :3].shape)
    f.color_view[..., 3:] = 0.03 * rng.normal(size=f.color_view[..., 3:].shape)
    f.color_flat[:] = rng.uniform(0.25, 0.75, size=f.color_flat.shape)
    return f


class TestSdfQuery:
    def test_exact_on_grid_nodes(self):
        f = sphere_field(res=9)
        axis = np.linspace(-1, 1, 9)
        nodes = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
        vals, _ = sdf_query(f, nodes)
        np.testing.assert_allclose(vals, np.linalg.norm(nodes, axis=1) - 0.5, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        f = random_field(rng)
        h_cell = f.cell_size
        pts = rng.uniform(-0.9, 0.9, size=(100, 3))
        frac = ((pts + 1) / h_cell) % 1.0
        pts = np.where((frac < 0.1) | (frac > 0.9), pts + 0.15 * h_cell, pts)
        _, grads = sdf_query(f, pts)
        h = 1e-5
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = h
            fd = (sdf_query(f, pts + e)[0] - sdf_query(f, pts - e)[0]) / (2 * h)
            err = np.abs(grads[:, axis] - fd) / np.maximum(np.abs(fd), 1e-3)
            assert err.max() < 1e-6

    def test_cube_corner_query_safe(self):
        f = sphere_field(res=8)
        vals, _ = sdf_query(f, np.array([[1.0, 1.0, 1.0]]))
        assert np.isfinite(vals[0])
        assert vals[0] == pytest.approx(np.sqrt(3) - 0.5, abs=1e-12)


class TestRender:
    def test_empty_space_renders_nothing(self):
        f = sphere_field(res=8)
        f.sdf[:] = 1.0
        color, weights, _ = render_ray(
            f, np.array([0.0, 0, -2]), np.array([0.0, 0, 1]), 16, use_view_dir=True
        )
        np.testing.assert_allclose(color, 0.0, atol=1e-12)
        np.testing.assert_allclose(weights, 0.0, atol=1e-12)

    def test_max_weight_depth_near_sphere_hit(self):
        f = sphere_field(res=48, radius=0.5)
        f.sharpness = 200.0
        origin = np.array([0.0, 0.0, -1.8])
        direction = np.array([0.0, 0.0, 1.0])
        k = 128
        color, weights, depths = render_ray(f, origin, direction, k, use_view_dir=False)
        t_hit = 1.8 - 0.5  # analytic ray-sphere intersection
        spacing = (depths[-1] - depths[0]) / (k - 1)
        best = depths[np.argmax(weights)]
        assert abs(best - t_hit) <= spacing + 1e-9

    def test_view_dir_toggle_equal_with_zero_coefficients(self):
        rng = np.random.default_rng(1)
        f = random_field(rng)
        f.color_view[..., 3:] = 0.0
        f.color_flat[:] = f.color_view[..., :3]
        origin = np.array([0.0, 0.3, -1.7])
        direction = np.array([0.05, -0.1, 1.0])
        direction = direction / np.linalg.norm(direction)
        c_on, w_on, d_on = render_ray(f, origin, direction, 32, use_view_dir=True)
        c_off, w_off, d_off = render_ray(f, origin, direction, 32, use_view_dir=False)
        np.testing.assert_array_equal(d_on, d_off)
        np.testing.assert_array_equal(w_on, w_off)
        np.testing.assert_allclose(c_on, c_off, atol=1e-15)

    def test_miss_raises(self):
        f = sphere_field(res=8)
        with pytest.raises(NoIntersection):
            render_ray(f, np.array([3.0, 0, 0]), np.array([0.0, 0, 1]), 16, True)

    def test_k_minimum_enforced(self):
        f = sphere_field(res=8)
        with pytest.raises(ValueError):
            render_ray(f, np.array([0.0, 0, -2]), np.array([0.0, 0, 1]), 4, True)

    def test_weight_sum_bounded(self):
        rng = np.random.default_rng(2)
        f = random_field(rng)
        n = 200
        origins = np.tile([0.0, 0.0, -1.8], (n, 1))
        dirs = rng.normal(size=(n, 3)) * np.array([0.3, 0.3, 0.05]) + [0, 0, 1]
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        tn, tf, hit = ray_cube_intersect(origins, dirs)
        t = stratified_depths(tn[hit], tf[hit], 24, rng)
        out = render_batch(f, origins[hit], dirs[hit], t)
        sums = out["weights"].sum(axis=1)
        assert np.all(sums >= 0.0)
        assert np.all(sums <= 1.0 + 1e-9)
        assert np.all(out["weights"] >= 0.0)

    def test_heads_share_depths_and_weights(self):
        rng = np.random.default_rng(3)
        f = random_field(rng)
        out = render_batch(
            f,
            np.array([[0.0, 0.0, -1.8]]),
            np.array([[0.0, 0.0, 1.0]]),
            stratified_depths([0.8], [2.8], 16, rng),
        )
        # one forward pass computes both heads from the same weights array
        assert out["rendered_view"].shape == out["rendered_flat"].shape
        assert np.all(out["col_view"] >= 0) and np.all(out["col_view"] <= 1)
        assert np.all(out["col_flat"] >= 0) and np.all(out["col_flat"] <= 1)


class TestRayCube:
    def test_inside_origin(self):
        tn, tf, hit = ray_cube_intersect(np.zeros((1, 3)), np.array([[0.0, 0, 1]]))
        assert hit[0] and tn[0] == 0.0 and tf[0] == pytest.approx(1.0)

    def test_outside_miss(self):
        _, _, hit = ray_cube_intersect(np.array([[0.0, 0, -3]]), np.array([[1.0, 0, 0]]))
        assert not hit[0]

    def test_axis_parallel_inside_slab(self):
        tn, tf, hit = ray_cube_intersect(
            np.array([[0.5, 0.5, -2.0]]), np.array([[0.0, 0.0, 1.0]])
        )
        assert hit[0]
        assert tn[0] == pytest.approx(1.0)
        assert tf[0] == pytest.approx(3.0)


class TestPsnrTracker:
    def test_constant_stream_converges(self):
        tr = PsnrTracker(decay=0.95)
        target = 2.5e-3
        for _ in range(200):
            tr.update(0, np.full(8, target), "view")
        assert abs(tr.mse(0, "view") - target) < 1e-6

    def test_psnr_definition(self):
        tr = PsnrTracker()
        tr.update(1, np.array([1e-3]), "flat")
        assert tr.psnr(1, "flat") == pytest.approx(30.0, abs=1e-12)

    def test_first_update_sets_batch_mean(self):
        tr = PsnrTracker(decay=0.95)
        tr.update(2, np.array([0.1, 0.3]), "view")
        assert tr.mse(2, "view") == pytest.approx(0.2, abs=1e-15)

    def test_state_round_trip(self):
        tr = PsnrTracker()
        tr.update(0, np.array([0.01]), "view")
        tr.update(3, np.array([0.02]), "flat")
        tr2 = PsnrTracker()
        tr2.load_state(tr.state())
        assert tr2.mse(0, "view") == tr.mse(0, "view")
        assert tr2.mse(3, "flat") == tr.mse(3, "flat")


class TestMesh:
    def test_sphere_vertices_near_surface(self):
        f = sphere_field(res=48, radius=0.5)
        res = 128
        verts, faces = extract_mesh(f, res)
        h = 2.0 / (res - 1)
        radii = np.linalg.norm(verts, axis=1)
        assert radii.min() >= 0.5 - 2 * h
        assert radii.max() <= 0.5 + 2 * h
        assert len(faces) > 0

    def test_empty_level_set(self):
        f = sphere_field(res=8)
        f.sdf[:] = 1.0
        with pytest.raises(EmptyLevelSet):
            extract_mesh(f, 32)

    def test_sphere_mesh_watertight(self):
        f = sphere_field(res=32, radius=0.5)
        _, faces = extract_mesh(f, 64)
        edges = {}
        for tri in faces:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                edges[key] = edges.get(key, 0) + 1
        counts = np.array(list(edges.values()))
        assert np.all(counts == 2)

    def test_ply_round_trip(self, tmp_path):
        f = sphere_field(res=16, radius=0.5)
        verts, faces = extract_mesh(f, 24)
        path = tmp_path / "m.ply"
        write_ply(path, verts, faces)
        v2, f2 = read_ply(path)
        assert v2.shape == verts.shape
        np.testing.assert_allclose(v2, verts, atol=1e-6)
        np.testing.assert_array_equal(f2, faces)


def test_dir_features_shape_and_jacobian():
    from graphsurf.field import dir_features_jacobian

    rng = np.random.default_rng(4)
    d = rng.normal(size=(5, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    for octaves in (0, 1, 3):
        feats = dir_features(d, octaves)
        assert feats.shape == (5, dir_feature_count(octaves))
        jac = dir_features_jacobian(d, octaves)
        h = 1e-6
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = h
            fd = (dir_features(d + e, octaves) - dir_features(d - e, octaves)) / (2 * h)
            np.testing.assert_allclose(jac[:, :, axis], fd, atol=1e-7)
