"""Depth fusion, isosurface extraction, and mesh metrics.

Grid-level behavior is pinned by analytic oracles: a fronto-parallel
plane with a known zero crossing, a sphere signed-distance field with
known vertex radii, and an O(n^2) nearest-neighbor scan for chamfer.
"""

import numpy as np
import pytest

from surfelfield import fusion
from surfelfield.renderer import Camera


def front_camera(px=64, eye=(0.0, 0.0, 0.0)):
    return Camera(fx=float(px), fy=float(px), cx=px / 2.0, cy=px / 2.0,
                  width=px, height=px, rotation=np.eye(3),
                  translation=np.asarray(eye, dtype=np.float64))


def plane_depth(cam, plane_z):
    """Ray length from the camera to the plane z = plane_z, per pixel."""
    rows, cols = np.meshgrid(np.arange(cam.height), np.arange(cam.width),
                             indexing="ij")
    dirs = cam.pixel_directions(rows, cols)
    t = (plane_z - cam.translation[2]) / dirs[..., 2]
    return t, t > 0


def sphere_depth(cam, center, radius):
    rows, cols = np.meshgrid(np.arange(cam.height), np.arange(cam.width),
                             indexing="ij")
    d = cam.pixel_directions(rows, cols)
    oc = cam.translation - center
    b = np.einsum("hwc,c->hw", d, oc)
    disc = b * b - (oc @ oc - radius * radius)
    valid = disc > 0
    t = -b - np.sqrt(np.where(valid, disc, 0.0))
    valid &= t > 0
    return np.where(valid, t, 0.0), valid


def ring_views(center, radius, n_az=8, px=64, dist=2.5):
    views = []
    for elev in (-25 * np.pi / 180, 0.0, 25 * np.pi / 180):
        for k in range(n_az):
            ang = 2 * np.pi * k / n_az + (0.2 if elev else 0.0)
            eye = center + dist * np.array([np.cos(ang) * np.cos(elev),
                                            np.sin(ang) * np.cos(elev),
                                            np.sin(elev)])
            cam = Camera.look_at(eye=eye, target=center, fx=px, fy=px,
                                 width=px, height=px)
            depth, valid = sphere_depth(cam, center, radius)
            views.append((cam, depth, valid))
    return views


def signed_volume(verts, faces):
    tri = verts[faces]
    return np.einsum("ij,ij->", np.cross(tri[:, 0], tri[:, 1]),
                     tri[:, 2]) / 6.0


def sphere_sdf_grid(radius=0.8, res=48, extent=1.2):
    grid = fusion.make_grid([-extent] * 3, [extent] * 3, resolution=res)
    centers = grid.voxel_centers().reshape(res, res, res, 3)
    grid.tsdf = np.clip((np.linalg.norm(centers, axis=-1) - radius)
                        / grid.truncation, -1.0, 1.0)
    grid.weight[:] = 1.0
    return grid


class TestGrid:
    def test_geometry(self):
        g = fusion.make_grid([0.0, 0.0, 0.0], [1.0, 2.0, 1.0],
                             resolution=(10, 20, 10))
        assert g.resolution == (10, 20, 10)
        assert g.voxel_size == pytest.approx(0.1)
        centers = g.voxel_centers()
        assert centers.shape == (10 * 20 * 10, 3)
        np.testing.assert_allclose(centers[0], [0.05, 0.05, 0.05])
        assert np.all(g.tsdf == 1.0) and np.all(g.weight == 0.0)

    def test_default_truncation_is_four_voxels(self):
        g = fusion.make_grid([0, 0, 0], [1, 1, 1], resolution=16)
        assert g.truncation == pytest.approx(4.0 * g.voxel_size)

    def test_rejects_bad_bounds(self):
        with pytest.raises(ValueError):
            fusion.make_grid([0, 0, 0], [0, 1, 1])
        with pytest.raises(ValueError):
            fusion.make_grid([0, 0, 0], [1, 1, 1], resolution=1)


class TestIntegrate:
    def test_invalid_map_leaves_grid_unchanged(self):
        g = fusion.make_grid([-0.5, -0.5, 1.0], [0.5, 0.5, 2.0], 16)
        cam = front_camera()
        depth = np.full((64, 64), 1.5)
        fusion.integrate(g, depth, np.zeros((64, 64), bool), cam)
        assert np.all(g.weight == 0.0) and np.all(g.tsdf == 1.0)

    def test_plane_zero_crossing(self):
        # crossing recovered within half a voxel of the true plane
        g = fusion.make_grid([-0.4, -0.4, 1.6], [0.4, 0.4, 2.4], 32)
        for eye in ([0, 0, 0], [0.1, 0, 0.05], [-0.05, 0.1, -0.02]):
            cam = front_camera(eye=eye)
            depth, valid = plane_depth(cam, 2.0)
            fusion.integrate(g, depth, valid, cam)
        assert np.all(np.abs(g.tsdf) <= 1.0)
        zs = g.origin[2] + (np.arange(g.resolution[2]) + 0.5) * g.voxel_size
        crossings = []
        for i in range(g.resolution[0]):
            for j in range(g.resolution[1]):
                col, obs = g.tsdf[i, j], g.weight[i, j] > 0
                for k in range(len(zs) - 1):
                    if obs[k] and obs[k + 1] and col[k] > 0 >= col[k + 1]:
                        frac = col[k] / (col[k] - col[k + 1])
                        crossings.append(zs[k] + frac * g.voxel_size)
                        break
        crossings = np.asarray(crossings)
        assert len(crossings) > 500
        assert np.abs(crossings - 2.0).max() <= g.voxel_size / 2

    def test_double_integration_idempotent(self):
        g = fusion.make_grid([-0.4, -0.4, 1.6], [0.4, 0.4, 2.4], 24)
        cam = front_camera()
        depth, valid = plane_depth(cam, 2.0)
        fusion.integrate(g, depth, valid, cam)
        once = g.tsdf.copy()
        fusion.integrate(g, depth, valid, cam)
        assert np.array_equal(g.tsdf, once)
        assert g.weight.max() == 2.0

    def test_camera_behind_grid_warns_and_noops(self):
        g = fusion.make_grid([-0.4, -0.4, 1.6], [0.4, 0.4, 2.4], 16)
        cam = Camera.look_at(eye=[0, 0, 0], target=[0, 0, -1], up=[0, 1, 0],
                             width=32, height=32)
        depth = np.full((32, 32), 1.5)
        with pytest.warns(UserWarning, match="looks away"):
            fusion.integrate(g, depth, np.ones((32, 32), bool), cam)
        assert np.all(g.weight == 0.0)

    def test_rejects_tiny_truncation(self):
        g = fusion.make_grid([0, 0, 0], [1, 1, 1], 16)
        cam = front_camera()
        with pytest.raises(ValueError, match="truncation"):
            fusion.integrate(g, np.ones((64, 64)), np.ones((64, 64), bool),
                             cam, truncation=g.voxel_size / 2)

    def test_isolated_depth_pixel_is_distrusted(self):
        # a lone valid pixel borders invalid ones on every side, so the
        # discontinuity filter drops it
        g = fusion.make_grid([-0.5, -0.5, 1.0], [0.5, 0.5, 2.0], 16)
        cam = front_camera()
        depth = np.full((64, 64), 1.5)
        valid = np.zeros((64, 64), bool)
        valid[32, 32] = True
        fusion.integrate(g, depth, valid, cam)
        assert np.all(g.weight == 0.0)


class TestMarchingCubes:
    def test_sphere_vertex_radii(self):
        g = sphere_sdf_grid()
        verts, faces = fusion.marching_cubes(g)
        assert len(verts) > 1000
        r = np.linalg.norm(verts, axis=1)
        assert np.abs(r - 0.8).max() <= g.voxel_size

    def test_closed_surface_is_watertight(self):
        g = sphere_sdf_grid()
        verts, faces = fusion.marching_cubes(g)
        stats = fusion.mesh_stats(verts, faces)
        assert stats["watertight"]
        euler = stats["n_vertices"] - stats["n_edges"] + stats["n_faces"]
        assert euler == 2

    def test_single_sign_grid_empty_with_warning(self):
        g = fusion.make_grid([0, 0, 0], [1, 1, 1], 8)
        g.weight[:] = 1.0
        with pytest.warns(UserWarning):
            verts, faces = fusion.marching_cubes(g)
        assert verts.shape == (0, 3) and faces.shape == (0, 3)

    def test_sign_flip_reverses_orientation(self):
        g = sphere_sdf_grid()
        v1, f1 = fusion.marching_cubes(g)
        g.tsdf = -g.tsdf
        v2, f2 = fusion.marching_cubes(g)
        assert len(v1) == len(v2)
        np.testing.assert_allclose(np.sort(v1, axis=0), np.sort(v2, axis=0),
                                   atol=1e-12)
        vol1, vol2 = signed_volume(v1, f1), signed_volume(v2, f2)
        assert vol1 * vol2 < 0
        assert abs(abs(vol1) - abs(vol2)) < 1e-9

    def test_observation_boundary_emits_no_surface(self):
        # observed half-space all negative, unobserved half keeps +1:
        # the sign change at the observation boundary is not a surface
        g = fusion.make_grid([0, 0, 0], [1, 1, 1], 12)
        g.tsdf[:6] = -1.0
        g.weight[:6] = 1.0
        with pytest.warns(UserWarning):
            verts, faces = fusion.marching_cubes(g)
        assert len(faces) == 0


class TestChamfer:
    def test_identical_sets_zero(self):
        pts = np.random.default_rng(0).normal(size=(50, 3))
        res = fusion.chamfer(pts, pts.copy())
        assert res.a_to_b == 0.0 and res.b_to_a == 0.0
        assert res.symmetric == 0.0

    def test_unit_offset_singletons(self):
        res = fusion.chamfer([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]])
        assert res.symmetric == pytest.approx(1.0)

    def test_two_point_sets_match(self):
        a = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
        assert fusion.chamfer(a, a[::-1]).symmetric == 0.0

    def test_matches_quadratic_scan(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(100, 3))
        b = rng.normal(size=(130, 3)) * 1.5 + 0.2
        res = fusion.chamfer(a, b)
        d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
        assert res.a_to_b == pytest.approx(d.min(axis=1).mean(), abs=1e-12)
        assert res.b_to_a == pytest.approx(d.min(axis=0).mean(), abs=1e-12)

    def test_symmetry_under_swap_exact(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(40, 3))
        b = rng.normal(size=(60, 3))
        assert fusion.chamfer(a, b).symmetric == fusion.chamfer(b, a).symmetric

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            fusion.chamfer(np.zeros((0, 3)), np.ones((4, 3)))


class TestFrustumClean:
    def test_drops_unseen_triangles(self):
        cam = front_camera()
        verts = np.array([[0.0, 0.0, 2.0], [0.1, 0.0, 2.0], [0.0, 0.1, 2.0],
                          [0.0, 0.0, -2.0], [0.1, 0.0, -2.0],
                          [0.0, 0.1, -2.0]])
        faces = np.array([[0, 1, 2], [3, 4, 5]])
        cv, cf = fusion.frustum_clean(verts, faces, [cam])
        assert len(cf) == 1 and len(cv) == 3
        np.testing.assert_allclose(cv[cf[0]], verts[faces[0]])

    def test_any_camera_suffices(self):
        cam_front = front_camera()
        cam_back = Camera.look_at(eye=[0, 0, 4], target=[0, 0, -1],
                                  up=[0, 1, 0], width=64, height=64)
        verts = np.array([[0.0, 0.0, 2.0], [0.1, 0.0, 2.0], [0.0, 0.1, 2.0]])
        faces = np.array([[0, 1, 2]])
        for cams in ([cam_front], [cam_back], [cam_front, cam_back]):
            _, cf = fusion.frustum_clean(verts, faces, cams)
            assert len(cf) == 1


class TestMeshFiles:
    def test_ply_ascii_round_trip(self, tmp_path):
        verts = np.array([[0.0, 0.5, 2.0], [0.125, 0.0, 2.0],
                          [0.0, 0.25, 1.75]])
        faces = np.array([[0, 1, 2]])
        path = tmp_path / "m.ply"
        fusion.write_ply(path, verts, faces, binary=False)
        rv, rf = fusion.read_ply(path)
        np.testing.assert_array_equal(rv, verts)
        np.testing.assert_array_equal(rf, faces)

    def test_ply_binary_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        verts = rng.normal(size=(17, 3))
        faces = rng.integers(0, 17, size=(9, 3))
        path = tmp_path / "m.ply"
        fusion.write_ply(path, verts, faces, binary=True)
        rv, rf = fusion.read_ply(path)
        np.testing.assert_allclose(rv, verts, atol=1e-6)  # float32 storage
        np.testing.assert_array_equal(rf, faces)

    def test_obj_output(self, tmp_path):
        verts = np.array([[0.0, 0.5, 2.0], [0.125, 0.0, 2.0],
                          [0.0, 0.25, 1.75]])
        faces = np.array([[0, 1, 2]])
        path = tmp_path / "m.obj"
        fusion.write_obj(path, verts, faces)
        lines = path.read_text().splitlines()
        vs = [ln for ln in lines if ln.startswith("v ")]
        fs = [ln for ln in lines if ln.startswith("f ")]
        assert len(vs) == 3 and fs == ["f 1 2 3"]
        parsed = np.array([ln.split()[1:] for ln in vs], dtype=np.float64)
        np.testing.assert_array_equal(parsed, verts)


class TestFusionConsistency:
    def test_sphere_recovery_within_one_voxel(self):
        # noise-free analytic depth from a three-ring rig; mean distance
        # of mesh vertices to the true sphere must stay below one voxel
        center = np.array([0.0, 0.0, 1.5])
        radius = 0.5
        views = ring_views(center, radius, n_az=8, px=64)
        verts, faces, grid = fusion.fuse_views(
            views, center - 0.75, center + 0.75, resolution=48)
        assert len(verts) > 2000
        sd = np.abs(np.linalg.norm(verts - center, axis=1) - radius)
        assert sd.mean() <= grid.voxel_size
        # regression guard: the observation-boundary filter keeps the
        # error far below the contract bound
        assert sd.mean() <= 0.25 * grid.voxel_size
        assert sd.max() <= grid.voxel_size

    def test_chamfer_against_analytic_samples(self):
        center = np.array([0.0, 0.0, 1.5])
        radius = 0.5
        views = ring_views(center, radius, n_az=8, px=64)
        verts, _, grid = fusion.fuse_views(
            views, center - 0.75, center + 0.75, resolution=48)
        rng = np.random.default_rng(11)
        d = rng.normal(size=(4000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        truth = center + radius * d
        res = fusion.chamfer(verts, truth)
        assert res.symmetric <= grid.voxel_size
