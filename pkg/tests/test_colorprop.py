"""Color blending: formulas, neighbor search, and the continuity claim."""

import numpy as np
import pytest

import helpers
from surfelfield import colorprop as cp
from surfelfield import renderer as ren
from surfelfield import surfel as sf


def knn_oracle(x, k):
    # plain python sort on (d2, id); independent of the library path
    n = len(x)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        d2 = np.sum((x - x[i]) ** 2, axis=1)
        out[i] = sorted(range(n), key=lambda j: (d2[j], j))[:k]
    return out


def tiny_set(rng, n, spread=0.05, color_dim=3):
    surfels = []
    for i in range(n):
        tu, tv, _ = helpers.random_frame(rng)
        surfels.append(sf.Surfel(
            center=rng.normal(size=3) * spread, tangent_u=tu, tangent_v=tv,
            scale_u=0.2, scale_v=0.2, weight=rng.uniform(0.3, 2.0), id=i))
    ss = sf.SurfelSet.from_surfels(surfels)
    ss.colors = rng.uniform(0.0, 1.0, (n, color_dim))
    ss.color_kind = "rgb"
    return ss


class TestConfig:
    def test_defaults(self):
        cfg = cp.BlendConfig()
        assert cfg.tau == 100.0
        assert cfg.k == 10
        assert cfg.refresh_interval == 100

    @pytest.mark.parametrize("kw", [dict(tau=0.0), dict(tau=-1.0),
                                    dict(k=0), dict(refresh_interval=0),
                                    dict(mode="both")])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            cp.BlendConfig(**kw)


class TestPerRay:
    def test_single_record_pass_through(self):
        c = np.array([[0.3, 0.7, 0.1]])
        chat, _ = cp.blend_per_ray(np.array([2.0]), np.array([1.5]), c)
        assert np.array_equal(chat, c)

    def test_coincident_depths_blend_bitwise_equal(self):
        rng = np.random.default_rng(7)
        t = np.array([1.3, 0.9, 1.3, 1.7, 1.3])
        w = rng.uniform(0.2, 3.0, 5)
        c = rng.uniform(0.0, 1.0, (5, 3))
        chat, _ = cp.blend_per_ray(t, w, c)
        assert np.array_equal(chat[0], chat[2])
        assert np.array_equal(chat[0], chat[4])
        assert not np.array_equal(chat[0], chat[1])

    def test_two_record_closed_form(self):
        # equal weights, separation 1/tau: (c1 + e^-1 c2) / (1 + e^-1)
        tau = 100.0
        c = np.array([[0.9, 0.1, 0.4], [0.2, 0.8, 0.6]])
        chat, _ = cp.blend_per_ray(np.array([1.0, 1.0 + 1.0 / tau]),
                                   np.array([1.3, 1.3]), c, tau)
        e1 = np.exp(-1.0)
        want = (c[0] + e1 * c[1]) / (1.0 + e1)
        assert np.max(np.abs(chat[0] - want)) < 1e-15
        want2 = (c[1] + e1 * c[0]) / (1.0 + e1)
        assert np.max(np.abs(chat[1] - want2)) < 1e-15

    def test_convex_combination(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n = rng.integers(2, 9)
            t = rng.uniform(0.5, 0.6, n)
            w = rng.uniform(0.05, 3.0, n)
            c = rng.uniform(-1.0, 1.0, (n, 4))
            chat, _ = cp.blend_per_ray(t, w, c)
            assert np.all(chat >= c.min(axis=0) - 1e-12)
            assert np.all(chat <= c.max(axis=0) + 1e-12)

    def test_zero_weights_pass_through(self):
        c = np.array([[0.1, 0.2, 0.3], [0.9, 0.8, 0.7]])
        chat, cache = cp.blend_per_ray(np.array([1.0, 1.1]),
                                       np.zeros(2), c)
        assert np.array_equal(chat, c)
        d = np.array([[1.0, 0.0, 2.0], [0.0, -1.0, 0.5]])
        _, _, dc = cp.blend_per_ray_backward(cache, d)
        assert np.array_equal(dc, d)

    def test_empty(self):
        chat, cache = cp.blend_per_ray(np.zeros(0), np.zeros(0),
                                       np.zeros((0, 3)))
        assert chat.shape == (0, 3)
        dt, dw, dc = cp.blend_per_ray_backward(cache, np.zeros((0, 3)))
        assert dt.size == 0 and dc.shape == (0, 3)

    def test_color_jacobian_matches_fd(self):
        rng = np.random.default_rng(4)
        t = np.array([1.00, 1.006, 1.011, 1.02])
        w = rng.uniform(0.4, 2.0, 4)
        c = rng.uniform(0.0, 1.0, (4, 3))
        d_chat = rng.normal(size=(4, 3))
        _, cache = cp.blend_per_ray(t, w, c)
        _, _, dc = cp.blend_per_ray_backward(cache, d_chat)
        eps = 1e-6
        for i in range(4):
            for j in range(3):
                up, dn = c.copy(), c.copy()
                up[i, j] += eps
                dn[i, j] -= eps
                fd = (np.sum(cp.blend_per_ray(t, w, up)[0] * d_chat)
                      - np.sum(cp.blend_per_ray(t, w, dn)[0] * d_chat)) \
                    / (2 * eps)
                assert dc[i, j] == pytest.approx(fd, abs=1e-6)

    def test_depth_weight_gradients_match_fd(self):
        rng = np.random.default_rng(5)
        t = np.array([1.00, 1.004, 1.013, 1.02])
        w = rng.uniform(0.4, 2.0, 4)
        c = rng.uniform(0.0, 1.0, (4, 3))
        d_chat = rng.normal(size=(4, 3))
        _, cache = cp.blend_per_ray(t, w, c)
        dt, dw, _ = cp.blend_per_ray_backward(cache, d_chat)
        eps = 1e-7

        def probe(tv, wv):
            return np.sum(cp.blend_per_ray(tv, wv, c)[0] * d_chat)

        for i in range(4):
            up, dn = t.copy(), t.copy()
            up[i] += eps
            dn[i] -= eps
            fd = (probe(up, w) - probe(dn, w)) / (2 * eps)
            assert dt[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)
            up, dn = w.copy(), w.copy()
            up[i] += eps
            dn[i] -= eps
            fd = (probe(t, up) - probe(t, dn)) / (2 * eps)
            assert dw[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestKnn:
    def test_collinear_middle_point(self):
        x = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
        table = cp.knn(x, 2)
        assert list(table[1]) == [1, 0]

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(19)
        x = rng.normal(size=(500, 3))
        want = knn_oracle(x, 10)
        assert np.array_equal(cp.knn(x, 10, method="grid"), want)
        assert np.array_equal(cp.knn(x, 10, method="scan"), want)

    def test_matches_oracle_clustered(self):
        # tight clusters plus far outliers stress the shell expansion
        rng = np.random.default_rng(23)
        blobs = [rng.normal(size=(60, 3)) * 0.01 + mu
                 for mu in ([0, 0, 0], [5, 0, 0], [0, 7, 0])]
        x = np.concatenate(blobs + [rng.uniform(-20, 20, size=(20, 3))])
        want = knn_oracle(x, 7)
        assert np.array_equal(cp.knn(x, 7, method="grid"), want)

    def test_duplicate_centers_tie_break_by_id(self):
        x = np.zeros((5, 3))
        table = cp.knn(x, 3, method="scan")
        assert np.array_equal(table, np.tile([0, 1, 2], (5, 1)))
        assert np.array_equal(cp.knn(x, 3, method="grid"), table)

    def test_fewer_than_k_warns(self):
        x = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        with pytest.warns(UserWarning):
            table = cp.knn(x, 5)
        assert table.shape == (2, 2)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(300, 3))
        a = cp.knn(x, 10, method="grid")
        b = cp.knn(x, 10, method="grid")
        assert np.array_equal(a, b)

    def test_bad_input(self):
        with pytest.raises(ValueError):
            cp.knn(np.zeros((0, 3)), 1)
        with pytest.raises(ValueError):
            cp.knn(np.zeros((4, 2)), 1)
        with pytest.raises(ValueError):
            cp.knn(np.zeros((4, 3)), 2, method="kd")


class TestSpatial:
    def test_self_only_table_is_identity(self):
        rng = np.random.default_rng(3)
        ss = tiny_set(rng, 6)
        table = np.arange(6, dtype=np.int64)[:, None]
        chat, _ = cp.blend_spatial(ss, table)
        assert np.array_equal(chat, ss.colors)

    def test_coincident_equal_weight_pair_averages(self):
        ss = tiny_set(np.random.default_rng(0), 2, spread=0.0)
        ss.weights[:] = 1.7
        chat, _ = cp.blend_spatial(ss, cp.knn(ss.centers, 2))
        want = ss.colors.mean(axis=0)
        assert np.max(np.abs(chat - want)) < 1e-15

    def test_coincident_centers_blend_bitwise_equal(self):
        rng = np.random.default_rng(6)
        ss = tiny_set(rng, 8)
        ss.centers[5] = ss.centers[2].copy()
        table = cp.knn(ss.centers, 4)
        # identical centers see identical (d2, id)-ordered candidates
        assert np.array_equal(table[2], table[5])
        chat, _ = cp.blend_spatial(ss, table)
        assert np.array_equal(chat[2], chat[5])

    def test_matches_all_pairs_formula(self):
        # n == k: the table is everyone, so the direct formula applies
        rng = np.random.default_rng(9)
        ss = tiny_set(rng, 10, color_dim=5)
        table = cp.knn(ss.centers, 10)
        chat, _ = cp.blend_spatial(ss, table, tau=40.0)
        d = np.linalg.norm(ss.centers[:, None] - ss.centers[None], axis=2)
        B = (1.0 - np.exp(-ss.weights))[None, :] * np.exp(-40.0 * d)
        want = B @ ss.colors / B.sum(axis=1)[:, None]
        assert np.max(np.abs(chat - want)) < 1e-12

    def test_restricted_neighborhood_matches_oracle_subset(self):
        rng = np.random.default_rng(14)
        ss = tiny_set(rng, 40, spread=0.08)
        k = 10
        table = cp.knn(ss.centers, k)
        chat, _ = cp.blend_spatial(ss, table, tau=60.0)
        oracle_table = knn_oracle(ss.centers, k)
        for i in range(40):
            js = oracle_table[i]
            d = np.linalg.norm(ss.centers[js] - ss.centers[i], axis=1)
            b = (1.0 - np.exp(-ss.weights[js])) * np.exp(-60.0 * d)
            want = b @ ss.colors[js] / b.sum()
            assert np.max(np.abs(chat[i] - want)) < 1e-12

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(21)
        ss = tiny_set(rng, 12)
        table = cp.knn(ss.centers, 5)
        chat, cache = cp.blend_spatial(ss, table)
        d_chat = rng.normal(size=chat.shape)
        dm, dw, dc = cp.blend_spatial_backward(cache, d_chat)
        eps = 1e-7

        def probe(s):
            return np.sum(cp.blend_spatial(s, table)[0] * d_chat)

        for i in range(12):
            for j in range(3):
                up, dn = ss.copy(), ss.copy()
                up.centers[i, j] += eps
                dn.centers[i, j] -= eps
                fd = (probe(up) - probe(dn)) / (2 * eps)
                assert dm[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-7)
                up, dn = ss.copy(), ss.copy()
                up.colors[i, j] += eps
                dn.colors[i, j] -= eps
                fd = (probe(up) - probe(dn)) / (2 * eps)
                assert dc[i, j] == pytest.approx(fd, rel=1e-4, abs=1e-7)
            up, dn = ss.copy(), ss.copy()
            up.weights[i] += eps
            dn.weights[i] -= eps
            fd = (probe(up) - probe(dn)) / (2 * eps)
            assert dw[i] == pytest.approx(fd, rel=1e-4, abs=1e-7)

    def test_rejects_bad_table(self):
        ss = tiny_set(np.random.default_rng(0), 4)
        with pytest.raises(ValueError):
            cp.blend_spatial(ss, np.zeros((3, 2), dtype=np.int64))
        with pytest.raises(ValueError):
            cp.blend_spatial(ss, np.zeros((4, 0), dtype=np.int64))


class TestContinuity:
    """Sweeping a depth swap: blended output moves smoothly, raw jumps."""

    @staticmethod
    def _sweep(blend):
        def plane(z, sid):
            return sf.Surfel(center=np.array([0.0, 0.0, z]),
                             tangent_u=np.array([1.0, 0.0, 0.0]),
                             tangent_v=np.array([0.0, 1.0, 0.0]),
                             scale_u=0.5, scale_v=0.5, weight=2.0, id=sid)
        cam = ren.Camera(fx=4.0, fy=4.0, cx=0.5, cy=0.5, width=1, height=1,
                         rotation=np.eye(3), translation=np.zeros(3))
        hook = cp.ray_blender(cp.BlendConfig(mode="per_ray")) if blend \
            else None
        out = []
        steps = np.linspace(-0.05, 0.05, 1001)
        for s in steps:
            ss = sf.SurfelSet.from_surfels([plane(1.5, 0), plane(1.5 + s, 1)])
            ss.colors = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
            ss.color_kind = "rgb"
            buf = ren.render_reference(cam, ss, merge=False,
                                       ray_colors_fn=hook)
            out.append(buf.color[0, 0].copy())
        return np.array(out), steps[1] - steps[0]

    def test_depth_swap(self):
        smooth, ds = self._sweep(blend=True)
        raw, _ = self._sweep(blend=False)
        d_smooth = np.max(np.abs(np.diff(smooth, axis=0)), axis=1)
        d_raw = np.max(np.abs(np.diff(raw, axis=0)), axis=1)
        # slope bound estimated from the smooth part of the path itself
        K = 5.0 * np.quantile(d_smooth, 0.9) / ds
        assert d_smooth.max() <= K * ds
        assert d_raw.max() >= 10.0 * d_smooth.max()
