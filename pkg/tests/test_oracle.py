"""Quadrature oracle tests.

The headline check: integrating the extruded density over its slab
reproduces the closed-form footprint (normalized convention) to 1e-7,
independently of the extrusion half-width. The constant gap to the
unnormalized map is pinned numerically so the convention choice stays
visible.
"""

import math

import numpy as np
import pytest
from scipy.stats import norm

from surfelfield import mathkernel as mk
from surfelfield import oracle as orc
from surfelfield import surfel as sf

TWO_LOG_PSI_C = -0.0027016199294963876    # 2 ln Psi(3)


def center_hit(f, t_hit=1.5, direction=None):
    """Surfel + ray meeting at the surfel center, so footprint = weight."""
    d = np.array([0.0, 0.0, 1.0]) if direction is None else direction
    d = d / np.linalg.norm(d)
    m = d * t_hit
    s = sf.Surfel(center=m, tangent_u=np.array([1.0, 0.0, 0.0]),
                  tangent_v=np.array([0.0, 1.0, 0.0]),
                  scale_u=0.3, scale_v=0.2, weight=f, id=0)
    ray = sf.Ray(origin=np.zeros(3), direction=d)
    return ray, s


def plane_set(entries):
    """SurfelSet of fronto-parallel unit-frame surfels at given (z, w)."""
    out = []
    for k, (z, w) in enumerate(entries):
        out.append(sf.Surfel(center=np.array([0.0, 0.0, z]),
                             tangent_u=np.array([1.0, 0.0, 0.0]),
                             tangent_v=np.array([0.0, 1.0, 0.0]),
                             scale_u=0.3, scale_v=0.2, weight=w, id=k))
    return sf.SurfelSet.from_surfels(out)


AXIS_RAY = sf.Ray(origin=np.zeros(3), direction=np.array([0.0, 0.0, 1.0]))


class TestExtrudedDensity:
    def test_zero_outside_slab(self):
        ray, s = center_hit(2.0)
        assert orc.extruded_density(1.5 + 0.011, ray, s, h=0.01) == 0.0
        assert orc.extruded_density(1.5 - 0.011, ray, s, h=0.01) == 0.0
        assert orc.extruded_density(0.2, ray, s, h=0.01) == 0.0

    def test_peak_value(self):
        # at the hit the field reaches f - c; density = hazard * f/h * cos
        f, h = 2.0, 0.01
        ray, s = center_hit(f)
        got = orc.extruded_density(1.5, ray, s, h=h)
        want = norm.pdf(3.0 - f) / norm.cdf(3.0 - f) * (f / h)
        assert got == pytest.approx(want, rel=1e-12)

    def test_symmetric_about_hit(self):
        ray, s = center_hit(1.3)
        for delta in (0.001, 0.004, 0.0099):
            a = orc.extruded_density(1.5 + delta, ray, s, h=0.01)
            b = orc.extruded_density(1.5 - delta, ray, s, h=0.01)
            assert a == pytest.approx(b, rel=1e-12)
            assert a > 0

    def test_oblique_hit_scales_width(self):
        # slab half-width is h / cos(theta) along the ray
        d = np.array([0.0, math.sin(0.7), math.cos(0.7)])
        ray, s = center_hit(1.0, direction=d)
        rec = sf.intersect(ray, s)
        half = 0.01 / rec.cos_theta
        assert orc.extruded_density(rec.t + 0.999 * half, ray, s, h=0.01) > 0
        assert orc.extruded_density(rec.t + 1.001 * half, ray, s, h=0.01) == 0.0

    def test_bad_h(self):
        ray, s = center_hit(1.0)
        with pytest.raises(ValueError, match="positive"):
            orc.extruded_density(1.5, ray, s, h=0.0)

    def test_miss_raises(self):
        _, s = center_hit(1.0)
        ray = sf.Ray(origin=np.array([50.0, 0.0, 0.0]),
                     direction=np.array([0.0, 0.0, 1.0]))
        with pytest.raises(ValueError, match="intersect"):
            orc.extruded_density(1.5, ray, s, h=0.01)


class TestFootprintQuadrature:
    def test_matches_closed_form_on_grid(self):
        for f in (0.1, 0.5, 1.0, 2.0, 3.0, 4.0, 4.28):
            ray, s = center_hit(f)
            rho = orc.footprint_by_quadrature(ray, s, h=1e-3)
            assert rho == pytest.approx(mk.footprint(f), abs=1e-7), f

    def test_f2_example(self):
        ray, s = center_hit(2.0)
        rho = orc.footprint_by_quadrature(ray, s, h=1e-3)
        assert abs(rho - mk.footprint(2.0)) <= 1e-7

    def test_h_independence(self):
        ray, s = center_hit(2.7)
        vals = [orc.footprint_by_quadrature(ray, s, h=h)
                for h in (1e-2, 1e-3, 1e-4)]
        assert max(vals) - min(vals) <= 1e-7

    def test_offset_to_unnormalized_map_is_2logPsi(self):
        # the slab integral telescopes to the normalized footprint; the
        # unnormalized map sits exactly -2 ln Psi(c) above it
        raw = mk.FootprintConfig(normalize_s0=False)
        for f in (0.5, 2.0, 4.0):
            ray, s = center_hit(f)
            rho = orc.footprint_by_quadrature(ray, s, h=1e-3)
            gap = mk.footprint(f, raw) - rho
            assert gap == pytest.approx(-TWO_LOG_PSI_C, abs=1e-7)

    def test_oblique_equals_frontal(self):
        # footprint is intrinsic to the hit, not the approach angle
        d = np.array([0.3, -0.2, 0.93])
        ray, s = center_hit(1.7, direction=d)
        rho = orc.footprint_by_quadrature(ray, s, h=1e-3)
        assert rho == pytest.approx(mk.footprint(1.7), abs=1e-7)

    def test_miss_is_domain_error(self):
        _, s = center_hit(1.0)
        ray = sf.Ray(origin=np.array([50.0, 0.0, 0.0]),
                     direction=np.array([0.0, 0.0, 1.0]))
        with pytest.raises(ValueError, match="intersect"):
            orc.footprint_by_quadrature(ray, s)


class TestRenderQuadrature:
    def test_single_surfel_closed_form(self):
        surfels = plane_set([(1.5, 1.0)])
        colors = np.array([[0.8, 0.4, 0.1]])
        C, D, T = orc.render_by_quadrature(AXIS_RAY, surfels, colors, h=1e-3)
        alpha = 1.0 - math.exp(-mk.footprint(1.0))
        assert np.max(np.abs(C - colors[0] * alpha)) <= 1e-7
        assert T == pytest.approx(1.0 - alpha, abs=1e-9)

    def test_depth_moment_within_slab_width(self):
        surfels = plane_set([(1.5, 2.0)])
        colors = np.ones((1, 3))
        h = 1e-3
        _, D, T = orc.render_by_quadrature(AXIS_RAY, surfels, colors, h=h)
        weight = 1.0 - T
        assert abs(D / weight - 1.5) < h

    def test_two_separated_surfels_refined_formula(self):
        surfels = plane_set([(1.0, 2.0), (2.0, 1.2)])
        colors = np.array([[0.9, 0.1, 0.3], [0.2, 0.7, 0.5]])
        C, D, T = orc.render_by_quadrature(AXIS_RAY, surfels, colors, h=1e-3)
        r1, r2 = mk.footprint(2.0), mk.footprint(1.2)
        a1 = 1.0 - math.exp(-r1)
        w2 = (1.0 - math.exp(-r2)) * math.exp(-r1)
        want = a1 * colors[0] + w2 * colors[1]
        assert np.max(np.abs(C - want)) <= 1e-6
        # each slab's optical depth carries the 1e-8 quadrature tolerance
        assert T == pytest.approx(math.exp(-(r1 + r2)), abs=1e-7)

    def test_slabs_autoshrink_when_h_too_wide(self):
        surfels = plane_set([(1.0, 2.0), (1.05, 1.2)])
        colors = np.array([[0.9, 0.1, 0.3], [0.2, 0.7, 0.5]])
        # h = 0.2 would blend the slabs; the renderer must shrink it
        C, _, T = orc.render_by_quadrature(AXIS_RAY, surfels, colors, h=0.2)
        r1, r2 = mk.footprint(2.0), mk.footprint(1.2)
        a1 = 1.0 - math.exp(-r1)
        w2 = (1.0 - math.exp(-r2)) * math.exp(-r1)
        want = a1 * colors[0] + w2 * colors[1]
        assert np.max(np.abs(C - want)) <= 1e-6

    def test_coincident_equal_colors_merge(self):
        surfels = plane_set([(1.5, 2.0), (1.5, 1.0)])
        colors = np.array([[0.6, 0.2, 0.9], [0.6, 0.2, 0.9]])
        C, _, T = orc.render_by_quadrature(AXIS_RAY, surfels, colors, h=1e-3)
        merged = mk.oplus(2.0, 1.0)
        alpha = 1.0 - math.exp(-mk.footprint(merged))
        assert np.max(np.abs(C - colors[0] * alpha)) <= 1e-7
        assert T == pytest.approx(1.0 - alpha, abs=1e-9)

    def test_coincident_unequal_colors_rejected(self):
        surfels = plane_set([(1.5, 2.0), (1.5, 1.0)])
        colors = np.array([[0.6, 0.2, 0.9], [0.1, 0.2, 0.9]])
        with pytest.raises(RuntimeError, match="Theorem 1"):
            orc.render_by_quadrature(AXIS_RAY, surfels, colors)

    def test_unresolvable_overlap_rejected(self):
        # depths distinct but closer than any workable slab width, and the
        # tie tolerance forced below the gap so no merge can rescue it
        surfels = plane_set([(1.5, 2.0), (1.5 + 1e-13, 1.0)])
        colors = np.array([[0.6, 0.2, 0.9], [0.6, 0.2, 0.9]])
        with pytest.raises(RuntimeError, match="Theorem 1"):
            orc.render_by_quadrature(AXIS_RAY, surfels, colors, tie_tol=1e-16)

    def test_opacity_floor_skips_faint_slab(self):
        # middle surfel's opacity is below 1/255: it must not attenuate
        surfels = plane_set([(1.0, 2.0), (1.5, 0.2), (2.0, 1.2)])
        colors = np.array([[0.9, 0.1, 0.3], [1.0, 1.0, 1.0], [0.2, 0.7, 0.5]])
        assert 1.0 - math.exp(-mk.footprint(0.2)) < 1.0 / 255.0
        C, _, _ = orc.render_by_quadrature(AXIS_RAY, surfels, colors, h=1e-3)
        C2, _, _ = orc.render_by_quadrature(
            AXIS_RAY, surfels.subset(np.array([0, 2])), colors[[0, 2]], h=1e-3)
        assert np.max(np.abs(C - C2)) <= 1e-9

    def test_floor_disabled_keeps_faint_slab(self):
        surfels = plane_set([(1.0, 2.0), (1.5, 0.2)])
        colors = np.array([[0.9, 0.1, 0.3], [1.0, 1.0, 1.0]])
        C_on, _, _ = orc.render_by_quadrature(AXIS_RAY, surfels, colors,
                                              opacity_floor=None)
        C_off, _, _ = orc.render_by_quadrature(AXIS_RAY, surfels, colors)
        assert np.max(np.abs(C_on - C_off)) > 1e-5

    def test_early_exit_truncates_tail(self):
        # ten near-opaque slabs: transmittance passes 1e-4 before the tail
        entries = [(0.5 + 0.2 * k, 4.0) for k in range(10)]
        surfels = plane_set(entries)
        colors = np.tile(np.linspace(0.1, 1.0, 10)[:, None], (1, 3))
        C, _, T = orc.render_by_quadrature(AXIS_RAY, surfels, colors, h=1e-3)
        rho = mk.footprint(4.0)
        alpha = 1.0 - math.exp(-rho)
        want = np.zeros(3)
        trans = 1.0
        for k in range(10):
            if trans < 1e-4:
                break
            want += trans * alpha * colors[k]
            trans *= math.exp(-rho)
        assert np.max(np.abs(C - want)) <= 1e-6
        assert T == pytest.approx(trans, rel=1e-6)

    def test_no_hits(self):
        surfels = plane_set([(1.5, 1.0)])
        ray = sf.Ray(origin=np.array([50.0, 0.0, 0.0]),
                     direction=np.array([0.0, 0.0, 1.0]))
        C, D, T = orc.render_by_quadrature(ray, surfels, np.ones((1, 3)))
        assert np.all(C == 0.0) and D == 0.0 and T == 1.0


class TestConfig:
    def test_valid(self):
        orc.QuadratureConfig()

    def test_invalid_h(self):
        with pytest.raises(ValueError):
            orc.QuadratureConfig(h=0.0)

    def test_samples_minimum(self):
        with pytest.raises(ValueError):
            orc.QuadratureConfig(samples_per_kernel=32)

    def test_h_sequence_monotone(self):
        with pytest.raises(ValueError):
            orc.QuadratureConfig(h_sequence=(1e-3, 1e-3))
