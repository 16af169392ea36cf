"""Brute-force reference renderers.

These certify the closed forms used by the fast paths: the footprint is
recovered by numerically integrating the extruded density of a hit over
its slab, and full rays are rendered by direct quadrature of the volume
rendering integral over the union of (disjoint) slabs.

The slab construction extrudes the surface field value linearly to zero
over a half-width h/cos(theta) on both sides of the hit depth. The slab
integral of the density is independent of h; quadrature at several h
values certifies that, and its limit equals the closed-form footprint in
the normalized convention (the integral telescopes to
2 ln Psi(c) - 2 ln Psi(c - f), which is exactly footprint(f) with the
S(0) offset removed).

Exactness only holds when slabs are disjoint or exactly coincident with
equal colors; anything else raises rather than silently rendering.
"""

import dataclasses
import math

import numpy as np

from . import mathkernel as mk
from . import surfel as sf

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclasses.dataclass(frozen=True)
class QuadratureConfig:
    h: float = 1e-3
    samples_per_kernel: int = 64
    h_sequence: tuple = (1e-2, 1e-3, 1e-4)

    def __post_init__(self):
        if not (self.h > 0):
            raise ValueError("h must be positive")
        if int(self.samples_per_kernel) < 64:
            raise ValueError("samples_per_kernel must be >= 64")
        seq = tuple(float(v) for v in self.h_sequence)
        if any(b >= a for a, b in zip(seq, seq[1:])):
            raise ValueError("h_sequence must be strictly decreasing")


def _hazard_ratio(x):
    """psi(x) / Psi(x), log-space below -6 where the naive ratio is 0/0."""
    x = np.asarray(x, dtype=np.float64)
    naive = mk.std_normal_pdf(x) / np.where(x >= -6.0, mk.std_normal_cdf(x), 1.0)
    logform = np.exp((-0.5 * x * x - _LOG_SQRT_2PI) - mk.log_std_normal_cdf(x))
    return np.where(x >= -6.0, naive, logform)


def _density_profile(ts, t_hit, f, cos_theta, h, fp_cfg):
    """sigma along the ray for one extruded hit; zero outside the slab."""
    ts = np.asarray(ts, dtype=np.float64)
    f = min(float(f), fp_cfg.f_max)
    half = h / cos_theta
    u = f * (1.0 - np.abs(ts - t_hit) / half)
    inside = u > 0.0
    x = fp_cfg.c - np.where(inside, u, 0.0)    # -F
    sigma = _hazard_ratio(x) * (f / h) * cos_theta
    return np.where(inside, sigma, 0.0)


def extruded_density(t, ray, surfel, h, fp_cfg=mk.DEFAULT_CONFIG):
    """Density of the extruded hit at depth(s) t. Zero outside the slab."""
    if h <= 0:
        raise ValueError("h must be positive")
    rec = sf.intersect(ray, surfel)
    if rec is None:
        raise ValueError("surfel does not intersect the ray")
    out = _density_profile(t, rec.t, rec.f, rec.cos_theta, h, fp_cfg)
    if np.ndim(t) == 0:
        return float(out)
    return out


def _simpson(vals, step):
    n = len(vals) - 1
    return (step / 3.0) * (vals[0] + vals[-1]
                           + 4.0 * vals[1:-1:2].sum() + 2.0 * vals[2:-1:2].sum())


def _half_slab_integral(t_hit, f, cos_theta, h, fp_cfg, n, side):
    half = h / cos_theta
    a, b = (t_hit - half, t_hit) if side < 0 else (t_hit, t_hit + half)
    ts = np.linspace(a, b, n + 1)
    sig = _density_profile(ts, t_hit, f, cos_theta, h, fp_cfg)
    return _simpson(sig, (b - a) / n)


def footprint_by_quadrature(ray, surfel, h=1e-3, samples=64,
                            fp_cfg=mk.DEFAULT_CONFIG, tol=1e-8):
    """Slab integral of the extruded density, refined to convergence.

    The integrand kinks at the hit depth, so each half is integrated
    separately (smooth there) with composite Simpson, doubling the node
    count until successive estimates settle below tol.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rec = sf.intersect(ray, surfel)
    if rec is None:
        raise ValueError("surfel does not intersect the ray")
    n = max(int(samples), 4)
    if n % 2:
        n += 1
    prev = None
    for _ in range(22):
        est = (_half_slab_integral(rec.t, rec.f, rec.cos_theta, h, fp_cfg, n, -1)
               + _half_slab_integral(rec.t, rec.f, rec.cos_theta, h, fp_cfg, n, +1))
        if prev is not None and abs(est - prev) < tol:
            return est
        prev = est
        n *= 2
    raise RuntimeError("quadrature did not converge")


def _cumulative_optical_depth(sig, step):
    """tau at every node from sigma at evenly spaced nodes (even count).

    Even nodes: composite Simpson over node pairs. Odd nodes: the
    half-interval 5-8-(-1) rule, locally fourth order like Simpson.
    """
    n = len(sig) - 1
    tau = np.empty_like(sig)
    tau[0] = 0.0
    pair = (step / 3.0) * (sig[:-2:2] + 4.0 * sig[1:-1:2] + sig[2::2])
    tau[2::2] = np.cumsum(pair)
    tau[1::2] = tau[:-1:2] + (step / 12.0) * (
        5.0 * sig[:-1:2] + 8.0 * sig[1::2] - sig[2::2])
    return tau


def _slab_render(t_hit, f, cos_theta, h, fp_cfg, n):
    """One slab's (rho, c_weight, depth_moment) by direct quadrature.

    c_weight = int sigma e^{-tau} dt (the slab's compositing weight given
    unit entry transmittance), depth_moment the same integral with an
    extra factor t.
    """
    half = h / cos_theta
    ts = np.linspace(t_hit - half, t_hit + half, 2 * n + 1)
    step = half / n
    sig = _density_profile(ts, t_hit, f, cos_theta, h, fp_cfg)
    # the kink at the center node sits on a Simpson pair boundary only if
    # n is even; enforced by the caller
    tau = _cumulative_optical_depth(sig, step)
    damped = sig * np.exp(-tau)
    w = _simpson(damped, step)
    dm = _simpson(damped * ts, step)
    return tau[-1], w, dm


def _converged_slab(t_hit, f, cos_theta, h, fp_cfg, samples, tol=1e-8):
    n = max(int(samples), 8)
    n += n % 2
    prev = None
    for _ in range(22):
        cur = _slab_render(t_hit, f, cos_theta, h, fp_cfg, n)
        if prev is not None and max(abs(a - b) for a, b in zip(cur, prev)) < tol:
            return cur
        prev = cur
        n *= 2
    raise RuntimeError("quadrature did not converge")


def render_by_quadrature(ray, surfels, colors, h=1e-3, samples=64,
                         fp_cfg=mk.DEFAULT_CONFIG, near_clip=1e-6,
                         cutoff=sf.DEFAULT_CUTOFF, opacity_floor=1.0 / 255.0,
                         early_exit=1e-4, tie_tol=None, tol=1e-8):
    """Direct quadrature of the volume rendering integral along one ray.

    Returns (C (channels,), D, T_final) with D the raw depth moment
    (sum of weight * t, not normalized). Coincident equal-color hits are
    merged into one slab; partially overlapping slabs shrink h until
    disjoint and raise if that is impossible. opacity_floor / early_exit
    mirror the compositor's skip rules; pass None to disable.
    """
    colors = np.asarray(colors, dtype=np.float64)
    recs = sf.intersect_all(ray, surfels, near_clip=near_clip, cutoff=cutoff,
                            merge=False)
    if tie_tol is None:
        tie_tol = sf.TIE_TOLERANCE_FACTOR * surfels.bbox_diagonal()
    nch = colors.shape[1]
    if not recs:
        return np.zeros(nch), 0.0, 1.0
    row = {int(sid): k for k, sid in enumerate(surfels.ids)}

    # group exact ties; unequal colors inside a group break the exactness
    # preconditions, so that is an error rather than an approximation
    slabs = []       # (t, f, cos_theta, color)
    i = 0
    while i < len(recs):
        j = i + 1
        while j < len(recs) and recs[j].t - recs[j - 1].t <= tie_tol:
            j += 1
        group = recs[i:j]
        col = colors[row[group[0].surfel_id]]
        for r in group[1:]:
            if np.max(np.abs(colors[row[r.surfel_id]] - col)) > 1e-12:
                raise RuntimeError(
                    "Theorem 1 preconditions violated: coincident surfels "
                    "with unequal colors")
        f = group[0].f
        for r in group[1:]:
            f = mk.oplus(f, r.f, fp_cfg)
        lead = max(group, key=lambda r: r.f)
        slabs.append((group[0].t, float(f), lead.cos_theta, col))
        i = j

    # shrink h until every slab is disjoint from its neighbors and clear
    # of the near plane
    allowed = (slabs[0][0] - near_clip) * slabs[0][2]
    for (ta, _, ca, _), (tb, _, cb, _) in zip(slabs, slabs[1:]):
        gap = tb - ta
        allowed = min(allowed, gap / (1.0 / ca + 1.0 / cb))
    h_eff = min(h, 0.999 * allowed)
    if h_eff < 1e-12:
        raise RuntimeError(
            "Theorem 1 preconditions violated: slabs overlap at minimal h")

    color_sum = np.zeros(nch)
    depth_sum = 0.0
    trans = 1.0
    for t_hit, f, cos_theta, col in slabs:
        rho, w, dm = _converged_slab(t_hit, f, cos_theta, h_eff, fp_cfg,
                                     samples, tol=tol)
        if opacity_floor is not None and -math.expm1(-rho) < opacity_floor:
            continue
        if early_exit is not None and trans < early_exit:
            break
        color_sum += trans * w * col
        depth_sum += trans * dm
        trans *= math.exp(-rho)
    return color_sum, depth_sum, trans
