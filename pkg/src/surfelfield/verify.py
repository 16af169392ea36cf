"""Runtime certification: re-derive every closed form numerically.

Each check builds its own fixture, measures a deviation against an
independent reference (quadrature, finite differences, brute force) and
compares it to the bound the implementation promises. The collection
backs the `verify` subcommand; the test suite runs the same bounds at
larger sample counts.
"""

import dataclasses
import functools
import time

import numpy as np

from . import colorprop as cp
from . import mathkernel as mk
from . import oracle as orc
from . import renderer as ren
from . import shading as shd
from . import surfel as sf


@dataclasses.dataclass
class CheckResult:
    name: str
    passed: bool              # measured value met the bound
    measured: float
    bound: float
    detail: str = ""
    expect_fail: bool = False
    elapsed: float = 0.0
    aux: dict = dataclasses.field(default_factory=dict)

    @property
    def ok(self):
        """Suite verdict; an expected failure must indeed fail."""
        return self.passed != self.expect_fail

    @property
    def status(self):
        if self.expect_fail:
            return "XPASS" if self.passed else "XFAIL"
        return "PASS" if self.passed else "FAIL"


def _timed(fn):
    @functools.wraps(fn)
    def inner(*a, **kw):
        t0 = time.perf_counter()
        out = fn(*a, **kw)
        out.elapsed = time.perf_counter() - t0
        return out
    return inner


# ----------------------------------------------------------------------
# fixtures

def _center_hit(f, t_hit=1.5):
    s = sf.Surfel(center=np.array([0.0, 0.0, t_hit]),
                  tangent_u=np.array([1.0, 0.0, 0.0]),
                  tangent_v=np.array([0.0, 1.0, 0.0]),
                  scale_u=0.3, scale_v=0.2, weight=f, id=0)
    ray = sf.Ray(origin=np.zeros(3), direction=np.array([0.0, 0.0, 1.0]))
    return ray, s


def _frame_with_normal(n):
    ref = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 \
        else np.array([0.0, 1.0, 0.0])
    tu = np.cross(n, ref)
    tu /= np.linalg.norm(tu)
    return tu, np.cross(n, tu)


def random_separated_scene(rng, max_surfels=6):
    """Random ray crossing up to six depth-separated surfels.

    Construction keeps the exact-compositing preconditions: gaps along
    the ray far exceed any quadrature slab width, tilts stay moderate so
    every crossing is clean, weights reach past the clamp. Returns
    (ray, surfel set with rgb colors).
    """
    n = int(rng.integers(1, max_surfels + 1))
    origin = rng.uniform(-0.05, 0.05, 3)
    d = np.array([rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), 1.0])
    d /= np.linalg.norm(d)
    t_hits = 1.0 + np.cumsum(rng.uniform(0.35, 0.8, n))
    out = []
    for k in range(n):
        nrm = d + rng.uniform(-0.4, 0.4, 3)
        nrm /= np.linalg.norm(nrm)
        tu, tv = _frame_with_normal(nrm)
        su, sv = rng.uniform(0.1, 0.35, 2)
        off_u, off_v = rng.uniform(-1.5, 1.5, 2)
        center = origin + t_hits[k] * d - off_u * su * tu - off_v * sv * tv
        out.append(sf.Surfel(center=center, tangent_u=tu, tangent_v=tv,
                             scale_u=su, scale_v=sv,
                             weight=float(rng.uniform(0.05, 4.5)), id=k))
    ss = sf.SurfelSet.from_surfels(out)
    ss.colors = rng.uniform(0.0, 1.0, (n, 3))
    ss.color_kind = "rgb"
    return sf.Ray(origin=origin, direction=d), ss


def coincident_run_scene(rng, members=None):
    """2-5 surfels meeting the axis ray at one depth, equal colors,
    plus one separated occludee behind them."""
    m = int(rng.integers(2, 6)) if members is None else members
    col = rng.uniform(0.0, 1.0, 3)
    out = []
    for k in range(m):
        nrm = np.array([0.0, 0.0, 1.0]) + rng.uniform(-0.3, 0.3, 3)
        nrm /= np.linalg.norm(nrm)
        tu, tv = _frame_with_normal(nrm)
        out.append(sf.Surfel(center=np.array([0.0, 0.0, 1.5]),
                             tangent_u=tu, tangent_v=tv,
                             scale_u=float(rng.uniform(0.1, 0.4)),
                             scale_v=float(rng.uniform(0.1, 0.4)),
                             weight=float(rng.uniform(0.1, 2.5)), id=k))
    out.append(sf.Surfel(center=np.array([0.0, 0.0, 2.3]),
                         tangent_u=np.array([1.0, 0.0, 0.0]),
                         tangent_v=np.array([0.0, 1.0, 0.0]),
                         scale_u=0.3, scale_v=0.3,
                         weight=float(rng.uniform(0.5, 3.0)), id=m))
    ss = sf.SurfelSet.from_surfels(out)
    ss.colors = np.vstack([np.tile(col, (m, 1)), rng.uniform(0, 1, (1, 3))])
    ss.color_kind = "rgb"
    ray = sf.Ray(origin=np.zeros(3), direction=np.array([0.0, 0.0, 1.0]))
    return ray, ss


def _record_colors(ss, recs):
    row = {int(i): k for k, i in enumerate(ss.ids)}
    return ss.colors[[row[r.surfel_id] for r in recs]]


# ----------------------------------------------------------------------
# checks

@_timed
def check_footprint(f_values=(0.1, 0.5, 1.0, 2.0, 3.0, 4.0, 4.28),
                    h=1e-3, seed=0):
    worst = 0.0
    for f in f_values:
        ray, s = _center_hit(float(f))
        q = orc.footprint_by_quadrature(ray, s, h=h)
        worst = max(worst, abs(q - mk.footprint(float(f))))
    return CheckResult("footprint", worst <= 1e-7, worst, 1e-7,
                       detail=f"quadrature vs closed form, "
                              f"{len(f_values)} kernel values, h={h:g}")


@_timed
def check_h_independence(f=2.0, hs=(1e-2, 1e-3, 1e-4), seed=0):
    ray, s = _center_hit(f)
    vals = [orc.footprint_by_quadrature(ray, s, h=h) for h in hs]
    spread = max(vals) - min(vals)
    return CheckResult("h_independence", spread <= 1e-7, spread, 1e-7,
                       detail=f"f={f:g}, h in {list(hs)}")


@_timed
def check_fast_path(seed=0):
    grid = np.linspace(0.05, 4.28, 2001)
    exact = mk.footprint(grid)
    poly = mk.footprint(grid, mk.FootprintConfig(fast_path=True))
    dev = float(np.max(np.abs(poly - exact)) / mk.footprint(4.28))
    return CheckResult("fast_path", dev <= 0.05, dev, 0.05,
                       detail="scale-relative deviation of the power-law "
                              "approximation; pointwise error is O(1) as "
                              "f -> 0 by design")


@_timed
def check_compositing(n_rays=120, seed=0, mode="refined"):
    rng = np.random.default_rng(seed)
    cfg = ren.RenderConfig(mode=mode)
    worst = 0.0
    biased_high_f = 0.0
    for _ in range(n_rays):
        ray, ss = random_separated_scene(rng)
        recs = sf.intersect_all(ray, ss, merge=True)
        if not recs:
            continue
        C, _, _, _ = ren.composite_refined(recs, _record_colors(ss, recs),
                                           cfg)
        # slab tolerance an order below the certified bound keeps the
        # reference honest without the full-depth refinement cost
        Cq, _, _ = orc.render_by_quadrature(ray, ss, ss.colors, h=1e-3,
                                            tol=1e-7)
        dev = float(np.max(np.abs(C - Cq)))
        worst = max(worst, dev)
        if max(r.f for r in recs) > 1.0:
            biased_high_f = max(biased_high_f, dev)
    detail = f"{n_rays} random separated rays vs quadrature"
    if mode == "classic":
        detail += (f"; classic bias at f>1 reaches {biased_high_f:.2e} "
                   "(expected: the refined backend removes it)")
    return CheckResult("compositing", worst <= 1e-6, worst, 1e-6,
                       detail=detail, expect_fail=(mode == "classic"))


@_timed
def check_merge(n_runs=200, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    # skip heuristics off: a faint member below the opacity floor would
    # be dropped unmerged yet folded into the merged record
    cfg = ren.RenderConfig(opacity_floor=0.0, early_exit=0.0)
    for _ in range(n_runs):
        ray, ss = coincident_run_scene(rng)
        rm = sf.intersect_all(ray, ss, merge=True)
        ru = sf.intersect_all(ray, ss, merge=False)
        Cm, _, _, _ = ren.composite_refined(rm, _record_colors(ss, rm), cfg)
        Cu, _, _, _ = ren.composite_refined(ru, _record_colors(ss, ru), cfg)
        worst = max(worst, float(np.max(np.abs(Cm - Cu))))
    return CheckResult("merge", worst <= 1e-12, worst, 1e-12,
                       detail=f"{n_runs} coincident runs, merged vs "
                              "member-by-member compositing")


@_timed
def check_oplus(n_pairs=10000, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.0, 4.2, n_pairs)
    b = rng.uniform(0.0, 4.2, n_pairs)
    c = rng.uniform(0.0, 3.0, n_pairs)
    if not np.array_equal(mk.oplus(a, b), mk.oplus(b, a)):
        return CheckResult("oplus", False, float("inf"), 1e-9,
                           detail="commutativity broke")
    assoc = float(np.max(np.abs(
        mk.oplus(mk.oplus(a, b), c) - mk.oplus(a, mk.oplus(b, c)))))
    # additivity must dodge the clamp: draw in S space so S(a)+S(b)
    # stays below S(f_max)
    smax = mk.footprint(4.28)
    sa = rng.uniform(0.0, smax, n_pairs)
    sb = rng.uniform(0.0, smax - sa)
    fa, fb = mk.s_inverse(sa), mk.s_inverse(sb)
    add = float(np.max(np.abs(
        mk.footprint(mk.oplus(fa, fb)) - (mk.footprint(fa)
                                          + mk.footprint(fb)))))
    worst = max(assoc, add)
    return CheckResult("oplus", worst <= 1e-9, worst, 1e-9,
                       detail=f"{n_pairs} pairs; commutativity bitwise, "
                              f"assoc {assoc:.2e}, additivity {add:.2e}")


def _fd_scene(rng, n=2, color_dim=3, kind="rgb"):
    centers = rng.uniform(-0.6, 0.6, (n, 3))
    q = np.linalg.qr(rng.normal(size=(n, 3, 3)))[0]
    det = np.linalg.det(q)
    q[det < 0, :, 2] *= -1.0
    ss = sf.SurfelSet(centers, np.ascontiguousarray(q[:, :, 0]),
                      np.ascontiguousarray(q[:, :, 1]),
                      rng.uniform(0.08, 0.3, (n, 2)),
                      rng.uniform(0.8, 3.0, n),
                      rng.uniform(0.1, 0.9, (n, color_dim)),
                      kind, np.arange(n))
    if kind in ("sh", "latent"):
        ss.colors = rng.normal(0.0, 0.15, (n, color_dim))
        if kind == "sh":
            ss.colors[:, 0] = 0.8
    return ss


def _axis_rotation(comp, eps):
    k = np.zeros(3)
    k[comp] = 1.0
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]],
                  [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(eps) * K + (1.0 - np.cos(eps)) * (K @ K)


def _perturbed(ss, field, idx, comp, eps):
    s = ss.copy()
    if field == "centers":
        s.centers[idx, comp] += eps
    elif field == "log_scales":
        s.scales[idx, comp] *= np.exp(eps)
    elif field == "log_weights":
        s.weights[idx] *= np.exp(eps)
    elif field == "colors":
        s.colors[idx, comp] += eps
    elif field == "frames":
        R = _axis_rotation(comp, eps)
        s.tangent_u[idx] = R @ s.tangent_u[idx]
        s.tangent_v[idx] = R @ s.tangent_v[idx]
    else:
        raise ValueError(field)
    return s


@_timed
def check_gradients(n_scenes=8, n_sh=1, n_latent=1, seed=0):
    rng = np.random.default_rng(seed)
    cam = ren.Camera.look_at(eye=(0.0, 0.1, -2.2), target=(0.0, 0.0, 0.0),
                             up=(0.0, 1.0, 0.0), fx=6.0, fy=6.0,
                             width=4, height=4)
    cfg = ren.RenderConfig(block=8)
    eps = 1e-6
    worst = 0.0
    classes = [("centers", 3), ("frames", 3), ("log_scales", 2),
               ("log_weights", 1), ("colors", 3)]

    def run_scene(ss, scfg=None, net=None, coords=None):
        nonlocal worst
        A = rng.normal(size=(4, 4, 3))
        B = rng.normal(size=(4, 4))
        E = rng.normal(size=(4, 4))

        def probe(s, network=net):
            buf = ren.render(cam, s, cfg, shading_cfg=scfg, net=network)
            return (np.sum(A * buf.color)
                    + np.sum(B * np.where(buf.depth_valid, buf.depth, 0.0))
                    + np.sum(E * buf.transmittance))

        buf = ren.render(cam, ss, cfg, shading_cfg=scfg, net=net)
        db = ren.zero_dbuffers(buf)
        db.d_color = A.copy()
        db.d_depth = B.copy()
        db.d_transmittance = E.copy()
        grads = ren.backward(cam, ss, buf, db)
        todo = coords
        if todo is None:
            todo = [(f, i, c) for f, nc in classes
                    for i in range(len(ss)) for c in range(nc)]
        for field, idx, comp in todo:
            fd = (probe(_perturbed(ss, field, idx, comp, eps))
                  - probe(_perturbed(ss, field, idx, comp, -eps))) \
                / (2 * eps)
            gmat = getattr(grads, field)
            an = gmat[idx] if gmat.ndim == 1 else gmat[idx, comp]
            worst = max(worst, abs(an - fd) / max(abs(fd), 1e-3))
        return grads, probe

    for _ in range(n_scenes):
        run_scene(_fd_scene(rng, n=2))

    def spots(n_color, color_dim):
        cs = [("colors", int(rng.integers(2)), int(rng.integers(color_dim)))
              for _ in range(n_color)]
        return cs + [("centers", int(rng.integers(2)),
                      int(rng.integers(3))),
                     ("frames", int(rng.integers(2)), int(rng.integers(3))),
                     ("log_scales", int(rng.integers(2)),
                      int(rng.integers(2))),
                     ("log_weights", int(rng.integers(2)), 0)]

    # view-dependent color models: spot checks per parameter class
    for _ in range(n_sh):
        run_scene(_fd_scene(rng, n=2, color_dim=48, kind="sh"),
                  coords=spots(4, 48))

    scfg = shd.ShadingConfig(color_kind="latent")
    for k in range(n_latent):
        net = shd.ShadingNet(scfg, rng=np.random.default_rng(seed + 7 + k))
        lat = _fd_scene(rng, n=2, color_dim=scfg.latent_dim, kind="latent")
        grads, probe = run_scene(lat, scfg=scfg, net=net,
                                 coords=spots(3, scfg.latent_dim))
        for name in ("W1", "b2", "W3"):
            flat = net.params[name].reshape(-1)
            j = int(rng.integers(flat.size))
            old = flat[j]
            flat[j] = old + eps
            up = probe(lat)
            flat[j] = old - eps
            dn = probe(lat)
            flat[j] = old
            fd = (up - dn) / (2 * eps)
            an = grads.net[name].reshape(-1)[j]
            worst = max(worst, abs(an - fd) / max(abs(fd), 1e-3))

    total = n_scenes + n_sh + n_latent
    return CheckResult("gradients", worst <= 1e-4, worst, 1e-4,
                       detail=f"analytic vs central differences on {total} "
                              "two-surfel arrangements; geometry classes "
                              "swept fully, view-dependent color models "
                              "spot-checked per class")


@_timed
def check_continuity(steps=1000, seed=0):
    def plane(z, sid):
        return sf.Surfel(center=np.array([0.0, 0.0, z]),
                         tangent_u=np.array([1.0, 0.0, 0.0]),
                         tangent_v=np.array([0.0, 1.0, 0.0]),
                         scale_u=0.5, scale_v=0.5, weight=2.0, id=sid)

    cam = ren.Camera(fx=4.0, fy=4.0, cx=0.5, cy=0.5, width=1, height=1,
                     rotation=np.eye(3), translation=np.zeros(3))

    def sweep(blend):
        hook = cp.ray_blender(cp.BlendConfig(mode="per_ray")) if blend \
            else None
        cols = []
        for s in np.linspace(-0.05, 0.05, steps + 1):
            ss = sf.SurfelSet.from_surfels([plane(1.5, 0),
                                            plane(1.5 + s, 1)])
            ss.colors = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
            ss.color_kind = "rgb"
            buf = ren.render_reference(cam, ss, merge=False,
                                       ray_colors_fn=hook)
            cols.append(buf.color[0, 0].copy())
        return np.max(np.abs(np.diff(np.array(cols), axis=0)), axis=1)

    d_blend = sweep(True)
    d_raw = sweep(False)
    mx = float(d_blend.max())
    bound = float(5.0 * np.median(d_blend))
    jump_ok = float(d_raw.max()) >= 10.0 * bound
    return CheckResult("continuity", mx <= bound and jump_ok, mx, bound,
                       detail=f"depth-swap sweep, {steps} steps; raw jump "
                              f"{d_raw.max():.2e} vs blended max {mx:.2e}",
                       aux={"raw_max": float(d_raw.max()),
                            "blend_median": float(np.median(d_blend))})


@_timed
def check_knn(n=500, k=10, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, n)
    anchors = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    centers = anchors[labels] + rng.normal(0.0, 0.08, (n, 3))
    q = np.linalg.qr(rng.normal(size=(n, 3, 3)))[0]
    ss = sf.SurfelSet(centers, np.ascontiguousarray(q[:, :, 0]),
                      np.ascontiguousarray(q[:, :, 1]),
                      np.full((n, 2), 0.05), rng.uniform(0.3, 3.0, n),
                      rng.uniform(0.0, 1.0, (n, 3)), "rgb", np.arange(n))

    table = cp.knn(centers, k, method="grid")
    d2 = np.sum((centers[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    brute = np.lexsort((np.tile(np.arange(n), (n, 1)), d2))[:, :k]
    if not np.array_equal(table, brute):
        bad = int(np.sum(np.any(table != brute, axis=1)))
        return CheckResult("knn", False, float(bad), 0.0,
                           detail=f"{bad} neighbor rows differ from the "
                                  "exhaustive scan")

    chat, _ = cp.blend_spatial(ss, table, tau=100.0)
    diff = centers[:, None, :] - centers[brute]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    B = np.exp(-100.0 * dist) * (-np.expm1(-ss.weights))[brute]
    P = B / B.sum(axis=1)[:, None]
    want = (P[:, :, None] * ss.colors[brute]).sum(axis=1)
    exact = np.array_equal(chat, want)
    dev = float(np.max(np.abs(chat - want)))
    return CheckResult("knn", exact, dev, 0.0,
                       detail=f"neighbor table exact on {n} clustered "
                              "centers; restricted blend bitwise")


CHECKS = {
    "footprint": check_footprint,
    "h_independence": check_h_independence,
    "fast_path": check_fast_path,
    "compositing": check_compositing,
    "merge": check_merge,
    "oplus": check_oplus,
    "gradients": check_gradients,
    "continuity": check_continuity,
    "knn": check_knn,
}


def run_all(mode="refined", seed=0):
    out = []
    for name, fn in CHECKS.items():
        kw = {"seed": seed}
        if name == "compositing":
            kw["mode"] = mode
        out.append(fn(**kw))
    return out
