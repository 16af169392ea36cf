"""Compositing of surfel intersections into images, and its exact adjoint.

Two render paths produce identical results on tie-free scenes:

* render_reference: per-pixel loop over intersect_all + record-level
  compositing. Handles exactly coincident hits by merging them, which is
  what the exactness theorem requires; kept simple on purpose.
* render: block-vectorized engine. Pixels are processed in square blocks
  against a conservatively culled surfel list; compositing runs on flat
  (pixel, surfel) pair arrays with segmented scans. Assumes hits along a
  ray have distinct depths (coincidences are a measure-zero event for
  optimized scenes; the reference path covers them).

The refined mode converts footprints through alpha = 1 - exp(-rho) and
attenuates with exp(-rho) exactly, so compositing commutes with kernel
composition. The classic mode reproduces the usual splatting shortcut
alpha = min(f, 0.99) and is kept as an ablation.

Gradient accumulation order is fixed (pair scans in pixel-major order,
per-surfel reduction via bincount, blocks reduced in index order), so
backward passes are bitwise reproducible, including with workers > 1.
"""

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import mathkernel as mk
from . import shading as sh
from . import surfel as sf

EARLY_EXIT_T = 1e-4
OPACITY_FLOOR = 1.0 / 255.0
WEIGHT_SUM_VALID = 1e-6
CLASSIC_ALPHA_MAX = 0.99


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class Camera:
    """Pinhole camera, +z forward, +y down, rays through pixel centers."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray      # world-from-camera
    translation: np.ndarray   # camera center in world coordinates
    near_clip: float = 1e-4

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-9:
            raise ValueError("rotation must be orthonormal")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), fx=128.0, fy=128.0,
                cx=None, cy=None, width=128, height=128, near_clip=1e-4):
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z = z / np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        nx = np.linalg.norm(x)
        if nx < 1e-12:
            raise ValueError("view direction parallel to up")
        x = x / nx
        y = np.cross(z, x)
        R = np.stack([x, y, z], axis=1)
        return cls(fx=fx, fy=fy,
                   cx=width / 2.0 if cx is None else cx,
                   cy=height / 2.0 if cy is None else cy,
                   width=width, height=height, rotation=R, translation=eye,
                   near_clip=near_clip)

    def pixel_directions(self, rows, cols):
        """World-space unit ray directions through given pixel centers."""
        xs = (np.asarray(cols, dtype=np.float64) + 0.5 - self.cx) / self.fx
        ys = (np.asarray(rows, dtype=np.float64) + 0.5 - self.cy) / self.fy
        d = np.stack([xs, ys, np.ones_like(xs)], axis=-1) @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def ray(self, row, col):
        d = self.pixel_directions(np.array([row]), np.array([col]))[0]
        return sf.Ray(origin=self.translation, direction=d)

    def project(self, points):
        """(u, v, view z) for world points; u/v valid only where z > 0."""
        pc = (np.asarray(points, dtype=np.float64) - self.translation) \
            @ self.rotation
        z = pc[:, 2]
        safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
        u = self.fx * pc[:, 0] / safe + self.cx
        v = self.fy * pc[:, 1] / safe + self.cy
        return u, v, z


# ---------------------------------------------------------------------------
# configuration and buffers
# ---------------------------------------------------------------------------

def _black():
    return np.zeros(3)


@dataclasses.dataclass
class RenderConfig:
    footprint: mk.FootprintConfig = mk.DEFAULT_CONFIG
    mode: str = "refined"          # "refined" | "classic"
    sorting: str = "per_ray"       # "per_ray" | "global"
    background: np.ndarray = dataclasses.field(default_factory=_black)
    cutoff: float = sf.DEFAULT_CUTOFF
    opacity_floor: float = OPACITY_FLOOR
    early_exit: float = EARLY_EXIT_T
    top_k: int = 24
    block: int = 16
    workers: int = 1

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)
        if self.mode not in ("refined", "classic"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.sorting not in ("per_ray", "global"):
            raise ValueError(f"unknown sorting {self.sorting!r}")


@dataclasses.dataclass
class RenderBuffers:
    color: np.ndarray           # (H, W, C), background composited
    depth: np.ndarray           # (H, W), normalized expected depth, 0 invalid
    depth_valid: np.ndarray     # (H, W) bool, weight_sum > 1e-6
    depth_sum: np.ndarray       # (H, W), raw sum weight * t
    weight_sum: np.ndarray      # (H, W)
    normal: np.ndarray          # (H, W, 3), raw sum weight * oriented normal
    transmittance: np.ndarray   # (H, W)
    topk_weight: np.ndarray     # (H, W, K) leading weights in composite order
    topk_t: np.ndarray          # (H, W, K)
    topk_sid: np.ndarray        # (H, W, K) surfel row index, -1 empty
    topk_count: np.ndarray      # (H, W)
    cache: dict = None


def zero_grad_buffers(surfels, color_dim):
    return GradBuffers(
        centers=np.zeros((len(surfels), 3)),
        frames=np.zeros((len(surfels), 3)),
        log_scales=np.zeros((len(surfels), 2)),
        log_weights=np.zeros(len(surfels)),
        colors=np.zeros((len(surfels), color_dim)),
        net=None)


@dataclasses.dataclass
class GradBuffers:
    centers: np.ndarray      # (N, 3)
    frames: np.ndarray       # (N, 3) axis-angle increments about the frame
    log_scales: np.ndarray   # (N, 2)
    log_weights: np.ndarray  # (N,)
    colors: np.ndarray       # (N, C): rgb, SH coeffs, or latents
    net: dict = None         # MLP parameter grads for the latent kind

    def scaled(self, s):
        return GradBuffers(self.centers * s, self.frames * s,
                           self.log_scales * s, self.log_weights * s,
                           self.colors * s,
                           None if self.net is None else
                           {k: v * s for k, v in self.net.items()})

    def add_(self, other):
        self.centers += other.centers
        self.frames += other.frames
        self.log_scales += other.log_scales
        self.log_weights += other.log_weights
        self.colors += other.colors
        if other.net is not None:
            if self.net is None:
                self.net = {k: v.copy() for k, v in other.net.items()}
            else:
                for k in self.net:
                    self.net[k] += other.net[k]
        return self


def zero_dbuffers(buffers):
    H, W, C = buffers.color.shape
    K = buffers.topk_weight.shape[2]
    return DBuffers(
        d_color=np.zeros((H, W, C)), d_depth=np.zeros((H, W)),
        d_weight_sum=np.zeros((H, W)), d_normal=np.zeros((H, W, 3)),
        d_transmittance=np.zeros((H, W)),
        d_topk_weight=np.zeros((H, W, K)), d_topk_t=np.zeros((H, W, K)))


@dataclasses.dataclass
class DBuffers:
    """Upstream gradients with respect to RenderBuffers fields.

    d_depth is taken with respect to the normalized depth map (invalid
    pixels contribute nothing); everything else matches its buffer.
    """
    d_color: np.ndarray
    d_depth: np.ndarray
    d_weight_sum: np.ndarray
    d_normal: np.ndarray
    d_transmittance: np.ndarray
    d_topk_weight: np.ndarray
    d_topk_t: np.ndarray


# ---------------------------------------------------------------------------
# record-level compositing (reference path)
# ---------------------------------------------------------------------------

def _check_sorted(records):
    for a, b in zip(records, records[1:]):
        if b.t < a.t:
            raise ValueError("records not sorted by depth")


def _alphas(records, cfg):
    f = np.array([r.f for r in records])
    if cfg.mode == "refined":
        rho = mk.footprint(f, cfg.footprint)
        alpha = -np.expm1(-rho)
    else:
        alpha = np.minimum(f, CLASSIC_ALPHA_MAX)
        rho = None
    return f, rho, alpha


def composite_refined(records, colors, cfg=None, background=None):
    """Front-to-back compositing with exact exponential attenuation.

    Returns (C, D_raw, T_final, weights); weights align with the input
    records (zero for skipped ones). C includes background * T_final.
    """
    cfg = cfg or RenderConfig()
    background = cfg.background if background is None else np.asarray(background)
    _check_sorted(records)
    n = len(records)
    weights = np.zeros(n)
    if n == 0:
        return background.astype(np.float64).copy(), 0.0, 1.0, weights
    colors = np.asarray(colors, dtype=np.float64)
    f, rho, alpha = _alphas(records, cfg)
    C = np.zeros(colors.shape[1])
    D = 0.0
    trans = 1.0
    log_trans = 0.0
    for i in range(n):
        if alpha[i] < cfg.opacity_floor:
            continue
        if trans < cfg.early_exit:
            break
        w = alpha[i] * trans
        weights[i] = w
        C += w * colors[i]
        D += w * records[i].t
        if cfg.mode == "refined":
            log_trans -= rho[i]
            trans = math.exp(log_trans)
        else:
            trans *= 1.0 - alpha[i]
    return C + trans * background, D, trans, weights


def composite_classic(records, colors, cfg=None, background=None):
    """Ablation backend: opacity is the clamped kernel value itself."""
    cfg = dataclasses.replace(cfg or RenderConfig(), mode="classic")
    return composite_refined(records, colors, cfg, background)


def composite_backward(records, colors, cfg, adj, background=None):
    """Adjoint of composite_refined/classic on one record list.

    adj: dict with any of d_C (channels,), d_D, d_T, d_weights (n,).
    Returns dict with d_colors (n, channels), d_t (n,), d_f (n,).
    Records skipped in the forward (floor, early exit) get zeros; the
    floor and exit thresholds are treated as constants, so gradients are
    exact away from those boundaries.
    """
    cfg = cfg or RenderConfig()
    background = cfg.background if background is None else np.asarray(background)
    _check_sorted(records)
    n = len(records)
    colors = np.asarray(colors, dtype=np.float64)
    out = {"d_colors": np.zeros_like(colors), "d_t": np.zeros(n),
           "d_f": np.zeros(n)}
    if n == 0:
        return out
    d_C = np.asarray(adj.get("d_C", np.zeros(colors.shape[1])), dtype=np.float64)
    d_D = float(adj.get("d_D", 0.0))
    d_T = float(adj.get("d_T", 0.0))
    d_w_extra = np.asarray(adj.get("d_weights", np.zeros(n)), dtype=np.float64)

    f, rho, alpha = _alphas(records, cfg)
    # replay the forward to recover per-record entry transmittance
    T_in = np.zeros(n)
    live = np.zeros(n, dtype=bool)
    trans = 1.0
    for i in range(n):
        if alpha[i] < cfg.opacity_floor:
            continue
        if trans < cfg.early_exit:
            break
        T_in[i] = trans
        live[i] = True
        trans *= math.exp(-rho[i]) if cfg.mode == "refined" else 1.0 - alpha[i]
    T_fin = trans

    w = np.where(live, alpha * T_in, 0.0)
    gw = np.array([d_C @ colors[i] for i in range(n)]) \
        + d_D * np.array([r.t for r in records]) + d_w_extra
    out["d_t"] = d_D * w
    out["d_colors"] = w[:, None] * d_C[None, :]
    g_T_total = d_T + float(d_C @ background)

    # suffix sum of gw_k * w_k over live records after i
    A = gw * w
    suffix = np.concatenate([np.cumsum(A[::-1])[::-1][1:], [0.0]])
    if cfg.mode == "refined":
        d_rho = np.where(live,
                         gw * np.exp(-np.where(live, rho, 0.0)) * T_in
                         - suffix - g_T_total * T_fin, 0.0)
        d_f = d_rho * mk.footprint_grad(f, cfg.footprint)
    else:
        one_m = np.where(live, 1.0 - alpha, 1.0)
        d_alpha = np.where(live,
                           gw * T_in - (suffix + g_T_total * T_fin) / one_m,
                           0.0)
        d_f = np.where(f < CLASSIC_ALPHA_MAX, d_alpha, 0.0)
    out["d_f"] = d_f
    return out


# ---------------------------------------------------------------------------
# per-view surfel colors
# ---------------------------------------------------------------------------

def view_colors(surfels, camera, shading_cfg=None, net=None):
    """Per-surfel color for this view and a cache for the backward pass.

    rgb surfels are view independent. SH and latent kinds evaluate in the
    direction from the camera center to each surfel center.
    """
    kind = surfels.color_kind
    if kind == "none":
        raise ValueError("surfel set has no colors")
    if kind == "rgb":
        return surfels.colors, {"kind": "rgb"}
    delta = surfels.centers - camera.translation
    omega = sh.normalize_dir(delta)
    if kind == "sh":
        bands = shading_cfg.sh_bands if shading_cfg else 4
        rgb, cache = sh.eval_colors_sh(surfels.colors, omega, bands)
        cache.update(kind="sh", delta=delta, bands=bands)
        return rgb, cache
    if kind == "latent":
        if net is None:
            raise ValueError("latent colors need a ShadingNet")
        cfg = shading_cfg or sh.ShadingConfig(color_kind="latent")
        normals = surfels.normals()
        omega_o = sh.reflect(omega, normals)
        enc_w = sh.sh_basis(omega, cfg.encoding_degree)
        enc_wo = sh.sh_basis(omega_o, cfg.encoding_degree)
        rgb, ncache = net.forward(surfels.colors, enc_w, enc_wo)
        cache = {"kind": "latent", "delta": delta, "omega": omega,
                 "omega_o": omega_o, "normals": normals, "net": net,
                 "ncache": ncache, "cfg": cfg}
        return rgb, cache
    raise ValueError(f"unknown color kind {kind!r}")


def view_colors_backward(cache, d_rgb):
    """Maps d(view color) to (d_colors, d_centers, d_frame_phi, net_grads).

    d_centers covers the dependence through the view direction only; the
    frame term is nonzero only for the latent kind (reflection uses the
    surfel normal).
    """
    kind = cache["kind"]
    if kind == "rgb":
        return d_rgb, 0.0, None, None
    if kind == "sh":
        d_coeffs, d_omega = sh.eval_colors_sh_backward(cache, d_rgb)
        d_centers = sh.normalize_dir_backward(cache["delta"], d_omega)
        return d_coeffs, d_centers, None, None
    net = cache["net"]
    d_lat, d_ew, d_eo, net_grads = net.backward(cache["ncache"], d_rgb)
    deg = cache["cfg"].encoding_degree
    gb_w = sh.sh_basis_grad(cache["omega"], deg)
    gb_wo = sh.sh_basis_grad(cache["omega_o"], deg)
    d_omega = np.einsum("nt,ntk->nk", d_ew, gb_w)
    d_omega_o = np.einsum("nt,ntk->nk", d_eo, gb_wo)
    d_omega2, d_n = sh.reflect_backward(cache["omega"], cache["normals"],
                                        d_omega_o)
    d_centers = sh.normalize_dir_backward(cache["delta"], d_omega + d_omega2)
    # normal gradient enters the frame as n x g
    d_phi = np.cross(cache["normals"], d_n)
    return d_lat, d_centers, d_phi, net_grads


# ---------------------------------------------------------------------------
# reference renderer (per-pixel loop)
# ---------------------------------------------------------------------------

def _new_buffers(H, W, C, K):
    return RenderBuffers(
        color=np.zeros((H, W, C)), depth=np.zeros((H, W)),
        depth_valid=np.zeros((H, W), dtype=bool),
        depth_sum=np.zeros((H, W)), weight_sum=np.zeros((H, W)),
        normal=np.zeros((H, W, 3)), transmittance=np.ones((H, W)),
        topk_weight=np.zeros((H, W, K)), topk_t=np.zeros((H, W, K)),
        topk_sid=np.full((H, W, K), -1, dtype=np.int64),
        topk_count=np.zeros((H, W), dtype=np.int64))


def render_reference(camera, surfels, cfg=None, shading_cfg=None, net=None,
                     merge=True, ray_colors_fn=None):
    """Per-pixel loop renderer; the engine's correctness anchor.

    ray_colors_fn, when given, maps (records, colors) to per-record
    colors before compositing (hook for per-ray color smoothing).
    """
    cfg = cfg or RenderConfig()
    colors_all, _ = view_colors(surfels, camera, shading_cfg, net)
    normals_all = surfels.normals()
    row = {int(sid): k for k, sid in enumerate(surfels.ids)}
    H, W = camera.height, camera.width
    C = colors_all.shape[1]
    buf = _new_buffers(H, W, C, cfg.top_k)
    buf.color[:] = cfg.background
    zkey = None
    if cfg.sorting == "global":
        _, _, z = camera.project(surfels.centers)
        zkey = {int(sid): z[k] for k, sid in enumerate(surfels.ids)}
    for i in range(H):
        for j in range(W):
            ray = camera.ray(i, j)
            recs = sf.intersect_all(ray, surfels, near_clip=camera.near_clip,
                                    cutoff=cfg.cutoff, merge=False)
            if zkey is not None:
                recs.sort(key=lambda r: zkey[r.surfel_id])
            rcolors = np.array([colors_all[row[r.surfel_id]] for r in recs]) \
                if recs else np.zeros((0, C))
            if merge and cfg.sorting == "per_ray":
                recs, rcolors = sf.merge_coincident(
                    recs, cfg.footprint, colors=rcolors,
                    tie_tol=sf.TIE_TOLERANCE_FACTOR * surfels.bbox_diagonal())
            if ray_colors_fn is not None and recs:
                rcolors = ray_colors_fn(recs, rcolors)
            if cfg.sorting == "global":
                # compose in the given order without re-sorting by depth
                Cpx, D, T, w = _composite_unsorted(recs, rcolors, cfg)
            else:
                Cpx, D, T, w = composite_refined(recs, rcolors, cfg)
            buf.color[i, j] = Cpx
            buf.depth_sum[i, j] = D
            buf.transmittance[i, j] = T
            ws = w.sum()
            buf.weight_sum[i, j] = ws
            if ws > WEIGHT_SUM_VALID:
                buf.depth[i, j] = D / ws
                buf.depth_valid[i, j] = True
            k = 0
            for ridx, rec in enumerate(recs):
                if w[ridx] == 0.0 or k >= cfg.top_k:
                    continue
                buf.topk_weight[i, j, k] = w[ridx]
                buf.topk_t[i, j, k] = rec.t
                buf.topk_sid[i, j, k] = row.get(rec.surfel_id, -1)
                k += 1
            buf.topk_count[i, j] = k
            for ridx, rec in enumerate(recs):
                if w[ridx] == 0.0:
                    continue
                nrm = normals_all[row[rec.surfel_id]] \
                    if rec.surfel_id in row else None
                if nrm is None:
                    continue
                sgn = -np.sign(float(ray.direction @ nrm)) or 1.0
                buf.normal[i, j] += w[ridx] * sgn * nrm
    buf.cache = {"config": cfg, "shading_cfg": shading_cfg, "net": net,
                 "path": "reference"}
    return buf


def _composite_unsorted(records, colors, cfg):
    """Compositing in list order (global sorting ignores per-ray depth)."""
    background = cfg.background
    n = len(records)
    weights = np.zeros(n)
    if n == 0:
        return background.copy(), 0.0, 1.0, weights
    colors = np.asarray(colors, dtype=np.float64)
    f, rho, alpha = _alphas(records, cfg)
    C = np.zeros(colors.shape[1])
    D = 0.0
    trans = 1.0
    for i in range(n):
        if alpha[i] < cfg.opacity_floor:
            continue
        if trans < cfg.early_exit:
            break
        w = alpha[i] * trans
        weights[i] = w
        C += w * colors[i]
        D += w * records[i].t
        trans *= math.exp(-rho[i]) if cfg.mode == "refined" else 1.0 - alpha[i]
    return C + trans * background, D, trans, weights


# ---------------------------------------------------------------------------
# block engine
# ---------------------------------------------------------------------------

def _conservative_boxes(camera, surfels, cfg):
    """Per-surfel conservative pixel-space bounds (lo_u, hi_u, lo_v, hi_v).

    Bound: for a bounding sphere (center view-space (xc, yc, zc), radius R)
    entirely in front of the camera,
      |fx x/z - fx xc/zc| <= fx R (zc + |xc|) / ((zc - R) zc),
    and likewise for y. Spheres touching the camera plane get infinite
    boxes; spheres entirely behind are dropped.
    """
    R = cfg.cutoff * surfels.scales.max(axis=1)
    pc = (surfels.centers - camera.translation) @ camera.rotation
    xc, yc, zc = pc[:, 0], pc[:, 1], pc[:, 2]
    drop = zc < -R
    unbounded = (~drop) & (zc - R <= 1e-9)
    safe_z = np.where(zc - R > 1e-9, zc - R, 1.0)
    safe_c = np.where(np.abs(zc) > 1e-12, zc, 1.0)
    u = camera.fx * xc / safe_c + camera.cx
    v = camera.fy * yc / safe_c + camera.cy
    ru = camera.fx * R * (np.abs(zc) + np.abs(xc)) / (safe_z * np.abs(safe_c))
    rv = camera.fy * R * (np.abs(zc) + np.abs(yc)) / (safe_z * np.abs(safe_c))
    lo_u = np.where(unbounded, -np.inf, u - ru)
    hi_u = np.where(unbounded, np.inf, u + ru)
    lo_v = np.where(unbounded, -np.inf, v - rv)
    hi_v = np.where(unbounded, np.inf, v + rv)
    lo_u[drop], hi_u[drop] = np.inf, -np.inf      # empty interval
    lo_v[drop], hi_v[drop] = np.inf, -np.inf
    return lo_u, hi_u, lo_v, hi_v


def _f_floor(cfg):
    """Footprint below which converted opacity sinks under the floor."""
    if cfg.opacity_floor <= 0.0:
        return 0.0
    if cfg.mode == "refined":
        return float(mk.opacity_floor_kernel_value(cfg.footprint,
                                                   cfg.opacity_floor))
    return cfg.opacity_floor


def _block_pairs(camera, surfels, cfg, block, boxes, zrank):
    """Flat (pixel, surfel) interaction arrays for one pixel block.

    Returns None when nothing survives culling. Pair order is pixel-major
    and depth- (or global-z-) sorted within a pixel; all downstream scans
    rely on that order.
    """
    r0, r1, c0, c1 = block
    lo_u, hi_u, lo_v, hi_v = boxes
    act = np.nonzero((hi_u >= c0) & (lo_u <= c1) &
                     (hi_v >= r0) & (lo_v <= r1))[0]
    if len(act) == 0:
        return None
    rows = np.arange(r0, r1 + 1)
    cols = np.arange(c0, c1 + 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    dirs = camera.pixel_directions(rr.ravel(), cc.ravel())      # (B, 3)
    B = dirs.shape[0]

    n_a = surfels.normals()[act]                                # (A, 3)
    m_a = surfels.centers[act]
    tu_a, tv_a = surfels.tangent_u[act], surfels.tangent_v[act]
    su_a, sv_a = surfels.scales[act, 0], surfels.scales[act, 1]
    w_a = surfels.weights[act]

    o = camera.translation
    denom = dirs @ n_a.T                                        # (B, A)
    numer = np.einsum("ak,ak->a", m_a - o, n_a)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = numer[None, :] / denom
    r_vec = t[:, :, None] * dirs[:, None, :] + (o - m_a)[None, :, :]
    u = np.einsum("bak,ak->ba", r_vec, tu_a) / su_a
    v = np.einsum("bak,ak->ba", r_vec, tv_a) / sv_a
    q = u * u + v * v
    f = w_a[None, :] * np.exp(-0.5 * q)
    valid = (np.abs(denom) >= 1e-9) & (t > camera.near_clip) \
        & (q <= cfg.cutoff * cfg.cutoff) & (f >= _f_floor(cfg)) \
        & np.isfinite(t)
    pix, aidx = np.nonzero(valid)
    if len(pix) == 0:
        return None
    key = t[pix, aidx] if cfg.sorting == "per_ray" else zrank[act[aidx]]
    order = np.lexsort((key, pix))
    pix, aidx = pix[order], aidx[order]
    return {
        "pix": pix, "sidx": act[aidx], "B": B, "dirs": dirs,
        "t": t[pix, aidx], "f": f[pix, aidx], "u": u[pix, aidx],
        "v": v[pix, aidx], "denom": denom[pix, aidx],
        "rows": rows, "cols": cols,
    }


def _segments(pix, vals, B):
    """Per-segment inclusive cumsum and totals for pixel-sorted pairs."""
    cs = np.cumsum(vals)
    first = np.zeros(len(pix), dtype=bool)
    first[0] = True
    first[1:] = pix[1:] != pix[:-1]
    start_pos = np.cumsum(first) - 1
    starts = np.nonzero(first)[0]
    base = (cs[starts] - vals[starts])[start_pos]
    inclusive = cs - base
    totals = np.bincount(pix, weights=vals, minlength=B)
    return inclusive, totals


def _pair_compositing(pairs, cfg):
    """Attenuations, entry transmittance, weights, live mask, topk ranks."""
    f = pairs["f"]
    if cfg.mode == "refined":
        rho = mk.footprint(f, cfg.footprint)
        att = rho
        alpha = -np.expm1(-rho)
    else:
        alpha = np.minimum(f, CLASSIC_ALPHA_MAX)
        att = -np.log1p(-alpha)
    incl, att_tot = _segments(pairs["pix"], att, pairs["B"])
    T_in = np.exp(-(incl - att))
    live = T_in >= cfg.early_exit
    w = np.where(live, alpha * T_in, 0.0)
    live_f = live.astype(np.float64)
    live_incl, live_tot = _segments(pairs["pix"], live_f, pairs["B"])
    rank = np.where(live, live_incl - 1, 0).astype(np.int64)
    T_fin = np.exp(-np.bincount(pairs["pix"], weights=np.where(live, att, 0.0),
                                minlength=pairs["B"]))
    return {"alpha": alpha, "att": att, "T_in": T_in, "live": live, "w": w,
            "rank": rank, "T_fin": T_fin, "f": f}


def _iter_blocks(camera, cfg):
    for r0 in range(0, camera.height, cfg.block):
        for c0 in range(0, camera.width, cfg.block):
            yield (r0, min(r0 + cfg.block - 1, camera.height - 1),
                   c0, min(c0 + cfg.block - 1, camera.width - 1))


def render(camera, surfels, cfg=None, shading_cfg=None, net=None,
           mode=None, sorting=None):
    """Block-vectorized forward render; equals render_reference on
    tie-free scenes."""
    cfg = cfg or RenderConfig()
    if mode is not None or sorting is not None:
        cfg = dataclasses.replace(cfg, mode=mode or cfg.mode,
                                  sorting=sorting or cfg.sorting)
    colors_all, vcache = view_colors(surfels, camera, shading_cfg, net)
    normals_all = surfels.normals()
    H, W = camera.height, camera.width
    C = colors_all.shape[1]
    buf = _new_buffers(H, W, C, cfg.top_k)
    boxes = _conservative_boxes(camera, surfels, cfg)
    zrank = None
    if cfg.sorting == "global":
        _, _, z = camera.project(surfels.centers)
        zrank = np.empty(len(surfels), dtype=np.int64)
        zrank[np.argsort(z, kind="stable")] = np.arange(len(surfels))

    def run_block(block):
        pairs = _block_pairs(camera, surfels, cfg, block, boxes, zrank)
        if pairs is None:
            return block, None
        comp = _pair_compositing(pairs, cfg)
        return block, (pairs, comp)

    blocks = list(_iter_blocks(camera, cfg))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(run_block, blocks))
    else:
        results = [run_block(b) for b in blocks]

    for block, payload in results:
        r0, r1, c0, c1 = block
        bh, bw = r1 - r0 + 1, c1 - c0 + 1
        if payload is None:
            buf.color[r0:r1 + 1, c0:c1 + 1] = cfg.background
            continue
        pairs, comp = payload
        B = pairs["B"]
        pix, sidx = pairs["pix"], pairs["sidx"]
        w, t = comp["w"], pairs["t"]
        csum = np.zeros((B, C))
        for ch in range(C):
            csum[:, ch] = np.bincount(pix, weights=w * colors_all[sidx, ch],
                                      minlength=B)
        T_fin = comp["T_fin"]
        color = csum + T_fin[:, None] * cfg.background
        dsum = np.bincount(pix, weights=w * t, minlength=B)
        wsum = np.bincount(pix, weights=w, minlength=B)
        sgn = np.where(pairs["denom"] > 0, -1.0, 1.0)
        nblend = np.zeros((B, 3))
        for k in range(3):
            nblend[:, k] = np.bincount(
                pix, weights=w * sgn * normals_all[sidx, k], minlength=B)

        sel = comp["live"] & (comp["rank"] < cfg.top_k) & (w > 0)
        tw = np.zeros((B, cfg.top_k))
        tt = np.zeros((B, cfg.top_k))
        tsid = np.full((B, cfg.top_k), -1, dtype=np.int64)
        tw[pix[sel], comp["rank"][sel]] = w[sel]
        tt[pix[sel], comp["rank"][sel]] = t[sel]
        tsid[pix[sel], comp["rank"][sel]] = sidx[sel]
        tcount = np.minimum(
            np.bincount(pix, weights=comp["live"].astype(np.float64),
                        minlength=B).astype(np.int64), cfg.top_k)

        shp = (bh, bw)
        buf.color[r0:r1 + 1, c0:c1 + 1] = color.reshape(shp + (C,))
        buf.depth_sum[r0:r1 + 1, c0:c1 + 1] = dsum.reshape(shp)
        buf.weight_sum[r0:r1 + 1, c0:c1 + 1] = wsum.reshape(shp)
        buf.normal[r0:r1 + 1, c0:c1 + 1] = nblend.reshape(shp + (3,))
        buf.transmittance[r0:r1 + 1, c0:c1 + 1] = T_fin.reshape(shp)
        buf.topk_weight[r0:r1 + 1, c0:c1 + 1] = tw.reshape(shp + (cfg.top_k,))
        buf.topk_t[r0:r1 + 1, c0:c1 + 1] = tt.reshape(shp + (cfg.top_k,))
        buf.topk_sid[r0:r1 + 1, c0:c1 + 1] = tsid.reshape(shp + (cfg.top_k,))
        buf.topk_count[r0:r1 + 1, c0:c1 + 1] = tcount.reshape(shp)

    valid = buf.weight_sum > WEIGHT_SUM_VALID
    buf.depth_valid = valid
    buf.depth = np.where(valid, buf.depth_sum / np.where(valid, buf.weight_sum,
                                                         1.0), 0.0)
    buf.cache = {"config": cfg, "shading_cfg": shading_cfg, "net": net,
                 "path": "engine"}
    return buf


def backward(camera, surfels, buffers, dbuffers):
    """Analytic adjoint of render. Recomputes pair data per block (the
    forward keeps no per-pair state) and accumulates per-surfel gradients
    deterministically."""
    if buffers.cache is None:
        raise ValueError("forward cache missing: render buffers were not "
                         "produced by render()")
    cfg = buffers.cache["config"]
    shading_cfg = buffers.cache["shading_cfg"]
    net = buffers.cache["net"]
    colors_all, vcache = view_colors(surfels, camera, shading_cfg, net)
    normals_all = surfels.normals()
    tu_all, tv_all = surfels.tangent_u, surfels.tangent_v
    su_all, sv_all = surfels.scales[:, 0], surfels.scales[:, 1]
    N = len(surfels)
    C = colors_all.shape[1]
    grads = zero_grad_buffers(surfels, surfels.colors.shape[1]
                              if surfels.colors is not None else C)
    d_view_color = np.zeros((N, C))

    # chain the normalized depth map back to raw sums once, globally
    vmask = buffers.depth_valid
    gD_img = np.where(vmask, dbuffers.d_depth /
                      np.where(vmask, buffers.weight_sum, 1.0), 0.0)
    gW_img = dbuffers.d_weight_sum - gD_img * buffers.depth
    gT_img = dbuffers.d_transmittance + dbuffers.d_color @ cfg.background

    zrank = None
    if cfg.sorting == "global":
        _, _, z = camera.project(surfels.centers)
        zrank = np.empty(N, dtype=np.int64)
        zrank[np.argsort(z, kind="stable")] = np.arange(N)
    boxes = _conservative_boxes(camera, surfels, cfg)

    def run_block(block):
        pairs = _block_pairs(camera, surfels, cfg, block, boxes, zrank)
        if pairs is None:
            return block, None
        comp = _pair_compositing(pairs, cfg)
        r0, r1, c0, c1 = block
        sl = (slice(r0, r1 + 1), slice(c0, c1 + 1))
        B = pairs["B"]
        pix, sidx = pairs["pix"], pairs["sidx"]
        w, t, f = comp["w"], pairs["t"], comp["f"]
        live = comp["live"]

        gC = dbuffers.d_color[sl].reshape(B, C)
        gDs = gD_img[sl].reshape(B)
        gWs = gW_img[sl].reshape(B)
        gNb = dbuffers.d_normal[sl].reshape(B, 3)
        gTt = gT_img[sl].reshape(B)
        gKw = dbuffers.d_topk_weight[sl].reshape(B, cfg.top_k)
        gKt = dbuffers.d_topk_t[sl].reshape(B, cfg.top_k)

        sgn = np.where(pairs["denom"] > 0, -1.0, 1.0)
        n_pair = normals_all[sidx]
        c_pair = colors_all[sidx]
        insel = live & (comp["rank"] < cfg.top_k)
        gw_topk = np.zeros(len(pix))
        gt_topk = np.zeros(len(pix))
        gw_topk[insel] = gKw[pix[insel], comp["rank"][insel]]
        gt_topk[insel] = gKt[pix[insel], comp["rank"][insel]]

        gw = np.einsum("pc,pc->p", gC[pix], c_pair) + gDs[pix] * t \
            + gWs[pix] + sgn * np.einsum("pk,pk->p", gNb[pix], n_pair) \
            + gw_topk
        gt_direct = gDs[pix] * w + gt_topk

        A = gw * w
        incl_A, tot_A = _segments(pix, A, B)
        suffix = tot_A[pix] - incl_A
        if cfg.mode == "refined":
            d_att = np.where(live, gw * np.exp(-comp["att"]) * comp["T_in"]
                             - suffix - gTt[pix] * comp["T_fin"][pix], 0.0)
            df = d_att * mk.footprint_grad(f, cfg.footprint)
        else:
            one_m = 1.0 - comp["alpha"]
            d_alpha = np.where(live, gw * comp["T_in"]
                               - (suffix + gTt[pix] * comp["T_fin"][pix])
                               / one_m, 0.0)
            df = np.where(f < CLASSIC_ALPHA_MAX, d_alpha, 0.0)

        # geometry chain
        u, v, denom = pairs["u"], pairs["v"], pairs["denom"]
        tu_p, tv_p = tu_all[sidx], tv_all[sidx]
        su_p, sv_p = su_all[sidx], sv_all[sidx]
        dirs_p = pairs["dirs"][pix]
        r_p = t[:, None] * dirs_p + (camera.translation - surfels.centers[sidx])
        du = -df * f * u
        dv = -df * f * v
        d_log_w = df * f
        d_log_su = -u * du
        d_log_sv = -v * dv
        dr = du[:, None] * tu_p / su_p[:, None] \
            + dv[:, None] * tv_p / sv_p[:, None]
        g_tu = du[:, None] * r_p / su_p[:, None]
        g_tv = dv[:, None] * r_p / sv_p[:, None]
        dt_total = gt_direct + np.einsum("pk,pk->p", dr, dirs_p)
        dm = -dr + dt_total[:, None] * n_pair / denom[:, None]
        g_n = -dt_total[:, None] * r_p / denom[:, None] \
            + gNb[pix] * (w * sgn)[:, None]
        dphi = np.cross(tu_p, g_tu) + np.cross(tv_p, g_tv) \
            + np.cross(n_pair, g_n)
        d_c_pair = w[:, None] * gC[pix]

        acc = {"centers": np.zeros((N, 3)), "frames": np.zeros((N, 3)),
               "log_scales": np.zeros((N, 2)), "log_weights": np.zeros(N),
               "view_color": np.zeros((N, C))}
        for k in range(3):
            acc["centers"][:, k] = np.bincount(sidx, weights=dm[:, k],
                                               minlength=N)
            acc["frames"][:, k] = np.bincount(sidx, weights=dphi[:, k],
                                              minlength=N)
        acc["log_scales"][:, 0] = np.bincount(sidx, weights=d_log_su,
                                              minlength=N)
        acc["log_scales"][:, 1] = np.bincount(sidx, weights=d_log_sv,
                                              minlength=N)
        acc["log_weights"] = np.bincount(sidx, weights=d_log_w, minlength=N)
        for ch in range(C):
            acc["view_color"][:, ch] = np.bincount(
                sidx, weights=d_c_pair[:, ch], minlength=N)
        return block, acc

    blocks = list(_iter_blocks(camera, cfg))
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
            results = list(ex.map(run_block, blocks))
    else:
        results = [run_block(b) for b in blocks]

    for block, acc in results:
        if acc is None:
            continue
        grads.centers += acc["centers"]
        grads.frames += acc["frames"]
        grads.log_scales += acc["log_scales"]
        grads.log_weights += acc["log_weights"]
        d_view_color += acc["view_color"]

    d_attr, d_centers_col, d_phi_col, net_grads = view_colors_backward(
        vcache, d_view_color)
    grads.colors = np.asarray(d_attr) if not np.isscalar(d_attr) else d_attr
    if isinstance(d_centers_col, np.ndarray):
        grads.centers += d_centers_col
    if d_phi_col is not None:
        grads.frames += d_phi_col
    grads.net = net_grads
    return grads
