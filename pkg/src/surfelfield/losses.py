"""Training objective: photometric + depth clustering + normal agreement.

Every term returns its gradient alongside the value; nothing here calls
autodiff. The SSIM adjoint leans on the blur being self-adjoint, which
holds for a symmetric window under zero padding.
"""

import dataclasses

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclasses.dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1000.0        # depth distortion weight
    lambda2: float = 0.05          # normal consistency weight
    rgb_l1_dssim_mix: float = 0.2  # fraction of DSSIM in the photometric term

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if not (0.0 <= self.rgb_l1_dssim_mix <= 1.0):
            raise ValueError("rgb_l1_dssim_mix must lie in [0, 1]")


# ----------------------------------------------------------------------
# photometric term

def _gauss_taps():
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return g / g.sum()

_TAPS = _gauss_taps()


def _blur(img):
    # separable, zero padded, same size; self-adjoint per axis
    out = ndimage.convolve1d(img, _TAPS, axis=0, mode="constant", cval=0.0)
    return ndimage.convolve1d(out, _TAPS, axis=1, mode="constant", cval=0.0)


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 3:
        raise ValueError("images must share an (H, W, C) shape")
    return x, y


def l1_loss(rendered, target):
    """Mean absolute error and its gradient in the rendered image."""
    x, y = _check_pair(rendered, target)
    d = x - y
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


def ssim_map(rendered, target):
    """Per-pixel, per-channel structural similarity (zero-padded window)."""
    x, y = _check_pair(rendered, target)
    ux, uy = _blur(x), _blur(y)
    vx = _blur(x * x) - ux * ux
    vy = _blur(y * y) - uy * uy
    vxy = _blur(x * y) - ux * uy
    a1 = 2.0 * ux * uy + SSIM_C1
    a2 = 2.0 * vxy + SSIM_C2
    b1 = ux * ux + uy * uy + SSIM_C1
    b2 = vx + vy + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    cache = {"x": x, "y": y, "ux": ux, "uy": uy,
             "a1": a1, "a2": a2, "b1": b1, "b2": b2, "s": s}
    return s, cache


def dssim_loss(rendered, target):
    """1 - mean SSIM, with the gradient in the rendered image."""
    s, c = ssim_map(rendered, target)
    g = -1.0 / s.size                      # dL/ds per pixel
    bb = c["b1"] * c["b2"]
    da1 = g * c["a2"] / bb
    da2 = g * c["a1"] / bb
    db1 = -g * c["s"] / c["b1"]
    db2 = -g * c["s"] / c["b2"]
    dvx = db2
    dvxy = 2.0 * da2
    dux = 2.0 * (da1 * c["uy"] + db1 * c["ux"]
                 - dvx * c["ux"]) - dvxy * c["uy"]
    grad = _blur(dux) + 2.0 * c["x"] * _blur(dvx) + c["y"] * _blur(dvxy)
    return float(1.0 - np.mean(s)), grad


def ssim_value(rendered, target):
    return float(np.mean(ssim_map(rendered, target)[0]))


def loss_rgb(rendered, target, mix=0.2):
    """(1-mix) L1 + mix DSSIM; returns (value, gradient image)."""
    v1, g1 = l1_loss(rendered, target)
    v2, g2 = dssim_loss(rendered, target)
    return (1.0 - mix) * v1 + mix * v2, (1.0 - mix) * g1 + mix * g2


# ----------------------------------------------------------------------
# depth distortion

def loss_depth_distortion(weights, depths):
    """Sum over ordered pairs of w_i w_j |t_i - t_j|, averaged over rays.

    weights/depths are per-ray lists of arrays. Returns the scalar and
    matching per-ray gradient lists. Rays with one or zero contributing
    records cost nothing.
    """
    if len(weights) != len(depths):
        raise ValueError("one weight array per depth array")
    n_rays = len(weights)
    total = 0.0
    d_w, d_t = [], []
    for w, t in zip(weights, depths):
        w = np.asarray(w, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        gap = np.abs(t[None, :] - t[:, None])
        total += w @ gap @ w
        d_w.append(2.0 * (gap @ w) / n_rays)
        d_t.append(2.0 * w * (np.sign(t[:, None] - t[None, :]) @ w) / n_rays)
    return total / n_rays, d_w, d_t


def loss_depth_distortion_topk(topk_w, topk_t, mask=None):
    """Batched distortion over the leading-K compositing records.

    topk_w, topk_t: (..., K); empty slots must be masked (default w > 0).
    Averages over all leading entries (rays), empty rays included.
    Returns (value, d_w, d_t) with gradients zeroed outside the mask.
    """
    w = np.asarray(topk_w, dtype=np.float64)
    t = np.asarray(topk_t, dtype=np.float64)
    if mask is None:
        mask = w > 0.0
    w = np.where(mask, w, 0.0)
    n_rays = int(np.prod(w.shape[:-1])) or 1
    gap = np.abs(t[..., None, :] - t[..., :, None])
    total = np.einsum("...i,...ij,...j->...", w, gap, w).sum() / n_rays
    d_w = 2.0 * np.einsum("...ij,...j->...i", gap, w) / n_rays
    sgn = np.sign(t[..., :, None] - t[..., None, :])
    d_t = 2.0 * w * np.einsum("...ij,...j->...i", sgn, w) / n_rays
    d_w = np.where(mask, d_w, 0.0)
    d_t = np.where(mask, d_t, 0.0)
    return float(total), d_w, d_t


# ----------------------------------------------------------------------
# normal consistency against expected-depth geometry

def _pixel_dirs(camera):
    ii, jj = np.meshgrid(np.arange(camera.height), np.arange(camera.width),
                         indexing="ij")
    return camera.pixel_directions(ii.ravel(), jj.ravel()).reshape(
        camera.height, camera.width, 3)


def loss_normal_consistency(normal_buf, depth, depth_valid, weight_sum,
                            camera):
    """Penalize blended normals that disagree with the depth surface.

    The depth map is back-projected to points P = o + depth * dir; the
    screen-space central differences of P give a reference normal N per
    interior pixel (oriented toward the camera), and the loss averages
    weight_sum - normal_buf . N over valid pixels. A pixel counts only
    if it and its four neighbors carry valid depth and the difference
    cross product is nondegenerate.

    Returns (value, d_normal_buf, d_depth, d_weight_sum).
    """
    H, W = depth.shape
    d_normal = np.zeros_like(normal_buf)
    d_depth = np.zeros_like(depth)
    d_wsum = np.zeros_like(weight_sum)
    if H < 3 or W < 3:
        return 0.0, d_normal, d_depth, d_wsum

    dirs = _pixel_dirs(camera)
    P = camera.translation[None, None, :] + depth[:, :, None] * dirs
    du = 0.5 * (P[1:-1, 2:] - P[1:-1, :-2])      # (H-2, W-2, 3)
    dv = 0.5 * (P[2:, 1:-1] - P[:-2, 1:-1])
    raw = np.cross(du, dv)
    nlen = np.linalg.norm(raw, axis=2)

    ok = depth_valid[1:-1, 1:-1] & depth_valid[1:-1, 2:] \
        & depth_valid[1:-1, :-2] & depth_valid[2:, 1:-1] \
        & depth_valid[:-2, 1:-1] & (nlen > 1e-12)
    m = int(ok.sum())
    if m == 0:
        return 0.0, d_normal, d_depth, d_wsum

    unit = np.zeros_like(raw)
    unit[ok] = raw[ok] / nlen[ok, None]
    sgn = np.where(np.sum(unit * dirs[1:-1, 1:-1], axis=2) > 0.0, -1.0, 1.0)
    N = sgn[:, :, None] * unit

    nb = normal_buf[1:-1, 1:-1]
    loss = float(np.sum(weight_sum[1:-1, 1:-1][ok])
                 - np.sum(nb[ok] * N[ok])) / m

    d_wsum[1:-1, 1:-1][ok] += 1.0 / m
    dN = np.zeros_like(N)
    dN[ok] = -nb[ok] / m
    d_normal[1:-1, 1:-1][ok] += -N[ok] / m
    # through the orientation sign (constant) and the normalization
    d_unit = sgn[:, :, None] * dN
    d_raw = np.zeros_like(raw)
    d_raw[ok] = (d_unit[ok] - np.sum(d_unit[ok] * unit[ok],
                                     axis=1)[:, None] * unit[ok]) \
        / nlen[ok, None]
    d_du = np.cross(dv, d_raw)
    d_dv = np.cross(d_raw, du)
    dP = np.zeros_like(P)
    dP[1:-1, 2:] += 0.5 * d_du
    dP[1:-1, :-2] -= 0.5 * d_du
    dP[2:, 1:-1] += 0.5 * d_dv
    dP[:-2, 1:-1] -= 0.5 * d_dv
    d_depth[:] = np.sum(dP * dirs, axis=2)
    return loss, d_normal, d_depth, d_wsum


# ----------------------------------------------------------------------
# combined objective over render buffers

def training_loss(buf, target, camera, cfg=None):
    """Total objective on one view; returns (value, parts, adjoints).

    parts maps term names to values; adjoints is a renderer DBuffers
    ready for the backward pass.
    """
    from . import renderer as ren

    cfg = cfg or LossConfig()
    v_rgb, d_color = loss_rgb(buf.color, target, cfg.rgb_l1_dssim_mix)
    v_dist, d_tw, d_tt = loss_depth_distortion_topk(
        buf.topk_weight, buf.topk_t, mask=buf.topk_sid >= 0)
    v_norm, d_normal, d_depth, d_wsum = loss_normal_consistency(
        buf.normal, buf.depth, buf.depth_valid, buf.weight_sum, camera)

    total = v_rgb + cfg.lambda1 * v_dist + cfg.lambda2 * v_norm
    parts = {"rgb": v_rgb, "distortion": v_dist, "normal": v_norm,
             "total": total}
    d = ren.zero_dbuffers(buf)
    d.d_color += d_color
    d.d_topk_weight += cfg.lambda1 * d_tw
    d.d_topk_t += cfg.lambda1 * d_tt
    d.d_normal += cfg.lambda2 * d_normal
    d.d_depth += cfg.lambda2 * d_depth
    d.d_weight_sum += cfg.lambda2 * d_wsum
    return total, parts, d
