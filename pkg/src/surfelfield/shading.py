"""Color evaluation for surfels.

Two representations:

* SH: 16 real spherical-harmonics coefficients per channel (bands l=0..3),
  evaluated in the per-view direction from the camera center to the surfel
  center, plus the conventional 0.5 offset, clamped to [0, 1].
* Latent: a 32-vector per surfel fed to a shared 2x64 MLP together with
  SH encodings of the view direction and of its reflection about the
  surfel normal, sigmoid output.

The direction encoding "degree" counts SH bands: degree 4 = bands l<=3 =
16 terms (the default convention of the small-MLP encoders this follows),
degree 5 = 25 terms, switchable in ShadingConfig.

Basis polynomials are written in homogeneous form. Any polynomial
extension that agrees on the unit sphere yields identical gradients once
chained through direction normalization (the radial component is
projected out), so component partials below are safe for backprop.
"""

import dataclasses

import numpy as np
from scipy.special import expit

SH_DC = 0.28209479177387814

_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)
_C4 = (2.5033429417967046, -1.7701307697799304, 0.9461746957575601,
       -0.6690465435572892, 0.10578554691520431, -0.6690465435572892,
       0.47308734787878004, -1.7701307697799304, 0.6258357354491761)


@dataclasses.dataclass
class ShadingConfig:
    color_kind: str = "sh"          # "sh" | "latent"
    sh_bands: int = 4               # color SH bands (4 -> 16 coeffs/channel)
    latent_dim: int = 32
    encoding_degree: int = 4        # direction encoding bands (4 -> 16 terms)
    hidden_width: int = 64

    @property
    def sh_terms(self):
        return self.sh_bands * self.sh_bands

    @property
    def encoding_terms(self):
        return self.encoding_degree * self.encoding_degree

    @property
    def color_dim(self):
        if self.color_kind == "sh":
            return 3 * self.sh_terms
        return self.latent_dim


@dataclasses.dataclass
class ColorAttr:
    kind: str            # "sh" | "latent"
    data: np.ndarray     # (3*terms,) SH coefficients or (latent_dim,) latent

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("color attribute entries must be finite")


def sh_basis(dirs, bands):
    """Real SH basis values for unit directions, shape (..., bands^2)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (bands * bands,), dtype=np.float64)
    out[..., 0] = SH_DC
    if bands >= 2:
        out[..., 1] = -_C1 * y
        out[..., 2] = _C1 * z
        out[..., 3] = -_C1 * x
    if bands >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = _C2[0] * x * y
        out[..., 5] = _C2[1] * y * z
        out[..., 6] = _C2[2] * (2 * zz - xx - yy)
        out[..., 7] = _C2[3] * x * z
        out[..., 8] = _C2[4] * (xx - yy)
    if bands >= 4:
        out[..., 9] = _C3[0] * y * (3 * xx - yy)
        out[..., 10] = _C3[1] * x * y * z
        out[..., 11] = _C3[2] * y * (4 * zz - xx - yy)
        out[..., 12] = _C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[..., 13] = _C3[4] * x * (4 * zz - xx - yy)
        out[..., 14] = _C3[5] * z * (xx - yy)
        out[..., 15] = _C3[6] * x * (xx - 3 * yy)
    if bands >= 5:
        r2 = xx + yy + zz
        out[..., 16] = _C4[0] * x * y * (xx - yy)
        out[..., 17] = _C4[1] * y * z * (3 * xx - yy)
        out[..., 18] = _C4[2] * x * y * (7 * zz - r2)
        out[..., 19] = _C4[3] * y * z * (7 * zz - 3 * r2)
        out[..., 20] = _C4[4] * (35 * zz * zz - 30 * zz * r2 + 3 * r2 * r2)
        out[..., 21] = _C4[5] * x * z * (7 * zz - 3 * r2)
        out[..., 22] = _C4[6] * (xx - yy) * (7 * zz - r2)
        out[..., 23] = _C4[7] * x * z * (xx - 3 * yy)
        out[..., 24] = _C4[8] * (xx * xx - 6 * xx * yy + yy * yy)
    if bands >= 6:
        raise ValueError("sh_basis supports at most 5 bands")
    return out


def sh_basis_grad(dirs, bands):
    """Component partials dY_k/d(x,y,z), shape (..., bands^2, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    g = np.zeros(d.shape[:-1] + (bands * bands, 3), dtype=np.float64)
    if bands >= 2:
        g[..., 1, 1] = -_C1
        g[..., 2, 2] = _C1
        g[..., 3, 0] = -_C1
    if bands >= 3:
        g[..., 4, 0], g[..., 4, 1] = _C2[0] * y, _C2[0] * x
        g[..., 5, 1], g[..., 5, 2] = _C2[1] * z, _C2[1] * y
        g[..., 6, 0], g[..., 6, 1], g[..., 6, 2] = \
            -2 * _C2[2] * x, -2 * _C2[2] * y, 4 * _C2[2] * z
        g[..., 7, 0], g[..., 7, 2] = _C2[3] * z, _C2[3] * x
        g[..., 8, 0], g[..., 8, 1] = 2 * _C2[4] * x, -2 * _C2[4] * y
    if bands >= 4:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, 0], g[..., 9, 1] = _C3[0] * 6 * x * y, _C3[0] * (3 * xx - 3 * yy)
        g[..., 10, 0], g[..., 10, 1], g[..., 10, 2] = \
            _C3[1] * y * z, _C3[1] * x * z, _C3[1] * x * y
        g[..., 11, 0] = _C3[2] * (-2 * x * y)
        g[..., 11, 1] = _C3[2] * (4 * zz - xx - 3 * yy)
        g[..., 11, 2] = _C3[2] * 8 * y * z
        g[..., 12, 0] = _C3[3] * (-6 * x * z)
        g[..., 12, 1] = _C3[3] * (-6 * y * z)
        g[..., 12, 2] = _C3[3] * (6 * zz - 3 * xx - 3 * yy)
        g[..., 13, 0] = _C3[4] * (4 * zz - 3 * xx - yy)
        g[..., 13, 1] = _C3[4] * (-2 * x * y)
        g[..., 13, 2] = _C3[4] * 8 * x * z
        g[..., 14, 0], g[..., 14, 1], g[..., 14, 2] = \
            _C3[5] * 2 * x * z, -_C3[5] * 2 * y * z, _C3[5] * (xx - yy)
        g[..., 15, 0], g[..., 15, 1] = _C3[6] * (3 * xx - 3 * yy), -_C3[6] * 6 * x * y
    if bands >= 5:
        xx, yy, zz = x * x, y * y, z * z
        r2 = xx + yy + zz
        g[..., 16, 0] = _C4[0] * y * (3 * xx - yy)
        g[..., 16, 1] = _C4[0] * x * (xx - 3 * yy)
        g[..., 16, 2] = zero
        g[..., 17, 0] = _C4[1] * 6 * x * y * z
        g[..., 17, 1] = _C4[1] * z * (3 * xx - 3 * yy)
        g[..., 17, 2] = _C4[1] * y * (3 * xx - yy)
        g[..., 18, 0] = _C4[2] * y * (7 * zz - r2 - 2 * xx)
        g[..., 18, 1] = _C4[2] * x * (7 * zz - r2 - 2 * yy)
        g[..., 18, 2] = _C4[2] * x * y * 12 * z
        g[..., 19, 0] = _C4[3] * y * z * (-6 * x)
        g[..., 19, 1] = _C4[3] * z * (7 * zz - 3 * r2 - 6 * yy)
        g[..., 19, 2] = _C4[3] * y * (7 * zz - 3 * r2 + 8 * zz)
        g[..., 20, 0] = _C4[4] * (-60 * zz * x + 12 * r2 * x)
        g[..., 20, 1] = _C4[4] * (-60 * zz * y + 12 * r2 * y)
        g[..., 20, 2] = _C4[4] * (140 * zz * z - 60 * z * r2 - 60 * zz * z + 12 * r2 * z)
        g[..., 21, 0] = _C4[5] * z * (7 * zz - 3 * r2 - 6 * xx)
        g[..., 21, 1] = _C4[5] * x * z * (-6 * y)
        g[..., 21, 2] = _C4[5] * x * (7 * zz - 3 * r2 + 8 * zz)
        g[..., 22, 0] = _C4[6] * (2 * x * (7 * zz - r2) - 2 * x * (xx - yy))
        g[..., 22, 1] = _C4[6] * (-2 * y * (7 * zz - r2) - 2 * y * (xx - yy))
        g[..., 22, 2] = _C4[6] * (xx - yy) * 12 * z
        g[..., 23, 0] = _C4[7] * z * (3 * xx - 3 * yy)
        g[..., 23, 1] = _C4[7] * x * z * (-6 * y)
        g[..., 23, 2] = _C4[7] * x * (xx - 3 * yy)
        g[..., 24, 0] = _C4[8] * (4 * xx * x - 12 * x * yy)
        g[..., 24, 1] = _C4[8] * (4 * yy * y - 12 * xx * y)
        g[..., 24, 2] = zero
    return g


def sh_encode_direction(d, degree=4):
    """SE(d): real SH basis values of a unit direction, degree^2 terms."""
    d = np.asarray(d, dtype=np.float64)
    norms = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("direction must be unit length")
    return sh_basis(d, degree)


def reflect(omega, n):
    """omega_o = 2 (n . omega) n - omega, both arguments unit."""
    omega = np.asarray(omega, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    for v in (omega, n):
        if np.any(np.abs(np.linalg.norm(v, axis=-1) - 1.0) > 1e-6):
            raise ValueError("reflect expects unit vectors")
    dot = np.sum(n * omega, axis=-1, keepdims=True)
    return 2.0 * dot * n - omega


def reflect_backward(omega, n, d_out):
    """Gradients of reflect: returns (d_omega, d_n)."""
    omega = np.asarray(omega, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    d_out = np.asarray(d_out, dtype=np.float64)
    dot = np.sum(n * omega, axis=-1, keepdims=True)
    gn = np.sum(n * d_out, axis=-1, keepdims=True)
    d_omega = 2.0 * gn * n - d_out
    d_n = 2.0 * gn * omega + 2.0 * dot * d_out
    return d_omega, d_n


def normalize_dir(v):
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / norm


def normalize_dir_backward(v, d_unit):
    """Chain through v / |v|: projects out the radial component."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    d = v / norm
    radial = np.sum(d * d_unit, axis=-1, keepdims=True)
    return (d_unit - radial * d) / norm


# ---------------------------------------------------------------------------
# SH color representation (offset + clamp convention of standard splatting)
# ---------------------------------------------------------------------------

def eval_colors_sh(coeffs, dirs, bands=4):
    """coeffs (N, 3*bands^2), dirs (N,3) unit -> rgb (N,3) in [0,1] + cache."""
    n = len(coeffs)
    terms = bands * bands
    basis = sh_basis(dirs, bands)                          # (N, T)
    c = coeffs.reshape(n, 3, terms)
    raw = np.einsum("nct,nt->nc", c, basis) + 0.5
    rgb = np.clip(raw, 0.0, 1.0)
    cache = {"basis": basis, "raw": raw, "coeffs": c, "dirs": dirs, "bands": bands}
    return rgb, cache


def eval_colors_sh_backward(cache, d_rgb):
    """Returns (d_coeffs flat (N,3T), d_dirs (N,3)); clamp gates the flow."""
    basis, raw, c = cache["basis"], cache["raw"], cache["coeffs"]
    bands = cache["bands"]
    inside = ((raw > 0.0) & (raw < 1.0)).astype(np.float64)
    g = d_rgb * inside                                     # (N, 3)
    d_coeffs = np.einsum("nc,nt->nct", g, basis).reshape(len(basis), -1)
    gbasis = sh_basis_grad(cache["dirs"], bands)           # (N, T, 3)
    d_dirs = np.einsum("nc,nct,ntk->nk", g, c, gbasis)
    return d_coeffs, d_dirs


# ---------------------------------------------------------------------------
# latent + MLP representation
# ---------------------------------------------------------------------------

class ShadingNet:
    """2 hidden layers x 64, rectified-linear, sigmoid output head.

    Input: latent (latent_dim) ++ SE(view dir) ++ SE(reflected dir).
    """

    def __init__(self, cfg: ShadingConfig, rng=None):
        self.cfg = cfg
        in_dim = cfg.latent_dim + 2 * cfg.encoding_terms
        w = cfg.hidden_width
        rng = rng or np.random.default_rng(0)
        self.params = {
            "W1": rng.normal(0, np.sqrt(2.0 / in_dim), (w, in_dim)),
            "b1": np.zeros(w),
            "W2": rng.normal(0, np.sqrt(2.0 / w), (w, w)),
            "b2": np.zeros(w),
            "W3": rng.normal(0, np.sqrt(2.0 / w), (3, w)),
            "b3": np.zeros(3),
        }

    @property
    def in_dim(self):
        return self.params["W1"].shape[1]

    def forward(self, latent, enc_view, enc_refl):
        """Batched forward; returns (rgb (N,3), cache)."""
        z = np.concatenate([latent, enc_view, enc_refl], axis=-1)
        p = self.params
        a1 = z @ p["W1"].T + p["b1"]
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ p["W2"].T + p["b2"]
        h2 = np.maximum(a2, 0.0)
        a3 = h2 @ p["W3"].T + p["b3"]
        rgb = expit(a3)
        cache = {"z": z, "a1": a1, "h1": h1, "a2": a2, "h2": h2, "rgb": rgb}
        return rgb, cache

    def backward(self, cache, d_rgb):
        """Returns (d_latent, d_enc_view, d_enc_refl, param_grads)."""
        p = self.params
        ld = self.cfg.latent_dim
        te = self.cfg.encoding_terms
        da3 = d_rgb * cache["rgb"] * (1.0 - cache["rgb"])
        grads = {
            "W3": da3.T @ cache["h2"],
            "b3": da3.sum(axis=0),
        }
        dh2 = da3 @ p["W3"]
        da2 = dh2 * (cache["a2"] > 0)
        grads["W2"] = da2.T @ cache["h1"]
        grads["b2"] = da2.sum(axis=0)
        dh1 = da2 @ p["W2"]
        da1 = dh1 * (cache["a1"] > 0)
        grads["W1"] = da1.T @ cache["z"]
        grads["b1"] = da1.sum(axis=0)
        dz = da1 @ p["W1"]
        return dz[:, :ld], dz[:, ld:ld + te], dz[:, ld + te:], grads

    def state(self):
        return {k: v.copy() for k, v in self.params.items()}

    def load_state(self, state):
        for k in self.params:
            self.params[k] = np.asarray(state[k], dtype=np.float64)


def net_backward(net, cache, d_rgb):
    """Spec-surface alias for ShadingNet.backward."""
    if cache is None:
        raise ValueError("forward cache required")
    return net.backward(cache, d_rgb)


def eval_color(attr, omega, n, net=None, cfg=None):
    """Single-surfel color in [0,1]^3.

    SH variant ignores the normal and the net; latent variant needs both
    (the reflected direction conditions the MLP).
    """
    cfg = cfg or ShadingConfig(color_kind=attr.kind)
    omega = np.asarray(omega, dtype=np.float64)
    if attr.kind == "sh":
        rgb, _ = eval_colors_sh(attr.data[None, :], omega[None, :], cfg.sh_bands)
        return rgb[0]
    if attr.kind == "latent":
        if net is None:
            raise ValueError("latent color needs a ShadingNet")
        omega_o = reflect(omega, np.asarray(n, dtype=np.float64))
        enc_w = sh_encode_direction(omega[None, :], cfg.encoding_degree)
        enc_wo = sh_encode_direction(omega_o[None, :], cfg.encoding_degree)
        rgb, _ = net.forward(attr.data[None, :], enc_w, enc_wo)
        return rgb[0]
    raise ValueError(f"unknown color kind {attr.kind!r}")
