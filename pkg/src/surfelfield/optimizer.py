"""Fitting loop: moment-based descent over surfel and shading parameters.

Geometry parameters live in the spaces the renderer differentiates:
centers additively, tangent frames through consumed axis-angle
increments, scales and amplitudes in log space. Colors are smoothed by
the spatial blend before every render, and the chain rule runs back
through the blend so its coefficients also steer centers and weights.

Surfel count is fixed for a run; there is no densification, pruning, or
periodic amplitude reset here.
"""

import csv
import dataclasses
import hashlib
import json
import os

import numpy as np

from . import colorprop as cp
from . import images
from . import losses as lo
from . import renderer as ren
from . import shading as sh
from . import surfel as sf

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

CHECKPOINT_VERSION = 1


@dataclasses.dataclass
class FitConfig:
    iterations: int = 2000
    lr_center: float = 2e-4        # multiplied by scene extent, decayed
    lr_frame: float = 1e-3
    lr_scales: float = 5e-3
    lr_weight: float = 5e-2
    lr_color: float = 2.5e-3
    lr_net: float = 1e-3
    sh_rest_ratio: float = 0.05    # non-constant coefficient lr multiplier
    lr_final_factor: float = 0.01  # center lr decays exponentially to this
    batch: int = 1
    seed: int = 0
    blend_enabled: bool = True
    blend: cp.BlendConfig = dataclasses.field(default_factory=cp.BlendConfig)
    loss: lo.LossConfig = dataclasses.field(default_factory=lo.LossConfig)
    render: ren.RenderConfig = dataclasses.field(
        default_factory=ren.RenderConfig)
    shading: sh.ShadingConfig = None
    checkpoint_interval: int = 0   # 0: only the final checkpoint
    val_interval: int = 0          # 0: no validation renders

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        for name in ("lr_center", "lr_frame", "lr_scales", "lr_weight",
                     "lr_color", "lr_net"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if not (0 < self.lr_final_factor <= 1.0):
            raise ValueError("lr_final_factor must lie in (0, 1]")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)!r}")


def config_hash(cfg):
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True,
                      default=_json_default)
    return hashlib.sha256(blob.encode()).hexdigest()


# ----------------------------------------------------------------------
# moment state

class Adam:
    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def update(self, grad, lr):
        """Returns the parameter increment for this gradient."""
        self.t += 1
        self.m = ADAM_BETA1 * self.m + (1.0 - ADAM_BETA1) * grad
        self.v = ADAM_BETA2 * self.v + (1.0 - ADAM_BETA2) * grad * grad
        mhat = self.m / (1.0 - ADAM_BETA1 ** self.t)
        vhat = self.v / (1.0 - ADAM_BETA2 ** self.t)
        return -lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


# ----------------------------------------------------------------------
# initialization

def init_surfels(bounds, n, seed=0, strategy="random", points=None,
                 color_kind="rgb", latent_dim=32, sh_bands=4):
    """Seed a surfel set inside bounds.

    random: uniform centers, random frames, scales at 2% of the box
    diagonal, amplitude 0.5. from_points: centers from the given cloud
    (frames and sizes as above). Colors start mid-gray (zero for basis
    coefficients, small noise for latents).
    """
    lo_, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    if not np.all(hi > lo_):
        raise ValueError("empty bounds")
    rng = np.random.default_rng(seed)
    if strategy == "random":
        if n < 1:
            raise ValueError("need at least one surfel")
        centers = rng.uniform(lo_, hi, (n, 3))
    elif strategy == "from_points":
        if points is None or len(points) == 0:
            raise ValueError("from_points needs a point cloud")
        centers = np.asarray(points, dtype=np.float64).reshape(-1, 3).copy()
        n = len(centers)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    diag = float(np.linalg.norm(hi - lo_))
    q = np.linalg.qr(rng.normal(size=(n, 3, 3)))[0]
    det = np.linalg.det(q)
    q[det < 0, :, 2] *= -1.0
    scales = np.full((n, 2), 0.02 * diag)
    weights = np.full(n, 0.5)
    ss = sf.SurfelSet(centers, np.ascontiguousarray(q[:, :, 0]),
                      np.ascontiguousarray(q[:, :, 1]), scales, weights,
                      None, "none", np.arange(n))
    if color_kind == "rgb":
        ss.colors = np.full((n, 3), 0.5)
    elif color_kind == "sh":
        ss.colors = np.zeros((n, 3 * sh_bands * sh_bands))
    elif color_kind == "latent":
        ss.colors = rng.normal(0.0, 0.1, (n, latent_dim))
    else:
        raise ValueError(f"unknown color kind {color_kind!r}")
    ss.color_kind = color_kind
    return ss


# ----------------------------------------------------------------------
# state

class FitState:
    def __init__(self, surfels, cfg, net=None, extent=None):
        self.surfels = surfels
        self.cfg = cfg
        self.net = net
        self.iteration = 0
        self.rng = np.random.default_rng(cfg.seed)
        self.table = None
        self.table_iteration = -1
        self.epoch_order = None
        self.epoch_pos = 0
        self.extent = float(extent) if extent is not None \
            else surfels.bbox_diagonal()
        groups = {"centers": (len(surfels), 3), "frames": (len(surfels), 3),
                  "log_scales": (len(surfels), 2),
                  "log_weights": (len(surfels),),
                  "colors": surfels.colors.shape}
        if net is not None:
            for k, p in net.params.items():
                groups[f"net.{k}"] = p.shape
        self.moments = {k: Adam(shape) for k, shape in groups.items()}


def _rotate_frames(surfels, phi):
    """Apply per-surfel axis-angle increments, then re-orthonormalize."""
    theta = np.linalg.norm(phi, axis=1)
    act = theta > 0.0
    if not np.any(act):
        return                      # zero increment stays a bitwise no-op
    k = np.zeros_like(phi)
    k[act] = phi[act] / theta[act, None]
    ct, st = np.cos(theta)[:, None], np.sin(theta)[:, None]
    for name in ("tangent_u", "tangent_v"):
        v = getattr(surfels, name)
        rv = v * ct + np.cross(k, v) * st \
            + k * np.sum(k * v, axis=1)[:, None] * (1.0 - ct)
        setattr(surfels, name, np.where(act[:, None], rv, v))
    tu = surfels.tangent_u
    tu = tu / np.linalg.norm(tu, axis=1)[:, None]
    tv = surfels.tangent_v
    tv = tv - np.sum(tv * tu, axis=1)[:, None] * tu
    tv = tv / np.linalg.norm(tv, axis=1)[:, None]
    surfels.tangent_u, surfels.tangent_v = tu, tv


def _color_lr(state):
    cfg = state.cfg
    if state.surfels.color_kind != "sh":
        return cfg.lr_color
    terms = state.surfels.colors.shape[1] // 3
    per = np.full(terms, cfg.lr_color * cfg.sh_rest_ratio)
    per[0] = cfg.lr_color
    return np.tile(per, 3)[None, :]


def _refresh_table(state):
    cfg = state.cfg
    due = state.table is None or \
        state.iteration - state.table_iteration >= cfg.blend.refresh_interval
    if cfg.blend_enabled and due:
        k = min(cfg.blend.k, len(state.surfels))
        state.table = cp.knn(state.surfels.centers, k)
        state.table_iteration = state.iteration


def step(state, views):
    """One optimizer step over a batch of (camera, target) pairs.

    Returns the loss record for the batch (term -> mean value).
    """
    cfg = state.cfg
    surfels = state.surfels
    _refresh_table(state)

    if cfg.blend_enabled:
        chat, bcache = cp.blend_spatial(surfels, state.table, cfg.blend.tau)
        rendered_set = surfels.copy()
        rendered_set.colors = chat
    else:
        bcache = None
        rendered_set = surfels

    total_parts = None
    grads = ren.zero_grad_buffers(surfels, surfels.colors.shape[1])
    for camera, target in views:
        buf = ren.render(camera, rendered_set, cfg.render,
                         cfg.shading, state.net)
        value, parts, dbuf = lo.training_loss(buf, target, camera, cfg.loss)
        if not np.isfinite(value):
            raise RuntimeError(
                f"non-finite loss at iteration {state.iteration}: {parts}")
        g = ren.backward(camera, rendered_set, buf, dbuf)
        grads.add_(g)
        if total_parts is None:
            total_parts = dict(parts)
        else:
            for key in parts:
                total_parts[key] += parts[key]
    inv = 1.0 / len(views)
    for key in total_parts:
        total_parts[key] *= inv
    grads = grads.scaled(inv)

    if bcache is not None:
        d_centers, d_w, d_colors = cp.blend_spatial_backward(
            bcache, grads.colors)
        grads.colors = d_colors
        grads.centers += d_centers
        grads.log_weights += d_w * surfels.weights

    decay = cfg.lr_final_factor ** (state.iteration / max(cfg.iterations, 1))
    mom = state.moments
    surfels.centers += mom["centers"].update(
        grads.centers, cfg.lr_center * state.extent * decay)
    _rotate_frames(surfels, mom["frames"].update(grads.frames, cfg.lr_frame))
    surfels.scales *= np.exp(
        mom["log_scales"].update(grads.log_scales, cfg.lr_scales))
    surfels.weights *= np.exp(
        mom["log_weights"].update(grads.log_weights, cfg.lr_weight))
    surfels.colors += mom["colors"].update(grads.colors, _color_lr(state))
    if state.net is not None and grads.net is not None:
        for k, p in state.net.params.items():
            p += mom[f"net.{k}"].update(grads.net[k], cfg.lr_net)

    state.iteration += 1
    return total_parts


def _next_views(state, views):
    """Draw cfg.batch views from the per-epoch shuffled order."""
    out = []
    for _ in range(state.cfg.batch):
        if state.epoch_order is None or \
                state.epoch_pos >= len(state.epoch_order):
            state.epoch_order = state.rng.permutation(len(views))
            state.epoch_pos = 0
        out.append(views[state.epoch_order[state.epoch_pos]])
        state.epoch_pos += 1
    return out


def fit(views, cfg, init=None, state=None, out_dir=None, log_every=0):
    """Run the optimization; returns (state, loss history).

    views: list of (Camera, target image). Provide either a fresh
    initial SurfelSet via init (plus a ShadingNet through cfg.shading
    when latents are active) or a resumed state.
    """
    if state is None:
        if init is None:
            raise ValueError("need an initial surfel set or a resume state")
        net = None
        if init.color_kind == "latent":
            scfg = cfg.shading or sh.ShadingConfig(color_kind="latent")
            cfg = dataclasses.replace(cfg, shading=scfg)
            net = sh.ShadingNet(scfg, np.random.default_rng(cfg.seed + 1))
        state = FitState(init, cfg, net=net)
    history = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    while state.iteration < cfg.iterations:
        batch = _next_views(state, views)
        parts = step(state, batch)
        row = {"iteration": state.iteration, **parts}
        history.append(row)
        if log_every and state.iteration % log_every == 0:
            print(f"iter {state.iteration:6d} " + " ".join(
                f"{k}={v:.5f}" for k, v in parts.items()))
        if out_dir:
            if cfg.checkpoint_interval and \
                    state.iteration % cfg.checkpoint_interval == 0:
                save_checkpoint(state, os.path.join(
                    out_dir, f"ckpt_{state.iteration:06d}.npz"))
            if cfg.val_interval and state.iteration % cfg.val_interval == 0:
                _validation_render(state, views[0], out_dir)
    if out_dir:
        save_checkpoint(state, os.path.join(out_dir, "ckpt_final.npz"))
        write_loss_curve(history, os.path.join(out_dir, "loss_curve.csv"))
    return state, history


def _validation_render(state, view, out_dir):
    camera, _ = view
    rendered_set = state.surfels
    if state.cfg.blend_enabled and state.table is not None:
        chat, _ = cp.blend_spatial(state.surfels, state.table,
                                   state.cfg.blend.tau)
        rendered_set = state.surfels.copy()
        rendered_set.colors = chat
    buf = ren.render(camera, rendered_set, state.cfg.render,
                     state.cfg.shading, state.net)
    images.write_png(os.path.join(
        out_dir, f"val_{state.iteration:06d}.png"), buf.color)


def write_loss_curve(history, path):
    if not history:
        return
    keys = list(history[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(history)


# ----------------------------------------------------------------------
# checkpointing

def save_checkpoint(state, path):
    """Serialize everything a bitwise resume needs."""
    data = {
        "version": np.int64(CHECKPOINT_VERSION),
        "iteration": np.int64(state.iteration),
        "extent": np.float64(state.extent),
        "config_json": np.str_(json.dumps(
            dataclasses.asdict(state.cfg), sort_keys=True,
            default=_json_default)),
        "config_hash": np.str_(config_hash(state.cfg)),
        "rng_state": np.str_(json.dumps(state.rng.bit_generator.state)),
        "centers": state.surfels.centers,
        "tangent_u": state.surfels.tangent_u,
        "tangent_v": state.surfels.tangent_v,
        "scales": state.surfels.scales,
        "weights": state.surfels.weights,
        "colors": state.surfels.colors,
        "ids": state.surfels.ids,
        "color_kind": np.str_(state.surfels.color_kind),
        "table_iteration": np.int64(state.table_iteration),
        "epoch_pos": np.int64(state.epoch_pos),
    }
    if state.table is not None:
        data["table"] = state.table
    if state.epoch_order is not None:
        data["epoch_order"] = state.epoch_order
    if state.net is not None:
        for k, p in state.net.params.items():
            data[f"net_{k}"] = p
    for name, adam in state.moments.items():
        tag = name.replace(".", "_")
        data[f"m_{tag}"] = adam.m
        data[f"v_{tag}"] = adam.v
        data[f"t_{tag}"] = np.int64(adam.t)
    np.savez(path, **data)


def load_checkpoint(path, cfg):
    """Rebuild a FitState; cfg must hash-match the saved run."""
    with np.load(path, allow_pickle=False) as z:
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {z['version']}")
        # fit() fills cfg.shading for latent runs; mirror that before hashing
        if str(z["color_kind"]) == "latent" and cfg.shading is None:
            cfg = dataclasses.replace(
                cfg, shading=sh.ShadingConfig(color_kind="latent"))
        if str(z["config_hash"]) != config_hash(cfg):
            raise ValueError("config does not match the checkpointed run")
        ss = sf.SurfelSet(z["centers"].copy(), z["tangent_u"].copy(),
                          z["tangent_v"].copy(), z["scales"].copy(),
                          z["weights"].copy(), z["colors"].copy(),
                          str(z["color_kind"]), z["ids"].copy())
        net = None
        if str(z["color_kind"]) == "latent":
            scfg = cfg.shading or sh.ShadingConfig(color_kind="latent")
            net = sh.ShadingNet(scfg)
            net.load_state({k[len("net_"):]: z[k] for k in z.files
                            if k.startswith("net_")})
        state = FitState(ss, cfg, net=net, extent=float(z["extent"]))
        state.iteration = int(z["iteration"])
        state.rng.bit_generator.state = json.loads(str(z["rng_state"]))
        state.table = z["table"].copy() if "table" in z.files else None
        state.table_iteration = int(z["table_iteration"])
        state.epoch_order = z["epoch_order"].copy() \
            if "epoch_order" in z.files else None
        state.epoch_pos = int(z["epoch_pos"])
        for name, adam in state.moments.items():
            tag = name.replace(".", "_")
            adam.m = z[f"m_{tag}"].copy()
            adam.v = z[f"v_{tag}"].copy()
            adam.t = int(z[f"t_{tag}"])
    return state


def read_checkpoint(path):
    """Model contents only: (surfels, net, shading config, saved cfg dict,
    iteration).

    load_checkpoint rebuilds a resumable optimizer state and so insists
    on the exact run configuration; consumers that just render or mesh
    the model read it through this instead.
    """
    with np.load(path, allow_pickle=False) as z:
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {z['version']}")
        ss = sf.SurfelSet(z["centers"].copy(), z["tangent_u"].copy(),
                          z["tangent_v"].copy(), z["scales"].copy(),
                          z["weights"].copy(), z["colors"].copy(),
                          str(z["color_kind"]), z["ids"].copy())
        saved = json.loads(str(z["config_json"]))
        scfg = None
        if saved.get("shading"):
            scfg = sh.ShadingConfig(**saved["shading"])
        net = None
        if ss.color_kind == "latent":
            scfg = scfg or sh.ShadingConfig(color_kind="latent")
            net = sh.ShadingNet(scfg)
            net.load_state({k[len("net_"):]: z[k] for k in z.files
                            if k.startswith("net_")})
        return ss, net, scfg, saved, int(z["iteration"])
