"""Synthetic ground truth: analytic shapes, camera rigs, target images.

Stands in for captured multi-view data at desk scale. Shapes come with
exact ray intersections, so targets can be shaded analytically; scenes
may also carry a surfel cover of the surface and render targets from it
instead. Datasets serialize to a directory of plain files.
"""

import dataclasses
import json
import os
import warnings

import numpy as np

from . import images
from . import renderer as ren
from . import surfel as sf

DATASET_VERSION = 1
SHAPES = ("sphere", "box", "step", "disk")
COLOR_MODELS = ("albedo", "sky", "specular")
GOLDEN = np.pi * (3.0 - np.sqrt(5.0))


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    shape: str = "sphere"
    size: float = 1.0                    # radius or half-extent
    center: tuple = (0.0, 0.0, 0.0)
    n_cameras: int = 24
    rig_radius: float = 3.0
    elevations_deg: tuple = (-25.0, 0.0, 25.0)
    resolution: int = 128
    focal: float = 128.0
    color_model: str = "sky"
    albedo: tuple = (0.75, 0.42, 0.26)
    sun: tuple = (0.4, -0.25, 0.88)
    ambient: float = 0.35
    diffuse: float = 0.65
    specular_exponent: float = 96.0
    specular_amplitude: float = 0.6
    n_surfels: int = 3000
    surfel_weight: float = 4.0
    target_source: str = "surfels"       # "surfels" | "analytic"
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; "
                             f"choose from {SHAPES}")
        if self.color_model not in COLOR_MODELS:
            raise ValueError(f"unknown color model {self.color_model!r}")
        if self.target_source not in ("surfels", "analytic"):
            raise ValueError(f"unknown target source "
                             f"{self.target_source!r}")
        if self.n_cameras < 3:
            raise ValueError("reconstruction scenes need at least 3 cameras")
        if self.n_cameras % len(self.elevations_deg) != 0:
            raise ValueError("camera count must split evenly across "
                             "elevation rings")
        if self.size <= 0 or self.resolution < 8 or self.focal <= 0:
            raise ValueError("size, resolution, and focal must be positive")
        if self.rig_radius <= self.size:
            raise ValueError("camera ring must lie outside the surface")
        if self.color_model == "specular" and self.target_source != "analytic":
            raise ValueError("view-dependent targets need analytic shading")


@dataclasses.dataclass
class SyntheticScene:
    spec: SceneSpec
    cameras: list
    surfels: object               # SurfelSet or None
    images: list                  # (H, W, 3) float arrays in [0, 1]
    depths: list                  # (H, W) analytic ray depth, 0 where miss
    masks: list                   # (H, W) bool, analytic hit mask


def camera_rig(spec):
    center = np.asarray(spec.center, dtype=np.float64)
    cams = []
    per_ring = spec.n_cameras // len(spec.elevations_deg)
    for ring, elev_deg in enumerate(spec.elevations_deg):
        elev = np.deg2rad(elev_deg)
        for k in range(per_ring):
            # stagger rings so views don't share azimuths
            ang = 2 * np.pi * (k + ring / len(spec.elevations_deg)) / per_ring
            eye = center + spec.rig_radius * np.array([
                np.cos(ang) * np.cos(elev),
                np.sin(ang) * np.cos(elev),
                np.sin(elev)])
            cams.append(ren.Camera.look_at(
                eye=eye, target=center, fx=spec.focal, fy=spec.focal,
                width=spec.resolution, height=spec.resolution))
    return cams


# ----------------------------------------------------------------------
# analytic surfaces

def _rect_hits(origins, dirs, point, normal, half_u, axis_u, half_v, axis_v):
    """Ray-rectangle intersection; two-sided. Returns (t, valid)."""
    denom = dirs @ normal
    safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
    t = ((point - origins) @ normal) / safe
    p = origins + t[..., None] * dirs
    lu = (p - point) @ axis_u
    lv = (p - point) @ axis_v
    valid = (np.abs(denom) > 1e-12) & (t > 0) \
        & (np.abs(lu) <= half_u) & (np.abs(lv) <= half_v)
    return np.where(valid, t, np.inf), valid


def ray_hits(spec, origins, dirs):
    """Exact first hit of unit rays with the analytic surface.

    origins broadcast against dirs (..., 3). Returns (t, normal, valid)
    with normals oriented toward the ray origin for open surfaces and
    outward for closed ones.
    """
    center = np.asarray(spec.center, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64),
                              dirs.shape)
    if spec.shape == "sphere":
        oc = origins - center
        b = np.einsum("...k,...k->...", dirs, oc)
        disc = b * b - (np.einsum("...k,...k->...", oc, oc)
                        - spec.size ** 2)
        valid = disc > 0
        t = -b - np.sqrt(np.where(valid, disc, 0.0))
        valid &= t > 0
        p = origins + t[..., None] * dirs
        normal = (p - center) / spec.size
        return np.where(valid, t, 0.0), normal, valid
    if spec.shape == "box":
        lo, hi = center - spec.size, center + spec.size
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origins) / dirs
            t2 = (hi - origins) / dirs
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        valid = (tmin <= tmax) & (tmin > 0)
        t = np.where(valid, tmin, 0.0)
        p = origins + t[..., None] * dirs
        q = (p - center) / spec.size
        face = np.argmax(np.abs(q), axis=-1)
        normal = np.zeros_like(dirs)
        idx = np.indices(face.shape)
        normal[(*idx, face)] = np.sign(q[(*idx, face)])
        return t, normal, valid
    if spec.shape == "step":
        h = 0.4 * spec.size
        ex = np.array([1.0, 0.0, 0.0])
        ey = np.array([0.0, 1.0, 0.0])
        ez = np.array([0.0, 0.0, 1.0])
        s4 = spec.size / 2.0
        plates = [
            # raised half, lowered half, and the riser joining them
            (center + ez * h / 2 - ex * s4, ez, s4, ex, spec.size, ey),
            (center - ez * h / 2 + ex * s4, ez, s4, ex, spec.size, ey),
            (center, ex, h / 2, ez, spec.size, ey),
        ]
        best_t = np.full(dirs.shape[:-1], np.inf)
        normal = np.zeros_like(dirs)
        any_valid = np.zeros(dirs.shape[:-1], dtype=bool)
        for point, n, hu, au, hv, av in plates:
            t, valid = _rect_hits(origins, dirs, point, n, hu, au, hv, av)
            closer = valid & (t < best_t)
            best_t = np.where(closer, t, best_t)
            facing = -np.sign(dirs @ n)[..., None] * n
            normal = np.where(closer[..., None], facing, normal)
            any_valid |= valid
        return np.where(any_valid, best_t, 0.0), normal, any_valid
    # open disk in the x-y plane through the center, two-sided
    ez = np.array([0.0, 0.0, 1.0])
    denom = dirs @ ez
    safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
    t = ((center - origins) @ ez) / safe
    p = origins + t[..., None] * dirs
    valid = (np.abs(denom) > 1e-12) & (t > 0) \
        & (np.linalg.norm(p - center, axis=-1) <= spec.size)
    normal = np.broadcast_to(ez, dirs.shape) * -np.sign(denom)[..., None]
    return np.where(valid, t, 0.0), normal, valid


def shade(spec, normals, view_dirs):
    """Color of a surface point; view_dirs point from eye to surface."""
    albedo = np.asarray(spec.albedo, dtype=np.float64)
    if spec.color_model == "albedo":
        return np.broadcast_to(albedo, normals.shape).copy()
    sun = np.asarray(spec.sun, dtype=np.float64)
    sun = sun / np.linalg.norm(sun)
    lambert = np.maximum(normals @ sun, 0.0)
    color = albedo * (spec.ambient + spec.diffuse * lambert)[..., None]
    if spec.color_model == "specular":
        # mirror of the sun about the normal against the eye direction
        ndl = (normals @ sun)[..., None]
        refl = 2.0 * ndl * normals - sun
        spec_term = np.maximum(np.einsum("...k,...k->...",
                                         refl, -view_dirs), 0.0)
        color = color + spec.specular_amplitude \
            * spec_term[..., None] ** spec.specular_exponent
    return np.clip(color, 0.0, 1.0)


# ----------------------------------------------------------------------
# surfel covers

def _frames_from_normals(normals):
    ref = np.where(np.abs(normals[:, 2:3]) < 0.9,
                   np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    tu = np.cross(ref, normals)
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = np.cross(normals, tu)
    return tu, tv


def _grid_on_rect(point, axis_u, half_u, axis_v, half_v, normal, m_u, m_v):
    iu = (np.arange(m_u) + 0.5) / m_u * 2.0 - 1.0
    iv = (np.arange(m_v) + 0.5) / m_v * 2.0 - 1.0
    uu, vv = np.meshgrid(iu * half_u, iv * half_v, indexing="ij")
    pts = point + uu[..., None] * axis_u + vv[..., None] * axis_v
    pts = pts.reshape(-1, 3)
    normals = np.broadcast_to(normal, pts.shape).copy()
    return pts, normals


def surfel_cover(spec, overlap=1.0):
    """Hand-built surfel cover of the analytic surface.

    Spacing follows the local point density; kernel scale is the spacing
    times overlap / 2, which closes gaps without washing out the
    silhouette. Colors are baked with the view-independent part of the
    scene's shading.
    """
    center = np.asarray(spec.center, dtype=np.float64)
    n = spec.n_surfels
    if spec.shape == "sphere":
        k = np.arange(n) + 0.5
        phi = np.arccos(1.0 - 2.0 * k / n)
        theta = GOLDEN * np.arange(n)
        normals = np.stack([np.sin(phi) * np.cos(theta),
                            np.sin(phi) * np.sin(theta),
                            np.cos(phi)], axis=-1)
        pts = center + spec.size * normals
        spacing = np.sqrt(4.0 * np.pi * spec.size ** 2 / n)
    elif spec.shape == "box":
        m = max(int(round(np.sqrt(n / 6.0))), 2)
        pts, normals = [], []
        e = np.eye(3)
        for axis in range(3):
            for sign in (-1.0, 1.0):
                nrm = sign * e[axis]
                point = center + spec.size * nrm
                au, av = e[(axis + 1) % 3], e[(axis + 2) % 3]
                p, nn = _grid_on_rect(point, au, spec.size, av, spec.size,
                                      nrm, m, m)
                pts.append(p)
                normals.append(nn)
        pts = np.concatenate(pts)
        normals = np.concatenate(normals)
        spacing = 2.0 * spec.size / m
    elif spec.shape == "step":
        h = 0.4 * spec.size
        ex, ey, ez = np.eye(3)
        s4 = spec.size / 2.0
        m = max(int(round(np.sqrt(n / 2.5))), 2)
        m_r = max(int(round(m * (h / 2) / spec.size)), 1)
        parts = [
            (center + ez * h / 2 - ex * s4, ex, s4, ey, spec.size, ez,
             m // 2, m),
            (center - ez * h / 2 + ex * s4, ex, s4, ey, spec.size, ez,
             m // 2, m),
            (center, ez, h / 2, ey, spec.size, ex, m_r, m),
        ]
        pts, normals = [], []
        for point, au, hu, av, hv, nrm, mu, mv in parts:
            p, nn = _grid_on_rect(point, au, hu, av, hv, nrm, mu, mv)
            pts.append(p)
            normals.append(nn)
        pts = np.concatenate(pts)
        normals = np.concatenate(normals)
        spacing = 2.0 * spec.size / m
    else:  # disk, sunflower layout
        k = np.arange(n) + 0.5
        r = spec.size * np.sqrt(k / n)
        th = GOLDEN * np.arange(n)
        pts = center + np.stack([r * np.cos(th), r * np.sin(th),
                                 np.zeros(n)], axis=-1)
        normals = np.broadcast_to(np.array([0.0, 0.0, 1.0]),
                                  pts.shape).copy()
        spacing = spec.size / np.sqrt(n)
    tu, tv = _frames_from_normals(normals)
    count = len(pts)
    scales = np.full((count, 2), 0.5 * overlap * spacing)
    weights = np.full(count, spec.surfel_weight)
    # view-dependent terms cannot bake into static colors; keep the sky part
    bake = spec if spec.color_model != "specular" \
        else dataclasses.replace(spec, color_model="sky")
    colors = shade(bake, normals, None)
    return sf.SurfelSet(pts, tu, tv, scales, weights, colors, "rgb")


# ----------------------------------------------------------------------
# scene assembly

def _pixel_rays(camera):
    rows, cols = np.meshgrid(np.arange(camera.height),
                             np.arange(camera.width), indexing="ij")
    return camera.pixel_directions(rows, cols)


def analytic_view(spec, camera):
    dirs = _pixel_rays(camera)
    t, normal, valid = ray_hits(spec, camera.translation, dirs)
    color = shade(spec, normal, dirs)
    color = np.where(valid[..., None], color, 0.0)
    return color, np.where(valid, t, 0.0), valid


def make_scene(spec, render_cfg=None):
    """Build cameras, targets, and ground truth for one synthetic scene.

    Deterministic: everything derives from the spec. Targets come from
    the surfel cover through the renderer, or from analytic shading.
    """
    cams = camera_rig(spec)
    surfels = None
    if spec.target_source == "surfels":
        surfels = surfel_cover(spec)
    imgs, depths, masks = [], [], []
    for cam in cams:
        color_a, depth_a, valid_a = analytic_view(spec, cam)
        if not valid_a.any():
            raise ValueError("a rig camera sees none of the surface; "
                             "grow resolution or shrink rig radius")
        if surfels is not None:
            buf = ren.render(cam, surfels, cfg=render_cfg)
            imgs.append(np.clip(buf.color, 0.0, 1.0))
        else:
            imgs.append(color_a)
        depths.append(depth_a)
        masks.append(valid_a)
    return SyntheticScene(spec=spec, cameras=cams, surfels=surfels,
                          images=imgs, depths=depths, masks=masks)


# ----------------------------------------------------------------------
# dataset files

def _write_cameras(path, cams):
    with open(path, "w") as fh:
        fh.write(f"# cameras v{DATASET_VERSION}\n")
        fh.write(f"count {len(cams)}\n")
        for i, cam in enumerate(cams):
            fh.write(f"view {i}\n")
            for key in ("fx", "fy", "cx", "cy"):
                fh.write(f"{key} {float(getattr(cam, key))!r}\n")
            fh.write(f"w {cam.width}\nh {cam.height}\n")
            # repr of a Python float reads back bit-exact
            for row in cam.rotation:
                fh.write("R " + " ".join(repr(float(x)) for x in row) + "\n")
            fh.write("t " + " ".join(repr(float(x))
                                     for x in cam.translation) + "\n")


def _read_cameras(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()
                 and not ln.startswith("#")]
    fields = {}
    cams = []
    rows = []

    def flush():
        if fields:
            cams.append(ren.Camera(
                fx=fields["fx"], fy=fields["fy"], cx=fields["cx"],
                cy=fields["cy"], width=int(fields["w"]),
                height=int(fields["h"]), rotation=np.array(rows),
                translation=np.array(fields["t"])))

    count = None
    for ln in lines:
        key, rest = ln.split(None, 1)
        if key == "count":
            count = int(rest)
        elif key == "view":
            flush()
            fields, rows = {}, []
        elif key == "R":
            rows.append([float(x) for x in rest.split()])
        elif key == "t":
            fields["t"] = [float(x) for x in rest.split()]
        else:
            fields[key] = float(rest)
    flush()
    if count is not None and count != len(cams):
        raise ValueError(f"camera file announces {count} views "
                         f"but holds {len(cams)}")
    return cams


def save_dataset(scene, path):
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    os.makedirs(os.path.join(path, "depth"), exist_ok=True)
    _write_cameras(os.path.join(path, "cameras.txt"), scene.cameras)
    for i, (img, depth) in enumerate(zip(scene.images, scene.depths)):
        images.write_png(os.path.join(path, "images", f"view_{i:03d}.png"),
                         img)
        if depth is not None:
            images.write_float_grid(
                os.path.join(path, "depth", f"view_{i:03d}.fgrd"), depth)
    truth = dataclasses.asdict(scene.spec)
    truth["format_version"] = DATASET_VERSION
    with open(os.path.join(path, "truth.json"), "w") as fh:
        json.dump(truth, fh, indent=1)
    if scene.surfels is not None:
        sf.save_surfels(os.path.join(path, "cover.surfels"), scene.surfels)


def load_dataset(path):
    with open(os.path.join(path, "truth.json")) as fh:
        truth = json.load(fh)
    version = truth.pop("format_version", None)
    if version != DATASET_VERSION:
        raise ValueError(f"dataset format version {version} not supported")
    for key in ("center", "elevations_deg", "albedo", "sun"):
        truth[key] = tuple(truth[key])
    spec = SceneSpec(**truth)
    cams = _read_cameras(os.path.join(path, "cameras.txt"))
    imgs, depths, masks = [], [], []
    for i in range(len(cams)):
        img_path = os.path.join(path, "images", f"view_{i:03d}.png")
        if not os.path.exists(img_path):
            raise FileNotFoundError(f"dataset image missing: {img_path}")
        imgs.append(images.read_png(img_path))
        depth_path = os.path.join(path, "depth", f"view_{i:03d}.fgrd")
        if os.path.exists(depth_path):
            d = images.read_float_grid(depth_path)
            depths.append(d)
            masks.append(d > 0)
        else:
            depths.append(None)
            masks.append(None)
    cover_path = os.path.join(path, "cover.surfels")
    surfels = sf.load_surfels(cover_path) if os.path.exists(cover_path) \
        else None
    return SyntheticScene(spec=spec, cameras=cams, surfels=surfels,
                          images=imgs, depths=depths, masks=masks)
