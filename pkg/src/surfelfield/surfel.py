"""Gaussian surfel geometry.

A surfel is a planar elliptical Gaussian in 3D: center m, orthonormal
tangent frame (tangent_u, tangent_v), per-axis standard deviations
(scale_u, scale_v), an amplitude weight w, and an optional color
attribute. The normal is tangent_u x tangent_v. A ray hits the surfel
plane at one point; the kernel value there is

    f = w * exp(-(u^2 + v^2) / 2),  u = (x - m).tangent_u / scale_u, ...

Kernel support is truncated at `cutoff` Mahalanobis units. Coincident
hits (equal depth within a tie tolerance) merge through the (+) operator
so their footprints add exactly.

Surfel sets are stored as structure-of-arrays; per-surfel views exist for
the scalar API and serialization.
"""

import dataclasses
import io
import struct

import numpy as np

from . import mathkernel as mk

DEFAULT_CUTOFF = 3.0
TIE_TOLERANCE_FACTOR = 1e-9  # times the scene bounding-box diagonal

_MAGIC = b"SRFL"
_VERSION = 1
_COLOR_KINDS = {"none": 0, "sh": 1, "latent": 2, "rgb": 3}
_COLOR_KINDS_INV = {v: k for k, v in _COLOR_KINDS.items()}


@dataclasses.dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, |d|={n}")


@dataclasses.dataclass
class Surfel:
    center: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scale_u: float
    scale_v: float
    weight: float
    color: object = None
    id: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.tangent_u = np.asarray(self.tangent_u, dtype=np.float64)
        self.tangent_v = np.asarray(self.tangent_v, dtype=np.float64)

    @property
    def normal(self):
        return np.cross(self.tangent_u, self.tangent_v)

    def validate(self):
        if abs(np.linalg.norm(self.tangent_u) - 1.0) > 1e-9:
            raise ValueError("tangent_u not unit length")
        if abs(np.linalg.norm(self.tangent_v) - 1.0) > 1e-9:
            raise ValueError("tangent_v not unit length")
        if abs(float(self.tangent_u @ self.tangent_v)) > 1e-9:
            raise ValueError("tangent frame not orthogonal")
        if self.scale_u <= 0 or self.scale_v <= 0:
            raise ValueError("scales must be positive")
        if self.weight < 0:
            raise ValueError("weight must be >= 0")


@dataclasses.dataclass
class IntersectionRecord:
    surfel_id: int
    t: float
    f: float
    cos_theta: float
    local_uv: np.ndarray
    weight: float = 0.0  # surfel amplitude, carried for per-ray blending
    merged_count: int = 1
    mixed_colors: bool = False


class SurfelSet:
    """Structure-of-arrays surfel container; immutable during a render pass."""

    def __init__(self, centers, tangent_u, tangent_v, scales, weights,
                 colors=None, color_kind="none", ids=None):
        self.centers = np.ascontiguousarray(centers, dtype=np.float64)
        self.tangent_u = np.ascontiguousarray(tangent_u, dtype=np.float64)
        self.tangent_v = np.ascontiguousarray(tangent_v, dtype=np.float64)
        self.scales = np.ascontiguousarray(scales, dtype=np.float64)
        self.weights = np.ascontiguousarray(weights, dtype=np.float64)
        n = len(self.centers)
        if colors is None:
            color_kind = "none"
            self.colors = None
        else:
            self.colors = np.ascontiguousarray(colors, dtype=np.float64)
            if len(self.colors) != n:
                raise ValueError("colors length mismatch")
        if color_kind not in _COLOR_KINDS:
            raise ValueError(f"unknown color kind {color_kind!r}")
        self.color_kind = color_kind
        self.ids = np.arange(n, dtype=np.int64) if ids is None else \
            np.ascontiguousarray(ids, dtype=np.int64)

    def __len__(self):
        return len(self.centers)

    def normals(self):
        return np.cross(self.tangent_u, self.tangent_v)

    def validate(self):
        for i in range(len(self)):
            self.surfel(i).validate()

    def surfel(self, i):
        color = None if self.colors is None else self.colors[i]
        return Surfel(self.centers[i], self.tangent_u[i], self.tangent_v[i],
                      float(self.scales[i, 0]), float(self.scales[i, 1]),
                      float(self.weights[i]), color, int(self.ids[i]))

    def subset(self, idx):
        colors = None if self.colors is None else self.colors[idx]
        return SurfelSet(self.centers[idx], self.tangent_u[idx], self.tangent_v[idx],
                         self.scales[idx], self.weights[idx], colors,
                         self.color_kind, self.ids[idx])

    def copy(self):
        # subset(slice) would alias the arrays; callers mutate copies
        colors = None if self.colors is None else self.colors.copy()
        return SurfelSet(self.centers.copy(), self.tangent_u.copy(),
                         self.tangent_v.copy(), self.scales.copy(),
                         self.weights.copy(), colors, self.color_kind,
                         self.ids.copy())

    def bbox_diagonal(self):
        if len(self) == 0:
            return 1.0
        span = self.centers.max(axis=0) - self.centers.min(axis=0)
        d = float(np.linalg.norm(span))
        return d if d > 0 else 1.0

    @classmethod
    def from_surfels(cls, surfels, color_kind="none"):
        n = len(surfels)
        centers = np.array([s.center for s in surfels]).reshape(n, 3)
        tu = np.array([s.tangent_u for s in surfels]).reshape(n, 3)
        tv = np.array([s.tangent_v for s in surfels]).reshape(n, 3)
        scales = np.array([[s.scale_u, s.scale_v] for s in surfels]).reshape(n, 2)
        weights = np.array([s.weight for s in surfels])
        ids = np.array([s.id for s in surfels], dtype=np.int64)
        colors = None
        if n and surfels[0].color is not None:
            colors = np.array([np.asarray(s.color, dtype=np.float64) for s in surfels])
        return cls(centers, tu, tv, scales, weights, colors, color_kind, ids)


def intersect(ray, s, near_clip=1e-6, cutoff=DEFAULT_CUTOFF):
    """Ray-surfel hit, or None.

    Misses when the ray is parallel to the plane (|w.n| < 1e-9), the hit
    is at or before near_clip, or the Mahalanobis radius exceeds cutoff.
    """
    if s.scale_u <= 0 or s.scale_v <= 0:
        raise ValueError("degenerate surfel: non-positive scale")
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    n = s.normal
    denom = float(ray.direction @ n)
    if abs(denom) < 1e-9:
        return None
    t = float((s.center - ray.origin) @ n) / denom
    if t <= near_clip:
        return None
    x = ray.origin + t * ray.direction
    rel = x - s.center
    u = float(rel @ s.tangent_u) / s.scale_u
    v = float(rel @ s.tangent_v) / s.scale_v
    q = u * u + v * v
    if q > cutoff * cutoff:
        return None
    f = s.weight * np.exp(-0.5 * q)
    return IntersectionRecord(s.id, t, float(f), abs(denom),
                              np.array([u, v]), weight=float(s.weight))


def intersect_all(ray, surfels, near_clip=1e-6, cutoff=DEFAULT_CUTOFF,
                  cfg=mk.DEFAULT_CONFIG, merge=True, tie_tol=None):
    """All hits sorted ascending in t; coincident runs merged by default.

    tie_tol defaults to 1e-9 times the set's bounding-box diagonal.
    """
    records = []
    for i in range(len(surfels)):
        rec = intersect(ray, surfels.surfel(i), near_clip, cutoff)
        if rec is not None:
            records.append(rec)
    records.sort(key=lambda r: r.t)
    if merge and records:
        if tie_tol is None:
            tie_tol = TIE_TOLERANCE_FACTOR * surfels.bbox_diagonal()
        records = merge_coincident(records, cfg, tie_tol=tie_tol)
    return records


def merge_coincident(records, cfg=mk.DEFAULT_CONFIG, colors=None, tie_tol=1e-9):
    """Collapse equal-depth runs so footprints add exactly.

    Merged kernel value is the (+)-reduction of member values; the merged
    record flags mixed_colors when members disagree, and when `colors` is
    given the merged color is the footprint-weighted blend (returned as a
    second list).
    """
    if not records:
        return (records, []) if colors is not None else records
    out, out_colors = [], []
    i = 0
    while i < len(records):
        j = i + 1
        while j < len(records) and records[j].t - records[j - 1].t <= tie_tol:
            j += 1
        run = records[i:j]
        if len(run) == 1:
            out.append(run[0])
            if colors is not None:
                out_colors.append(colors[i])
        else:
            f_merged = run[0].f
            for r in run[1:]:
                f_merged = mk.oplus(f_merged, r.f, cfg)
            rhos = np.array([mk.footprint(r.f, cfg) for r in run])
            lead = run[int(np.argmax(rhos))]
            mixed = False
            color = None
            if colors is not None:
                cs = np.asarray([np.asarray(colors[i + k], dtype=np.float64)
                                 for k in range(len(run))])
                mixed = bool(np.any(np.abs(cs - cs[0]) > 1e-12))
                wsum = float(rhos.sum())
                color = cs[0] if wsum == 0 else (rhos[:, None] * cs).sum(axis=0) / wsum
                out_colors.append(color)
            out.append(IntersectionRecord(
                lead.surfel_id, run[0].t, float(f_merged), lead.cos_theta,
                lead.local_uv, weight=float(sum(r.weight for r in run)),
                merged_count=sum(r.merged_count for r in run), mixed_colors=mixed))
        i = j
    return (out, out_colors) if colors is not None else out


def geometry_field(x, surfels, cfg=mk.DEFAULT_CONFIG):
    """F(x): (+)-reduction of on-plane kernel values, minus the vacancy offset.

    2D kernels have measure-zero support, so a surfel contributes only
    when x lies on its plane within 1e-6 * max(scale).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    total_s = 0.0
    normals = surfels.normals()
    for i in range(len(surfels)):
        rel = x - surfels.centers[i]
        tol = 1e-6 * max(surfels.scales[i, 0], surfels.scales[i, 1])
        if abs(float(rel @ normals[i])) > tol:
            continue
        u = float(rel @ surfels.tangent_u[i]) / surfels.scales[i, 0]
        v = float(rel @ surfels.tangent_v[i]) / surfels.scales[i, 1]
        f = surfels.weights[i] * np.exp(-0.5 * (u * u + v * v))
        total_s += mk._s(np.float64(f), cfg)
    return float(mk.s_inverse(total_s, cfg)) - cfg.c


# ---------------------------------------------------------------------------
# serialization: columnar binary (little-endian float32) and text
# ---------------------------------------------------------------------------

def save_surfels(path, surfels):
    """Columnar binary: magic, version, count, color kind/dim, then per-field
    little-endian float32 arrays (centers, tangent_u, tangent_v, scale_u,
    scale_v, weight, colors) and int64 ids."""
    n = len(surfels)
    kind = _COLOR_KINDS[surfels.color_kind]
    dim = 0 if surfels.colors is None else surfels.colors.shape[1]
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIII", _VERSION, n, kind, dim))
        for arr in (surfels.centers, surfels.tangent_u, surfels.tangent_v,
                    surfels.scales[:, 0], surfels.scales[:, 1], surfels.weights):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        if surfels.colors is not None:
            fh.write(np.ascontiguousarray(surfels.colors, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(surfels.ids, dtype="<i8").tobytes())


def load_surfels(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a surfel file (magic {magic!r})")
        version, n, kind, dim = struct.unpack("<IIII", fh.read(16))
        if version != _VERSION:
            raise ValueError(f"unsupported surfel file version {version}")

        def read(count):
            return np.frombuffer(fh.read(count * 4), dtype="<f4").astype(np.float64)

        centers = read(n * 3).reshape(n, 3)
        tu = read(n * 3).reshape(n, 3)
        tv = read(n * 3).reshape(n, 3)
        su = read(n)
        sv = read(n)
        weights = read(n)
        colors = read(n * dim).reshape(n, dim) if dim else None
        ids = np.frombuffer(fh.read(n * 8), dtype="<i8").astype(np.int64)
    return SurfelSet(centers, tu, tv, np.stack([su, sv], axis=1), weights,
                     colors, _COLOR_KINDS_INV[kind], ids)


def save_surfels_text(path, surfels):
    """Human-readable form for small scenes; one surfel per line."""
    dim = 0 if surfels.colors is None else surfels.colors.shape[1]
    buf = io.StringIO()
    buf.write(f"surfelset v{_VERSION} count={len(surfels)} "
              f"color={surfels.color_kind} dim={dim}\n")
    for i in range(len(surfels)):
        fields = [f"id={surfels.ids[i]}"]
        for name, vals in (("m", surfels.centers[i]), ("tu", surfels.tangent_u[i]),
                           ("tv", surfels.tangent_v[i]), ("s", surfels.scales[i])):
            fields.append(name + "=" + ",".join(f"{v:.17g}" for v in vals))
        fields.append(f"w={surfels.weights[i]:.17g}")
        if dim:
            fields.append("c=" + ",".join(f"{v:.17g}" for v in surfels.colors[i]))
        buf.write(" ".join(fields) + "\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_surfels_text(path):
    with open(path) as fh:
        header = fh.readline().split()
        if not header or header[0] != "surfelset":
            raise ValueError("not a surfel text file")
        meta = dict(kv.split("=") for kv in header[2:])
        n, dim = int(meta["count"]), int(meta["dim"])
        rows = [dict(kv.split("=") for kv in fh.readline().split()) for _ in range(n)]

    def vec(row, key):
        return np.array([float(x) for x in row[key].split(",")])

    centers = np.array([vec(r, "m") for r in rows]).reshape(n, 3)
    tu = np.array([vec(r, "tu") for r in rows]).reshape(n, 3)
    tv = np.array([vec(r, "tv") for r in rows]).reshape(n, 3)
    scales = np.array([vec(r, "s") for r in rows]).reshape(n, 2)
    weights = np.array([float(r["w"]) for r in rows])
    ids = np.array([int(r["id"]) for r in rows], dtype=np.int64)
    colors = np.array([vec(r, "c") for r in rows]) if dim else None
    return SurfelSet(centers, tu, tv, scales, weights, colors, meta["color"], ids)
