"""Depth-map fusion into a signed-distance grid, mesh extraction, metrics.

Integration follows the standard truncated running-average scheme: every
voxel center is projected into each view, its ray distance is compared
to the rendered expected depth, and the truncated difference is averaged
in. Extraction is table-based isosurfacing with edge interpolation
(delegated to scikit-image, behavior pinned by the tests here).
"""

import dataclasses
import struct
import warnings

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

DEFAULT_RESOLUTION = 128
DEFAULT_TRUNCATION_VOXELS = 4.0


@dataclasses.dataclass
class TsdfGrid:
    resolution: tuple          # (nx, ny, nz)
    voxel_size: float
    origin: np.ndarray         # world position of the (0,0,0) voxel corner
    tsdf: np.ndarray           # (nx, ny, nz), clipped to [-1, 1]
    weight: np.ndarray         # (nx, ny, nz), observation count

    @property
    def truncation(self):
        return DEFAULT_TRUNCATION_VOXELS * self.voxel_size

    def voxel_centers(self):
        nx, ny, nz = self.resolution
        ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny),
                                 np.arange(nz), indexing="ij")
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
        return self.origin + (idx + 0.5) * self.voxel_size


def make_grid(lo, hi, resolution=DEFAULT_RESOLUTION):
    """Cubic-voxel grid covering the axis-aligned box [lo, hi]."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if not np.all(hi > lo):
        raise ValueError("empty grid bounds")
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), 3).copy()
    if np.any(res < 2):
        raise ValueError("resolution must be at least 2 per axis")
    voxel = float(np.max((hi - lo) / res))
    return TsdfGrid(resolution=tuple(int(r) for r in res), voxel_size=voxel,
                    origin=lo, tsdf=np.ones(tuple(res)),
                    weight=np.zeros(tuple(res)))


def _reliable(depth, valid, max_jump):
    """Mask out depth edges; both sides of any jump above max_jump.

    Nearest-pixel lookup misreads depth by up to one pixel laterally,
    so pixels on steep slopes (silhouettes, occlusion boundaries) would
    write arbitrarily wrong distances into the grid.
    """
    ok = valid.copy()
    d = np.where(valid, depth, np.nan)
    for axis in (0, 1):
        step = np.diff(d, axis=axis)
        jump = ~np.isfinite(step) | (np.abs(step) > max_jump)
        lead = (slice(None, -1), slice(None)) if axis == 0 \
            else (slice(None), slice(None, -1))
        trail = (slice(1, None), slice(None)) if axis == 0 \
            else (slice(None), slice(1, None))
        ok[lead] &= ~jump
        ok[trail] &= ~jump
    return ok


def integrate(grid, depth, depth_valid, camera, truncation=None,
              edge_limit=None):
    """Fold one expected-depth map into the grid (in place).

    depth holds distances along unit pixel rays; invalid pixels are
    skipped, as are pixels at depth discontinuities steeper than
    edge_limit per pixel (default truncation / 2). Voxels more than one
    truncation behind the surface keep their state.
    """
    truncation = grid.truncation if truncation is None else float(truncation)
    if truncation <= grid.voxel_size:
        raise ValueError("truncation must exceed the voxel size")
    if edge_limit is None:
        edge_limit = 0.5 * truncation
    centers = grid.voxel_centers()
    u, v, z = camera.project(centers)
    if np.all(z <= 0):
        warnings.warn("camera looks away from the grid; skipping view",
                      stacklevel=2)
        return grid
    depth_valid = _reliable(depth, depth_valid, edge_limit)
    col = np.floor(u).astype(np.int64)
    row = np.floor(v).astype(np.int64)
    inside = (z > 0) & (col >= 0) & (col < camera.width) \
        & (row >= 0) & (row < camera.height)
    col, row = col[inside], row[inside]
    ok = depth_valid[row, col]
    sel = np.flatnonzero(inside)[ok]
    col, row = col[ok], row[ok]

    ray_depth = np.linalg.norm(centers[sel] - camera.translation, axis=1)
    sdf = depth[row, col] - ray_depth
    near = sdf >= -truncation
    sel = sel[near]
    value = np.clip(sdf[near] / truncation, -1.0, 1.0)

    flat_t = grid.tsdf.reshape(-1)
    flat_w = grid.weight.reshape(-1)
    w_old = flat_w[sel]
    seen = w_old > 0
    merged = np.where(seen, (flat_t[sel] * w_old + value) / (w_old + 1.0),
                      value)
    flat_t[sel] = merged
    flat_w[sel] = w_old + 1.0
    return grid


def _compact(verts, faces):
    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return verts[used].copy(), remap[faces]


def marching_cubes(grid, iso=0.0):
    """Extract the iso surface; returns (vertices, faces).

    Every returned vertex lies on an edge between two observed voxels;
    crossings against never-updated voxels (which still hold the +1
    initialization) are discarded, since they trace the observation
    boundary rather than the surface. A grid without a sign change in
    its observed region yields an empty mesh and a warning.
    """
    _EMPTY = np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    observed = grid.weight > 0
    seen = grid.tsdf[observed]
    if seen.size == 0 or seen.min() > iso or seen.max() < iso:
        warnings.warn("no zero crossing in the grid; empty mesh",
                      stacklevel=2)
        return _EMPTY
    try:
        verts, faces, _, _ = measure.marching_cubes(grid.tsdf, level=iso)
    except (ValueError, RuntimeError) as exc:
        warnings.warn(f"isosurface extraction found nothing: {exc}",
                      stacklevel=2)
        return _EMPTY
    lo = np.floor(verts + 1e-9).astype(np.int64)
    hi = np.ceil(verts - 1e-9).astype(np.int64)
    ok = observed[lo[:, 0], lo[:, 1], lo[:, 2]] \
        & observed[hi[:, 0], hi[:, 1], hi[:, 2]]
    faces = faces[ok[faces].all(axis=1)].astype(np.int64)
    if len(faces) == 0:
        warnings.warn("no surface within the observed region", stacklevel=2)
        return _EMPTY
    verts, faces = _compact(verts, faces)
    # grid indices measure voxel centers; shift into world frame
    return verts * grid.voxel_size + grid.origin + 0.5 * grid.voxel_size, \
        faces


def mesh_stats(verts, faces):
    """Edge-manifoldness report: a closed surface has no boundary and
    no edge shared by more than two triangles."""
    faces = np.asarray(faces, dtype=np.int64)
    if len(faces) == 0:
        return {"n_vertices": len(verts), "n_faces": 0, "n_edges": 0,
                "boundary_edges": 0, "nonmanifold_edges": 0,
                "watertight": False}
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]],
                            faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    boundary = int(np.sum(counts == 1))
    nonmanifold = int(np.sum(counts > 2))
    return {"n_vertices": int(len(verts)), "n_faces": int(len(faces)),
            "n_edges": int(len(counts)), "boundary_edges": boundary,
            "nonmanifold_edges": nonmanifold,
            "watertight": boundary == 0 and nonmanifold == 0}


# ----------------------------------------------------------------------
# evaluation

@dataclasses.dataclass(frozen=True)
class ChamferResult:
    a_to_b: float
    b_to_a: float
    symmetric: float


def chamfer(points_a, points_b):
    """Mean nearest-neighbor distance in both directions."""
    a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs non-empty point sets")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    m_ab = float(np.mean(d_ab))
    m_ba = float(np.mean(d_ba))
    return ChamferResult(m_ab, m_ba, 0.5 * (m_ab + m_ba))


def frustum_clean(verts, faces, cameras):
    """Drop triangles whose centroid no training view ever saw.

    Visibility here means the centroid projects inside some camera's
    image bounds in front of its near plane; occlusion is not tested.
    Returns (vertices, faces) with unused vertices compacted away.
    """
    if len(faces) == 0:
        return verts.copy(), faces.copy()
    centroids = verts[faces].mean(axis=1)
    keep = np.zeros(len(faces), dtype=bool)
    for cam in cameras:
        u, v, z = cam.project(centroids)
        keep |= (z > cam.near_clip) & (u >= 0) & (u < cam.width) \
            & (v >= 0) & (v < cam.height)
    return _compact(verts, faces[keep])


# ----------------------------------------------------------------------
# mesh files

def write_obj(path, verts, faces):
    with open(path, "w") as fh:
        fh.write("# surface mesh\n")
        for x, y, z in np.asarray(verts, dtype=np.float64):
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in np.asarray(faces, dtype=np.int64):
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def read_obj(path):
    """Vertices and triangular faces from a Wavefront file.

    Only v/f records are honored; faces must be triangles and may not
    carry texture or normal references.
    """
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0] not in ("v", "f"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            else:
                if len(parts) != 4 or any("/" in p for p in parts[1:]):
                    raise ValueError(
                        "only plain triangular faces are supported")
                faces.append([int(p) - 1 for p in parts[1:]])
    return (np.asarray(verts, dtype=np.float64).reshape(-1, 3),
            np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def write_ply(path, verts, faces, binary=True):
    verts = np.asarray(verts, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    fmt = "binary_little_endian" if binary else "ascii"
    header = "\n".join([
        "ply", f"format {fmt} 1.0",
        f"element vertex {len(verts)}",
        "property float x", "property float y", "property float z",
        f"element face {len(faces)}",
        "property list uchar int vertex_indices",
        "end_header", ""])
    if binary:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(verts.astype("<f4").tobytes())
            for tri in faces:
                fh.write(struct.pack("<B3i", 3, *tri))
    else:
        with open(path, "w") as fh:
            fh.write(header)
            for x, y, z in verts:
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
            for a, b, c in faces:
                fh.write(f"3 {a} {b} {c}\n")


def read_ply(path):
    """Reader for the two layouts write_ply produces."""
    with open(path, "rb") as fh:
        blob = fh.read()
    head_end = blob.index(b"end_header\n") + len(b"end_header\n")
    header = blob[:head_end].decode("ascii").splitlines()
    fmt = next(ln.split()[1] for ln in header if ln.startswith("format"))
    nv = int(next(ln.split()[2] for ln in header
                  if ln.startswith("element vertex")))
    nf = int(next(ln.split()[2] for ln in header
                  if ln.startswith("element face")))
    if fmt == "ascii":
        rows = blob[head_end:].decode("ascii").split()
        verts = np.array(rows[:3 * nv], dtype=np.float64).reshape(nv, 3)
        rest = rows[3 * nv:]
        faces = np.array(rest, dtype=np.int64).reshape(nf, 4)[:, 1:]
        return verts, faces
    body = blob[head_end:]
    verts = np.frombuffer(body, dtype="<f4", count=3 * nv).reshape(nv, 3)
    off = 12 * nv
    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        n = body[off]
        if n != 3:
            raise ValueError("only triangle faces supported")
        faces[i] = struct.unpack_from("<3i", body, off + 1)
        off += 13
    return verts.astype(np.float64), faces


# ----------------------------------------------------------------------
# end-to-end helper

def fuse_views(views, lo, hi, resolution=DEFAULT_RESOLUTION,
               truncation_voxels=DEFAULT_TRUNCATION_VOXELS, clean=True):
    """Integrate (camera, depth, depth_valid) triples and extract a mesh."""
    grid = make_grid(lo, hi, resolution)
    trunc = truncation_voxels * grid.voxel_size
    for camera, depth, valid in views:
        integrate(grid, depth, valid, camera, truncation=trunc)
    verts, faces = marching_cubes(grid)
    if clean and len(faces):
        verts, faces = frustum_clean(verts, faces,
                                     [v[0] for v in views])
    return verts, faces, grid
