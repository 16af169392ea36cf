"""Color smoothing that removes depth-order discontinuities.

Composited radiance jumps when two surfels swap depth order along a ray,
unless coincident surfels carry equal colors at the swap instant. Both
blends below enforce exactly that: each record's color is replaced by a
weighted average over its neighbors, with weights that depend symmetrically
on separation, so records at identical positions receive bitwise identical
blends and the swap is crossed continuously.

Two variants share the kernel (1 - e^{-w_j}) * e^{-tau * d_ij}:
per-ray blending measures d_ij along the ray (exact, one pass per ray),
spatial blending measures d_ij between surfel centers restricted to a
k-nearest-neighbor table (cheap, refreshed on a schedule). The blended
quantity is whatever the color attribute carries: raw rgb, basis
coefficients, or shading latents.
"""

import dataclasses
import warnings

import numpy as np

# below this count a full scan beats building the grid
_SCAN_LIMIT = 64


@dataclasses.dataclass(frozen=True)
class BlendConfig:
    tau: float = 100.0
    k: int = 10
    refresh_interval: int = 100
    mode: str = "spatial"

    def __post_init__(self):
        if not (self.tau > 0):
            raise ValueError("tau must be positive")
        if int(self.k) < 1:
            raise ValueError("k must be at least 1")
        if int(self.refresh_interval) < 1:
            raise ValueError("refresh_interval must be at least 1")
        if self.mode not in ("per_ray", "spatial"):
            raise ValueError("mode must be per_ray or spatial")


# ----------------------------------------------------------------------
# per-ray blend


def blend_per_ray(t, weights, colors, tau=100.0):
    """Blend record colors along one ray.

    c_hat_i = sum_j (1-e^{-w_j}) e^{-tau|t_j-t_i|} c_j / (same without c_j).

    The |t_j - t_i| matrix is formed as one outer difference so that rows
    belonging to equal depths are elementwise identical, which makes the
    coincidence identity (t_i = t_j implies c_hat_i = c_hat_j) hold
    bitwise, not just to rounding.

    Rows whose denominator underflows to zero (only possible when every
    reachable weight is zero) pass their input color through unchanged.

    Returns (blended colors, cache for blend_per_ray_backward).
    """
    t = np.asarray(t, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    n = t.shape[0]
    if colors.shape[0] != n or weights.shape[0] != n:
        raise ValueError("t, weights, colors must agree in length")
    if n == 0:
        return colors.copy(), None

    beta = -np.expm1(-weights)                      # 1 - e^{-w}, exact near 0
    K = np.exp(-tau * np.abs(t[None, :] - t[:, None]))
    B = K * beta[None, :]
    S = B.sum(axis=1)
    safe = S > 0.0
    P = np.zeros_like(B)
    P[safe] = B[safe] / S[safe, None]
    P[~safe, ~safe] = 1.0                           # pass-through rows
    chat = P @ colors
    cache = {"t": t, "weights": weights, "colors": colors, "tau": tau,
             "beta": beta, "K": K, "S": S, "safe": safe, "P": P, "chat": chat}
    return chat, cache


def blend_per_ray_backward(cache, d_chat):
    """Adjoint of blend_per_ray. Returns (d_t, d_weights, d_colors)."""
    if cache is None:
        return np.zeros(0), np.zeros(0), np.asarray(d_chat).copy()
    t, colors, tau = cache["t"], cache["colors"], cache["tau"]
    beta, K, S, safe, P = (cache["beta"], cache["K"], cache["S"],
                           cache["safe"], cache["P"])
    d_chat = np.asarray(d_chat, dtype=np.float64)

    d_colors = P.T @ d_chat
    # dB_ij = d_chat_i . (c_j - chat_i) / S_i on rows with a live denominator
    M = d_chat @ colors.T - np.sum(d_chat * cache["chat"], axis=1)[:, None]
    M[safe] /= S[safe, None]
    M[~safe] = 0.0
    d_beta = np.sum(M * K, axis=0)
    d_weights = d_beta * np.exp(-cache["weights"])
    dK = M * beta[None, :]
    A = dK * (-tau) * K * np.sign(t[None, :] - t[:, None])
    d_t = A.sum(axis=0) - A.sum(axis=1)
    return d_t, d_weights, d_colors


def ray_blender(cfg):
    """Adapter for the reference renderer's per-record color hook."""
    def fn(records, colors):
        t = np.array([r.t for r in records])
        w = np.array([r.weight for r in records])
        return blend_per_ray(t, w, colors, cfg.tau)[0]
    return fn


# ----------------------------------------------------------------------
# exact k nearest neighbors

def _scan_knn(x, k):
    n = x.shape[0]
    ids = np.broadcast_to(np.arange(n), (n, n))
    table = np.empty((n, k), dtype=np.int64)
    step = max(1, int(4e6) // max(n, 1))
    for a in range(0, n, step):
        b = min(a + step, n)
        d2 = np.sum((x[a:b, None, :] - x[None, :, :]) ** 2, axis=2)
        order = np.lexsort((ids[a:b], d2), axis=1)
        table[a:b] = order[:, :k]
    return table


def _shell_keys(cx, cy, cz, r):
    # cells at Chebyshev distance exactly r, deterministic order
    if r == 0:
        yield (cx, cy, cz)
        return
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            for dz in range(-r, r + 1):
                if max(abs(dx), abs(dy), abs(dz)) == r:
                    yield (cx + dx, cy + dy, cz + dz)


def _grid_knn(x, k):
    n = x.shape[0]
    lo = x.min(axis=0)
    extent = x.max(axis=0) - lo
    vol = float(np.prod(np.maximum(extent, 1e-12)))
    cell = max((2.0 * vol / n) ** (1.0 / 3.0), 1e-12)
    coords = np.floor((x - lo) / cell).astype(np.int64)
    max_ring = int(np.max(coords.max(axis=0) - coords.min(axis=0))) + 1

    buckets = {}
    for i in range(n):
        buckets.setdefault(tuple(coords[i]), []).append(i)
    buckets = {key: np.asarray(v, dtype=np.int64) for key, v in buckets.items()}

    table = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        cx, cy, cz = coords[i]
        cand = []
        best = None
        kth_d2 = np.inf
        for r in range(max_ring + 1):
            for key in _shell_keys(cx, cy, cz, r):
                hit = buckets.get(key)
                if hit is not None:
                    cand.append(hit)
            if cand:
                ids = np.concatenate(cand)
                d2 = np.sum((x[ids] - x[i]) ** 2, axis=1)
                order = np.lexsort((ids, d2))[:k]
                best = ids[order]
                if best.shape[0] == k:
                    kth_d2 = d2[order[-1]]
            # nothing beyond ring r can beat a kth distance under r*cell;
            # strict test keeps distance ties eligible for the id rule
            if best is not None and best.shape[0] == k and \
                    kth_d2 < (r * cell) ** 2:
                break
        table[i] = best
    return table


def knn(centers, k, method="auto"):
    """Exact k nearest neighbors of each center, self included.

    Ordering inside a row is (squared distance, id) ascending, so
    duplicates resolve deterministically. Fewer than k centers returns
    an (n, n) table and warns.
    """
    x = np.asarray(centers, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise ValueError("centers must be (n, 3)")
    n = x.shape[0]
    if n == 0:
        raise ValueError("no centers")
    if n < k:
        warnings.warn("fewer centers than k; returning all neighbors",
                      stacklevel=2)
        k = n
    if method == "auto":
        method = "scan" if n <= _SCAN_LIMIT else "grid"
    if method == "scan":
        return _scan_knn(x, k)
    if method == "grid":
        return _grid_knn(x, k)
    raise ValueError("method must be auto, scan or grid")


# ----------------------------------------------------------------------
# spatial blend over a frozen neighbor table


def blend_spatial(surfels, table, tau=100.0):
    """Blend surfel colors over their k-nearest-neighbor table.

    Same kernel as the per-ray blend with |t_j - t_i| replaced by the
    center distance ||m_i - m_j||. Returns (blended colors, cache).
    """
    table = np.asarray(table)
    if table.ndim != 2 or table.shape[0] != len(surfels):
        raise ValueError("table must be (n, k) over the surfel set")
    if table.shape[1] < 1:
        raise ValueError("empty neighbor rows")
    if surfels.colors is None:
        raise ValueError("surfel set has no color attribute")
    m = surfels.centers
    colors = surfels.colors
    diff = m[:, None, :] - m[table]                 # (n, k, 3)
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    beta = -np.expm1(-surfels.weights)
    K = np.exp(-tau * dist)
    B = K * beta[table]
    S = B.sum(axis=1)
    safe = S > 0.0
    P = np.zeros_like(B)
    P[safe] = B[safe] / S[safe, None]
    chat = np.einsum("nk,nkc->nc", P, colors[table])
    chat[~safe] = colors[~safe]
    cache = {"table": table, "m": m, "colors": colors, "tau": tau,
             "weights": surfels.weights, "beta": beta, "diff": diff,
             "dist": dist, "K": K, "S": S, "safe": safe, "P": P,
             "chat": chat}
    return chat, cache


def blend_spatial_backward(cache, d_chat):
    """Adjoint of blend_spatial.

    Returns (d_centers, d_weights, d_colors); gradients flow through the
    blend coefficients as well as the blended colors.
    """
    table, colors, tau = cache["table"], cache["colors"], cache["tau"]
    beta, K, S, safe, P = (cache["beta"], cache["K"], cache["S"],
                           cache["safe"], cache["P"])
    d_chat = np.asarray(d_chat, dtype=np.float64)
    n, k = table.shape

    d_colors = np.zeros_like(colors)
    np.add.at(d_colors, table, P[:, :, None] * d_chat[:, None, :])
    d_chat_safe = np.where(safe[:, None], d_chat, 0.0)
    d_colors[~safe] += d_chat[~safe]                # pass-through rows

    # dB_ik = d_chat_i . (c_{table_ik} - chat_i) / S_i
    M = np.einsum("nc,nkc->nk", d_chat_safe,
                  colors[table] - cache["chat"][:, None, :])
    M[safe] /= S[safe, None]
    M[~safe] = 0.0

    d_weights = np.zeros(n)
    np.add.at(d_weights, table, M * K)
    d_weights *= np.exp(-cache["weights"])

    dist = cache["dist"]
    d_dist = M * beta[table] * (-tau) * K
    unit = np.zeros_like(cache["diff"])
    nz = dist > 0.0
    unit[nz] = cache["diff"][nz] / dist[nz, None]
    d_centers = np.sum(d_dist[:, :, None] * unit, axis=1)
    np.add.at(d_centers, table, -d_dist[:, :, None] * unit)
    return d_centers, d_weights, d_colors
