"""Shared random-scene builders for the test suite."""

import numpy as np

from surfelfield.surfel import Ray, Surfel, SurfelSet


def random_frame(rng):
    """Random orthonormal (tangent_u, tangent_v, normal)."""
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 2] = -q[:, 2]
    return q[:, 0], q[:, 1], q[:, 2]


def random_surfel(rng, sid=0, weight_range=(0.8, 3.5), scale_range=(0.05, 0.4),
                  center_span=1.0, color=None):
    tu, tv, _ = random_frame(rng)
    return Surfel(
        center=rng.uniform(-center_span, center_span, 3),
        tangent_u=tu, tangent_v=tv,
        scale_u=float(rng.uniform(*scale_range)),
        scale_v=float(rng.uniform(*scale_range)),
        weight=float(rng.uniform(*weight_range)),
        color=color, id=sid,
    )


def ray_hitting(rng, surfel, max_mahalanobis=1.5, origin_dist=(1.0, 3.0)):
    """A ray that crosses the surfel plane inside the given Mahalanobis radius."""
    r = max_mahalanobis * np.sqrt(rng.uniform(0, 1))
    ang = rng.uniform(0, 2 * np.pi)
    u, v = r * np.cos(ang), r * np.sin(ang)
    target = (surfel.center + u * surfel.scale_u * surfel.tangent_u
              + v * surfel.scale_v * surfel.tangent_v)
    n = surfel.normal
    # approach from a random direction biased away from grazing incidence
    while True:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        if abs(d @ n) > 0.2:
            break
    origin = target - d * rng.uniform(*origin_dist)
    return Ray(origin, d)


def surfel_set(surfels, color_kind="none"):
    return SurfelSet.from_surfels(surfels, color_kind)


def rotation_from_vector(phi):
    """Rodrigues rotation matrix for a rotation vector."""
    theta = float(np.linalg.norm(phi))
    if theta < 1e-300:
        return np.eye(3)
    k = np.asarray(phi) / theta
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def perturbed_set(surfels, field, idx, comp, eps):
    """Copy of the set with one optimization coordinate nudged by eps.

    Matches the parameterization the gradients use: centers additive,
    scales and weights in log space, frames as a rotation about axis
    `comp` applied to the whole tangent frame.
    """
    s = surfels.copy()
    if field == "centers":
        s.centers[idx, comp] += eps
    elif field == "log_scales":
        s.scales[idx, comp] *= np.exp(eps)
    elif field == "log_weights":
        s.weights[idx] *= np.exp(eps)
    elif field == "frames":
        e = np.zeros(3)
        e[comp] = eps
        R = rotation_from_vector(e)
        s.tangent_u[idx] = R @ s.tangent_u[idx]
        s.tangent_v[idx] = R @ s.tangent_v[idx]
    elif field == "colors":
        s.colors[idx, comp] += eps
    else:
        raise ValueError(field)
    return s
