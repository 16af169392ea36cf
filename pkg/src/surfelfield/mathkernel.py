"""Footprint algebra: the scalar machinery every other module leans on.

A surfel hit with kernel value f contributes a footprint

    rho = S(min(f, f_max)),   S(u) = -2 * ln(Psi(c - u) / Psi(c))

where Psi is the standard normal CDF and c is the vacancy offset of the
geometry field. 1 - exp(-rho) is the opacity the compositor uses. The
normalization by Psi(c) makes S(0) = 0 exactly (with c = 3 the raw value
is -2*ln Psi(3) ~= 0.0027); the unnormalized form stays available via
``normalize_s0=False`` for A/B comparisons.

S is a monotone bijection of [0, inf), so kernel values combine through

    a (+) b = S^-1(S(a) + S(b))

which makes footprints of coincident surfels exactly additive. The merge
map deliberately uses the *unclamped* S: the clamp min(f, f_max) belongs
to rendering, and a clamped S would have no inverse above S(f_max).

The polynomial fast path 0.03279 * f^3.4 approximates S on the upper part
of the working range; its pointwise error blows up as f -> 0 (S is linear
near zero, the power law is not), so it is off by default and selected
explicitly where the cheap approximation is acceptable.
"""

import dataclasses
import math

import numpy as np
from scipy.special import log_ndtr, ndtr

FAST_COEFF = 0.03279
FAST_POWER = 3.4

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclasses.dataclass(frozen=True)
class FootprintConfig:
    c: float = 3.0
    f_max: float = 4.28
    fast_path: bool = False
    normalize_s0: bool = True

    def __post_init__(self):
        if not (self.c > 0):
            raise ValueError(f"c must be positive, got {self.c}")
        if not (self.f_max > 0):
            raise ValueError(f"f_max must be positive, got {self.f_max}")
        # clamp ceiling must keep converted opacity at ~0.99
        opacity = 1.0 - math.exp(-float(_s(np.float64(self.f_max), self)))
        if opacity > 0.99 + 1e-3:
            raise ValueError(
                f"f_max={self.f_max} gives clamp opacity {opacity:.6f} > 0.991"
            )


def _as_array(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def _restore(x, arr):
    if np.isscalar(x) or getattr(x, "ndim", 1) == 0:
        return float(arr)
    return arr


def std_normal_cdf(x):
    """Psi(x) = 0.5 * (1 + erf(x / sqrt(2))). Scalar or ndarray."""
    arr = _as_array(x, "x")
    return _restore(x, ndtr(arr))


def std_normal_pdf(x):
    arr = _as_array(x, "x")
    return _restore(x, np.exp(-0.5 * arr * arr - _LOG_SQRT_2PI))


def log_std_normal_cdf(x):
    """ln Psi(x), stable far into the left tail."""
    arr = _as_array(x, "x")
    return _restore(x, log_ndtr(arr))


def _s_exact(u, cfg):
    # unclamped monotone map; log_ndtr keeps precision where Psi ~ 1
    v = -2.0 * log_ndtr(cfg.c - u)
    if cfg.normalize_s0:
        v = v + 2.0 * log_ndtr(cfg.c)
    return v


def _s(u, cfg):
    if cfg.fast_path:
        return FAST_COEFF * np.power(u, FAST_POWER)
    return _s_exact(u, cfg)


DEFAULT_CONFIG = FootprintConfig()


def footprint(f, cfg=DEFAULT_CONFIG):
    """rho for kernel value f >= 0, with the f_max clamp applied."""
    arr = _as_array(f, "f")
    if np.any(arr < 0):
        raise ValueError("kernel value must be >= 0")
    clamped = np.minimum(arr, cfg.f_max)
    return _restore(f, _s(clamped, cfg))


def footprint_grad(f, cfg=DEFAULT_CONFIG):
    """d rho / d f; zero above the clamp."""
    arr = _as_array(f, "f")
    if np.any(arr < 0):
        raise ValueError("kernel value must be >= 0")
    if cfg.fast_path:
        grad = FAST_COEFF * FAST_POWER * np.power(arr, FAST_POWER - 1.0)
    else:
        # 2 * pdf(c-f) / cdf(c-f), evaluated in log space so the ratio
        # survives arguments deep in the left tail
        x = cfg.c - arr
        log_ratio = (-0.5 * x * x - _LOG_SQRT_2PI) - log_ndtr(x)
        grad = 2.0 * np.exp(log_ratio)
    grad = np.where(arr > cfg.f_max, 0.0, grad)
    return _restore(f, grad)


def s_inverse(v, cfg=DEFAULT_CONFIG):
    """Inverse of the unclamped S by bracketed bisection, |S(u)-v| <= 1e-9."""
    arr = _as_array(v, "v")
    if np.any(arr < 0):
        raise ValueError("v must be >= 0")
    lo = np.zeros_like(arr)
    hi = np.full_like(arr, cfg.f_max + 10.0)
    # expand the bracket for values beyond the default range
    for _ in range(60):
        short = _s(hi, cfg) < arr
        if not np.any(short):
            break
        hi = np.where(short, hi * 2.0, hi)
    while np.max(hi - lo) > 1e-12:
        mid = 0.5 * (lo + hi)
        below = _s(mid, cfg) < arr
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return _restore(v, 0.5 * (lo + hi))


def oplus(a, b, cfg=DEFAULT_CONFIG):
    """Kernel-value merge: S^-1(S(a) + S(b)). Commutative by construction."""
    aa = _as_array(a, "a")
    bb = _as_array(b, "b")
    if np.any(aa < 0) or np.any(bb < 0):
        raise ValueError("kernel values must be >= 0")
    out = s_inverse(_s(aa, cfg) + _s(bb, cfg), cfg)
    if np.isscalar(a) and np.isscalar(b):
        return float(out)
    return out


def opacity_floor_kernel_value(cfg=DEFAULT_CONFIG, floor=1.0 / 255.0):
    """Smallest f whose converted opacity reaches `floor` (compositor skip level)."""
    return s_inverse(-math.log1p(-floor), cfg)
