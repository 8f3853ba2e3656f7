"""Fused pointwise kernels for the time-stepping hot path."""

import math

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None


def _logdet_min_eig_2(a, d, br, bi):
    n = a.size
    out = np.empty(n)
    lam_min = math.inf
    idx = 0
    for i in range(n):
        ai, di = a[i], d[i]
        b2 = br[i] * br[i] + bi[i] * bi[i]
        half = 0.5 * (ai - di)
        lam = 0.5 * (ai + di) - math.sqrt(half * half + b2)
        if lam < lam_min:
            lam_min = lam
            idx = i
        det = ai * di - b2
        out[i] = math.log(det) if det > 0.0 else math.nan
    return out, lam_min, idx


if njit is not None:
    _logdet_min_eig_2 = njit(cache=True)(_logdet_min_eig_2)


def logdet_min_eig(components, n):
    """``log det`` field, global smallest eigenvalue and its flat index."""
    if n == 1:
        a = components[0]
        idx = int(np.argmin(a))
        lam = float(a.flat[idx])
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.log(a), lam, idx
    flat = [np.ascontiguousarray(c).reshape(-1) for c in components]
    out, lam, idx = _logdet_min_eig_2(*flat)
    return out.reshape(components[0].shape), float(lam), int(idx)
