"""Monotone rational-quadratic splines with linear tails.

Each spline is a strictly increasing C^1 map R -> R defined by knot locations
``kx``, knot values ``ky`` and positive knot derivatives ``kd``; between knots
it is the rational-quadratic interpolant, beyond the outermost knots it
continues linearly with the boundary derivative, so the map and its derivative
are defined on all of R and the inverse is analytic per segment (no root
search). Inputs landing exactly on a knot use the right-hand segment.

All functions are batched: knots have shape (K, n_knots) and points (N, K);
column k of the input goes through spline k.
"""

from __future__ import annotations

import numpy as np

__all__ = ["spline_forward", "spline_inverse", "spline_curvature"]

_MIN_DERIV = 1e-12


def _check_knots(kx: np.ndarray, ky: np.ndarray, kd: np.ndarray) -> None:
    if kx.ndim != 2 or kx.shape != ky.shape or kx.shape != kd.shape:
        raise ValueError("knot arrays must share shape (K, n_knots)")
    if np.any(np.diff(kx, axis=1) <= 0) or np.any(np.diff(ky, axis=1) <= 0):
        raise ValueError("knot locations and values must be strictly increasing")
    if np.any(kd <= 0):
        raise ValueError("knot derivatives must be positive")


def _segments(points: np.ndarray, knots: np.ndarray) -> np.ndarray:
    # index j means points in [knots[j-1], knots[j]); 0 and n_knots are tails
    idx = np.empty(points.shape, dtype=np.intp)
    for k in range(knots.shape[0]):
        idx[:, k] = np.searchsorted(knots[k], points[:, k], side="right")
    return idx


def _gather(arr: np.ndarray, idx: np.ndarray) -> np.ndarray:
    # arr: (K, n_knots), idx: (N, K) of column indices -> (N, K)
    return arr[np.arange(arr.shape[0])[None, :], idx]


def spline_forward(
    x: np.ndarray, kx: np.ndarray, ky: np.ndarray, kd: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the splines; returns (y, log dy/dx), both shaped like x."""
    _check_knots(kx, ky, kd)
    x = np.asarray(x, dtype=float)
    idx = _segments(x, kx)
    n_knots = kx.shape[1]

    y = np.empty_like(x)
    logd = np.empty_like(x)

    lo = idx == 0
    hi = idx == n_knots
    mid = ~(lo | hi)

    if np.any(lo):
        _, cols = np.nonzero(lo)
        y[lo] = ky[cols, 0] + (x[lo] - kx[cols, 0]) * kd[cols, 0]
        logd[lo] = np.log(kd[cols, 0])
    if np.any(hi):
        _, cols = np.nonzero(hi)
        y[hi] = ky[cols, -1] + (x[hi] - kx[cols, -1]) * kd[cols, -1]
        logd[hi] = np.log(kd[cols, -1])
    if np.any(mid):
        _, cols = np.nonzero(mid)
        j = idx[mid]
        x0, x1 = kx[cols, j - 1], kx[cols, j]
        y0, y1 = ky[cols, j - 1], ky[cols, j]
        d0, d1 = kd[cols, j - 1], kd[cols, j]
        h = x1 - x0
        s = (y1 - y0) / h
        xi = (x[mid] - x0) / h
        xi1m = xi * (1.0 - xi)
        den = s + (d0 + d1 - 2.0 * s) * xi1m
        y[mid] = y0 + (y1 - y0) * (s * xi**2 + d0 * xi1m) / den
        num = d1 * xi**2 + 2.0 * s * xi1m + d0 * (1.0 - xi) ** 2
        logd[mid] = 2.0 * np.log(s) + np.log(num) - 2.0 * np.log(den)
    return y, logd


def spline_inverse(
    y: np.ndarray, kx: np.ndarray, ky: np.ndarray, kd: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Invert the splines; returns (x, log dy/dx evaluated at x)."""
    _check_knots(kx, ky, kd)
    y = np.asarray(y, dtype=float)
    idx = _segments(y, ky)
    n_knots = ky.shape[1]

    x = np.empty_like(y)
    logd = np.empty_like(y)

    lo = idx == 0
    hi = idx == n_knots
    mid = ~(lo | hi)

    if np.any(lo):
        _, cols = np.nonzero(lo)
        x[lo] = kx[cols, 0] + (y[lo] - ky[cols, 0]) / kd[cols, 0]
        logd[lo] = np.log(kd[cols, 0])
    if np.any(hi):
        _, cols = np.nonzero(hi)
        x[hi] = kx[cols, -1] + (y[hi] - ky[cols, -1]) / kd[cols, -1]
        logd[hi] = np.log(kd[cols, -1])
    if np.any(mid):
        _, cols = np.nonzero(mid)
        j = idx[mid]
        x0, x1 = kx[cols, j - 1], kx[cols, j]
        y0, y1 = ky[cols, j - 1], ky[cols, j]
        d0, d1 = kd[cols, j - 1], kd[cols, j]
        h = x1 - x0
        dy = y1 - y0
        s = dy / h
        r = y[mid] - y0
        two_s = d0 + d1 - 2.0 * s
        a = dy * (s - d0) + r * two_s
        b = dy * d0 - r * two_s
        c = -s * r
        disc = b**2 - 4.0 * a * c
        # roundoff can push a tiny discriminant negative at segment edges
        disc = np.maximum(disc, 0.0)
        xi = 2.0 * c / (-b - np.sqrt(disc))
        xi = np.clip(xi, 0.0, 1.0)
        x[mid] = x0 + xi * h
        xi1m = xi * (1.0 - xi)
        den = s + two_s * xi1m
        num = d1 * xi**2 + 2.0 * s * xi1m + d0 * (1.0 - xi) ** 2
        logd[mid] = 2.0 * np.log(s) + np.log(num) - 2.0 * np.log(den)
    return x, logd


def spline_curvature(
    x: np.ndarray, kx: np.ndarray, ky: np.ndarray, kd: np.ndarray
) -> np.ndarray:
    """d/dx of log dy/dx, i.e. g''(x)/g'(x); zero on the linear tails."""
    _check_knots(kx, ky, kd)
    x = np.asarray(x, dtype=float)
    idx = _segments(x, kx)
    out = np.zeros_like(x)
    mid = (idx > 0) & (idx < kx.shape[1])
    if np.any(mid):
        _, cols = np.nonzero(mid)
        j = idx[mid]
        x0, x1 = kx[cols, j - 1], kx[cols, j]
        y0, y1 = ky[cols, j - 1], ky[cols, j]
        d0, d1 = kd[cols, j - 1], kd[cols, j]
        h = x1 - x0
        s = (y1 - y0) / h
        xi = (x[mid] - x0) / h
        xi1m = xi * (1.0 - xi)
        num = d1 * xi**2 + 2.0 * s * xi1m + d0 * (1.0 - xi) ** 2
        dnum = 2.0 * d1 * xi + 2.0 * s * (1.0 - 2.0 * xi) - 2.0 * d0 * (1.0 - xi)
        den = s + (d0 + d1 - 2.0 * s) * xi1m
        dden = (d0 + d1 - 2.0 * s) * (1.0 - 2.0 * xi)
        out[mid] = (dnum / np.maximum(num, _MIN_DERIV) - 2.0 * dden / den) / h
    return out
