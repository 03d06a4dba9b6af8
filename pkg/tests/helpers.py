"""Shared test oracles: finite differences and quadrature utilities."""

import numpy as np


def central_difference_gradient(f, x, h=1e-5):
    """Independent gradient oracle: central finite differences of f at x."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def assert_gradient_matches(f, grad, points, rtol=1e-4, atol=1e-6, h=1e-5):
    for x in points:
        fd = central_difference_gradient(f, x, h=h)
        an = np.asarray(grad(x), dtype=float)
        np.testing.assert_allclose(an, fd, rtol=rtol, atol=atol)
