"""Coordinate-wise maps between constrained and unconstrained space.

Sampling always happens in unconstrained space. Each coordinate carries one of
three transform kinds:

* ``identity`` — unbounded coordinate, x = u;
* ``logit`` on (a, b)  — x = a + (b - a) * sigmoid(u);
* ``log`` on (a, inf)  — x = a + exp(u).

The pushforward of a constrained-space density picks up the factor
|dx/du| per coordinate; ``log_jacobian`` returns the summed log factor, which
targets fold into their prior potential.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError

__all__ = ["ParameterTransform"]

_KINDS = ("identity", "logit", "log")


def _softplus(u: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, u)


def _sigmoid(u: np.ndarray) -> np.ndarray:
    out = np.empty_like(u, dtype=float)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True)
class ParameterTransform:
    """Per-coordinate transform kinds with their bounds."""

    kinds: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        if len(self.kinds) != len(self.lower) or len(self.kinds) != len(self.upper):
            raise ConfigurationError("kinds and bounds must have equal length")
        for i, kind in enumerate(self.kinds):
            if kind not in _KINDS:
                raise ConfigurationError(f"unknown transform kind {kind!r}")
            if kind == "logit" and not self.lower[i] < self.upper[i]:
                raise ConfigurationError("logit transform needs lower < upper")

    @property
    def dim(self) -> int:
        return len(self.kinds)

    @property
    def is_identity(self) -> bool:
        return all(k == "identity" for k in self.kinds)

    @classmethod
    def identity(cls, dim: int) -> "ParameterTransform":
        return cls(("identity",) * dim, np.full(dim, -np.inf), np.full(dim, np.inf))

    @classmethod
    def box(cls, dim: int, lower: float, upper: float) -> "ParameterTransform":
        """Logit transform on the same (lower, upper) interval per coordinate."""
        return cls(("logit",) * dim, np.full(dim, float(lower)), np.full(dim, float(upper)))

    @classmethod
    def mixed(cls, kinds, lower, upper) -> "ParameterTransform":
        return cls(tuple(kinds), np.asarray(lower, float), np.asarray(upper, float))

    def _masks(self):
        kinds = np.array(self.kinds)
        return kinds == "logit", kinds == "log"

    def to_unconstrained(self, x: np.ndarray) -> np.ndarray:
        """Map constrained coordinates to R^d; errors on/outside bounds."""
        x = np.asarray(x, dtype=float)
        u = np.array(x, copy=True)
        logit, log = self._masks()
        if np.any(logit):
            a, b = self.lower[logit], self.upper[logit]
            xs = x[..., logit]
            if np.any(xs <= a) or np.any(xs >= b):
                raise DomainError("coordinate on or outside its logit bounds")
            p = (xs - a) / (b - a)
            u[..., logit] = np.log(p) - np.log1p(-p)
        if np.any(log):
            a = self.lower[log]
            xs = x[..., log]
            if np.any(xs <= a):
                raise DomainError("coordinate on or below its log bound")
            u[..., log] = np.log(xs - a)
        return u

    def to_constrained(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        x = np.array(u, copy=True)
        logit, log = self._masks()
        if np.any(logit):
            a, b = self.lower[logit], self.upper[logit]
            x[..., logit] = a + (b - a) * _sigmoid(u[..., logit])
        if np.any(log):
            x[..., log] = self.lower[log] + np.exp(u[..., log])
        return x

    def log_jacobian(self, u: np.ndarray) -> np.ndarray:
        """Sum over coordinates of log|dx/du|; shape = u.shape[:-1]."""
        u = np.asarray(u, dtype=float)
        out = np.zeros(u.shape[:-1])
        logit, log = self._masks()
        if np.any(logit):
            a, b = self.lower[logit], self.upper[logit]
            us = u[..., logit]
            out = out + np.sum(np.log(b - a) - _softplus(us) - _softplus(-us), axis=-1)
        if np.any(log):
            out = out + np.sum(u[..., log], axis=-1)
        return out

    def grad_log_jacobian(self, u: np.ndarray) -> np.ndarray:
        """Per-coordinate d/du of log|dx/du|."""
        u = np.asarray(u, dtype=float)
        g = np.zeros_like(u)
        logit, log = self._masks()
        if np.any(logit):
            g[..., logit] = 1.0 - 2.0 * _sigmoid(u[..., logit])
        if np.any(log):
            g[..., log] = 1.0
        return g

    def jacobian_diag(self, u: np.ndarray) -> np.ndarray:
        """Per-coordinate dx/du (the diagonal Jacobian of to_constrained)."""
        u = np.asarray(u, dtype=float)
        j = np.ones_like(u)
        logit, log = self._masks()
        if np.any(logit):
            a, b = self.lower[logit], self.upper[logit]
            s = _sigmoid(u[..., logit])
            j[..., logit] = (b - a) * s * (1.0 - s)
        if np.any(log):
            j[..., log] = np.exp(u[..., log])
        return j
