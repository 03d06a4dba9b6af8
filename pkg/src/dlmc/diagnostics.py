"""Run-quality metrics: moment summaries, second-moment bias, cost ledger.

The headline metric is the squared bias of estimated second moments relative
to reference values, averaged over coordinates; b^2 = 0.01 corresponds to a
Gaussian-equivalent effective sample size of 200. The cost ledger converts
likelihood-call counts into simulated sequential and N-way-parallel seconds.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "MomentSummary",
    "CostLedger",
    "ReferenceMoments",
    "summarize_moments",
    "bias_squared_second_moment",
    "ess_gaussian_equivalent",
    "update_cost_ledger",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MomentSummary:
    """Per-coordinate first and raw second moments of an ensemble."""

    mean: np.ndarray
    second_moment: np.ndarray
    n: int
    iteration: int = 0

    def __post_init__(self):
        # allow a whisker of rounding slack in the variance check
        slack = 1e-12 * (1.0 + np.abs(self.second_moment))
        if np.any(self.second_moment < self.mean**2 - slack):
            raise ConfigurationError("second moment below squared mean")


def summarize_moments(samples: np.ndarray, iteration: int = 0) -> MomentSummary:
    samples = np.asarray(samples, dtype=float)
    return MomentSummary(
        mean=samples.mean(axis=0),
        second_moment=(samples**2).mean(axis=0),
        n=samples.shape[0],
        iteration=iteration,
    )


@dataclass(frozen=True)
class ReferenceMoments:
    """True per-coordinate second moments with provenance."""

    second_moment: np.ndarray
    provenance: str  # "analytic" | "quadrature-oracle" | "long-reference-run"
    mean: np.ndarray | None = None
    mean_se: np.ndarray | None = None
    second_moment_se: np.ndarray | None = None
    detail: dict = field(default_factory=dict)

    def __post_init__(self):
        allowed = ("analytic", "quadrature-oracle", "long-reference-run")
        if self.provenance not in allowed:
            raise ConfigurationError(f"provenance must be one of {allowed}")


def bias_squared_second_moment(
    est: MomentSummary, ref: ReferenceMoments
) -> tuple[float, float]:
    """Mean and max over coordinates of squared relative second-moment error.

    Coordinates whose reference moment is zero are excluded (and logged).
    """
    e = np.asarray(est.second_moment, dtype=float)
    r = np.asarray(ref.second_moment, dtype=float)
    if e.shape != r.shape:
        raise ConfigurationError("estimate and reference dimensions differ")
    usable = r != 0.0
    if not np.all(usable):
        log.warning("excluding %d zero-reference coordinates", np.sum(~usable))
    if not np.any(usable):
        raise ConfigurationError("no usable reference coordinates")
    rel = (e[usable] - r[usable]) / r[usable]
    return float(np.mean(rel**2)), float(np.max(rel**2))


def ess_gaussian_equivalent(b2: float) -> float:
    """ESS implied by a bias^2 level for Gaussian second moments (2 / b^2)."""
    if b2 < 0:
        raise ConfigurationError("bias^2 must be nonnegative")
    if b2 == 0.0:
        return math.inf
    return 2.0 / b2


@dataclass(frozen=True)
class CostLedger:
    """Simulated wall-clock accounting for expensive likelihood calls."""

    likelihood_calls: int = 0
    gradient_calls: int = 0
    sequential_seconds: float = 0.0
    parallel_seconds: float = 0.0
    flow_fit_seconds: float = 0.0

    def __post_init__(self):
        if self.sequential_seconds + 1e-9 < self.parallel_seconds:
            raise ConfigurationError("sequential time below parallel time")

    def add_flow_fit(self, seconds: float) -> "CostLedger":
        return replace(self, flow_fit_seconds=self.flow_fit_seconds + seconds)

    def add_gradient_calls(self, n_calls: int) -> "CostLedger":
        return replace(self, gradient_calls=self.gradient_calls + int(n_calls))


def update_cost_ledger(
    ledger: CostLedger, n_calls: int, n_particles: int, cost_per_call: float
) -> CostLedger:
    """Charge n_calls likelihood evaluations, N-way parallel across particles.

    Sequential time grows by n_calls * cost; parallel time by
    ceil(n_calls / n_particles) rounds of cost each.
    """
    if n_calls < 0 or n_particles <= 0 or cost_per_call < 0:
        raise ConfigurationError("cost ledger update with negative inputs")
    if n_calls == 0:
        return ledger
    rounds = math.ceil(n_calls / n_particles)
    return replace(
        ledger,
        likelihood_calls=ledger.likelihood_calls + int(n_calls),
        sequential_seconds=ledger.sequential_seconds + n_calls * cost_per_call,
        parallel_seconds=ledger.parallel_seconds + rounds * cost_per_call,
    )
