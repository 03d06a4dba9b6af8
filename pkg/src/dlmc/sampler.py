"""Deterministic Langevin particle sampler.

The driver loop is: draw particles from the prior, take one likelihood-only
gradient step, then iterate (fit flow to particle positions) -> (move every
particle along the descent direction of U minus the flow's log density, in
flow latent space when preconditioning is on) -> (Metropolis-Hastings pass
with independent flow proposals), until the ensemble's moments stop drifting.

Cost accounting: every target evaluation event computes the potential and its
gradient together for a block of particles and counts one likelihood call and
one gradient call per particle. A DL update is one event at the N updated
positions; an MH pass is one event at the N proposals.

All randomness flows through per-particle substreams addressed by
(seed, purpose, particle, iteration); see ``dlmc.rng``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .diagnostics import (
    CostLedger,
    MomentSummary,
    summarize_moments,
    update_cost_ledger,
)
from .errors import ConfigurationError
from .flow import MIN_FIT_SAMPLES, FlowModel, fit_flow
from .parallel import chunked_map
from .rng import per_particle_normals, per_particle_uniforms, substream
from .targets import TargetDensity

__all__ = [
    "ParticleEnsemble",
    "DlmcConfig",
    "AdagradState",
    "RunRecord",
    "RunResult",
    "TargetEvaluator",
    "init_from_prior",
    "dl_update",
    "dl_update_latent",
    "mh_adjust",
    "upsample_ensemble",
    "check_convergence",
    "run_dlmc",
    "fit_or_whitening_flow",
]

log = logging.getLogger(__name__)

STEP_RANGE = (0.001, 0.1)
# Per-coordinate cap on the initial likelihood step. Steep likelihoods
# (quartic tails) produce gradients of 1e3+ at prior draws; an uncapped
# plain step would fling the ensemble far outside every scale of interest.
INIT_STEP_CLIP = 1.0


@dataclass
class ParticleEnsemble:
    """N particles in unconstrained space with cached target/flow values."""

    positions: np.ndarray  # (N, d)
    potential_values: np.ndarray  # (N,)
    grad_potentials: np.ndarray  # (N, d)
    flow_log_densities: np.ndarray | None = None  # (N,)
    iteration: int = 0

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class DlmcConfig:
    """Sampler settings; defaults follow the benchmark protocol."""

    step_size: float = 0.05
    optimizer: str = "adagrad"  # "adagrad" | "plain-gradient"
    latent_space: bool = True
    mh_enabled: bool = True
    n_particles: int = 200
    burnin: tuple[int, int] | None = None  # (n_small, iterations)
    upsample_to: int | None = None
    convergence_window: int = 5
    convergence_tol: float = 0.02
    max_iterations: int = 200
    seed: int = 0
    workers: int = 1
    allow_step_size_out_of_range: bool = False
    flow_max_layers: int = 40
    flow_knots: int = 16

    def __post_init__(self):
        lo, hi = STEP_RANGE
        if not self.allow_step_size_out_of_range and not lo <= self.step_size <= hi:
            raise ConfigurationError(
                f"step_size {self.step_size} outside [{lo}, {hi}] "
                "(set allow_step_size_out_of_range to override)"
            )
        if self.optimizer not in ("adagrad", "plain-gradient", "normalized-gradient"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.n_particles < 2:
            raise ConfigurationError("n_particles must be >= 2")
        if self.burnin is not None:
            n_small, iters = self.burnin
            if n_small < 2 or iters < 0:
                raise ConfigurationError("burnin must be (n_small >= 2, iters >= 0)")
        if self.upsample_to is not None and self.upsample_to < 2:
            raise ConfigurationError("upsample_to must be >= 2")
        if self.max_iterations < 0 or self.convergence_window < 1:
            raise ConfigurationError("bad iteration or window setting")


class AdagradState:
    """Per-particle per-coordinate squared-gradient accumulator."""

    def __init__(self, n: int, dim: int, epsilon: float = 1e-8):
        self.accumulator = np.zeros((n, dim))
        self.epsilon = epsilon

    def step(self, grad: np.ndarray, learning_rate: float) -> np.ndarray:
        """Accumulate grad^2, return the scaled step (same shape as grad)."""
        self.accumulator += grad**2
        return learning_rate * grad / (np.sqrt(self.accumulator) + self.epsilon)


def _optimizer_step(
    direction: np.ndarray, cfg: DlmcConfig, adagrad: AdagradState | None
) -> np.ndarray:
    """Scaled descent step for the configured optimizer.

    "normalized-gradient" damps each particle's step by its own RMS gradient
    once that exceeds 1 (memoryless trust region): within-particle component
    ratios survive, so the balance between the potential pull and the density
    repulsion is kept, unlike per-coordinate adaptive scalings.
    """
    if cfg.optimizer == "adagrad":
        if adagrad is None:
            raise ConfigurationError("adagrad optimizer needs an AdagradState")
        return adagrad.step(direction, cfg.step_size)
    if cfg.optimizer == "normalized-gradient":
        rms = np.sqrt(np.mean(direction**2, axis=1, keepdims=True))
        return cfg.step_size * direction / np.maximum(1.0, rms)
    return cfg.step_size * direction


@dataclass(frozen=True)
class RunRecord:
    """One line of the per-iteration diagnostics stream."""

    iteration: int
    phase: str  # "burnin" | "main"
    n_particles: int
    moments: MomentSummary  # constrained space
    mh_acceptance: float | None
    likelihood_calls: int  # cumulative
    gradient_calls: int
    sequential_seconds: float
    parallel_seconds: float
    flow_fit_seconds: float
    flow_layers: int
    dl_skipped: int = 0


@dataclass(frozen=True)
class RunResult:
    ensemble: ParticleEnsemble
    records: list[RunRecord]
    converged: bool
    ledger: CostLedger
    final_flow: FlowModel | None = None


class TargetEvaluator:
    """Counts target evaluation events and runs them on the worker pool."""

    def __init__(self, target: TargetDensity, workers: int = 1):
        self.target = target
        self.workers = workers
        self.likelihood_calls = 0
        self.gradient_calls = 0

    def potential_and_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        self.likelihood_calls += x.shape[0]
        self.gradient_calls += x.shape[0]
        pots, grads = chunked_map(
            lambda rows: (self.target.potential(rows), self.target.grad_potential(rows)),
            x,
            self.workers,
        )
        return pots, grads

    def likelihood_and_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        self.likelihood_calls += x.shape[0]
        self.gradient_calls += x.shape[0]
        pots, grads = chunked_map(
            lambda rows: (
                self.target.likelihood_potential(rows),
                self.target.grad_likelihood(rows),
            ),
            x,
            self.workers,
        )
        return pots, grads


def _as_evaluator(target) -> TargetEvaluator:
    return target if isinstance(target, TargetEvaluator) else TargetEvaluator(target)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def _draw_and_step_from_prior(
    ev: TargetEvaluator,
    n: int,
    step_size: float,
    rng,
    max_redraws: int,
) -> tuple[ParticleEnsemble, bool]:
    """Shared init: returns the ensemble and whether grad L vanished at every
    draw (the likelihood is non-informative at the prior points)."""
    t = ev.target
    if n < 2:
        raise ConfigurationError("ensemble needs at least 2 particles")
    gens = [rng] * n if isinstance(rng, np.random.Generator) else list(rng)

    x0 = np.empty((n, t.dim))
    for i in range(n):
        x0[i] = t.prior_sampler(gens[i])
    like_vals, like_grads = ev.likelihood_and_grad(x0)
    for _ in range(max_redraws):
        bad = ~(np.isfinite(like_vals) & np.all(np.isfinite(like_grads), axis=1))
        if not np.any(bad):
            break
        idx = np.nonzero(bad)[0]
        log.info("redrawing %d initialization particles", idx.size)
        for i in idx:
            x0[i] = t.prior_sampler(gens[i])
        v, g = ev.likelihood_and_grad(x0[idx])
        like_vals[idx] = v
        like_grads[idx] = g

    flat_likelihood = bool(np.max(np.abs(like_grads)) == 0.0)
    if flat_likelihood:
        x1 = x0  # zero step: prior draws are already posterior draws
    else:
        step = np.clip(like_grads * step_size, -INIT_STEP_CLIP, INIT_STEP_CLIP)
        x1 = x0 - step
    pots, grads = ev.potential_and_grad(x1)
    bad = ~(np.isfinite(pots) & np.all(np.isfinite(grads), axis=1))
    if np.any(bad):
        idx = np.nonzero(bad)[0]
        log.info("reverting %d particles whose initial step left the domain", idx.size)
        x1[idx] = x0[idx]
        v, g = ev.potential_and_grad(x0[idx])
        pots[idx], grads[idx] = v, g
    ens = ParticleEnsemble(positions=x1, potential_values=pots, grad_potentials=grads)
    return ens, flat_likelihood


def init_from_prior(
    target: TargetDensity | TargetEvaluator,
    n: int,
    step_size: float,
    rng: np.random.Generator | Sequence[np.random.Generator],
    max_redraws: int = 100,
) -> ParticleEnsemble:
    """Prior draws moved one plain step along the likelihood gradient only.

    The prior term cancels against the initial particle density, so the first
    update uses -grad L alone. Steps are clipped per coordinate to keep
    heavy-tailed prior draws finite; draws with non-finite likelihood values
    are redrawn up to ``max_redraws`` times.
    """
    ens, _ = _draw_and_step_from_prior(
        _as_evaluator(target), n, step_size, rng, max_redraws
    )
    return ens


def _apply_move(
    ensemble: ParticleEnsemble,
    ev: TargetEvaluator,
    flow: FlowModel,
    new_positions: np.ndarray,
    moved: np.ndarray,
) -> tuple[ParticleEnsemble, int]:
    """Evaluate moved particles, reverting any that left the finite domain."""
    pots, grads = ev.potential_and_grad(new_positions)
    bad = ~(np.isfinite(pots) & np.all(np.isfinite(grads), axis=1))
    reverted = int(np.sum(bad & moved))
    keep = bad | ~moved
    new_positions[keep] = ensemble.positions[keep]
    pots[keep] = ensemble.potential_values[keep]
    grads[keep] = ensemble.grad_potentials[keep]
    logq = flow.log_density(new_positions)
    out = ParticleEnsemble(
        positions=new_positions,
        potential_values=pots,
        grad_potentials=grads,
        flow_log_densities=logq,
        iteration=ensemble.iteration,
    )
    return out, reverted


def dl_update(
    ensemble: ParticleEnsemble,
    target: TargetDensity | TargetEvaluator,
    flow: FlowModel,
    cfg: DlmcConfig,
    adagrad: AdagradState | None = None,
) -> tuple[ParticleEnsemble, int]:
    """Data-space update along -grad(U - V); returns (ensemble, n_skipped).

    Particles with a non-finite combined gradient keep their position (the
    event is logged), so NaNs never propagate into the ensemble.
    """
    ev = _as_evaluator(target)
    direction = ensemble.grad_potentials + flow.grad_log_density(ensemble.positions)
    finite = np.all(np.isfinite(direction), axis=1)
    if not np.all(finite):
        log.warning("skipping %d particles with non-finite DL gradient", np.sum(~finite))
    direction = np.where(finite[:, None], direction, 0.0)
    if cfg.optimizer == "adagrad":
        if adagrad is None:
            raise ConfigurationError("adagrad optimizer needs an AdagradState")
        step = adagrad.step(direction, cfg.step_size)
    else:
        step = cfg.step_size * direction
    new_positions = ensemble.positions - step
    out, reverted = _apply_move(ensemble, ev, flow, new_positions, finite)
    return out, int(np.sum(~finite)) + reverted


def dl_update_latent(
    ensemble: ParticleEnsemble,
    target: TargetDensity | TargetEvaluator,
    flow: FlowModel,
    cfg: DlmcConfig,
    adagrad: AdagradState | None = None,
) -> tuple[ParticleEnsemble, int]:
    """Latent-space update z <- z - (grad U(z) - z) * step, mapped back.

    grad U(z) is assembled from the cached data-space target gradient via the
    flow's analytic Jacobians, so the move costs no extra target calls; the
    radial +z term pushes particles outward where the base density thins.
    """
    ev = _as_evaluator(target)
    z, grad_z = flow.latent_gradient(ensemble.positions, ensemble.grad_potentials)
    direction = grad_z - z
    finite = np.all(np.isfinite(direction), axis=1)
    if not np.all(finite):
        log.warning(
            "skipping %d particles with non-finite latent gradient", np.sum(~finite)
        )
    direction = np.where(finite[:, None], direction, 0.0)
    if cfg.optimizer == "adagrad":
        if adagrad is None:
            raise ConfigurationError("adagrad optimizer needs an AdagradState")
        step = adagrad.step(direction, cfg.step_size)
    else:
        step = cfg.step_size * direction
    new_positions = flow.inverse(z - step)
    out, reverted = _apply_move(ensemble, ev, flow, new_positions, finite)
    return out, int(np.sum(~finite)) + reverted


def mh_adjust(
    ensemble: ParticleEnsemble,
    target: TargetDensity | TargetEvaluator,
    flow: FlowModel,
    rng: np.random.Generator | Sequence[np.random.Generator],
) -> tuple[ParticleEnsemble, float]:
    """One accept/reject pass with independent flow proposals per particle.

    Acceptance ratio in log space: (U(x) - U(x~)) + (log q(x) - log q(x~));
    normalization constants cancel. Proposals with non-finite potential or
    proposal density are auto-rejected and logged.
    """
    ev = _as_evaluator(target)
    n, d = ensemble.positions.shape
    if ensemble.flow_log_densities is None:
        raise ConfigurationError("flow log densities not cached; fit and refresh first")
    proposals, logq_prop = flow.propose(rng, n)
    pots, grads = ev.potential_and_grad(proposals)

    log_r = (
        ensemble.potential_values
        - pots
        + ensemble.flow_log_densities
        - logq_prop
    )
    finite = np.isfinite(pots) & np.isfinite(logq_prop) & np.all(np.isfinite(grads), axis=1)
    if not np.all(finite):
        log.warning("auto-rejecting %d non-finite MH proposals", np.sum(~finite))
    u = per_particle_uniforms(rng, n)
    accept = finite & (np.log(u) < log_r)

    positions = np.where(accept[:, None], proposals, ensemble.positions)
    out = ParticleEnsemble(
        positions=positions,
        potential_values=np.where(accept, pots, ensemble.potential_values),
        grad_potentials=np.where(accept[:, None], grads, ensemble.grad_potentials),
        flow_log_densities=np.where(accept, logq_prop, ensemble.flow_log_densities),
        iteration=ensemble.iteration,
    )
    return out, float(np.mean(accept))


def upsample_ensemble(
    ensemble: ParticleEnsemble,
    target: TargetDensity | TargetEvaluator,
    flow: FlowModel,
    n_new: int,
    rng: np.random.Generator | Sequence[np.random.Generator],
    mh_rng: np.random.Generator | Sequence[np.random.Generator] | None = None,
) -> tuple[ParticleEnsemble, float]:
    """Replace the ensemble by n_new flow draws plus one MH pass.

    The flow must have been fitted on the current ensemble; n_new must not
    shrink the ensemble.
    """
    ev = _as_evaluator(target)
    if n_new < ensemble.n:
        raise ConfigurationError("upsample_ensemble cannot shrink the ensemble")
    positions, logq = flow.propose(rng, n_new)
    pots, grads = ev.potential_and_grad(positions)
    fresh = ParticleEnsemble(
        positions=positions,
        potential_values=pots,
        grad_potentials=grads,
        flow_log_densities=logq,
        iteration=ensemble.iteration,
    )
    return mh_adjust(fresh, ev, flow, mh_rng if mh_rng is not None else rng)


def check_convergence(
    history: Sequence[MomentSummary], window: int, tol: float
) -> bool:
    """True when per-iteration moment drift over the trailing window is small.

    The drift of a quantity is |latest - value window iterations back| divided
    by (window * scale); the scale is the coordinate RMS for first moments and
    the second moment itself for second moments. Every coordinate must drift
    by at most tol per iteration. Returns False with insufficient history.
    """
    if len(history) < window + 1:
        return False
    latest = history[-1]
    past = history[-1 - window]
    rms = np.sqrt(np.maximum(latest.second_moment, 1e-24))
    mean_drift = np.abs(latest.mean - past.mean) / (window * np.maximum(rms, 1e-12))
    sm_scale = np.maximum(np.abs(latest.second_moment), 1e-12)
    sm_drift = np.abs(latest.second_moment - past.second_moment) / (window * sm_scale)
    return bool(np.all(mean_drift <= tol) and np.all(sm_drift <= tol))


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def fit_or_whitening_flow(
    positions: np.ndarray, rng: np.random.Generator, cfg: DlmcConfig
) -> FlowModel:
    """Full fit when the ensemble is large enough, whitening-only otherwise.

    Tiny burn-in ensembles (below the flow's minimum sample count) still get
    an affine density estimate so the loop can proceed.
    """
    if positions.shape[0] >= MIN_FIT_SAMPLES:
        return fit_flow(
            positions,
            0.2,
            rng,
            max_layers=cfg.flow_max_layers,
            n_knots=cfg.flow_knots,
        )
    from .flow import _whitening

    mean, chol, chol_inv = _whitening(positions)
    return FlowModel(
        dim=positions.shape[1], mean=mean, chol=chol, chol_inv=chol_inv
    )


def _mh_generators(seed: int, purpose: str, n: int, iteration: int):
    return [substream(seed, purpose, i, iteration) for i in range(n)]


def run_dlmc(
    target: TargetDensity,
    cfg: DlmcConfig,
    method_hooks: dict | None = None,
) -> RunResult:
    """Full sampling loop (Algorithm-1 style): burn-in, upsample, iterate.

    Runs deterministically given cfg.seed (any worker count). When the
    initial likelihood gradient vanishes at every particle the prior already
    equals the posterior and the run returns converged with zero iterations.
    ``method_hooks`` lets baseline variants swap the flow fit or disable steps
    without re-wiring the loop (keys: "fit", "dl", "mh").
    """
    hooks = method_hooks or {}
    ev = TargetEvaluator(target, workers=cfg.workers)
    ledger = CostLedger()
    cost = target.cost_per_likelihood_call
    records: list[RunRecord] = []
    seed = cfg.seed

    n0 = cfg.burnin[0] if cfg.burnin is not None else cfg.n_particles
    gens = _mh_generators(seed, "prior-init", n0, 0)
    ensemble, flat_likelihood = _draw_and_step_from_prior(
        ev, n0, cfg.step_size, gens, max_redraws=100
    )
    ledger = update_cost_ledger(ledger, ev.likelihood_calls, n0, cost)
    ledger = replace(ledger, gradient_calls=ev.gradient_calls)

    if flat_likelihood:
        # non-informative likelihood: prior draws are exact posterior draws,
        # the stationarity criterion is met before any loop iteration
        return RunResult(ensemble, [], converged=True, ledger=ledger)

    adagrad = AdagradState(ensemble.n, target.dim)
    history: list[MomentSummary] = []
    converged = False
    iteration = 0
    flow: FlowModel | None = None

    burnin_iters = cfg.burnin[1] if cfg.burnin is not None else 0
    total_budget = cfg.max_iterations

    fit_hook = hooks.get("fit")
    dl_enabled = hooks.get("dl", True)
    mh_enabled = cfg.mh_enabled if hooks.get("mh") is None else hooks["mh"]

    def one_iteration(phase: str) -> None:
        nonlocal ensemble, adagrad, ledger, flow, iteration
        iteration += 1
        calls_before = ev.likelihood_calls

        t0 = time.perf_counter()
        fit_rng = substream(seed, "flow-fit", 0, iteration)
        if fit_hook is not None:
            flow = fit_hook(ensemble.positions, fit_rng)
        else:
            flow = fit_or_whitening_flow(ensemble.positions, fit_rng, cfg)
        fit_seconds = time.perf_counter() - t0
        ensemble.flow_log_densities = flow.log_density(ensemble.positions)
        ensemble.iteration = iteration

        skipped = 0
        if dl_enabled:
            if cfg.latent_space:
                ensemble, skipped = dl_update_latent(ensemble, ev, flow, cfg, adagrad)
            else:
                ensemble, skipped = dl_update(ensemble, ev, flow, cfg, adagrad)
        acceptance = None
        if mh_enabled:
            mh_rngs = _mh_generators(seed, "mh", ensemble.n, iteration)
            ensemble, acceptance = mh_adjust(ensemble, ev, flow, mh_rngs)

        new_calls = ev.likelihood_calls - calls_before
        ledger = update_cost_ledger(ledger, new_calls, ensemble.n, cost)
        ledger = replace(ledger, gradient_calls=ev.gradient_calls)
        ledger = ledger.add_flow_fit(fit_seconds)

        moments = summarize_moments(
            target.to_constrained(ensemble.positions), iteration=iteration
        )
        if phase == "main":
            history.append(moments)
        records.append(
            RunRecord(
                iteration=iteration,
                phase=phase,
                n_particles=ensemble.n,
                moments=moments,
                mh_acceptance=acceptance,
                likelihood_calls=ledger.likelihood_calls,
                gradient_calls=ledger.gradient_calls,
                sequential_seconds=ledger.sequential_seconds,
                parallel_seconds=ledger.parallel_seconds,
                flow_fit_seconds=ledger.flow_fit_seconds,
                flow_layers=len(flow.layers),
                dl_skipped=skipped,
            )
        )

    for _ in range(min(burnin_iters, total_budget)):
        one_iteration("burnin")

    if cfg.burnin is not None and cfg.upsample_to is not None:
        iteration += 1
        calls_before = ev.likelihood_calls
        t0 = time.perf_counter()
        flow = fit_or_whitening_flow(
            ensemble.positions, substream(seed, "flow-fit", 0, iteration), cfg
        )
        fit_seconds = time.perf_counter() - t0
        ensemble.flow_log_densities = flow.log_density(ensemble.positions)
        draw_rngs = _mh_generators(seed, "upsample", cfg.upsample_to, iteration)
        mh_rngs = _mh_generators(seed, "upsample-mh", cfg.upsample_to, iteration)
        ensemble, acceptance = upsample_ensemble(
            ensemble, ev, flow, cfg.upsample_to, draw_rngs, mh_rngs
        )
        ensemble.iteration = iteration
        adagrad = AdagradState(ensemble.n, target.dim)  # fresh geometry
        new_calls = ev.likelihood_calls - calls_before
        ledger = update_cost_ledger(ledger, new_calls, ensemble.n, cost)
        ledger = replace(ledger, gradient_calls=ev.gradient_calls)
        ledger = ledger.add_flow_fit(fit_seconds)
        moments = summarize_moments(
            target.to_constrained(ensemble.positions), iteration=iteration
        )
        records.append(
            RunRecord(
                iteration=iteration,
                phase="upsample",
                n_particles=ensemble.n,
                moments=moments,
                mh_acceptance=acceptance,
                likelihood_calls=ledger.likelihood_calls,
                gradient_calls=ledger.gradient_calls,
                sequential_seconds=ledger.sequential_seconds,
                parallel_seconds=ledger.parallel_seconds,
                flow_fit_seconds=ledger.flow_fit_seconds,
                flow_layers=len(flow.layers),
            )
        )

    while iteration < total_budget:
        one_iteration("main")
        if check_convergence(history, cfg.convergence_window, cfg.convergence_tol):
            converged = True
            break

    return RunResult(ensemble, records, converged, ledger, final_flow=flow)
