"""Comparison and ablation methods sharing the targets and diagnostics.

Implemented here: unadjusted and Metropolis-adjusted Langevin steps and chain
drivers, a Gaussian kernel density estimator (density, log-density gradient,
mixture proposals), the particle-particle variant of the deterministic
Langevin sampler that swaps the flow for the KDE, plain SVGD, and the MH-only
variant that fits a flow but never takes a DL step.

Kernel conventions: the KDE uses the normalized Gaussian kernel so its
density integrates to one; SVGD uses the unnormalized RBF exp(-|r|^2/2s^2) so
a single particle reduces exactly to plain gradient descent.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .diagnostics import CostLedger, summarize_moments, update_cost_ledger
from .errors import ConfigurationError
from .parallel import chunked_map
from .rng import per_particle_normals, per_particle_uniforms, substream
from .sampler import (
    DlmcConfig,
    ParticleEnsemble,
    RunRecord,
    RunResult,
    TargetEvaluator,
    run_dlmc,
)
from .targets import TargetDensity

__all__ = [
    "ula_step",
    "run_langevin",
    "run_mala_reference",
    "tune_mala_step",
    "KdeModel",
    "median_pairwise_distance",
    "kde_grad_log_density",
    "run_dlmc_pp",
    "svgd_step",
    "run_svgd",
    "run_mh_only",
]

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Langevin steps (ULA / MALA)
# ---------------------------------------------------------------------------


def ula_step(
    x: np.ndarray,
    target: TargetDensity | TargetEvaluator,
    dt: float,
    rng,
    adjusted: bool = False,
) -> tuple[np.ndarray, np.ndarray | bool]:
    """One (possibly Metropolis-adjusted) Langevin step.

    Proposal x' = x - grad U(x) dt + eta with eta ~ N(0, 2 dt I). When
    ``adjusted`` the asymmetric Gaussian transition density corrects the
    finite-step bias (MALA); unadjusted steps always count as accepted unless
    the proposal potential is non-finite, in which case the step is rejected
    and logged. ``x`` may be one chain (d,) or a batch of chains (n, d).
    """
    if dt <= 0:
        raise ConfigurationError("Langevin step size must be positive")
    ev = target if isinstance(target, TargetEvaluator) else TargetEvaluator(target)
    t = ev.target
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x.reshape(1, -1) if single else x
    n, d = xb.shape

    pot_x = np.atleast_1d(t.potential(xb))
    grad_x = np.atleast_2d(t.grad_potential(xb))
    noise = per_particle_normals(rng, n, d)
    drift_x = xb - grad_x * dt
    prop = drift_x + np.sqrt(2.0 * dt) * noise

    pot_p, grad_p = ev.potential_and_grad(prop)
    finite = np.isfinite(pot_p) & np.all(np.isfinite(grad_p), axis=1)

    if adjusted:
        drift_p = prop - grad_p * dt
        log_fwd = -np.sum((prop - drift_x) ** 2, axis=1) / (4.0 * dt)
        log_rev = -np.sum((xb - drift_p) ** 2, axis=1) / (4.0 * dt)
        log_alpha = np.where(finite, pot_x - pot_p + log_rev - log_fwd, -np.inf)
        u = per_particle_uniforms(rng, n)
        accepted = np.log(u) < log_alpha
    else:
        if not np.all(finite):
            log.warning("rejecting %d non-finite unadjusted steps", np.sum(~finite))
        accepted = finite

    out = np.where(accepted[:, None], prop, xb)
    if single:
        return out[0], bool(accepted[0])
    return out, accepted


def run_langevin(
    target: TargetDensity,
    cfg: DlmcConfig,
    adjusted: bool = True,
    dt: float | None = None,
) -> RunResult:
    """Drive ``n_particles`` independent Langevin chains from the prior.

    Each iteration advances every chain one step (one target evaluation event
    per chain). Moments are recorded across chains, which makes the record
    stream directly comparable to the particle methods'.
    """
    ev = TargetEvaluator(target, workers=cfg.workers)
    ledger = CostLedger()
    cost = target.cost_per_likelihood_call
    n = cfg.n_particles
    dt = cfg.step_size if dt is None else dt

    gens = [substream(cfg.seed, "langevin-init", i, 0) for i in range(n)]
    x = np.stack([target.prior_sampler(g) for g in gens])
    records: list[RunRecord] = []
    history = []
    converged = False
    for iteration in range(1, cfg.max_iterations + 1):
        calls_before = ev.likelihood_calls
        rngs = [substream(cfg.seed, "langevin", i, iteration) for i in range(n)]
        x, accepted = ula_step(x, ev, dt, rngs, adjusted=adjusted)
        ledger = update_cost_ledger(ledger, ev.likelihood_calls - calls_before, n, cost)
        ledger = replace(ledger, gradient_calls=ev.gradient_calls)
        moments = summarize_moments(target.to_constrained(x), iteration=iteration)
        history.append(moments)
        records.append(
            RunRecord(
                iteration=iteration,
                phase="main",
                n_particles=n,
                moments=moments,
                mh_acceptance=float(np.mean(accepted)) if adjusted else None,
                likelihood_calls=ledger.likelihood_calls,
                gradient_calls=ledger.gradient_calls,
                sequential_seconds=ledger.sequential_seconds,
                parallel_seconds=ledger.parallel_seconds,
                flow_fit_seconds=0.0,
                flow_layers=0,
            )
        )
    pots, grads = target.potential(x), target.grad_potential(x)
    ensemble = ParticleEnsemble(x, np.atleast_1d(pots), np.atleast_2d(grads))
    return RunResult(ensemble, records, converged, ledger)


def run_mala_reference(
    target: TargetDensity,
    total_adjusted_steps: int,
    dt: float,
    seed: int,
    n_chains: int = 64,
    burn_fraction: float = 0.2,
    thin: int = 20,
    init_scale: float | None = None,
) -> tuple[np.ndarray, dict]:
    """Long MALA run for reference moments; returns thinned constrained draws.

    Chains run in a vectorized batch; ``total_adjusted_steps`` counts steps
    across all chains. Heavy-tailed prior draws can be tamed with
    ``init_scale`` (positions scaled toward zero) to shorten burn-in.
    """
    steps_per_chain = int(np.ceil(total_adjusted_steps / n_chains))
    gens = [substream(seed, "mala-ref-init", i, 0) for i in range(n_chains)]
    x = np.stack([target.prior_sampler(g) for g in gens])
    if init_scale is not None:
        x = x * init_scale
    burn = int(steps_per_chain * burn_fraction)
    kept = []
    accept_count = 0
    for step_idx in range(1, steps_per_chain + 1):
        rngs = [substream(seed, "mala-ref", i, step_idx) for i in range(n_chains)]
        x, accepted = ula_step(x, target, dt, rngs, adjusted=True)
        accept_count += int(np.sum(accepted))
        if step_idx > burn and step_idx % thin == 0:
            kept.append(target.to_constrained(x.copy()))
    # (snapshots, chains, d): chain structure preserved so callers can build
    # between-chain standard errors that absorb residual autocorrelation
    samples = np.stack(kept, axis=0)
    info = {
        "acceptance_rate": accept_count / (steps_per_chain * n_chains),
        "total_adjusted_steps": steps_per_chain * n_chains,
        "n_chains": n_chains,
        "steps_per_chain": steps_per_chain,
        "thin": thin,
        "dt": dt,
    }
    return samples, info


def tune_mala_step(
    target: TargetDensity,
    seed: int,
    init_dt: float = 0.1,
    n_rounds: int = 25,
    steps_per_round: int = 40,
    n_chains: int = 32,
    accept_band: tuple[float, float] = (0.55, 0.8),
    init_scale: float | None = None,
) -> float:
    """Pilot-run step-size search for MALA (deterministic given seed).

    The default band sits above the 0.574 asymptotic optimum: position-
    dependent curvature (funnels) mixes better with smaller steps.
    """
    gens = [substream(seed, "mala-tune-init", i, 0) for i in range(n_chains)]
    x = np.stack([target.prior_sampler(g) for g in gens])
    if init_scale is not None:
        x = x * init_scale
    dt = init_dt
    for round_idx in range(n_rounds):
        accepts = 0
        for step_idx in range(steps_per_round):
            rngs = [
                substream(seed, "mala-tune", i, round_idx * steps_per_round + step_idx)
                for i in range(n_chains)
            ]
            x, accepted = ula_step(x, target, dt, rngs, adjusted=True)
            accepts += int(np.sum(accepted))
        rate = accepts / (steps_per_round * n_chains)
        lo, hi = accept_band
        if rate < lo:
            dt *= 0.6
        elif rate > hi:
            dt *= 1.5
    return dt


# ---------------------------------------------------------------------------
# kernel density estimation
# ---------------------------------------------------------------------------


def median_pairwise_distance(positions: np.ndarray) -> float:
    pos = np.asarray(positions, dtype=float)
    n = pos.shape[0]
    if n < 2:
        return 1.0
    sq = np.sum((pos[:, None, :] - pos[None, :, :]) ** 2, axis=2)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(np.sqrt(sq[iu])))
    return med if med > 0 else 1.0


@dataclass(frozen=True)
class KdeModel:
    """Gaussian KDE over particle positions; quacks like a flow for the
    particle-particle sampler (log_density, grad_log_density, propose)."""

    positions: np.ndarray  # (N, d)
    bandwidth: float

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ConfigurationError("KDE bandwidth must be positive")

    @property
    def layers(self) -> tuple:
        return ()

    @classmethod
    def fit(cls, positions: np.ndarray, bandwidth: float | None = None) -> "KdeModel":
        sigma = median_pairwise_distance(positions) if bandwidth is None else bandwidth
        return cls(positions=np.array(positions, dtype=float, copy=True), bandwidth=sigma)

    def _log_kernel_matrix(self, x: np.ndarray) -> np.ndarray:
        d = self.positions.shape[1]
        sq = np.sum((x[:, None, :] - self.positions[None, :, :]) ** 2, axis=2)
        return -0.5 * sq / self.bandwidth**2 - 0.5 * d * np.log(
            2 * np.pi * self.bandwidth**2
        )

    def log_density(self, x: np.ndarray) -> np.ndarray:
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        lk = self._log_kernel_matrix(x2)
        m = lk.max(axis=1, keepdims=True)
        val = np.squeeze(m, 1) + np.log(np.mean(np.exp(lk - m), axis=1))
        return val if np.asarray(x).ndim > 1 else val[0]

    def grad_log_density(self, x: np.ndarray) -> np.ndarray:
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        lk = self._log_kernel_matrix(x2)
        m = lk.max(axis=1, keepdims=True)
        w = np.exp(lk - m)
        denom = w.sum(axis=1)
        diff = self.positions[None, :, :] - x2[:, None, :]
        num = np.einsum("nj,njd->nd", w, diff) / self.bandwidth**2
        underflow = denom < 1e-290
        if np.any(underflow):
            log.warning(
                "KDE kernel weights underflow at %d points; widen the bandwidth",
                np.sum(underflow),
            )
            denom = np.where(underflow, 1.0, denom)
            num[underflow] = 0.0
        grad = num / denom[:, None]
        return grad if np.asarray(x).ndim > 1 else grad[0]

    def propose(self, rng, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Mixture draws: pick a particle, add kernel noise."""
        nsrc, d = self.positions.shape
        u = per_particle_uniforms(rng, n)
        idx = np.minimum((u * nsrc).astype(np.intp), nsrc - 1)
        noise = per_particle_normals(rng, n, d)
        draws = self.positions[idx] + self.bandwidth * noise
        return draws, self.log_density(draws)


def kde_grad_log_density(model: KdeModel, particle_index: int) -> np.ndarray:
    """Gradient of log KDE density at one of the model's own particles.

    Gaussian-kernel form: sum_j k(x_i, x_j)(x_j - x_i) / (s^2 sum_j k); the
    self term vanishes from the numerator while the denominator keeps it.
    """
    n = model.positions.shape[0]
    if not 0 <= particle_index < n:
        raise ConfigurationError("particle index out of range")
    return model.grad_log_density(model.positions[particle_index])


def run_dlmc_pp(
    target: TargetDensity, cfg: DlmcConfig, bandwidth: float | None = None
) -> RunResult:
    """Particle-particle variant: the KDE replaces the flow everywhere.

    The descent direction uses the KDE's log-density gradient, MH proposals
    come from the kernel mixture, and there is no latent preconditioning.
    With ``bandwidth=None`` the median pairwise distance is refitted each
    iteration.
    """
    cfg_pp = replace(cfg, latent_space=False)
    hooks = {"fit": lambda positions, rng: KdeModel.fit(positions, bandwidth)}
    return run_dlmc(target, cfg_pp, method_hooks=hooks)


def run_mh_only(target: TargetDensity, cfg: DlmcConfig) -> RunResult:
    """Ablation: fit the flow and apply MH passes, never a DL step."""
    return run_dlmc(target, replace(cfg, mh_enabled=True), method_hooks={"dl": False})


# ---------------------------------------------------------------------------
# Stein variational gradient descent
# ---------------------------------------------------------------------------


def svgd_step(
    ensemble: ParticleEnsemble,
    target: TargetDensity | TargetEvaluator,
    bandwidth: float,
    dt: float,
) -> ParticleEnsemble:
    """Simultaneous kernel-weighted update of all particles.

    N dx_i/dt = sum_j [-grad U(x_j) k(x_i, x_j) + grad_{x_j} k(x_i, x_j)]
    with the unnormalized RBF kernel. Particles with non-finite target
    gradients contribute nothing to the sums (logged).
    """
    ev = target if isinstance(target, TargetEvaluator) else TargetEvaluator(target)
    x = ensemble.positions
    n, d = x.shape
    grads = ensemble.grad_potentials
    finite = np.all(np.isfinite(grads), axis=1)
    if not np.all(finite):
        log.warning("dropping %d non-finite SVGD contributions", np.sum(~finite))
    g = np.where(finite[:, None], grads, 0.0)

    sq = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=2)
    k = np.exp(-0.5 * sq / bandwidth**2) * finite[None, :]
    attract = -(k @ g)
    # grad_{x_j} k(x_i, x_j) = k * (x_i - x_j) / s^2, summed over j
    repulse = (k.sum(axis=1)[:, None] * x - k @ x) / bandwidth**2
    new_x = x + (dt / n) * (attract + repulse)

    pots, new_grads = ev.potential_and_grad(new_x)
    bad = ~(np.isfinite(pots) & np.all(np.isfinite(new_grads), axis=1))
    if np.any(bad):
        new_x[bad] = x[bad]
        pots[bad] = ensemble.potential_values[bad]
        new_grads[bad] = ensemble.grad_potentials[bad]
    return ParticleEnsemble(
        positions=new_x,
        potential_values=pots,
        grad_potentials=new_grads,
        iteration=ensemble.iteration + 1,
    )


def run_svgd(
    target: TargetDensity,
    cfg: DlmcConfig,
    bandwidth: float | None = None,
) -> RunResult:
    """SVGD driver with a fixed step and (by default) per-iteration
    median-heuristic bandwidth."""
    ev = TargetEvaluator(target, workers=cfg.workers)
    ledger = CostLedger()
    cost = target.cost_per_likelihood_call
    n = cfg.n_particles

    gens = [substream(cfg.seed, "svgd-init", i, 0) for i in range(n)]
    x = np.stack([target.prior_sampler(g) for g in gens])
    pots, grads = ev.potential_and_grad(x)
    ledger = update_cost_ledger(ledger, ev.likelihood_calls, n, cost)
    ledger = replace(ledger, gradient_calls=ev.gradient_calls)
    ensemble = ParticleEnsemble(x, pots, grads)

    records: list[RunRecord] = []
    for iteration in range(1, cfg.max_iterations + 1):
        calls_before = ev.likelihood_calls
        sigma = bandwidth or median_pairwise_distance(ensemble.positions)
        ensemble = svgd_step(ensemble, ev, sigma, cfg.step_size)
        ledger = update_cost_ledger(ledger, ev.likelihood_calls - calls_before, n, cost)
        ledger = replace(ledger, gradient_calls=ev.gradient_calls)
        moments = summarize_moments(
            target.to_constrained(ensemble.positions), iteration=iteration
        )
        records.append(
            RunRecord(
                iteration=iteration,
                phase="main",
                n_particles=n,
                moments=moments,
                mh_acceptance=None,
                likelihood_calls=ledger.likelihood_calls,
                gradient_calls=ledger.gradient_calls,
                sequential_seconds=ledger.sequential_seconds,
                parallel_seconds=ledger.parallel_seconds,
                flow_fit_seconds=0.0,
                flow_layers=0,
            )
        )
    return RunResult(ensemble, records, False, ledger)
