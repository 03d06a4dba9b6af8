"""Reference second moments for the benchmark targets.

Each benchmark gets the most trustworthy oracle its structure admits:

* Gaussian mixture in a box — closed form via 1-d truncated-normal moments
  (the isotropic components and the product box factorize coordinate-wise);
* Rosenbrock — 2-d quadrature on one coordinate pair, tiled (the posterior is
  an exact product of identical pairs);
* hierarchical funnel — either a semi-analytic 1-d quadrature over the scale
  parameter (the latents are conditionally Gaussian) or a long adjusted
  Langevin run;
* sparse logistic regression — a long adjusted Langevin run.

Long-run references carry between-chain standard errors and their run
settings in ``detail``.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import norm, truncnorm

from .baselines import run_mala_reference, tune_mala_step
from .diagnostics import ReferenceMoments
from .errors import ConfigurationError
from .targets import TargetDensity

__all__ = [
    "gaussian_mixture_reference",
    "rosenbrock_reference",
    "funnel_quadrature_reference",
    "mala_reference_moments",
]


def gaussian_mixture_reference(
    dim: int,
    means: tuple[np.ndarray, np.ndarray] | None = None,
    weights: tuple[float, float] = (1.0 / 3.0, 2.0 / 3.0),
    component_std: float = 1.0,
    box: tuple[float, float] = (-2.0, 2.0),
) -> ReferenceMoments:
    """Analytic constrained-space moments of the box-truncated mixture."""
    if means is None:
        means = (np.full(dim, -0.75), np.full(dim, 0.75))
    m = np.stack([np.asarray(mu, dtype=float) for mu in means])
    w = np.asarray(weights, dtype=float)
    lo, hi = box
    s = float(component_std)

    a = (lo - m) / s
    b = (hi - m) / s
    # per-coordinate truncated normal first/second moments, per component
    mean_k = np.empty_like(m)
    second_k = np.empty_like(m)
    for k in range(2):
        for i in range(dim):
            dist = truncnorm(a[k, i], b[k, i], loc=m[k, i], scale=s)
            mean_k[k, i] = dist.mean()
            second_k[k, i] = dist.moment(2)
    # component masses inside the box rescale the weights
    masses = np.prod(norm.cdf(b) - norm.cdf(a), axis=1)
    w_eff = w * masses
    w_eff = w_eff / w_eff.sum()
    mean = w_eff @ mean_k
    second = w_eff @ second_k
    return ReferenceMoments(
        second_moment=second,
        provenance="analytic",
        mean=mean,
        detail={"weights_in_box": w_eff.tolist()},
    )


def rosenbrock_reference(
    dim: int,
    Q: float = 0.1,
    prior_variance: float = 6.0,
    grid_points: int = 2000,
    domain: tuple[float, float] = (-6.0, 6.0),
) -> ReferenceMoments:
    """2-d quadrature moments of one banana pair, tiled across pairs."""
    if dim % 2 != 0:
        raise ConfigurationError("rosenbrock reference needs even dim")
    lo, hi = domain
    g1 = np.linspace(lo, hi, grid_points)
    g2 = np.linspace(lo, hi, grid_points)
    x1, x2 = np.meshgrid(g1, g2, indexing="ij")
    logp = -((x1**2 - x2) ** 2 / Q + (x1 - 1.0) ** 2) - (x1**2 + x2**2) / (
        2.0 * prior_variance
    )
    p = np.exp(logp - logp.max())
    z = p.sum()
    pair_mean = np.array([(p * x1).sum() / z, (p * x2).sum() / z])
    pair_second = np.array([(p * x1**2).sum() / z, (p * x2**2).sum() / z])
    detail = {"grid_points": grid_points, "domain": [lo, hi]}
    return ReferenceMoments(
        second_moment=np.tile(pair_second, dim // 2),
        provenance="quadrature-oracle",
        mean=np.tile(pair_mean, dim // 2),
        detail=detail,
    )


def funnel_quadrature_reference(
    dim: int,
    noise_sigma: float,
    observed_data: np.ndarray | None = None,
    grid_points: int = 40_001,
    theta_range: tuple[float, float] = (-30.0, 30.0),
) -> ReferenceMoments:
    """Semi-analytic funnel moments by 1-d quadrature over the scale variable.

    Conditional on theta the latents are independent Gaussians, so only the
    1-d marginal over theta needs numerical integration.
    """
    n_z = dim - 1
    y = np.zeros(n_z) if observed_data is None else np.asarray(observed_data, float)
    theta = np.linspace(*theta_range, grid_points)
    p_var = np.exp(theta / 2.0)
    log_prior = -0.5 * theta**2 / 3.0
    if np.isinf(noise_sigma):
        log_like = np.zeros_like(theta)
        cond_var = p_var[:, None] * np.ones(n_z)
        cond_mean = np.zeros((grid_points, n_z))
    else:
        s2 = noise_sigma**2
        tot = p_var + s2
        log_like = -0.5 * (
            np.sum(y**2)[None] / tot + n_z * np.log(2 * np.pi * tot)
        ).ravel()
        # z_i | theta, y is Gaussian with precision 1/P + 1/sigma^2
        cv = 1.0 / (1.0 / p_var + 1.0 / s2)
        cond_var = cv[:, None] * np.ones(n_z)
        cond_mean = (cv / s2)[:, None] * y[None, :]
    logw = log_prior + log_like
    w = np.exp(logw - logw.max())
    w /= w.sum()
    theta_mean = float(w @ theta)
    theta_second = float(w @ theta**2)
    z_second = w @ (cond_var + cond_mean**2)
    z_mean = w @ cond_mean
    return ReferenceMoments(
        second_moment=np.concatenate([[theta_second], z_second]),
        provenance="quadrature-oracle",
        mean=np.concatenate([[theta_mean], z_mean]),
        detail={"grid_points": grid_points, "theta_range": list(theta_range)},
    )


def mala_reference_moments(
    target: TargetDensity,
    total_adjusted_steps: int = 5_000_000,
    seed: int = 909,
    dt: float | None = None,
    n_chains: int = 64,
    thin: int = 20,
    init_scale: float | None = None,
) -> ReferenceMoments:
    """Long-MALA reference with between-chain standard errors."""
    if dt is None:
        dt = tune_mala_step(target, seed=seed, init_scale=init_scale)
    samples, info = run_mala_reference(
        target,
        total_adjusted_steps,
        dt=dt,
        seed=seed,
        n_chains=n_chains,
        thin=thin,
        init_scale=init_scale,
    )
    # samples: (snapshots, chains, d)
    chain_mean = samples.mean(axis=0)
    chain_second = (samples**2).mean(axis=0)
    c = samples.shape[1]
    mean = chain_mean.mean(axis=0)
    second = chain_second.mean(axis=0)
    mean_se = chain_mean.std(axis=0, ddof=1) / np.sqrt(c)
    second_se = chain_second.std(axis=0, ddof=1) / np.sqrt(c)
    return ReferenceMoments(
        second_moment=second,
        provenance="long-reference-run",
        mean=mean,
        mean_se=mean_se,
        second_moment_se=second_se,
        detail=info,
    )
