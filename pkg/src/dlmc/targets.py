"""Benchmark target posteriors with analytic gradients.

Every target exposes its negative log joint U = L + P (likelihood plus prior
potential) as a function of UNCONSTRAINED coordinates; the log-Jacobian of the
constraining transform is folded into the prior part, so ``potential`` is the
negative log of a proper density on R^d. Likelihood and prior parts are kept
as separate callables and summed on access, which keeps the decomposition
exact.

Potential/gradient callables accept a (d,) vector or an (n, d) batch and
return matching shapes. ``prior_sampler(rng)`` returns one unconstrained draw.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigurationError, DataError
from .transforms import ParameterTransform

__all__ = [
    "TargetDensity",
    "make_gaussian",
    "make_gaussian_mixture",
    "make_rosenbrock",
    "make_funnel",
    "make_sparse_logistic",
]


@dataclass(frozen=True)
class TargetDensity:
    """A target posterior over unconstrained coordinates."""

    dim: int
    likelihood_potential: Callable[[np.ndarray], np.ndarray]
    grad_likelihood: Callable[[np.ndarray], np.ndarray]
    prior_potential: Callable[[np.ndarray], np.ndarray]
    grad_prior: Callable[[np.ndarray], np.ndarray]
    prior_sampler: Callable[[np.random.Generator], np.ndarray]
    transform: ParameterTransform
    cost_per_likelihood_call: float = 0.0
    name: str = "target"
    coord_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.coord_names:
            object.__setattr__(
                self, "coord_names", tuple(f"x{i}" for i in range(self.dim))
            )
        if self.cost_per_likelihood_call < 0:
            raise ConfigurationError("cost_per_likelihood_call must be nonnegative")

    def potential(self, u: np.ndarray) -> np.ndarray:
        """U(u) = L(u) + P(u), the negative log joint."""
        return self.likelihood_potential(u) + self.prior_potential(u)

    def grad_potential(self, u: np.ndarray) -> np.ndarray:
        return self.grad_likelihood(u) + self.grad_prior(u)

    def potential_and_grad(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.potential(u), self.grad_potential(u)

    def to_constrained(self, u: np.ndarray) -> np.ndarray:
        return self.transform.to_constrained(u)


def _batch(u: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    u = np.asarray(u, dtype=float)
    single = u.ndim == 1
    u2 = u.reshape(1, -1) if single else u
    if u2.shape[-1] != dim:
        raise ValueError(f"expected trailing dimension {dim}, got {u2.shape[-1]}")
    return u2, single


def _unbatch(values: np.ndarray, single: bool) -> np.ndarray:
    return values[0] if single else values


# ---------------------------------------------------------------------------
# Plain Gaussian (testing workhorse)
# ---------------------------------------------------------------------------


def make_gaussian(
    mean: np.ndarray,
    cov: np.ndarray | float,
    likelihood: str = "none",
    cost_per_likelihood_call: float = 0.0,
) -> TargetDensity:
    """Gaussian target N(mean, cov).

    ``likelihood="none"`` puts the whole Gaussian in the prior (flat
    likelihood, prior draws are exact posterior draws); ``likelihood="all"``
    puts it in the likelihood with a flat improper prior, with prior_sampler
    still drawing from the Gaussian for initialization.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    d = mean.size
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0:
        cov = np.eye(d) * cov
    chol = np.linalg.cholesky(cov)
    log_norm = 0.5 * d * np.log(2 * np.pi) + np.sum(np.log(np.diag(chol)))
    prec = np.linalg.inv(cov)

    def neglog(u):
        u2, single = _batch(u, d)
        diff = u2 - mean
        quad = 0.5 * np.einsum("ni,ij,nj->n", diff, prec, diff)
        return _unbatch(quad + log_norm, single)

    def grad_neglog(u):
        u2, single = _batch(u, d)
        return _unbatch((u2 - mean) @ prec, single)

    def zero_pot(u):
        u2, single = _batch(u, d)
        return _unbatch(np.zeros(u2.shape[0]), single)

    def zero_grad(u):
        u2, single = _batch(u, d)
        return _unbatch(np.zeros_like(u2), single)

    def sampler(rng):
        return mean + chol @ rng.standard_normal(d)

    if likelihood == "none":
        like, glike, prior, gprior = zero_pot, zero_grad, neglog, grad_neglog
    elif likelihood == "all":
        like, glike, prior, gprior = neglog, grad_neglog, zero_pot, zero_grad
    else:
        raise ConfigurationError("likelihood must be 'none' or 'all'")

    return TargetDensity(
        dim=d,
        likelihood_potential=like,
        grad_likelihood=glike,
        prior_potential=prior,
        grad_prior=gprior,
        prior_sampler=sampler,
        transform=ParameterTransform.identity(d),
        cost_per_likelihood_call=cost_per_likelihood_call,
        name=f"gaussian-d{d}",
    )


# ---------------------------------------------------------------------------
# Gaussian mixture in a box prior
# ---------------------------------------------------------------------------


def make_gaussian_mixture(
    dim: int,
    means: tuple[np.ndarray, np.ndarray] | None = None,
    weights: tuple[float, float] = (1.0 / 3.0, 2.0 / 3.0),
    component_std: float = 1.0,
    box: tuple[float, float] = (-2.0, 2.0),
    cost_per_likelihood_call: float = 0.0,
) -> TargetDensity:
    """Two-component isotropic Gaussian mixture inside a uniform box prior.

    The box prior is mapped to R^d with a per-coordinate logit transform;
    default modes sit at +-0.75 along the all-ones direction.
    """
    if dim < 2:
        raise ConfigurationError("mixture target needs dim >= 2")
    w = np.asarray(weights, dtype=float)
    if w.size != 2 or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ConfigurationError("weights must be two positive reals summing to 1")
    if means is None:
        means = (np.full(dim, -0.75), np.full(dim, 0.75))
    m = np.stack([np.asarray(mu, dtype=float) for mu in means])
    if m.shape != (2, dim):
        raise ConfigurationError("means must be a pair of d-vectors")
    var = float(component_std) ** 2
    if var <= 0:
        raise ConfigurationError("component variance must be positive")
    lo, hi = box
    transform = ParameterTransform.box(dim, lo, hi)
    log_w = np.log(w)
    comp_norm = 0.5 * dim * np.log(2 * np.pi * var)
    box_pot = dim * np.log(hi - lo)  # -log of the uniform box density

    def _mix_parts(x):
        # x: (n, d) constrained; returns responsibilities and neg log mixture
        sq = ((x[:, None, :] - m[None, :, :]) ** 2).sum(axis=2)
        log_comp = log_w[None, :] - 0.5 * sq / var - comp_norm
        lse = logsumexp(log_comp, axis=1)
        resp = np.exp(log_comp - lse[:, None])
        return resp, -lse

    def like(u):
        u2, single = _batch(u, dim)
        _, nll = _mix_parts(transform.to_constrained(u2))
        return _unbatch(nll, single)

    def grad_like(u):
        u2, single = _batch(u, dim)
        x = transform.to_constrained(u2)
        resp, _ = _mix_parts(x)
        grad_x = np.einsum("nk,nkd->nd", resp, (x[:, None, :] - m[None, :, :]) / var)
        return _unbatch(grad_x * transform.jacobian_diag(u2), single)

    def prior(u):
        u2, single = _batch(u, dim)
        return _unbatch(box_pot - transform.log_jacobian(u2), single)

    def grad_prior(u):
        u2, single = _batch(u, dim)
        return _unbatch(-transform.grad_log_jacobian(u2), single)

    def sampler(rng):
        return transform.to_unconstrained(rng.uniform(lo, hi, size=dim))

    return TargetDensity(
        dim=dim,
        likelihood_potential=like,
        grad_likelihood=grad_like,
        prior_potential=prior,
        grad_prior=grad_prior,
        prior_sampler=sampler,
        transform=transform,
        cost_per_likelihood_call=cost_per_likelihood_call,
        name=f"gaussian-mixture-d{dim}",
    )


# ---------------------------------------------------------------------------
# Rosenbrock bananas
# ---------------------------------------------------------------------------


def make_rosenbrock(
    dim: int,
    Q: float = 0.1,
    prior_variance: float = 6.0,
    cost_per_likelihood_call: float = 0.0,
) -> TargetDensity:
    """d/2 independent 2-d Rosenbrock bananas with a Gaussian N(0, v) prior.

    L(x) = sum over pairs of (x_odd^2 - x_even)^2 / Q + (x_odd - 1)^2.
    """
    if dim % 2 != 0 or dim < 2:
        raise ConfigurationError("rosenbrock target needs even dim >= 2")
    if Q <= 0 or prior_variance <= 0:
        raise ConfigurationError("Q and prior variance must be positive")
    v = float(prior_variance)
    prior_norm = 0.5 * dim * np.log(2 * np.pi * v)

    def like(u):
        u2, single = _batch(u, dim)
        a, b = u2[:, 0::2], u2[:, 1::2]
        val = np.sum((a**2 - b) ** 2 / Q + (a - 1.0) ** 2, axis=1)
        return _unbatch(val, single)

    def grad_like(u):
        u2, single = _batch(u, dim)
        a, b = u2[:, 0::2], u2[:, 1::2]
        g = np.empty_like(u2)
        g[:, 0::2] = 4.0 * a * (a**2 - b) / Q + 2.0 * (a - 1.0)
        g[:, 1::2] = -2.0 * (a**2 - b) / Q
        return _unbatch(g, single)

    def prior(u):
        u2, single = _batch(u, dim)
        return _unbatch(0.5 * np.sum(u2**2, axis=1) / v + prior_norm, single)

    def grad_prior(u):
        u2, single = _batch(u, dim)
        return _unbatch(u2 / v, single)

    def sampler(rng):
        return rng.standard_normal(dim) * np.sqrt(v)

    return TargetDensity(
        dim=dim,
        likelihood_potential=like,
        grad_likelihood=grad_like,
        prior_potential=prior,
        grad_prior=grad_prior,
        prior_sampler=sampler,
        transform=ParameterTransform.identity(dim),
        cost_per_likelihood_call=cost_per_likelihood_call,
        name=f"rosenbrock-d{dim}",
    )


# ---------------------------------------------------------------------------
# Hierarchical funnel
# ---------------------------------------------------------------------------


def make_funnel(
    dim: int,
    noise_sigma: float = np.inf,
    observed_data: np.ndarray | None = None,
    cost_per_likelihood_call: float = 0.0,
) -> TargetDensity:
    """Hierarchical variance posterior over (theta, z_1..z_{d-1}).

    theta ~ N(0, 3); z_i | theta ~ N(0, exp(theta / 2)); observations
    y_i ~ N(z_i, sigma^2). With sigma = inf the likelihood vanishes
    identically and the target is the funnel prior alone.
    """
    if dim < 2:
        raise ConfigurationError("funnel target needs dim >= 2")
    if not noise_sigma > 0:
        raise ConfigurationError("noise sigma must be positive (or inf)")
    n_z = dim - 1
    if observed_data is None:
        observed_data = np.zeros(n_z)
    y = np.asarray(observed_data, dtype=float)
    if y.shape != (n_z,):
        raise ConfigurationError(f"observed_data must have length {n_z}")
    theta_var = 3.0
    infinite_noise = np.isinf(noise_sigma)
    sig2 = float(noise_sigma) ** 2 if not infinite_noise else np.inf
    like_norm = 0.0 if infinite_noise else 0.5 * n_z * np.log(2 * np.pi * sig2)

    def like(u):
        u2, single = _batch(u, dim)
        if infinite_noise:
            return _unbatch(np.zeros(u2.shape[0]), single)
        z = u2[:, 1:]
        val = 0.5 * np.sum((z - y) ** 2, axis=1) / sig2 + like_norm
        return _unbatch(val, single)

    def grad_like(u):
        u2, single = _batch(u, dim)
        g = np.zeros_like(u2)
        if not infinite_noise:
            g[:, 1:] = (u2[:, 1:] - y) / sig2
        return _unbatch(g, single)

    def prior(u):
        u2, single = _batch(u, dim)
        theta, z = u2[:, 0], u2[:, 1:]
        p_var = np.exp(theta / 2.0)
        val = (
            0.5 * theta**2 / theta_var
            + 0.5 * np.log(2 * np.pi * theta_var)
            + 0.5 * np.sum(z**2, axis=1) / p_var
            + 0.5 * n_z * (np.log(2 * np.pi) + theta / 2.0)
        )
        return _unbatch(val, single)

    def grad_prior(u):
        u2, single = _batch(u, dim)
        theta, z = u2[:, 0], u2[:, 1:]
        p_var = np.exp(theta / 2.0)
        g = np.empty_like(u2)
        g[:, 0] = theta / theta_var + 0.25 * n_z - 0.25 * np.sum(z**2, axis=1) / p_var
        g[:, 1:] = z / p_var[:, None]
        return _unbatch(g, single)

    def sampler(rng):
        theta = rng.standard_normal() * np.sqrt(theta_var)
        z = rng.standard_normal(n_z) * np.exp(theta / 4.0)
        return np.concatenate([[theta], z])

    return TargetDensity(
        dim=dim,
        likelihood_potential=like,
        grad_likelihood=grad_like,
        prior_potential=prior,
        grad_prior=grad_prior,
        prior_sampler=sampler,
        transform=ParameterTransform.identity(dim),
        cost_per_likelihood_call=cost_per_likelihood_call,
        name=f"funnel-d{dim}-sigma{noise_sigma}",
        coord_names=("theta",) + tuple(f"z{i}" for i in range(1, dim)),
    )


# ---------------------------------------------------------------------------
# Sparse (horseshoe) logistic regression
# ---------------------------------------------------------------------------

N_RAW_FEATURES = 24


def make_sparse_logistic(
    features: np.ndarray,
    labels: np.ndarray,
    cost_per_likelihood_call: float = 0.0,
) -> TargetDensity:
    """Bernoulli regression with per-weight and global scales (d = 51).

    Parameters are 25 weights beta (after a bias column is appended to the 24
    input features), 25 local scales lambda and one global scale tau, with
    logits x . (tau * lambda * beta). Scales are positive and carry log
    transforms; priors are beta_i ~ N(0,1), lambda_i and tau ~ half-Cauchy(1).
    """
    X_raw = np.asarray(features, dtype=float)
    yv = np.asarray(labels, dtype=float)
    if X_raw.ndim != 2 or X_raw.shape[1] != N_RAW_FEATURES:
        raise DataError(f"expected {N_RAW_FEATURES} feature columns, got {X_raw.shape}")
    if yv.shape != (X_raw.shape[0],) or not np.all(np.isin(yv, (0.0, 1.0))):
        raise DataError("labels must be a vector over {0,1} matching the rows")
    X = np.hstack([X_raw, np.ones((X_raw.shape[0], 1))])
    n_w = X.shape[1]  # 25
    dim = 2 * n_w + 1  # 51
    sl_beta = slice(0, n_w)
    sl_lam = slice(n_w, 2 * n_w)
    i_tau = 2 * n_w

    half_cauchy_norm = np.log(np.pi) - np.log(2.0)
    beta_norm = 0.5 * n_w * np.log(2 * np.pi)

    def _weights(u2):
        beta = u2[:, sl_beta]
        lam = np.exp(u2[:, sl_lam])
        tau = np.exp(u2[:, i_tau])
        return beta, lam, tau, tau[:, None] * lam * beta

    def like(u):
        u2, single = _batch(u, dim)
        _, _, _, w = _weights(u2)
        t = w @ X.T  # (n, N_data)
        val = np.sum(np.logaddexp(0.0, t) - yv[None, :] * t, axis=1)
        return _unbatch(val, single)

    def grad_like(u):
        u2, single = _batch(u, dim)
        beta, lam, tau, w = _weights(u2)
        t = w @ X.T
        resid = _sigmoid_stable(t) - yv[None, :]
        g_w = resid @ X  # (n, n_w)
        g = np.empty_like(u2)
        g[:, sl_beta] = tau[:, None] * lam * g_w
        g[:, sl_lam] = w * g_w
        g[:, i_tau] = np.sum(w * g_w, axis=1)
        return _unbatch(g, single)

    def prior(u):
        u2, single = _batch(u, dim)
        beta = u2[:, sl_beta]
        u_lam = u2[:, sl_lam]
        u_tau = u2[:, i_tau]
        scale_terms = np.logaddexp(0.0, 2.0 * u_lam) - u_lam  # log(1+lam^2) - u
        tau_term = np.logaddexp(0.0, 2.0 * u_tau) - u_tau
        val = (
            0.5 * np.sum(beta**2, axis=1)
            + beta_norm
            + np.sum(scale_terms, axis=1)
            + tau_term
            + (n_w + 1) * half_cauchy_norm
        )
        return _unbatch(val, single)

    def grad_prior(u):
        u2, single = _batch(u, dim)
        g = np.empty_like(u2)
        g[:, sl_beta] = u2[:, sl_beta]
        g[:, sl_lam] = np.tanh(u2[:, sl_lam])
        g[:, i_tau] = np.tanh(u2[:, i_tau])
        return _unbatch(g, single)

    def sampler(rng):
        u = np.empty(dim)
        u[sl_beta] = rng.standard_normal(n_w)
        u[sl_lam] = np.log(np.tan(0.5 * np.pi * rng.uniform(size=n_w)))
        u[i_tau] = np.log(np.tan(0.5 * np.pi * rng.uniform()))
        return u

    kinds = ("identity",) * n_w + ("log",) * (n_w + 1)
    transform = ParameterTransform.mixed(
        kinds, np.where(np.arange(dim) < n_w, -np.inf, 0.0), np.full(dim, np.inf)
    )
    names = (
        tuple(f"beta{i}" for i in range(n_w))
        + tuple(f"lambda{i}" for i in range(n_w))
        + ("tau",)
    )
    return TargetDensity(
        dim=dim,
        likelihood_potential=like,
        grad_likelihood=grad_like,
        prior_potential=prior,
        grad_prior=grad_prior,
        prior_sampler=sampler,
        transform=transform,
        cost_per_likelihood_call=cost_per_likelihood_call,
        name="sparse-logistic-d51",
        coord_names=names,
    )


def _sigmoid_stable(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out
