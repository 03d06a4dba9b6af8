"""Particle-based posterior sampling with a normalizing-flow density estimate.

Particles drawn from the prior descend the gradient of the target potential
minus their own log density (estimated each iteration by an invertible
spline flow), with flow-latent-space preconditioning and an independent-
proposal Metropolis-Hastings pass for asymptotic unbiasedness. Langevin,
SVGD and kernel-density baselines plus a benchmark harness are included.
"""

from .baselines import (
    KdeModel,
    kde_grad_log_density,
    run_dlmc_pp,
    run_langevin,
    run_mh_only,
    run_svgd,
    svgd_step,
    ula_step,
)
from .diagnostics import (
    CostLedger,
    MomentSummary,
    ReferenceMoments,
    bias_squared_second_moment,
    ess_gaussian_equivalent,
    summarize_moments,
    update_cost_ledger,
)
from .errors import (
    ConfigurationError,
    DataError,
    DlmcError,
    DomainError,
    FitError,
)
from .flow import FlowModel, fit_flow
from .harness import (
    ExperimentConfig,
    RunArtifacts,
    load_config,
    load_german_credit,
    resolve_config,
    run_experiment,
)
from .sampler import (
    AdagradState,
    DlmcConfig,
    ParticleEnsemble,
    RunRecord,
    RunResult,
    check_convergence,
    dl_update,
    dl_update_latent,
    init_from_prior,
    mh_adjust,
    run_dlmc,
    upsample_ensemble,
)
from .targets import (
    TargetDensity,
    make_funnel,
    make_gaussian,
    make_gaussian_mixture,
    make_rosenbrock,
    make_sparse_logistic,
)
from .transforms import ParameterTransform

__version__ = "0.1.0"
