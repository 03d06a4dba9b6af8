import numpy as np
import pytest

from dlmc.diagnostics import MomentSummary, bias_squared_second_moment, ReferenceMoments
from dlmc.errors import ConfigurationError
from dlmc.flow import FlowModel
from dlmc.rng import substream
from dlmc.sampler import (
    AdagradState,
    DlmcConfig,
    ParticleEnsemble,
    TargetEvaluator,
    check_convergence,
    dl_update,
    dl_update_latent,
    init_from_prior,
    mh_adjust,
    run_dlmc,
    upsample_ensemble,
)
from dlmc.targets import TargetDensity, make_funnel, make_gaussian
from dlmc.transforms import ParameterTransform


def constant_prior_target(position=2.0):
    """1-d unit-Gaussian likelihood, flat prior, prior draws pinned at 2.0."""

    def like(u):
        u = np.atleast_2d(u)
        return np.squeeze(0.5 * np.sum(u**2, axis=1))

    def grad_like(u):
        return np.asarray(u, dtype=float)

    def zero(u):
        u = np.atleast_2d(u)
        return np.squeeze(np.zeros(u.shape[0]))

    def zero_grad(u):
        return np.zeros_like(np.asarray(u, dtype=float))

    return TargetDensity(
        dim=1,
        likelihood_potential=like,
        grad_likelihood=grad_like,
        prior_potential=zero,
        grad_prior=zero_grad,
        prior_sampler=lambda rng: np.array([position]),
        transform=ParameterTransform.identity(1),
        name="pinned",
    )


def make_ensemble(target, positions, flow=None):
    positions = np.asarray(positions, dtype=float)
    pots = np.atleast_1d(target.potential(positions))
    grads = np.atleast_2d(target.grad_potential(positions))
    logq = flow.log_density(positions) if flow is not None else None
    return ParticleEnsemble(
        positions=positions,
        potential_values=pots,
        grad_potentials=grads,
        flow_log_densities=logq,
    )


# ---------------------------------------------------------------------------
# init_from_prior
# ---------------------------------------------------------------------------


def test_init_plain_likelihood_step_arithmetic():
    t = constant_prior_target(2.0)
    ens = init_from_prior(t, 2, 0.1, substream(0, "init-arith"))
    # grad L = x = 2 at the draw, so 2 - 2 * 0.1 = 1.8
    np.testing.assert_allclose(ens.positions, 1.8)


def test_init_zero_step_returns_prior_draws():
    t = make_gaussian(np.zeros(3), np.eye(3), likelihood="all")
    gens = [substream(1, "init-zero", i) for i in range(8)]
    ens = init_from_prior(t, 8, 0.0, gens)
    expected = np.stack(
        [t.prior_sampler(substream(1, "init-zero", i)) for i in range(8)]
    )
    np.testing.assert_array_equal(ens.positions, expected)


def test_init_flat_likelihood_returns_exact_prior_draws():
    t = make_funnel(6, noise_sigma=np.inf)
    gens = [substream(2, "init-funnel", i) for i in range(10)]
    ens = init_from_prior(t, 10, 0.05, gens)
    expected = np.stack(
        [t.prior_sampler(substream(2, "init-funnel", i)) for i in range(10)]
    )
    np.testing.assert_array_equal(ens.positions, expected)


# ---------------------------------------------------------------------------
# dl updates
# ---------------------------------------------------------------------------


def quadratic_target_and_flow():
    # U = x^2 / 2, flow density with V = x^2 / 4 (variance-2 Gaussian)
    t = make_gaussian(np.zeros(1), np.eye(1), likelihood="all")
    m = FlowModel.gaussian(np.zeros(1), 2.0 * np.eye(1))
    return t, m


def test_dl_update_plain_gradient_arithmetic():
    t, m = quadratic_target_and_flow()
    cfg = DlmcConfig(step_size=0.1, optimizer="plain-gradient", n_particles=2)
    ens = make_ensemble(t, np.array([[1.0], [1.0]]), m)
    out, skipped = dl_update(ens, t, m, cfg)
    assert skipped == 0
    np.testing.assert_allclose(out.positions, 0.95)


def test_dl_update_zero_step_is_identity():
    t, m = quadratic_target_and_flow()
    cfg = DlmcConfig(
        step_size=0.0,
        optimizer="plain-gradient",
        allow_step_size_out_of_range=True,
    )
    ens = make_ensemble(t, np.array([[1.0], [-2.0]]), m)
    out, _ = dl_update(ens, t, m, cfg)
    np.testing.assert_array_equal(out.positions, ens.positions)


def test_dl_update_stationary_when_flow_equals_target():
    mean = np.array([0.3, -0.7])
    cov = np.array([[1.5, 0.4], [0.4, 0.8]])
    t = make_gaussian(mean, cov)
    m = FlowModel.gaussian(mean, cov)
    cfg = DlmcConfig(step_size=0.1, optimizer="plain-gradient")
    rng = substream(3, "stationary")
    positions = np.stack([t.prior_sampler(rng) for _ in range(50)])
    ens = make_ensemble(t, positions, m)
    out, _ = dl_update(ens, t, m, cfg)
    assert np.max(np.abs(out.positions - ens.positions)) < 1e-8


def test_dl_update_latent_arithmetic():
    # target N(0, 4): grad U(z) = z / 4 under the identity flow
    t = make_gaussian(np.zeros(1), 4.0 * np.eye(1), likelihood="all")
    m = FlowModel.identity(1)
    cfg = DlmcConfig(step_size=0.1, optimizer="plain-gradient")
    ens = make_ensemble(t, np.array([[1.0]]), m)
    out, _ = dl_update_latent(ens, t, m, cfg)
    # z' = 1 - 0.25 * 0.1 + 1 * 0.1
    np.testing.assert_allclose(out.positions, 1.075)


def test_dl_update_latent_zero_point_moves_by_potential_gradient_only():
    t = make_gaussian(np.array([1.0]), np.eye(1), likelihood="all")
    m = FlowModel.identity(1)
    cfg = DlmcConfig(step_size=0.05, optimizer="plain-gradient")
    ens = make_ensemble(t, np.array([[0.0]]), m)
    out, _ = dl_update_latent(ens, t, m, cfg)
    # radial term vanishes at origin: step is -grad U(0) * dt = -(-1) * 0.05
    np.testing.assert_allclose(out.positions, 0.05)


def test_latent_and_data_space_identical_under_identity_flow():
    t = make_gaussian(np.array([0.5, -0.2]), np.array([[2.0, 0.3], [0.3, 1.0]]))
    m = FlowModel.identity(2)
    rng = substream(4, "latent-vs-data")
    start = np.stack([t.prior_sampler(rng) for _ in range(40)])
    for optimizer in ("plain-gradient", "adagrad"):
        cfg = DlmcConfig(step_size=0.05, optimizer=optimizer)
        e1 = make_ensemble(t, start.copy(), m)
        e2 = make_ensemble(t, start.copy(), m)
        a1 = AdagradState(40, 2)
        a2 = AdagradState(40, 2)
        for _ in range(10):
            e1, _ = dl_update(e1, t, m, cfg, a1)
            e2, _ = dl_update_latent(e2, t, m, cfg, a2)
        assert np.max(np.abs(e1.positions - e2.positions)) < 1e-10


def test_dl_update_skips_nonfinite_gradient_particles():
    t, m = quadratic_target_and_flow()

    class BadGradTarget:
        dim = 1
        cost_per_likelihood_call = 0.0

        def potential(self, u):
            return t.potential(u)

        def grad_potential(self, u):
            g = t.grad_potential(u)
            g = np.atleast_2d(g)
            mask = np.atleast_2d(u)[:, 0] > 1.5
            g[mask] = np.nan
            return g

    bad = BadGradTarget()
    cfg = DlmcConfig(step_size=0.1, optimizer="plain-gradient")
    positions = np.array([[1.0], [2.0]])
    ens = ParticleEnsemble(
        positions=positions.copy(),
        potential_values=np.atleast_1d(t.potential(positions)),
        grad_potentials=bad.grad_potential(positions.copy()),
        flow_log_densities=m.log_density(positions),
    )
    out, skipped = dl_update(ens, bad, m, cfg)
    assert skipped >= 1
    assert np.array_equal(out.positions[1], positions[1])  # bad particle held
    assert np.all(np.isfinite(out.positions))


# ---------------------------------------------------------------------------
# Metropolis-Hastings adjustment
# ---------------------------------------------------------------------------


class ScriptedFlow:
    """Proposal machinery with hand-set densities for ratio arithmetic."""

    def __init__(self, proposal, logq_prop, logq_current):
        self.proposal = np.asarray(proposal, dtype=float)
        self.logq_prop = logq_prop
        self.logq_current = logq_current

    def propose(self, rng, n):
        from dlmc.rng import per_particle_normals

        per_particle_normals(rng, n, self.proposal.size)  # mirror real protocol
        return (
            np.tile(self.proposal, (n, 1)),
            np.full(n, self.logq_prop),
        )

    def log_density(self, x):
        return np.full(np.atleast_2d(x).shape[0], self.logq_current)


class ScriptedTarget:
    dim = 1
    cost_per_likelihood_call = 0.0

    def __init__(self, proposal_potential):
        self.proposal_potential = proposal_potential

    def potential(self, u):
        u2 = np.atleast_2d(u)
        return np.full(u2.shape[0], self.proposal_potential)

    def grad_potential(self, u):
        return np.zeros_like(np.atleast_2d(u))


def scripted_ensemble(current_potential, logq_current, n=6):
    return ParticleEnsemble(
        positions=np.zeros((n, 1)),
        potential_values=np.full(n, current_potential),
        grad_potentials=np.zeros((n, 1)),
        flow_log_densities=np.full(n, logq_current),
    )


def test_mh_ratio_equal_to_one_accepts_every_proposal():
    # log p(x~) = -3, log q(x) = -1, log p(x) = -2, log q(x~) = -2 -> log r = 0
    flow = ScriptedFlow(proposal=[5.0], logq_prop=-2.0, logq_current=-1.0)
    target = ScriptedTarget(proposal_potential=3.0)
    ens = scripted_ensemble(current_potential=2.0, logq_current=-1.0)
    out, rate = mh_adjust(ens, target, flow, substream(5, "mh-ratio"))
    assert rate == 1.0
    assert np.all(out.positions == 5.0)


def test_mh_ratio_exp_minus_one_matches_uniform_threshold():
    # second case: log p(x~) = -4 -> log r = -1, accept iff log u < -1
    flow = ScriptedFlow(proposal=[5.0], logq_prop=-2.0, logq_current=-1.0)
    target = ScriptedTarget(proposal_potential=4.0)
    n = 4000
    ens = scripted_ensemble(current_potential=2.0, logq_current=-1.0, n=n)
    rng = substream(6, "mh-threshold")
    out, rate = mh_adjust(ens, target, flow, rng)
    # replay the generator: proposals consume n*dim normals, then n uniforms
    rng2 = substream(6, "mh-threshold")
    rng2.standard_normal((n, 1))
    u = rng2.uniform(size=n)
    expected = np.log(u) < -1.0
    assert rate == pytest.approx(np.mean(expected))
    assert rate == pytest.approx(np.exp(-1.0), abs=0.03)
    np.testing.assert_array_equal(out.positions[:, 0] == 5.0, expected)


def test_mh_with_flow_equal_to_target_accepts_everything():
    mean = np.array([0.5, -1.0])
    cov = np.array([[1.2, 0.2], [0.2, 0.7]])
    t = make_gaussian(mean, cov)
    m = FlowModel.gaussian(mean, cov)
    rng = substream(7, "mh-perfect")
    positions = np.stack([t.prior_sampler(rng) for _ in range(2000)])
    ens = make_ensemble(t, positions, m)
    out, rate = mh_adjust(ens, t, m, substream(8, "mh-perfect-pass"))
    assert rate == 1.0


def test_mh_auto_rejects_nonfinite_proposals():
    flow = ScriptedFlow(proposal=[5.0], logq_prop=np.nan, logq_current=-1.0)
    target = ScriptedTarget(proposal_potential=3.0)
    ens = scripted_ensemble(current_potential=2.0, logq_current=-1.0)
    out, rate = mh_adjust(ens, target, flow, substream(9, "mh-nan"))
    assert rate == 0.0
    np.testing.assert_array_equal(out.positions, ens.positions)


# ---------------------------------------------------------------------------
# upsampling
# ---------------------------------------------------------------------------


def test_upsample_refuses_to_shrink():
    t = make_gaussian(np.zeros(2), np.eye(2))
    m = FlowModel.gaussian(np.zeros(2), np.eye(2))
    rng = substream(10, "upsample-shrink")
    positions = np.stack([t.prior_sampler(rng) for _ in range(50)])
    ens = make_ensemble(t, positions, m)
    with pytest.raises(ConfigurationError):
        upsample_ensemble(ens, t, m, 10, rng)


def test_upsample_from_exact_flow_gives_exact_posterior_draws():
    mean = np.array([1.0, -2.0])
    cov = np.diag([2.0, 0.5])
    t = make_gaussian(mean, cov)
    m = FlowModel.gaussian(mean, cov)
    rng = substream(11, "upsample-exact")
    positions = np.stack([t.prior_sampler(rng) for _ in range(100)])
    ens = make_ensemble(t, positions, m)
    out, rate = upsample_ensemble(ens, t, m, 20_000, substream(12, "upsample-draws"))
    assert rate == 1.0
    # analytic Gaussian moments within Monte Carlo error
    se_mean = np.sqrt(np.diag(cov) / 20_000)
    assert np.all(np.abs(out.positions.mean(axis=0) - mean) < 4 * se_mean)
    second = (out.positions**2).mean(axis=0)
    expect_second = np.diag(cov) + mean**2
    assert np.all(np.abs(second / expect_second - 1.0) < 0.05)


# ---------------------------------------------------------------------------
# convergence rule
# ---------------------------------------------------------------------------


def summary(mean, second, it=0, n=100):
    return MomentSummary(
        mean=np.asarray(mean, float),
        second_moment=np.asarray(second, float),
        n=n,
        iteration=it,
    )


def test_convergence_identical_history_true():
    h = [summary([0.0, 1.0], [1.0, 2.0], it=i) for i in range(6)]
    assert check_convergence(h, window=5, tol=0.02)


def test_convergence_insufficient_history_false():
    h = [summary([0.0], [1.0], it=i) for i in range(4)]
    assert not check_convergence(h, window=5, tol=0.02)


def test_convergence_drifting_moment_false():
    tol = 0.02
    h = [summary([0.0], [1.0 + 10 * tol * i], it=i) for i in range(8)]
    assert not check_convergence(h, window=5, tol=tol)


def test_convergence_calibration_iid_resampling():
    # stationary ensemble resampled iid each iteration: expect nearly every
    # seed to report convergence at N = 10_000, tol = 0.02, window = 5
    passes = 0
    n_seeds = 60
    for seed in range(n_seeds):
        rng = substream(seed, "conv-calibration")
        hist = []
        for it in range(6):
            draws = rng.standard_normal((10_000, 2))
            hist.append(
                MomentSummary(
                    mean=draws.mean(axis=0),
                    second_moment=(draws**2).mean(axis=0),
                    n=10_000,
                    iteration=it,
                )
            )
        passes += check_convergence(hist, window=5, tol=0.02)
    assert passes >= 0.95 * n_seeds


# ---------------------------------------------------------------------------
# run_dlmc driver
# ---------------------------------------------------------------------------


def test_run_flat_likelihood_converges_at_iteration_zero():
    t = make_funnel(10, noise_sigma=np.inf)
    cfg = DlmcConfig(n_particles=400, seed=3, max_iterations=50)
    res = run_dlmc(t, cfg)
    assert res.converged
    assert res.records == []
    theta = res.ensemble.positions[:, 0]
    est = np.mean(theta**2)
    se = np.std(theta**2, ddof=1) / np.sqrt(theta.size)
    assert abs(est - 3.0) < 3 * se


def test_run_gaussian_prior_equals_target_stays_unbiased():
    # informative likelihood whose posterior equals the initialization draw
    t = make_gaussian(np.zeros(2), np.eye(2), likelihood="all")
    cfg = DlmcConfig(n_particles=800, seed=5, max_iterations=15, step_size=0.05)
    res = run_dlmc(t, cfg)
    assert len(res.records) > 0
    ref = ReferenceMoments(second_moment=np.ones(2), provenance="analytic")
    for rec in res.records:
        b2, _ = bias_squared_second_moment(rec.moments, ref)
        assert b2 <= 0.01


def test_run_is_deterministic_and_worker_independent():
    t = make_gaussian(np.zeros(2), np.diag([1.0, 2.0]), likelihood="all")
    base = dict(n_particles=300, seed=11, max_iterations=6, convergence_window=10)
    r1 = run_dlmc(t, DlmcConfig(workers=1, **base))
    r2 = run_dlmc(t, DlmcConfig(workers=8, **base))
    assert np.array_equal(r1.ensemble.positions, r2.ensemble.positions)
    for a, b in zip(r1.records, r2.records):
        assert a.mh_acceptance == b.mh_acceptance
        np.testing.assert_array_equal(a.moments.mean, b.moments.mean)
        np.testing.assert_array_equal(a.moments.second_moment, b.moments.second_moment)
    r3 = run_dlmc(t, DlmcConfig(workers=1, **base))
    assert np.array_equal(r1.ensemble.positions, r3.ensemble.positions)


def test_run_counter_integrity():
    t = make_gaussian(np.zeros(2), np.eye(2), likelihood="all")
    n, iters = 100, 4
    cfg = DlmcConfig(
        n_particles=n,
        seed=7,
        max_iterations=iters,
        convergence_window=50,  # never converges within the budget
    )
    res = run_dlmc(t, cfg)
    assert not res.converged
    assert len(res.records) == iters
    # init: grad-L event + cache event; each iteration: DL event + MH event
    expected = 2 * n + iters * 2 * n
    assert res.ledger.likelihood_calls == expected
    assert res.ledger.gradient_calls == expected
    assert res.ledger.sequential_seconds == 0.0  # zero-cost target


def test_run_caches_are_consistent_with_positions():
    t = make_gaussian(np.zeros(3), np.eye(3), likelihood="all")
    cfg = DlmcConfig(n_particles=150, seed=13, max_iterations=5, convergence_window=50)
    res = run_dlmc(t, cfg)
    idx = [0, 7, 31, 149]
    np.testing.assert_allclose(
        res.ensemble.potential_values[idx],
        t.potential(res.ensemble.positions[idx]),
        rtol=1e-12,
    )
    np.testing.assert_allclose(
        res.ensemble.grad_potentials[idx],
        t.grad_potential(res.ensemble.positions[idx]),
        rtol=1e-12,
    )


def test_run_burnin_and_upsample_schedule():
    t = make_gaussian(np.zeros(2), np.eye(2), likelihood="all")
    cfg = DlmcConfig(
        n_particles=50,
        burnin=(10, 5),
        upsample_to=200,
        seed=17,
        max_iterations=10,
        convergence_window=50,
    )
    res = run_dlmc(t, cfg)
    phases = [r.phase for r in res.records]
    assert phases[:5] == ["burnin"] * 5
    assert phases[5] == "upsample"
    assert all(p == "main" for p in phases[6:])
    assert res.records[4].n_particles == 10
    assert res.records[5].n_particles == 200
    assert res.ensemble.n == 200


def test_step_size_range_is_enforced():
    with pytest.raises(ConfigurationError):
        DlmcConfig(step_size=0.5)
    cfg = DlmcConfig(step_size=0.5, allow_step_size_out_of_range=True)
    assert cfg.step_size == 0.5
