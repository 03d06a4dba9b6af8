import numpy as np
import pytest

from dlmc.references import (
    funnel_quadrature_reference,
    gaussian_mixture_reference,
    mala_reference_moments,
    rosenbrock_reference,
)
from dlmc.rng import substream
from dlmc.targets import make_funnel, make_gaussian_mixture


def test_mixture_reference_matches_2d_quadrature():
    dim = 2
    ref = gaussian_mixture_reference(dim, component_std=0.5)
    t = make_gaussian_mixture(dim, component_std=0.5)
    n = 1201
    grid = np.linspace(-1.9995, 1.9995, n)
    xx, yy = np.meshgrid(grid, grid, indexing="ij")
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    u = t.transform.to_unconstrained(pts)
    # constrained-space density: exp(-U(u)) * |du/dx| = exp(-U(u) - logJ(u))
    dens = np.exp(-t.potential(u) - t.transform.log_jacobian(u))
    z = dens.sum()
    for i, coord in enumerate([xx.ravel(), yy.ravel()]):
        second = (dens * coord**2).sum() / z
        assert ref.second_moment[i] == pytest.approx(second, rel=1e-3)


def test_mixture_reference_symmetric_modes_keep_weights():
    ref = gaussian_mixture_reference(4)
    w = ref.detail["weights_in_box"]
    assert w[0] == pytest.approx(1 / 3, rel=1e-12)
    assert w[1] == pytest.approx(2 / 3, rel=1e-12)


def test_rosenbrock_reference_tiles_pairs():
    ref = rosenbrock_reference(8)
    assert ref.second_moment.shape == (8,)
    np.testing.assert_allclose(ref.second_moment[0::2], ref.second_moment[0])
    np.testing.assert_allclose(ref.second_moment[1::2], ref.second_moment[1])
    # frozen from an independent run of the same integral at higher resolution
    assert ref.second_moment[0] == pytest.approx(0.8988, abs=2e-3)
    assert ref.second_moment[1] == pytest.approx(1.667, abs=5e-3)


def test_funnel_quadrature_flat_noise_matches_analytic_prior():
    ref = funnel_quadrature_reference(5, np.inf)
    # theta ~ N(0,3); z variance is the lognormal mean E[exp(theta/2)]
    assert ref.second_moment[0] == pytest.approx(3.0, rel=1e-6)
    assert np.allclose(ref.second_moment[1:], np.exp(3.0 / 8.0), rtol=1e-6)


def test_funnel_quadrature_large_data_limit():
    # tiny noise pins z_i ~ y_i: second moments approach y_i^2 + sigma^2-ish
    y = np.array([1.0, -2.0, 0.5, 0.0])
    ref = funnel_quadrature_reference(5, 0.01, observed_data=y)
    assert np.all(np.abs(ref.second_moment[1:] - y**2) < 0.05)


def test_mala_reference_agrees_with_funnel_quadrature():
    # independent-oracle cross-check: a medium-length adjusted Langevin run
    # must land on the quadrature values within its own standard errors
    dim, sigma = 5, 5.0
    rng = substream(0, "ref-crosscheck-data")
    theta_true = 0.0
    z = rng.standard_normal(dim - 1) * np.exp(theta_true / 4.0)
    y = z + sigma * rng.standard_normal(dim - 1)
    quad_ref = funnel_quadrature_reference(dim, sigma, observed_data=y)
    t = make_funnel(dim, noise_sigma=sigma, observed_data=y)
    mala_ref = mala_reference_moments(
        t, total_adjusted_steps=800_000, seed=7, n_chains=32, thin=10
    )
    for i in range(dim):
        tol = 4 * mala_ref.second_moment_se[i] + 1e-3
        assert abs(mala_ref.second_moment[i] - quad_ref.second_moment[i]) < tol
    assert 0.2 < mala_ref.detail["acceptance_rate"] < 0.95
