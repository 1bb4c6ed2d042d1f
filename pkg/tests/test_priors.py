import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from latticevae.errors import ContractViolation, OutOfSupportError
from latticevae.lattice import ScaledProductLattice, lattice_basis, quantize, sample_dither, theta_array
from latticevae.priors import (
    GaussianProxyParams,
    LaplaceZModel,
    ThetaPrior,
    estimate_f_s_minus_u,
    gaussian_density,
    gaussian_kl_analytic,
    gaussian_kl_sample,
    laplace_density,
    laplace_pmf_log,
    laplace_rep_cost,
    laplace_rep_cost_grad,
    theta_prior_block_logpmf,
    theta_prior_logpmf,
    theta_prior_nll_grad,
    theta_prior_support,
)


def _laplace_mass(alpha, lo, hi):
    f = lambda s: 0.5 * alpha * math.exp(-alpha * abs(s))  # noqa: E731
    pts = [0.0] if lo < 0 < hi else None
    return quad(f, lo, hi, points=pts, epsabs=1e-14, epsrel=1e-13)[0]


def _cost_oracle(alpha, delta, eta):
    # log f_U - log f_{S-U} = -log P(S in [eta - delta/2, eta + delta/2])
    return -math.log(_laplace_mass(alpha, eta - delta / 2, eta + delta / 2))


def _pmf_oracle(alpha, delta, z, u):
    return _laplace_mass(alpha, z * delta - delta / 2 - u, z * delta + delta / 2 - u)


# --------------------------------------------------------------------------
# Laplace source on a scaled integer lattice


def test_rep_cost_examples():
    m = LaplaceZModel(1.0, 1.0)
    assert laplace_rep_cost(m, 0.0) == pytest.approx(-math.log(1 - math.exp(-0.5)), abs=1e-12)
    assert laplace_rep_cost(m, 0.0) == pytest.approx(0.9328, abs=1e-4)
    boundary = -math.log((1 - math.exp(-1)) / 2)
    assert laplace_rep_cost(m, 0.5) == pytest.approx(boundary, abs=1e-12)
    assert laplace_rep_cost(m, 0.5 - 1e-13) == pytest.approx(boundary, abs=1e-10)
    assert laplace_rep_cost(m, 2.0) == pytest.approx(2 - math.log(math.sinh(0.5)), abs=1e-12)
    assert laplace_rep_cost(m, 2.0) == pytest.approx(2.6518, abs=1e-4)


@pytest.mark.parametrize("alpha", [0.3, 1.0, 3.0])
@pytest.mark.parametrize("delta", [0.5, 1.0, 2.0])
def test_rep_cost_matches_quadrature(alpha, delta):
    for eta in np.linspace(-2.5, 2.5, 23):
        got = laplace_rep_cost(LaplaceZModel(alpha, delta), eta)
        assert got == pytest.approx(_cost_oracle(alpha, delta, eta), abs=1e-9)


@pytest.mark.parametrize("alpha", [0.25, 1.0, 4.0])
@pytest.mark.parametrize("delta", [0.5, 1.0, 2.0])
def test_branches_meet_at_cell_boundary(alpha, delta):
    h = delta / 2
    inner = -math.log1p(-math.exp(-alpha * h) * math.cosh(alpha * h))
    outer = alpha * h - math.log(math.sinh(alpha * h))
    assert abs(inner - outer) < 1e-10
    below = laplace_rep_cost(LaplaceZModel(alpha, delta), np.nextafter(h, 0))
    at = laplace_rep_cost(LaplaceZModel(alpha, delta), h)
    assert abs(below - at) < 1e-10


@settings(max_examples=60, deadline=None)
@given(alpha=st.floats(0.2, 5), delta=st.floats(0.2, 3), eta=st.floats(-3, 3))
def test_rep_cost_partials_match_finite_differences(alpha, delta, eta):
    if abs(abs(eta) - delta / 2) < 1e-4:
        return
    _, de, da, dd = laplace_rep_cost_grad(alpha, delta, eta)
    h = 1e-6
    f = lambda a, d, e: float(laplace_rep_cost_grad(a, d, e)[0])  # noqa: E731
    assert de == pytest.approx((f(alpha, delta, eta + h) - f(alpha, delta, eta - h)) / (2 * h), abs=1e-5)
    assert da == pytest.approx((f(alpha + h, delta, eta) - f(alpha - h, delta, eta)) / (2 * h), abs=1e-5)
    assert dd == pytest.approx((f(alpha, delta + h, eta) - f(alpha, delta - h, eta)) / (2 * h), abs=1e-5)


def test_rep_cost_is_monotone_in_distance_for_sharp_sources():
    eta = np.linspace(0, 3, 200)
    cost = laplace_rep_cost(LaplaceZModel(20.0, 1.0), eta)
    assert np.all(np.diff(cost) >= -1e-12)


def test_pmf_examples():
    m = LaplaceZModel(1.0, 1.0)
    assert laplace_pmf_log(m, 0, 0.0) == pytest.approx(math.log(1 - math.exp(-0.5)), abs=1e-12)
    assert laplace_pmf_log(m, 1, 0.0) == pytest.approx(math.log(math.sinh(0.5)) - 1, abs=1e-12)
    assert laplace_pmf_log(m, 1, 0.0) == pytest.approx(-1.6518, abs=1e-4)
    total = np.exp(laplace_pmf_log(m, np.arange(-50, 51), 0.0)).sum()
    assert total == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("alpha,delta", [(0.5, 2.0), (1.0, 1.0), (3.0, 0.5)])
def test_pmf_matches_quadrature(alpha, delta):
    m = LaplaceZModel(alpha, delta)
    for u in np.linspace(-delta / 2 + 1e-9, delta / 2, 7):
        for z in range(-3, 4):
            assert math.exp(laplace_pmf_log(m, z, u)) == pytest.approx(
                _pmf_oracle(alpha, delta, z, u), abs=1e-11)


@pytest.mark.parametrize("alpha", [0.25, 1.0, 4.0])
@pytest.mark.parametrize("delta", [0.5, 1.0, 2.0])
def test_pmf_normalizes_over_a_dither_grid(alpha, delta):
    # geometric tail with ratio exp(-alpha delta): truncate below 1e-12
    zmax = int(math.ceil(30 / (alpha * delta))) + 2
    z = np.arange(-zmax, zmax + 1)
    m = LaplaceZModel(alpha, delta)
    for u in np.linspace(-delta / 2, delta / 2, 41)[1:]:
        assert np.exp(laplace_pmf_log(m, z, u)).sum() == pytest.approx(1.0, abs=1e-8)


def test_pmf_rejects_dither_outside_cell():
    with pytest.raises(ContractViolation):
        laplace_pmf_log(LaplaceZModel(1.0, 1.0), 0, 0.6)
    with pytest.raises(ContractViolation):
        LaplaceZModel(-1.0, 1.0)


@pytest.mark.parametrize("alpha,delta", [(0.5, 1.0), (2.0, 0.5)])
def test_density_of_s_minus_u_integrates_to_one(alpha, delta):
    f = lambda e: math.exp(-laplace_rep_cost(LaplaceZModel(alpha, delta), e)) / delta  # noqa: E731
    total = quad(f, -np.inf, np.inf, points=None, limit=200)[0]
    assert total == pytest.approx(1.0, abs=1e-8)


# --------------------------------------------------------------------------
# Monte-Carlo density of S - U


def test_estimator_gaussian_convolution():
    est, se = estimate_f_s_minus_u(gaussian_density(1.0), "Z", [0.0], 100_000,
                                   np.random.default_rng(0), return_stderr=True)
    exact = norm.cdf(0.5) - norm.cdf(-0.5)
    assert exact == pytest.approx(0.3829, abs=1e-4)
    assert abs(est - exact) < 3 * se


def test_estimator_single_draw_is_density_at_shifted_point():
    rng_a, rng_b = np.random.default_rng(4), np.random.default_rng(4)
    est = estimate_f_s_minus_u(gaussian_density(2.0), "A2", [0.3, -0.1], 1, rng_a)
    v = sample_dither("A2", rng_b, size=1)
    assert est == pytest.approx(float(gaussian_density(2.0)(np.array([0.3, -0.1]) - v)[0]))


def test_estimator_laplace_matches_closed_form():
    est, se = estimate_f_s_minus_u(laplace_density(1.0), "Z", [0.0], 100_000,
                                   np.random.default_rng(1), return_stderr=True)
    exact = math.exp(-laplace_rep_cost(LaplaceZModel(1.0, 1.0), 0.0))
    assert abs(est - exact) < 3 * se


# --------------------------------------------------------------------------
# Gaussian KL


def test_gaussian_kl_examples():
    p = GaussianProxyParams(1.0, 0.0, 3)
    assert gaussian_kl_sample(np.zeros(3), np.zeros(3), p) == 0.0
    assert gaussian_kl_analytic(np.zeros(3), p) == pytest.approx(0.0, abs=1e-15)
    one = GaussianProxyParams(1.0, 1.0, 1)
    assert gaussian_kl_analytic(np.zeros(1), one) == pytest.approx(0.5 * (math.log(2) + 0.5 - 1))
    assert gaussian_kl_analytic(np.zeros(1), one) == pytest.approx(0.0966, abs=1e-4)
    with pytest.raises(ContractViolation):
        GaussianProxyParams(0.0, 1.0, 1)


def _kl_oracle(e, sg, ss):
    # KL between isotropic Gaussians from the general formula
    s = sg + ss
    m = len(e)
    return 0.5 * (m * sg / s + float(np.dot(e, e)) / s - m + m * math.log(s / sg))


@pytest.mark.parametrize("e,sg,ss", [([1.0], 1.0, 1.0), ([0.3, -1.2], 0.5, 2.0), ([0.0, 0.0], 1.0, 0.0)])
def test_gaussian_kl_sample_is_unbiased(e, sg, ss):
    e = np.array(e)
    p = GaussianProxyParams(sg, ss, len(e))
    rng = np.random.default_rng(8)
    u = math.sqrt(sg) * rng.standard_normal((100_000, len(e)))
    vals = np.array([gaussian_kl_sample(e, ui, p) for ui in u])
    assert gaussian_kl_analytic(e, p) == pytest.approx(_kl_oracle(e, sg, ss))
    se = vals.std(ddof=1) / math.sqrt(len(vals))
    assert abs(vals.mean() - _kl_oracle(e, sg, ss)) <= 3 * se + 1e-12


# --------------------------------------------------------------------------
# Theta prior


def _random_prior(name, blocks=1, max_norm=12, threshold=None, seed=0):
    thr = {"Z": 2, "Z2": 3, "A2": 4, "E8": 3}[name] if threshold is None else threshold
    prior = ThetaPrior.create(name, blocks, max_norm, thr)
    rng = np.random.default_rng(seed)
    for n in prior.param_names():
        arr = getattr(prior, n)
        arr += rng.standard_normal(arr.shape)
    return prior


@pytest.mark.parametrize("name", ["Z", "Z2", "A2", "E8"])
def test_theta_prior_normalizes_on_its_support(name):
    prior = _random_prior(name, max_norm=8 if name == "E8" else 12)
    pts, norms = theta_prior_support(prior)
    rng = np.random.default_rng(1)
    for u in sample_dither(name, rng, size=3):
        logp = theta_prior_block_logpmf(
            prior, pts[:, None, :], norms[:, None], np.broadcast_to(u, pts.shape)[:, None, :])
        assert np.exp(logp).sum() == pytest.approx(1.0, abs=1e-10)


def test_theta_prior_uniform_logits_without_small_table():
    prior = ThetaPrior.create("Z2", 1, 10, 0)
    shells = int(np.count_nonzero(theta_array("Z2", 10)))
    lat = ScaledProductLattice.uniform("Z2")
    for coeffs in ([0, 0], [1, 2], [3, 1], [0, -3]):
        pt = lat.point(coeffs)
        k = int(pt.norm_sq_unscaled[0])
        want = -math.log(shells) - math.log(theta_array("Z2", 10)[k])
        assert theta_prior_logpmf(prior, pt, [0.1, -0.2]) == pytest.approx(want)


def test_theta_prior_shell_symmetry():
    prior = _random_prior("A2", seed=3)
    lat = ScaledProductLattice.uniform("A2", 1, 0.8)
    rng = np.random.default_rng(2)
    # these two points share squared norm 7 (>= threshold 4)
    a, b = lat.point([2, 1]), lat.point([-3, 1])
    assert a.norm_sq_unscaled[0] == b.norm_sq_unscaled[0] == 7
    for u in sample_dither(lat, rng, size=4):
        assert theta_prior_logpmf(prior, a, u) == pytest.approx(theta_prior_logpmf(prior, b, u))


def test_theta_prior_small_points_depend_on_dither():
    prior = _random_prior("A2", seed=5)
    lat = ScaledProductLattice.uniform("A2")
    pt = lat.point([1, 0])
    assert theta_prior_logpmf(prior, pt, [0.1, 0.1]) != theta_prior_logpmf(prior, pt, [-0.2, 0.3])


def test_theta_prior_out_of_support():
    prior = _random_prior("Z2", max_norm=4)
    lat = ScaledProductLattice.uniform("Z2")
    with pytest.raises(OutOfSupportError):
        theta_prior_logpmf(prior, lat.point([3, 0]), [0.0, 0.0])
    coeffs = np.array([[[3, 0]], [[2, 0]]])
    norms = np.array([[9], [4]])
    u = np.zeros((2, 1, 2))
    clamped = theta_prior_block_logpmf(prior, coeffs, norms, u, clamp=True)
    assert clamped[0, 0] == pytest.approx(clamped[1, 0] - prior.oos_penalty * 5)


def test_theta_prior_nll_gradient_matches_finite_differences():
    prior = _random_prior("A2", blocks=2, seed=7)
    rng = np.random.default_rng(0)
    lat = ScaledProductLattice.uniform("A2", 2, 0.6)

    u = sample_dither(lat, rng, size=40)
    v = 1.2 * rng.standard_normal((40, 4))
    coeffs = quantize(lat, v + u)
    args = (coeffs.reshape(40, 2, 2), lat.block_norms(coeffs), lat.descale(u))
    _, grads = theta_prior_nll_grad(prior, *args)
    h = 1e-6
    for name in prior.param_names():
        arr = getattr(prior, name)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = theta_prior_nll_grad(prior, *args)[0]
            flat[i] = keep - h
            down = theta_prior_nll_grad(prior, *args)[0]
            flat[i] = keep
            assert grads[name].reshape(-1)[i] == pytest.approx((up - down) / (2 * h), abs=1e-6)


def test_theta_prior_checks_parameter_shapes():
    base = lattice_basis("Z2")
    with pytest.raises(ContractViolation):
        ThetaPrior(base=base, blocks=1, max_norm_sq=4, threshold=1, psi=np.zeros(3),
                   flag=np.zeros(1), small_W=np.zeros((1, 2, 1)), small_b=np.zeros((1, 1)))
