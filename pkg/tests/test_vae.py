import math

import numpy as np
import pytest
from scipy.integrate import quad

from latticevae.data import synth_dataset
from latticevae.errors import ContractViolation, OutOfSupportError
from latticevae.lattice import ScaledProductLattice, quantize
from latticevae.priors import GaussianProxyParams, LaplaceZModel, gaussian_kl_sample, laplace_rep_cost
from latticevae.vae import (
    Adam,
    ModelParams,
    TrainConfig,
    _proxy_core,
    decode_nll,
    draw_proxy_noise,
    encode,
    finite_diff_check,
    gaussian_elbo,
    infer_nll,
    init_params,
    loss_direct,
    loss_proxy,
    quantized_costs,
    rep_cost_consistency,
    train,
)


def _binary(rng, n, d, p=0.3):
    return (rng.random((n, d)) < p).astype(float)


def _perturb(params, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    for arr in params.arrays().values():
        arr += scale * rng.standard_normal(arr.shape)
    return params


@pytest.fixture(scope="module")
def synth():
    return synth_dataset(512, 64, 4, seed=0)


@pytest.fixture(scope="module")
def trained_direct(synth):
    cfg = TrainConfig(latent_dim=8, mode="direct", lattice="Z", max_epochs=40, seed=0)
    return train(None, cfg, synth)


@pytest.fixture(scope="module")
def trained_proxy(synth):
    cfg = TrainConfig(latent_dim=8, mode="proxy", lattice="A2", max_epochs=40, seed=0)
    return train(None, cfg, synth)


# --------------------------------------------------------------------------
# encoder / decoder


def test_encode_examples(rng):
    p = init_params(4, 4, "direct", rng=rng)
    p.enc_A = np.eye(4)
    x = rng.normal(size=4)
    np.testing.assert_allclose(encode(p, x), x)
    p.enc_A = np.zeros((4, 4))
    p.enc_b = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(encode(p, x), p.enc_b)
    with pytest.raises(ContractViolation):
        encode(p, np.zeros(5))


def test_encode_matches_triple_loop(rng):
    p = init_params(6, 4, "direct", rng=rng, init_scale=1.0)
    p.enc_b = rng.normal(size=4)
    x = rng.normal(size=(3, 6))
    want = np.zeros((3, 4))
    for n in range(3):
        for j in range(4):
            acc = p.enc_b[j]
            for i in range(6):
                acc += x[n, i] * p.enc_A[i, j]
            want[n, j] = acc
    np.testing.assert_allclose(encode(p, x), want, atol=1e-12)


def test_decode_nll_examples(rng):
    p = init_params(10, 2, "direct", rng=rng)
    p.dec_W[:] = 0
    p.dec_c[:] = 0
    x = _binary(rng, 1, 10)[0]
    assert decode_nll(p, np.zeros(2), x) == pytest.approx(10 * math.log(2))
    p.dec_c = np.where(x == 1, 800.0, -800.0)
    assert decode_nll(p, np.zeros(2), x) == pytest.approx(0.0, abs=1e-300)
    with pytest.raises(ContractViolation):
        decode_nll(p, np.zeros(2), np.full(10, 0.5))


def test_decode_nll_matches_naive_formula(rng):
    p = init_params(12, 3, "direct", rng=rng, init_scale=1.0)
    p.dec_c = rng.normal(size=12)
    z = rng.normal(size=(5, 3))
    x = _binary(rng, 5, 12)
    prob = 1 / (1 + np.exp(-(z @ p.dec_W + p.dec_c)))
    want = -np.sum(x * np.log(prob) + (1 - x) * np.log(1 - prob), axis=1)
    np.testing.assert_allclose(decode_nll(p, z, x), want, atol=1e-10)


# --------------------------------------------------------------------------
# parameters


def test_model_params_invariants(rng):
    p = init_params(8, 4, "direct", rng=rng)
    assert p.laplace is not None and p.proxy is None
    q = init_params(8, 4, "proxy", "A2", rng=rng)
    assert q.proxy is not None and q.laplace is None
    with pytest.raises(ContractViolation):
        ModelParams(p.enc_A, p.enc_b, p.dec_W, p.dec_c, "direct", "Z", p.log_alpha, p.log_delta,
                    np.zeros(4), np.zeros(4))
    with pytest.raises(ContractViolation):
        init_params(8, 5, "proxy", "A2")
    shared = init_params(8, 4, "direct", shared_scale=True)
    assert shared.log_alpha.shape == (1,)
    assert shared.laplace.alpha.shape == (4,)


def test_train_config_validation():
    with pytest.raises(ContractViolation):
        TrainConfig(anneal=1.0)
    with pytest.raises(ContractViolation):
        TrainConfig(batch_size=0)
    with pytest.raises(ContractViolation):
        TrainConfig(mode="direct", lattice="A2")
    with pytest.raises(ContractViolation):
        TrainConfig(latent_dim=6, lattice="E8")


# --------------------------------------------------------------------------
# losses and gradients


@pytest.mark.parametrize("mode,lattice", [("direct", "Z"), ("proxy", "A2"), ("proxy", "E8")])
def test_finite_difference_gradients(mode, lattice, rng):
    x = _binary(rng, 12, 16)
    p = _perturb(init_params(16, 8, mode, lattice, rng=rng, init_scale=1.0), 1)
    assert finite_diff_check(p, x, 1e-5, rng_seed=2) <= 1e-4


def test_shared_scale_gradients(rng):
    x = _binary(rng, 12, 16)
    p = _perturb(init_params(16, 4, "direct", rng=rng, init_scale=1.0, shared_scale=True), 3)
    assert finite_diff_check(p, x, 1e-5, rng_seed=0) <= 1e-4


def test_corrupted_gradient_is_detected(rng):
    x = _binary(rng, 12, 16)
    p = _perturb(init_params(16, 4, "direct", rng=rng, init_scale=1.0), 4)
    assert finite_diff_check(p, x, 1e-5, corrupt="dec_W") >= 0.5
    with pytest.raises(ContractViolation):
        finite_diff_check(p, x, 1e-3)


def test_code_length_has_no_encoder_gradient(rng):
    x = _binary(rng, 20, 16)
    p = init_params(16, 4, "proxy", "Z2", rng=rng, init_scale=1.0)
    noise = draw_proxy_noise(p, 20, rng)
    _, g0, parts0 = _proxy_core(p, x, noise)
    q = p.copy()
    q.prior.psi += rng.normal(size=q.prior.psi.shape)
    q.prior.small_b += rng.normal(size=q.prior.small_b.shape)
    _, g1, parts1 = _proxy_core(q, x, noise)
    assert parts0["code"] != parts1["code"]
    for name in ("enc_A", "enc_b", "dec_W", "dec_c", "log_sigma_ug_sq", "log_sigma_us_sq"):
        np.testing.assert_array_equal(g0[name], g1[name])


def test_loss_proxy_returns_code_length(rng):
    x = _binary(rng, 10, 16)
    p = init_params(16, 8, "proxy", "E8", rng=rng)
    loss, grads, code = loss_proxy(p, x, rng)
    assert code > 0 and loss > code
    assert set(grads) == set(p.arrays())
    with pytest.raises(ContractViolation):
        loss_direct(p, x, rng)


def test_kl_sample_vanishes_in_mean_when_prior_matches_noise():
    rng = np.random.default_rng(0)
    params = GaussianProxyParams(0.7, 0.0, 2)
    vals = [gaussian_kl_sample(np.zeros(2), math.sqrt(0.7) * rng.standard_normal(2), params)
            for _ in range(20_000)]
    assert all(v == pytest.approx(0.0, abs=1e-12) for v in vals)


def test_direct_loss_decomposes_for_zero_model(rng):
    d, t = 10, 3
    p = init_params(d, t, "direct", rng=rng)
    for name in ("enc_A", "enc_b", "dec_W", "dec_c"):
        getattr(p, name)[:] = 0.0
    x = _binary(rng, 1, d)
    model = LaplaceZModel(1.0, 1.0)
    # E over U uniform on the cell of rep_cost(-U)
    mean_rep = quad(lambda u: laplace_rep_cost(model, -u), -0.5, 0.5)[0]
    losses = np.array([loss_direct(p, x, rng)[0] for _ in range(4000)])
    se = losses.std(ddof=1) / math.sqrt(len(losses))
    assert abs(losses.mean() - (d * math.log(2) + t * mean_rep)) < 3 * se


# --------------------------------------------------------------------------
# optimizer and training


def test_adam_minimizes_a_quadratic():
    p = init_params(3, 2, "direct")
    target = {k: np.ones_like(v) for k, v in p.arrays().items()}
    opt = Adam(0.05)
    for _ in range(2000):
        opt.step(p, {k: v - target[k] for k, v in p.arrays().items()})
    for k, v in p.arrays().items():
        np.testing.assert_allclose(v, target[k], atol=1e-3)


def test_training_reduces_loss(trained_direct, trained_proxy):
    for _, hist in (trained_direct, trained_proxy):
        assert hist[-1].train_loss < hist[0].train_loss
        assert len(hist) <= 40


def test_training_is_deterministic(synth):
    cfg = TrainConfig(latent_dim=4, mode="proxy", lattice="Z2", max_epochs=3, seed=5)
    p1, h1 = train(None, cfg, synth)
    p2, h2 = train(None, cfg, synth)
    assert h1 == h2
    for k, v in p1.arrays().items():
        np.testing.assert_array_equal(v, p2.arrays()[k])


def test_learning_rate_halves_after_patience():
    x = np.zeros((8, 4))
    cfg = TrainConfig(latent_dim=2, mode="direct", lattice="Z", learning_rate=1e-300,
                      max_epochs=5, patience=2, stop_patience=50, batch_size=8)
    _, hist = train(None, cfg, (x, x))
    assert [h.lr for h in hist] == [1e-300, 1e-300, 5e-301, 5e-301, 2.5e-301]


def test_early_stop(synth):
    x = np.zeros((8, 4))
    cfg = TrainConfig(latent_dim=2, mode="direct", lattice="Z", learning_rate=1e-300,
                      max_epochs=50, patience=1, stop_patience=3, batch_size=8)
    _, hist = train(None, cfg, (x, x))
    assert len(hist) == 3


# --------------------------------------------------------------------------
# inference


@pytest.mark.parametrize("which", ["trained_direct", "trained_proxy"])
def test_single_sample_estimate_is_rep_plus_rec(which, request, synth):
    params, _ = request.getfixturevalue(which)
    x = synth.subset("test")
    rep = infer_nll(params, x, 1, np.random.default_rng(3))
    assert rep.nll == pytest.approx(rep.rep_cost + rep.rec_cost, rel=1e-12)
    assert rep.n_examples == len(x)


def test_zero_dither_gains_nothing_from_more_samples(trained_proxy, synth):
    params, _ = trained_proxy
    x = synth.subset("test")
    one = infer_nll(params, x, 1, np.random.default_rng(0), zero_dither=True)
    many = infer_nll(params, x, 25, np.random.default_rng(0), zero_dither=True)
    np.testing.assert_allclose(many.per_example, one.per_example, rtol=1e-12)


def test_more_samples_do_not_raise_the_estimate(trained_direct, synth):
    params, _ = trained_direct
    x = synth.subset("test")
    k1 = [infer_nll(params, x, 1, np.random.default_rng(s)).nll for s in range(20)]
    k100 = [infer_nll(params, x, 100, np.random.default_rng(100 + s)).nll for s in range(20)]
    se = math.hypot(np.std(k1, ddof=1), np.std(k100, ddof=1)) / math.sqrt(20)
    assert np.mean(k100) <= np.mean(k1) + se


def test_quantized_and_continuous_rep_costs_agree(trained_direct, synth):
    params, _ = trained_direct
    x = synth.subset("test")[:10]
    quant, cont, se = rep_cost_consistency(params, x, 20_000, np.random.default_rng(0))
    assert np.all(np.abs(quant - cont) <= 3 * se)


def test_code_shift_property(trained_proxy, synth, rng):
    params, _ = trained_proxy
    lat = params.quant_lattice()
    x = synth.subset("test")[:20]
    dither = rng.uniform(-0.2, 0.2, (20, params.t))
    _, _, coeffs, _ = quantized_costs(params, x, dither)
    shift = rng.integers(-3, 4, params.t)
    u = (lat.to_blocks(dither) * lat.deltas[:, None]).reshape(dither.shape)
    moved = quantize(lat, encode(params, x) + u + lat.embed(shift))
    np.testing.assert_array_equal(moved, coeffs + shift)


def test_out_of_support_point_raises_at_inference(trained_proxy, synth):
    params, _ = trained_proxy
    p = params.copy()
    p.enc_b = p.enc_b + 100.0
    with pytest.raises(OutOfSupportError):
        infer_nll(p, synth.subset("test")[:3], 1, np.random.default_rng(0))


def test_gaussian_elbo_close_to_training_objective(trained_proxy, synth):
    params, _ = trained_proxy
    x = synth.subset("test")
    elbo = gaussian_elbo(params, x, np.random.default_rng(0), n_samples=20)
    assert 0 < elbo < 64 * math.log(2)


def test_infer_rejects_bad_sample_count(trained_proxy):
    with pytest.raises(ContractViolation):
        infer_nll(trained_proxy[0], np.zeros((1, 64)), 0, np.random.default_rng(0))


def test_empty_input_gives_empty_report(trained_proxy):
    rep = infer_nll(trained_proxy[0], np.zeros((0, 64)), 3, np.random.default_rng(0))
    assert rep.n_examples == 0 and len(rep.per_example) == 0


def test_direct_quantizer_uses_scaled_integers(trained_direct):
    params, _ = trained_direct
    lat = params.quant_lattice()
    assert isinstance(lat, ScaledProductLattice) and lat.blocks == params.t
    np.testing.assert_allclose(lat.deltas, params.laplace.delta)
