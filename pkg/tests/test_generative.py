import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poglm import autodiff as ad
from poglm import generative as gen
from poglm.autodiff import UsageError
from poglm.distributions import PoissonDist, make_hidden_dist, poisson_log_pmf
from poglm.rng import SeededRng

from conftest import central_difference


def softplus(x):
    return np.log1p(np.exp(-abs(x))) + max(x, 0.0)


def inv_softplus(y):
    return math.log(math.expm1(y))


def rates_loop(b, w, x, zc, psi, v):
    """Scalar-loop reference for the firing-rate equations."""
    t_max, h = x.shape[0], b.size - v
    fv, fh = np.zeros((t_max, v)), np.zeros((t_max, h))
    for t in range(t_max):
        sx, sz = np.zeros(v), np.zeros(h)
        for lag in range(1, len(psi) + 1):
            if t - lag >= 0:
                sx += psi[lag - 1] * x[t - lag]
                sz += psi[lag - 1] * zc[t - lag]
        for n in range(v + h):
            pre = b[n] + w[n, :v] @ sx + w[n, v:] @ sz
            if n < v:
                fv[t, n] = softplus(pre)
            else:
                fh[t, n - v] = softplus(pre)
    return fv, fh


def tiny_params(rng, v=2, h=1, scale=0.8):
    n = v + h
    return gen.GenerativeParams(
        b=rng.uniform_range(-0.5, 0.5, size=n),
        W=rng.uniform_range(-scale, scale, size=(n, n)),
        V=v,
    )


# --- history convolution ------------------------------------------------------


def test_convolve_zero_input():
    basis = gen.default_basis(3)
    out = gen.convolve_history(np.zeros((8, 2)), basis)
    np.testing.assert_array_equal(out, 0.0)


def test_convolve_impulse_response():
    basis = gen.default_basis(3)
    x = np.zeros((10, 2))
    x[4, 1] = 1.0
    out = gen.convolve_history(x, basis)
    np.testing.assert_allclose(out[5:8, 1], basis.weights)
    assert np.all(out[:, 0] == 0)
    assert np.all(out[:5, 1] == 0)
    assert np.all(out[8:, 1] == 0)


def test_convolve_matches_naive_double_loop():
    rng = SeededRng(1)
    x = rng.poisson(np.full((10, 2), 1.0)).astype(float)
    basis = gen.default_basis(3)
    ref = np.zeros_like(x)
    for t in range(10):
        for n in range(2):
            for lag in range(1, 4):
                if t - lag >= 0:
                    ref[t, n] += basis.weights[lag - 1] * x[t - lag, n]
    np.testing.assert_allclose(gen.convolve_history(x, basis), ref, atol=1e-12)


@given(st.integers(min_value=0, max_value=9))
@settings(max_examples=20, deadline=None)
def test_convolve_is_causal(t_cut):
    rng = SeededRng(2)
    x = rng.poisson(np.full((10, 2), 1.0)).astype(float)
    basis = gen.default_basis(4)
    before = gen.convolve_history(x, basis)
    x2 = x.copy()
    x2[t_cut:] += 3.0
    after = gen.convolve_history(x2, basis)
    np.testing.assert_array_equal(before[: t_cut + 1], after[: t_cut + 1])


# --- firing rates --------------------------------------------------------------


def test_rates_no_coupling_reduces_to_bias():
    rng = SeededRng(3)
    params = gen.GenerativeParams(b=np.array([0.2, -0.1, 0.4]), W=np.zeros((3, 3)), V=2)
    x = rng.poisson(np.full((6, 2), 1.0))
    z = rng.poisson(np.full((6, 1), 1.0)).astype(float)
    fv, fh = gen.rates(params, x, z)
    np.testing.assert_allclose(fv, softplus(0.2) * np.ones((6, 1)) * [1, 0] + softplus(-0.1) * np.ones((6, 1)) * [0, 1])
    np.testing.assert_allclose(fh, np.full((6, 1), softplus(0.4)))


def test_rates_single_bin_depends_only_on_bias():
    params = gen.GenerativeParams(
        b=np.array([0.3, -0.2]), W=np.full((2, 2), 2.0), V=1
    )
    fv, fh = gen.rates(params, np.array([[4]]), np.array([[2.0]]))
    assert fv[0, 0] == pytest.approx(softplus(0.3))
    assert fh[0, 0] == pytest.approx(softplus(-0.2))


def test_rates_match_scalar_loop_reference():
    rng = SeededRng(4)
    params = tiny_params(rng)
    basis = gen.default_basis(2)
    x = rng.poisson(np.full((4, 2), 1.2))
    z = rng.poisson(np.full((4, 1), 0.8)).astype(float)
    fv, fh = gen.rates(params, x, z, basis)
    ref_v, ref_h = rates_loop(params.b, params.W, x.astype(float), z, basis.weights, 2)
    np.testing.assert_allclose(fv, ref_v, atol=1e-12)
    np.testing.assert_allclose(fh, ref_h, atol=1e-12)


def test_rates_visible_ignore_hidden_when_block_zeroed():
    rng = SeededRng(5)
    params = tiny_params(rng)
    params.W[:2, 2:] = 0.0  # no hidden -> visible coupling
    x = rng.poisson(np.full((8, 2), 1.0))
    z1 = rng.poisson(np.full((8, 1), 1.0)).astype(float)
    z2 = z1 + rng.poisson(np.full((8, 1), 2.0))
    fv1, _ = gen.rates(params, x, z1)
    fv2, _ = gen.rates(params, x, z2)
    np.testing.assert_array_equal(fv1, fv2)


def test_rates_causal_in_counts():
    rng = SeededRng(6)
    params = tiny_params(rng)
    x = rng.poisson(np.full((9, 2), 1.0))
    z = rng.poisson(np.full((9, 1), 1.0)).astype(float)
    fv, fh = gen.rates(params, x, z)
    t_cut = 5
    x2, z2 = x.copy(), z.copy()
    x2[t_cut:] += 2
    z2[t_cut:] += 1.0
    fv2, fh2 = gen.rates(params, x2, z2)
    np.testing.assert_array_equal(fv[: t_cut + 1], fv2[: t_cut + 1])
    np.testing.assert_array_equal(fh[: t_cut + 1], fh2[: t_cut + 1])


# --- joint log likelihood -------------------------------------------------------


def test_joint_ll_fully_observed_reduces_to_visible_term():
    rng = SeededRng(7)
    params = gen.GenerativeParams(
        b=rng.uniform_range(-0.3, 0.3, size=2),
        W=rng.uniform_range(-0.5, 0.5, size=(2, 2)),
        V=2,
    )
    x = rng.poisson(np.full((6, 2), 1.0))
    ll = gen.joint_log_likelihood(params, x, None, PoissonDist())
    fv, _ = gen.rates(params, x, None)
    expected = float(np.sum(poisson_log_pmf(x, fv)))
    assert ll == pytest.approx(expected, abs=1e-10)


def test_joint_ll_hand_value_all_zero_counts():
    params = gen.GenerativeParams(b=np.zeros(2), W=np.zeros((2, 2)), V=1)
    x = np.zeros((2, 1), dtype=int)
    z = gen.HiddenSample("discrete", np.zeros((2, 1)))
    ll = gen.joint_log_likelihood(params, x, z, PoissonDist())
    assert ll == pytest.approx(-4.0 * math.log(2.0), abs=1e-12)


def test_joint_ll_variant_mismatch_rejected():
    params = gen.GenerativeParams(b=np.zeros(2), W=np.zeros((2, 2)), V=1)
    z = gen.HiddenSample("continuous", np.full((2, 1), 0.5))
    with pytest.raises(UsageError):
        gen.joint_log_likelihood(params, np.zeros((2, 1), dtype=int), z, PoissonDist())


@pytest.mark.parametrize("kind", ["pois", "exp", "gs"])
def test_joint_ll_theta_gradient_matches_finite_differences(kind):
    rng = SeededRng(8)
    dist = make_hidden_dist(kind, m=3)
    params = tiny_params(rng)
    x = rng.poisson(np.full((5, 2), 1.0))
    z_raw = dist.draw(np.full((5, 1), 0.9), rng.derive(1))
    n = 3

    def ll_at(flat):
        p = gen.GenerativeParams(b=flat[:n], W=flat[n:].reshape(n, n), V=2)
        return float(ad.value_of(gen.joint_log_likelihood(p, x, z_raw, dist)))

    flat0 = np.concatenate([params.b, params.W.ravel()])
    tape = ad.Tape()
    bv, wv = tape.leaf(params.b), tape.leaf(params.W)
    ll = gen.joint_log_likelihood(
        gen.GenerativeParams(b=bv, W=wv, V=2), x, z_raw, dist
    )
    gb, gw = tape.backward(ll)
    grad = np.concatenate([gb, gw.ravel()])
    fd = central_difference(ll_at, flat0, h=1e-5)
    np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-7)


def test_soft_one_hot_rows_match_discrete_visible_term():
    rng = SeededRng(9)
    params = tiny_params(rng)
    x = rng.poisson(np.full((6, 2), 1.0))
    z_int = rng.poisson(np.full((6, 1), 1.0)).clip(max=4)
    onehot = np.zeros((6, 1, 5))
    for t in range(6):
        onehot[t, 0, z_int[t, 0]] = 1.0
    f_soft, _ = gen.rates(params, x, gen.HiddenSample("soft_onehot", onehot))
    f_disc, _ = gen.rates(params, x, gen.HiddenSample("discrete", z_int))
    np.testing.assert_allclose(
        np.sum(poisson_log_pmf(x, f_soft)),
        np.sum(poisson_log_pmf(x, f_disc)),
        atol=1e-10,
    )


# --- simulation ------------------------------------------------------------------


def test_generate_mean_rate_no_coupling():
    target = 0.8
    b = np.full(2, inv_softplus(target))
    params = gen.GenerativeParams(b=b, W=np.zeros((2, 2)), V=1)
    x, _ = gen.generate(params, 100_000, PoissonDist(), rng=SeededRng(10))
    se = math.sqrt(target / 100_000)
    assert abs(x.counts.mean() - target) < 3 * se


@pytest.mark.parametrize("kind", ["pois", "cat", "gs", "exp"])
def test_generate_deterministic_under_seed(kind):
    rng = SeededRng(11)
    params = tiny_params(rng, scale=0.5)
    dist = make_hidden_dist(kind)
    x1, z1 = gen.generate(params, 50, dist, rng=SeededRng(123))
    x2, z2 = gen.generate(params, 50, dist, rng=SeededRng(123))
    np.testing.assert_array_equal(x1.counts, x2.counts)
    np.testing.assert_array_equal(z1.data, z2.data)


def test_generate_fully_observed():
    params = gen.GenerativeParams(b=np.zeros(2), W=np.zeros((2, 2)), V=2)
    x, z = gen.generate(params, 30, PoissonDist(), rng=SeededRng(12))
    assert z.data.shape == (30, 0)
    assert x.counts.shape == (30, 2)


def test_generate_divergence_aborts_with_location():
    params = gen.GenerativeParams(b=np.full(2, 2.0), W=np.full((2, 2), 8.0), V=1)
    with pytest.raises(gen.SimulationDivergence, match="time bin"):
        gen.generate(params, 300, PoissonDist(), rng=SeededRng(13))


def test_generate_soft_samples_have_simplex_rows():
    rng = SeededRng(14)
    params = tiny_params(rng, scale=0.5)
    _, z = gen.generate(params, 40, make_hidden_dist("gs"), rng=SeededRng(15))
    assert z.kind == "soft_onehot"
    np.testing.assert_allclose(z.data.sum(axis=-1), 1.0, atol=1e-9)


def test_basis_kernel_normalizes_and_rejects_nonpositive():
    basis = gen.BasisKernel(np.array([4.0, 2.0, 1.0]))
    assert basis.weights.sum() == pytest.approx(1.0)
    with pytest.raises(UsageError):
        gen.BasisKernel(np.array([1.0, 0.0]))


def test_spike_train_validation():
    with pytest.raises(UsageError):
        gen.SpikeTrain(np.array([[-1, 0]]))
    st_ok = gen.SpikeTrain(np.zeros((3, 2)))
    assert st_ok.num_bins == 3 and st_ok.num_neurons == 2
