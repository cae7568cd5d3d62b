import math

import numpy as np
import pytest

from poglm import autodiff as ad
from poglm import variational as var
from poglm.autodiff import UsageError, value_of
from poglm.distributions import make_hidden_dist
from poglm.generative import HiddenSample, default_basis
from poglm.rng import SeededRng
from poglm.variational import Scheme


def softplus(x):
    return np.log1p(np.exp(-abs(x))) + max(x, 0.0)


def inv_softplus(y):
    return math.log(math.expm1(y))


def random_phi(rng, v=2, h=2, scheme=None):
    n = v + h
    a = rng.uniform_range(-0.6, 0.6, size=(n, n))
    phi = var.VariationalParams(c=rng.uniform_range(-0.4, 0.4, size=h), A=a, V=v)
    if scheme is not None:
        phi = var.project_params(phi, scheme)
    return phi


def rates_loop(phi, x, scheme, psi, z=None):
    """Scalar-loop reference for every scheme's rate equation."""
    t_max, v = x.shape
    h = phi.H
    out = np.zeros((t_max, h))
    for t in range(t_max):
        for j in range(h):
            pre = phi.c[t, j] if phi.c.ndim == 2 else phi.c[j]
            if scheme in (Scheme.FORWARD, Scheme.FORWARD_SELF, Scheme.FORWARD_BACKWARD):
                for vp in range(v):
                    drive = sum(
                        psi[l - 1] * x[t - l, vp] for l in range(1, len(psi) + 1) if t - l >= 0
                    )
                    pre += phi.A[v + j, vp] * drive
            if scheme is Scheme.FORWARD_SELF:
                for jp in range(h):
                    drive = sum(
                        psi[l - 1] * z[t - l, jp] for l in range(1, len(psi) + 1) if t - l >= 0
                    )
                    pre += phi.A[v + j, v + jp] * drive
            if scheme is Scheme.FORWARD_BACKWARD:
                for vp in range(v):
                    drive = sum(
                        psi[l - 1] * x[t + l, vp]
                        for l in range(1, len(psi) + 1)
                        if t + l < t_max
                    )
                    pre += phi.A[vp, v + j] * drive
            out[t, j] = softplus(pre)
    return out


# --- masks -------------------------------------------------------------------


def test_scheme_mask_free_entry_counts():
    assert var.scheme_mask(Scheme.FORWARD, 3, 2).sum() == 6
    assert var.scheme_mask(Scheme.FORWARD_BACKWARD, 3, 2).sum() == 12
    assert var.scheme_mask(Scheme.FORWARD_SELF, 3, 2).sum() == 10
    assert var.scheme_mask(Scheme.HOMOGENEOUS, 3, 2).sum() == 0


def test_scheme_mask_rejects_no_hidden():
    with pytest.raises(UsageError):
        var.scheme_mask(Scheme.FORWARD, 3, 0)


def test_mask_blocks_are_where_expected():
    m = var.scheme_mask(Scheme.FORWARD_BACKWARD, 3, 2)
    assert m[3:, :3].all() and m[:3, 3:].all()
    assert not m[:3, :3].any() and not m[3:, 3:].any()


def test_project_params_zeroes_masked_entries():
    rng = SeededRng(0)
    phi = random_phi(rng, scheme=Scheme.FORWARD)
    assert np.all(phi.A[:2, :] == 0.0)
    assert np.all(phi.A[2:, 2:] == 0.0)
    assert np.any(phi.A[2:, :2] != 0.0)


# --- rates ---------------------------------------------------------------------


@pytest.mark.parametrize("scheme", [Scheme.FORWARD, Scheme.FORWARD_SELF, Scheme.FORWARD_BACKWARD])
def test_zero_coupling_reduces_to_homogeneous(scheme):
    rng = SeededRng(1)
    phi = var.VariationalParams(c=np.array([0.3, -0.2]), A=np.zeros((4, 4)), V=2)
    x = rng.poisson(np.full((7, 2), 1.0))
    z = np.zeros((7, 2))
    f = var.variational_rates(phi, x, scheme, partial_z=z)
    f_h = var.variational_rates(phi, x, Scheme.HOMOGENEOUS)
    np.testing.assert_allclose(f, f_h, atol=1e-15)


def test_forward_backward_without_future_block_equals_forward():
    rng = SeededRng(2)
    phi = random_phi(rng, scheme=Scheme.FORWARD_BACKWARD)
    phi.A[:2, 2:] = 0.0
    x = rng.poisson(np.full((9, 2), 1.0))
    f_fb = var.variational_rates(phi, x, Scheme.FORWARD_BACKWARD)
    f_f = var.variational_rates(phi, x, Scheme.FORWARD)
    np.testing.assert_array_equal(f_fb, f_f)


def test_forward_self_without_self_block_matches_forward_rates():
    rng = SeededRng(3)
    phi = random_phi(rng, scheme=Scheme.FORWARD_SELF)
    phi.A[2:, 2:] = 0.0
    x = rng.poisson(np.full((9, 2), 1.0))
    z = rng.poisson(np.full((9, 2), 1.0)).astype(float)
    f_fs = var.variational_rates(phi, x, Scheme.FORWARD_SELF, partial_z=z)
    f_f = var.variational_rates(phi, x, Scheme.FORWARD)
    np.testing.assert_array_equal(f_fs, f_f)


@pytest.mark.parametrize(
    "scheme",
    [
        Scheme.HOMOGENEOUS,
        Scheme.MEAN_FIELD,
        Scheme.FORWARD,
        Scheme.FORWARD_SELF,
        Scheme.FORWARD_BACKWARD,
    ],
)
def test_rates_match_scalar_loop_reference(scheme):
    rng = SeededRng(4)
    basis = default_basis(3)
    x = rng.poisson(np.full((6, 2), 1.2))
    z = rng.poisson(np.full((6, 2), 0.8)).astype(float)
    if scheme is Scheme.MEAN_FIELD:
        phi = var.VariationalParams(
            c=rng.uniform_range(-0.5, 0.5, size=(6, 2)), A=np.zeros((4, 4)), V=2
        )
    else:
        phi = random_phi(rng, scheme=scheme)
    f = var.variational_rates(phi, x, scheme, basis, partial_z=z)
    ref = rates_loop(phi, x.astype(float), scheme, basis.weights, z)
    np.testing.assert_allclose(f, ref, atol=1e-12)


def test_forward_self_requires_history():
    rng = SeededRng(5)
    phi = random_phi(rng, scheme=Scheme.FORWARD_SELF)
    with pytest.raises(UsageError):
        var.variational_rates(phi, np.zeros((4, 2), dtype=int), Scheme.FORWARD_SELF)


def test_future_dependence_of_schemes():
    rng = SeededRng(6)
    x = rng.poisson(np.full((10, 2), 1.0))
    t_probe = 4
    x_future = x.copy()
    x_future[t_probe + 1 :] += 2  # only strictly-future bins change
    x_now = x.copy()
    x_now[t_probe] += 2  # only the probed bin changes

    phi_f = random_phi(rng, scheme=Scheme.FORWARD)
    f1 = var.variational_rates(phi_f, x, Scheme.FORWARD)
    f2 = var.variational_rates(phi_f, x_future, Scheme.FORWARD)
    np.testing.assert_array_equal(f1[: t_probe + 1], f2[: t_probe + 1])

    phi_fb = random_phi(rng, scheme=Scheme.FORWARD_BACKWARD)
    g1 = var.variational_rates(phi_fb, x, Scheme.FORWARD_BACKWARD)
    g2 = var.variational_rates(phi_fb, x_now, Scheme.FORWARD_BACKWARD)
    g3 = var.variational_rates(phi_fb, x_future, Scheme.FORWARD_BACKWARD)
    np.testing.assert_array_equal(g1[t_probe], g2[t_probe])
    assert not np.allclose(g1[t_probe], g3[t_probe])


# --- sampling ------------------------------------------------------------------


def test_homogeneous_poisson_sample_mean():
    c = np.array([inv_softplus(1.0)])
    phi = var.VariationalParams(c=c, A=np.zeros((3, 3)), V=2)
    x = np.zeros((4, 2), dtype=int)
    z, _ = var.sample_and_logq(
        phi, x, Scheme.HOMOGENEOUS, make_hidden_dist("pois"), 100_000, SeededRng(7)
    )
    pooled = z.mean()
    se = math.sqrt(1.0 / z.size)
    assert abs(pooled - 1.0) < 3 * se
    cell_se = math.sqrt(1.0 / z.shape[0])
    assert np.all(np.abs(z.mean(axis=0) - 1.0) < 3 * cell_se)


@pytest.mark.parametrize("kind", ["pois", "cat", "gs", "exp"])
@pytest.mark.parametrize("scheme", [Scheme.FORWARD, Scheme.FORWARD_SELF, Scheme.FORWARD_BACKWARD])
def test_sampling_deterministic_under_seed(kind, scheme):
    rng = SeededRng(8)
    phi = random_phi(rng, scheme=scheme)
    x = rng.poisson(np.full((6, 2), 1.0))
    dist = make_hidden_dist(kind, m=4)
    z1, q1 = var.sample_and_logq(phi, x, scheme, dist, 3, SeededRng(99))
    z2, q2 = var.sample_and_logq(phi, x, scheme, dist, 3, SeededRng(99))
    if dist.sample_kind == "soft_onehot":
        for a, b in zip(z1, z2):
            np.testing.assert_array_equal(value_of(a), value_of(b))
    else:
        np.testing.assert_array_equal(value_of(z1), value_of(z2))
    np.testing.assert_array_equal(value_of(q1), value_of(q2))


@pytest.mark.parametrize("kind", ["pois", "gs", "exp"])
@pytest.mark.parametrize(
    "scheme", [Scheme.FORWARD, Scheme.FORWARD_SELF, Scheme.FORWARD_BACKWARD, Scheme.HOMOGENEOUS]
)
def test_log_q_round_trip(kind, scheme):
    rng = SeededRng(9)
    phi = random_phi(rng, scheme=scheme)
    x = rng.poisson(np.full((6, 2), 1.0))
    dist = make_hidden_dist(kind)
    z, logq = var.sample_and_logq(phi, x, scheme, dist, 4, SeededRng(10))
    recomputed = var.log_q(phi, x, z, scheme, dist)
    np.testing.assert_allclose(value_of(logq), value_of(recomputed), atol=1e-10)


def test_log_q_hand_value_homogeneous():
    phi = var.VariationalParams(
        c=np.array([inv_softplus(1.0)]), A=np.zeros((2, 2)), V=1
    )
    z = HiddenSample("discrete", np.zeros((3, 1)))
    x = np.zeros((3, 1), dtype=int)
    lq = var.log_q(phi, x, z, Scheme.HOMOGENEOUS, make_hidden_dist("pois"))
    assert lq == pytest.approx(-3.0, abs=1e-12)


def test_log_q_variant_mismatch_rejected():
    rng = SeededRng(11)
    phi = random_phi(rng, scheme=Scheme.FORWARD)
    z = HiddenSample("continuous", np.full((4, 2), 0.3))
    with pytest.raises(UsageError):
        var.log_q(phi, np.zeros((4, 2), dtype=int), z, Scheme.FORWARD, make_hidden_dist("pois"))


def test_reparameterize_rejected_for_score_only():
    rng = SeededRng(12)
    phi = random_phi(rng, scheme=Scheme.FORWARD)
    with pytest.raises(UsageError):
        var.sample_and_logq(
            phi,
            np.zeros((4, 2), dtype=int),
            Scheme.FORWARD,
            make_hidden_dist("pois"),
            2,
            SeededRng(0),
            reparameterize=True,
        )


def test_split_hidden_samples_shapes():
    rng = SeededRng(13)
    phi = random_phi(rng, scheme=Scheme.FORWARD)
    x = rng.poisson(np.full((5, 2), 1.0))
    dist = make_hidden_dist("gs", m=4)
    z, _ = var.sample_and_logq(phi, x, Scheme.FORWARD, dist, 3, SeededRng(14))
    samples = var.split_hidden_samples(z, dist)
    assert len(samples) == 3
    assert all(s.kind == "soft_onehot" and s.data.shape == (5, 2, 4) for s in samples)


def test_phi_flat_round_trip():
    rng = SeededRng(15)
    phi = random_phi(rng, scheme=Scheme.FORWARD_BACKWARD)
    flat = var.phi_to_flat(phi)
    back = var.phi_from_flat(flat, phi.V, phi.H)
    np.testing.assert_array_equal(back.c, phi.c)
    np.testing.assert_array_equal(back.A, phi.A)


def test_scheme_parse():
    assert Scheme.parse("fb") is Scheme.FORWARD_BACKWARD
    with pytest.raises(UsageError):
        Scheme.parse("nope")
