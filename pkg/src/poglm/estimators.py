"""ELBO estimation, gradient estimators, and exact enumeration oracles.

The Monte-Carlo ELBO averages ln p(X, Z) - ln q(Z | X) over samples from q.
Gradients w.r.t. the generative parameters differentiate that average with
samples held fixed.  Gradients w.r.t. the variational parameters come in two
flavors:

* score  -- weight d ln q / d phi by the per-sample log ratio (works for any
  hidden distribution, high variance);
* pathwise -- differentiate straight through the noise-to-sample
  reparameterization (needs a pathwise-capable distribution, low variance).

For tiny discrete instances the expectations can be enumerated exactly,
giving oracles for the ELBO, the log evidence, the KL gap, the posterior,
and the exact variational gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import UsageError, value_of
from .distributions import HiddenDist, PoissonDist
from .generative import (
    BasisKernel,
    GenerativeParams,
    SpikeTrain,
    default_basis,
    joint_log_likelihood,
    theta_to_flat,
)
from .rng import SeededRng
from .variational import (
    Scheme,
    VariationalParams,
    phi_to_flat,
    sample_and_logq,
    scheme_mask,
    variational_rates,
)

ENUM_CELL_BUDGET = 12  # max T*H for enumeration
ENUM_M_BUDGET = 4
ENUM_TAPE_BUDGET = 65536  # max configurations for exact-gradient enumeration


@dataclass
class GradientEstimate:
    """Gradients over the flat parameter layouts plus diagnostics.

    ``d_theta`` follows [b, W row-major]; ``d_phi`` follows [c, A row-major].
    ``per_sample_variance`` is the mean per-coordinate variance of the
    per-sample phi-gradient terms (0 unless requested with K > 1).
    """

    d_theta: np.ndarray
    d_phi: np.ndarray
    elbo_value: float
    per_sample_variance: float = 0.0


def _check_train(theta: GenerativeParams, x) -> np.ndarray:
    x_arr = x.counts if isinstance(x, SpikeTrain) else np.asarray(x)
    if x_arr.shape[1] != theta.V:
        raise UsageError(
            f"train has {x_arr.shape[1]} neurons but the model expects {theta.V}"
        )
    return x_arr


def estimate_gradients(
    theta: GenerativeParams,
    phi: VariationalParams | None,
    x,
    scheme: Scheme,
    dist: HiddenDist,
    k: int,
    rng: SeededRng,
    phi_estimator: str = "score",
    basis: BasisKernel | None = None,
    nonlinearity: str = "softplus",
    with_sample_variance: bool = False,
) -> GradientEstimate:
    """One Monte-Carlo gradient step's worth of work for a single train."""
    basis = basis or default_basis()
    x_arr = _check_train(theta, x)

    if theta.H == 0:
        tape = ad.Tape()
        theta_v = GenerativeParams(b=tape.leaf(theta.b), W=tape.leaf(theta.W), V=theta.V)
        ll = joint_log_likelihood(theta_v, x_arr, None, dist, basis, nonlinearity)
        db, dw = tape.backward(ll)
        return GradientEstimate(
            d_theta=np.concatenate([db, dw.ravel()]),
            d_phi=np.zeros(0),
            elbo_value=float(value_of(ll)),
        )

    if phi_estimator not in ("score", "pathwise"):
        raise UsageError(f"unknown phi estimator {phi_estimator!r}")
    reparameterize = phi_estimator == "pathwise"
    if reparameterize and not dist.pathwise:
        raise UsageError(f"{dist.kind} does not support the pathwise estimator")

    tape = ad.Tape()
    theta_v = GenerativeParams(b=tape.leaf(theta.b), W=tape.leaf(theta.W), V=theta.V)
    phi_v = VariationalParams(c=tape.leaf(phi.c), A=tape.leaf(phi.A), V=phi.V)

    z, lnq = sample_and_logq(
        phi_v, x_arr, scheme, dist, k, rng,
        reparameterize=reparameterize, basis=basis, nonlinearity=nonlinearity,
    )
    lnp = joint_log_likelihood(theta_v, x_arr, z, dist, basis, nonlinearity)

    terms = np.asarray(value_of(lnp)) - np.asarray(value_of(lnq))
    elbo_value = float(terms.mean())

    if reparameterize:
        per_sample_root = ad.sub(lnp, lnq)
        root = ad.vmean(per_sample_root)
    else:
        # phi_0 bracket: per-sample log ratios treated as constants
        per_sample_root = ad.mul(lnq, terms)
        root = ad.add(ad.vmean(lnp), ad.vmean(per_sample_root))

    db, dw, dc, da = tape.backward(root)
    mask = scheme_mask(scheme, phi.V, phi.H)
    d_theta = np.concatenate([db, dw.ravel()])
    d_phi = np.concatenate([dc.ravel(), (da * mask).ravel()])

    variance = 0.0
    if with_sample_variance and k > 1:
        per_sample = np.empty((k, d_phi.size))
        for j in range(k):
            onehot = np.zeros(k)
            onehot[j] = 1.0
            _, _, dc_j, da_j = tape.backward(ad.vsum(ad.mul(per_sample_root, onehot)))
            per_sample[j] = np.concatenate([dc_j.ravel(), (da_j * mask).ravel()])
        free = np.concatenate([np.ones(np.size(value_of(phi.c)), bool), mask.ravel()])
        variance = float(per_sample[:, free].var(axis=0, ddof=0).mean())

    return GradientEstimate(d_theta, d_phi, elbo_value, variance)


def elbo_hat(
    theta: GenerativeParams,
    phi: VariationalParams | None,
    x,
    scheme: Scheme,
    dist: HiddenDist,
    k: int,
    rng: SeededRng,
    basis: BasisKernel | None = None,
    nonlinearity: str = "softplus",
) -> float:
    """Monte-Carlo ELBO estimate (plain values, no tape)."""
    basis = basis or default_basis()
    x_arr = _check_train(theta, x)
    if theta.H == 0:
        return float(joint_log_likelihood(theta, x_arr, None, dist, basis, nonlinearity))
    z, lnq = sample_and_logq(
        phi, x_arr, scheme, dist, k, rng,
        reparameterize=dist.pathwise, basis=basis, nonlinearity=nonlinearity,
    )
    lnp = joint_log_likelihood(theta, x_arr, z, dist, basis, nonlinearity)
    return float(np.mean(np.asarray(lnp) - np.asarray(lnq)))


def grad_theta(theta, phi, x, scheme, dist, k, rng, **kw) -> np.ndarray:
    est = estimate_gradients(
        theta, phi, x, scheme, dist, k, rng,
        phi_estimator="pathwise" if dist.pathwise else "score", **kw,
    )
    return est.d_theta


def score_grad_phi(theta, phi, x, scheme, dist, k, rng, **kw) -> np.ndarray:
    est = estimate_gradients(theta, phi, x, scheme, dist, k, rng, phi_estimator="score", **kw)
    return est.d_phi


def pathwise_grad_phi(theta, phi, x, scheme, dist, k, rng, **kw) -> np.ndarray:
    est = estimate_gradients(
        theta, phi, x, scheme, dist, k, rng, phi_estimator="pathwise", **kw
    )
    return est.d_phi


def phi_grad_samples(
    theta, phi, x, scheme, dist, n: int, rng: SeededRng, phi_estimator: str, **kw
) -> np.ndarray:
    """n independent single-sample phi-gradient draws, one per row."""
    rows = []
    for i in range(n):
        est = estimate_gradients(
            theta, phi, x, scheme, dist, 1, rng.derive(i), phi_estimator=phi_estimator, **kw
        )
        rows.append(est.d_phi)
    return np.stack(rows)


# ---------------------------------------------------------------------------
# exact enumeration oracles (tiny discrete instances)


@dataclass
class EnumerationResult:
    elbo: float
    evidence: float
    kl: float


def _enum_budget_check(t: int, h: int, m_enum: int):
    if t * h > ENUM_CELL_BUDGET:
        raise UsageError(f"enumeration budget exceeded: T*H = {t * h} > {ENUM_CELL_BUDGET}")
    if not 2 <= m_enum <= ENUM_M_BUDGET:
        raise UsageError(f"enumeration level must be in 2..{ENUM_M_BUDGET}")


def _config_block(start: int, stop: int, t: int, h: int, m_enum: int) -> np.ndarray:
    idx = np.arange(start, stop, dtype=np.int64)
    powers = m_enum ** np.arange(t * h, dtype=np.int64)
    digits = (idx[:, None] // powers) % m_enum
    return digits.reshape(-1, t, h).astype(np.float64)


def _truncated_logq(phi, x_arr, z_batch, scheme, dist, m_enum, basis, nonlinearity):
    """ln q(Z|X) per config, with Poisson cells renormalized over 0..m_enum-1."""
    counts = dist.history_counts(z_batch)
    f = variational_rates(
        phi, x_arr, scheme, basis, partial_z=counts, nonlinearity=nonlinearity
    )
    base = dist.log_density(z_batch, f)
    if dist.kind == "pois":
        cell_lps = [
            dist.log_density(np.full((1, 1, 1), float(m)), f) for m in range(m_enum)
        ]
        shift = np.max(np.stack([np.asarray(value_of(c)) for c in cell_lps]), axis=0)
        acc = None
        for c in cell_lps:
            e = ad.exp(ad.sub(c, shift))
            acc = e if acc is None else ad.add(acc, e)
        log_norm = ad.add(ad.log(acc), shift)
        base = ad.sub(base, log_norm)
    elif dist.kind == "cat":
        if dist.m != m_enum:
            raise UsageError("categorical truncation level must equal the enumeration level")
    else:
        raise UsageError("enumeration supports discrete hidden distributions only")
    return ad.vsum(base, axis=(-2, -1))


def enumerate_elbo(
    theta: GenerativeParams,
    phi: VariationalParams,
    x,
    scheme: Scheme,
    dist: HiddenDist,
    m_enum: int,
    basis: BasisKernel | None = None,
    nonlinearity: str = "softplus",
) -> EnumerationResult:
    """Exact ELBO / log-evidence / KL by summing over all hidden trains in
    {0..m_enum-1}^(T x H).  The variational cells are renormalized over the
    enumerated support, so ELBO + KL = evidence holds to float precision."""
    basis = basis or default_basis()
    x_arr = _check_train(theta, x)
    t, h = x_arr.shape[0], theta.H
    _enum_budget_check(t, h, m_enum)
    total = m_enum ** (t * h)

    elbo = 0.0
    log_evidence = -np.inf
    for start in range(0, total, ENUM_TAPE_BUDGET):
        z = _config_block(start, min(start + ENUM_TAPE_BUDGET, total), t, h, m_enum)
        lnp = np.asarray(
            value_of(joint_log_likelihood(theta, x_arr, z, dist, basis, nonlinearity))
        )
        lnq = np.asarray(
            value_of(
                _truncated_logq(phi, x_arr, z, scheme, dist, m_enum, basis, nonlinearity)
            )
        )
        elbo += float(np.sum(np.exp(lnq) * (lnp - lnq)))
        block_max = lnp.max()
        block_lse = block_max + np.log(np.sum(np.exp(lnp - block_max)))
        log_evidence = np.logaddexp(log_evidence, block_lse)
    return EnumerationResult(elbo=elbo, evidence=float(log_evidence), kl=float(log_evidence - elbo))


def enumerate_posterior(
    theta: GenerativeParams,
    x,
    m_enum: int,
    dist: HiddenDist | None = None,
    basis: BasisKernel | None = None,
    nonlinearity: str = "softplus",
) -> tuple[np.ndarray, np.ndarray]:
    """All hidden configurations with their normalized log posterior."""
    basis = basis or default_basis()
    dist = dist or PoissonDist()
    x_arr = _check_train(theta, x)
    t, h = x_arr.shape[0], theta.H
    _enum_budget_check(t, h, m_enum)
    total = m_enum ** (t * h)

    blocks, lnp_parts = [], []
    for start in range(0, total, ENUM_TAPE_BUDGET):
        z = _config_block(start, min(start + ENUM_TAPE_BUDGET, total), t, h, m_enum)
        blocks.append(z.astype(np.int64))
        lnp_parts.append(
            np.asarray(
                value_of(joint_log_likelihood(theta, x_arr, z, dist, basis, nonlinearity))
            )
        )
    configs = np.concatenate(blocks)
    lnp = np.concatenate(lnp_parts)
    log_post = lnp - (lnp.max() + np.log(np.sum(np.exp(lnp - lnp.max()))))
    return configs, log_post


def enumerate_grad_phi(
    theta: GenerativeParams,
    phi: VariationalParams,
    x,
    scheme: Scheme,
    dist: HiddenDist,
    m_enum: int,
    basis: BasisKernel | None = None,
    nonlinearity: str = "softplus",
) -> tuple[float, np.ndarray]:
    """Exact d ELBO / d phi via a tape over the full enumerated expectation."""
    basis = basis or default_basis()
    x_arr = _check_train(theta, x)
    t, h = x_arr.shape[0], theta.H
    _enum_budget_check(t, h, m_enum)
    total = m_enum ** (t * h)
    if total > ENUM_TAPE_BUDGET:
        raise UsageError("instance too large for exact-gradient enumeration")

    z = _config_block(0, total, t, h, m_enum)
    lnp = np.asarray(
        value_of(joint_log_likelihood(theta, x_arr, z, dist, basis, nonlinearity))
    )
    tape = ad.Tape()
    phi_v = VariationalParams(c=tape.leaf(phi.c), A=tape.leaf(phi.A), V=phi.V)
    lnq = _truncated_logq(phi_v, x_arr, z, scheme, dist, m_enum, basis, nonlinearity)
    weights = ad.exp(lnq)
    elbo = ad.vsum(ad.mul(weights, ad.sub(lnp, lnq)))
    dc, da = tape.backward(elbo)
    mask = scheme_mask(scheme, phi.V, phi.H)
    return float(value_of(elbo)), np.concatenate([dc.ravel(), (da * mask).ravel()])
