"""Variational posteriors over hidden spike trains.

Five rate parameterizations for q(Z | X):

* homogeneous -- one constant rate per hidden neuron
* mean-field  -- a free rate per (time bin, hidden neuron), train-specific
* forward (f) -- rates driven by past visible spikes
* forward-self (fs) -- past visible plus past sampled hidden spikes
  (sampling is sequential in time)
* forward-backward (fb) -- past and future visible spikes

All schemes share the parameter container: a bias ``c`` and a coupling
matrix ``A`` whose non-scheme blocks are pinned at zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import UsageError, value_of
from .distributions import HiddenDist
from .generative import (
    BasisKernel,
    HiddenSample,
    SpikeTrain,
    apply_nonlinearity,
    convolve_history,
    default_basis,
    history_matrix,
)
from .rng import SeededRng


class Scheme(Enum):
    HOMOGENEOUS = "homog"
    MEAN_FIELD = "mf"
    FORWARD = "f"
    FORWARD_SELF = "fs"
    FORWARD_BACKWARD = "fb"

    @classmethod
    def parse(cls, name: str) -> "Scheme":
        for s in cls:
            if s.value == name:
                return s
        raise UsageError(f"unknown scheme {name!r}")


@dataclass
class VariationalParams:
    """Bias c (length H, or T x H for mean-field) and coupling matrix A.

    A uses the same N x N indexing as the generative weights; blocks outside
    the active scheme's mask must stay exactly zero.  Fields may hold
    autodiff Vars during gradient computation.
    """

    c: object
    A: object
    V: int

    def __post_init__(self):
        a_shape = np.shape(value_of(self.A))
        c_shape = np.shape(value_of(self.c))
        if len(a_shape) != 2 or a_shape[0] != a_shape[1]:
            raise UsageError(f"A must be square, got {a_shape}")
        h = a_shape[0] - self.V
        if h < 1:
            raise UsageError("variational parameters need at least one hidden neuron")
        if c_shape[-1] != h or len(c_shape) > 2:
            raise UsageError(f"c shape {c_shape} inconsistent with H={h}")

    @property
    def N(self) -> int:
        return np.shape(value_of(self.A))[0]

    @property
    def H(self) -> int:
        return self.N - self.V


def scheme_mask(scheme: Scheme, v: int, h: int) -> np.ndarray:
    """Boolean mask of the free entries of A for the given scheme."""
    if v < 1:
        raise UsageError("need at least one visible neuron")
    if h < 1:
        raise UsageError("no variational model is needed when H = 0")
    n = v + h
    mask = np.zeros((n, n), dtype=bool)
    if scheme in (Scheme.FORWARD, Scheme.FORWARD_SELF, Scheme.FORWARD_BACKWARD):
        mask[v:, :v] = True  # visible -> hidden, past
    if scheme is Scheme.FORWARD_SELF:
        mask[v:, v:] = True  # hidden -> hidden, past
    if scheme is Scheme.FORWARD_BACKWARD:
        mask[:v, v:] = True  # hidden -> visible, mirrored as a future term
    return mask


def project_params(phi: VariationalParams, scheme: Scheme) -> VariationalParams:
    """Zero out A entries outside the scheme's mask (exact projection)."""
    mask = scheme_mask(scheme, phi.V, phi.H)
    return VariationalParams(
        c=np.asarray(value_of(phi.c), dtype=np.float64).copy(),
        A=np.where(mask, np.asarray(value_of(phi.A), dtype=np.float64), 0.0),
        V=phi.V,
    )


def _filtered_inputs(x, basis: BasisKernel):
    x_arr = x.counts if isinstance(x, SpikeTrain) else np.asarray(x)
    x_arr = x_arr.astype(np.float64)
    c_mat = history_matrix(x_arr.shape[0], basis)
    return x_arr, c_mat @ x_arr, c_mat.T @ x_arr  # raw, past-filtered, future-filtered


def variational_rates(
    phi: VariationalParams,
    x,
    scheme: Scheme,
    basis: BasisKernel | None = None,
    partial_z=None,
    nonlinearity: str = "softplus",
):
    """Hidden rates f[t, h] under the scheme (teacher-forced for forward-self).

    ``partial_z`` supplies the already-sampled hidden counts that the
    forward-self scheme conditions on; other schemes ignore it.
    """
    basis = basis or default_basis()
    x_arr, sx, sx_future = _filtered_inputs(x, basis)
    t_bins = x_arr.shape[0]
    v = phi.V
    c, a = phi.c, phi.A

    if scheme is Scheme.MEAN_FIELD:
        if np.shape(value_of(c)) != (t_bins, phi.H):
            raise UsageError("mean-field bias must be T x H for this train")
        return apply_nonlinearity(c, nonlinearity)
    if scheme is Scheme.HOMOGENEOUS:
        pre = ad.add(np.zeros((t_bins, 1)), c)
        return apply_nonlinearity(pre, nonlinearity)

    pre = ad.add(ad.matmul(sx, ad.transpose(a[v:, :v])), c)
    if scheme is Scheme.FORWARD_SELF:
        if partial_z is None:
            raise UsageError("forward-self rates need the sampled hidden history")
        if isinstance(partial_z, HiddenSample):
            partial_z = partial_z.counts()
        sz = convolve_history(partial_z, basis)
        pre = ad.add(pre, ad.matmul(sz, ad.transpose(a[v:, v:])))
    elif scheme is Scheme.FORWARD_BACKWARD:
        pre = ad.add(pre, ad.matmul(sx_future, a[:v, v:]))
    elif scheme is not Scheme.FORWARD:
        raise UsageError(f"unknown scheme {scheme}")
    return apply_nonlinearity(pre, nonlinearity)


def _broadcast_samples(f, k: int):
    """Give rates a leading Monte-Carlo axis of length k."""
    nd = np.ndim(value_of(f))
    return ad.add(f, np.zeros((k,) + (1,) * nd))


def sample_and_logq(
    phi: VariationalParams,
    x,
    scheme: Scheme,
    dist: HiddenDist,
    k: int,
    rng: SeededRng,
    reparameterize: bool | None = None,
    basis: BasisKernel | None = None,
    nonlinearity: str = "softplus",
):
    """Draw k hidden-train samples and their log q values in one pass.

    Returns ``(struct, logq)`` where struct is a (k, T, H) sample array (a
    list of M such arrays for soft one-hot distributions) and logq has shape
    (k,).  With ``reparameterize`` the noise-to-sample maps are recorded on
    the tape, so gradients flow through both the samples and log q; score-only
    distributions reject that mode.
    """
    if k < 1:
        raise UsageError("need at least one Monte-Carlo sample")
    if reparameterize is None:
        reparameterize = dist.pathwise
    if reparameterize and not dist.pathwise:
        raise UsageError(f"{dist.kind} does not support pathwise sampling")
    basis = basis or default_basis()

    if scheme is Scheme.FORWARD_SELF:
        return _sample_forward_self(
            phi, x, dist, k, rng, reparameterize, basis, nonlinearity
        )

    f = variational_rates(phi, x, scheme, basis, nonlinearity=nonlinearity)
    f_k = _broadcast_samples(f, k)
    z = dist.draw(f_k, rng, reparameterize=reparameterize)
    logq = ad.vsum(dist.log_density(z, f_k), axis=(-2, -1))
    return z, logq


def _sample_forward_self(phi, x, dist, k, rng, reparameterize, basis, nonlinearity):
    """Sequential sampling: each bin's rate sees the hidden counts already
    drawn for earlier bins."""
    x_arr, sx, _ = _filtered_inputs(x, basis)
    t_bins = x_arr.shape[0]
    v, h = phi.V, phi.H
    c, a = phi.c, phi.A
    a_hv_t = ad.transpose(a[v:, :v])
    a_hh_t = ad.transpose(a[v:, v:])
    psi = basis.weights
    lag = basis.length

    count_rows: list = []  # history count per sampled bin, each (k, h)
    z_rows: list = []
    logq = None
    for t in range(t_bins):
        hist = None
        for l in range(1, min(lag, t) + 1):
            term = ad.mul(count_rows[t - l], psi[l - 1])
            hist = term if hist is None else ad.add(hist, term)
        pre = ad.add(ad.matmul(sx[t], a_hv_t), c)
        if hist is not None:
            pre = ad.add(pre, ad.matmul(hist, a_hh_t))
        else:
            pre = ad.add(pre, np.zeros((k, h)))
        f_t = apply_nonlinearity(pre, nonlinearity)
        z_t = dist.draw(f_t, rng, reparameterize=reparameterize)
        count_rows.append(dist.history_counts(z_t))
        z_rows.append(z_t)
        term = ad.vsum(dist.log_density(z_t, f_t), axis=-1)
        logq = term if logq is None else ad.add(logq, term)

    if dist.sample_kind == "soft_onehot":
        m = len(z_rows[0])
        struct = [ad.stack([row[j] for row in z_rows], axis=-2) for j in range(m)]
    else:
        struct = ad.stack(z_rows, axis=-2)
    return struct, logq


def log_q(
    phi: VariationalParams,
    x,
    z,
    scheme: Scheme,
    dist: HiddenDist,
    basis: BasisKernel | None = None,
    nonlinearity: str = "softplus",
):
    """ln q(Z | X) for a given hidden sample (teacher-forced history for
    forward-self).  Batched sample structs yield a vector of log masses."""
    basis = basis or default_basis()
    if isinstance(z, HiddenSample):
        if dist.sample_kind != z.kind:
            raise UsageError(
                f"sample variant {z.kind!r} does not match distribution {dist.kind!r}"
            )
        struct = z.data
        if dist.sample_kind == "soft_onehot":
            from .distributions import soft_sample_from_array

            struct = soft_sample_from_array(struct)
    else:
        struct = z
    counts = dist.history_counts(struct)
    f = variational_rates(
        phi, x, scheme, basis, partial_z=counts, nonlinearity=nonlinearity
    )
    dens = dist.log_density(struct, f)
    if np.ndim(value_of(dens)) <= 2:
        return ad.vsum(dens)
    return ad.vsum(dens, axis=(-2, -1))


def split_hidden_samples(struct, dist: HiddenDist) -> list[HiddenSample]:
    """Unpack a batched sample struct into per-draw HiddenSample containers."""
    if dist.sample_kind == "soft_onehot":
        arr = np.stack([np.asarray(value_of(c), dtype=np.float64) for c in struct], axis=-1)
    else:
        arr = np.asarray(value_of(struct), dtype=np.float64)
    return [HiddenSample(dist.sample_kind, arr[i]) for i in range(arr.shape[0])]


# --- flat parameter layout ---------------------------------------------------


def phi_to_flat(phi: VariationalParams) -> np.ndarray:
    c = np.asarray(value_of(phi.c), dtype=np.float64)
    a = np.asarray(value_of(phi.A), dtype=np.float64)
    return np.concatenate([c.ravel(), a.ravel()])


def phi_from_flat(flat: np.ndarray, v: int, h: int, c_shape=None) -> VariationalParams:
    c_shape = (h,) if c_shape is None else tuple(c_shape)
    c_size = int(np.prod(c_shape))
    n = v + h
    return VariationalParams(
        c=np.asarray(flat[:c_size], dtype=np.float64).reshape(c_shape),
        A=np.asarray(flat[c_size:], dtype=np.float64).reshape(n, n),
        V=v,
    )
