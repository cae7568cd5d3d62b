"""The coupled spiking-network model: rates, joint likelihood, simulation.

A population of N = V + H neurons (V visible, H hidden) where each neuron's
firing rate is a nonlinearity applied to a bias plus basis-filtered spike
history from every neuron.  Visible counts are Poisson; hidden counts follow
any of the families in :mod:`poglm.distributions`, whose relaxed variants
feed their (soft) counts back into the history terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import UsageError, value_of
from .distributions import (
    HiddenDist,
    PoissonDist,
    soft_count,
    soft_sample_from_array,
    soft_sample_to_array,
)
from .rng import SeededRng

MAX_RATE = 1e6


class SimulationDivergence(RuntimeError):
    """Firing rates blew past MAX_RATE during ancestral simulation."""


@dataclass
class BasisKernel:
    """Positive lag weights over the last L bins, normalized to sum 1."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise UsageError("basis weights must be a nonempty vector")
        if np.any(w <= 0):
            raise UsageError("basis weights must be positive")
        self.weights = w / w.sum()

    @property
    def length(self) -> int:
        return self.weights.size

    @classmethod
    def exponential(cls, length: int = 5, decay: float = 2.0) -> "BasisKernel":
        lags = np.arange(length, dtype=np.float64)
        return cls(np.exp(-lags / decay))


def default_basis(length: int = 5) -> BasisKernel:
    return BasisKernel.exponential(length=length)


@dataclass
class SpikeTrain:
    """T x V nonnegative integer spike counts, one row per time bin."""

    counts: np.ndarray
    bin_width: float | None = None

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] < 1:
            raise UsageError(f"counts must be a T x V matrix, got shape {c.shape}")
        if np.any(c < 0):
            raise UsageError("spike counts must be nonnegative")
        self.counts = c.astype(np.int64)

    @property
    def num_bins(self) -> int:
        return self.counts.shape[0]

    @property
    def num_neurons(self) -> int:
        return self.counts.shape[1]


@dataclass
class HiddenSample:
    """One Monte-Carlo draw of the hidden train.

    kind "discrete": (T, H) integer counts; "soft_onehot": (T, H, M) simplex
    rows; "continuous": (T, H) nonnegative reals.
    """

    kind: str
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if self.kind == "soft_onehot":
            if data.ndim != 3:
                raise UsageError("soft one-hot samples must be T x H x M")
            if not np.allclose(data.sum(axis=-1), 1.0, atol=1e-9):
                raise UsageError("soft one-hot rows must sum to 1")
        elif self.kind in ("discrete", "continuous"):
            if data.ndim != 2:
                raise UsageError("count samples must be T x H")
            if np.any(data < 0):
                raise UsageError("hidden counts must be nonnegative")
            if self.kind == "discrete":
                if not np.allclose(data, np.round(data)):
                    raise UsageError("discrete samples must hold integer counts")
                data = data.astype(np.int64)
        else:
            raise UsageError(f"unknown hidden sample kind {self.kind!r}")
        self.data = data

    def counts(self) -> np.ndarray:
        """The (soft) count signal fed into GLM history terms."""
        if self.kind == "soft_onehot":
            return soft_count(self.data)
        return self.data


@dataclass
class GenerativeParams:
    """Bias vector and coupling matrix in the 4-block visible/hidden layout.

    ``W[n, n']`` is the weight from neuron n' onto neuron n; the first V
    indices are visible neurons, the rest hidden.  Fields may hold autodiff
    Vars during gradient computation.
    """

    b: object
    W: object
    V: int

    def __post_init__(self):
        b_shape = np.shape(value_of(self.b))
        w_shape = np.shape(value_of(self.W))
        if self.V < 1:
            raise UsageError("need at least one visible neuron")
        if len(b_shape) != 1 or len(w_shape) != 2 or w_shape != (b_shape[0], b_shape[0]):
            raise UsageError(f"inconsistent shapes b {b_shape}, W {w_shape}")
        if b_shape[0] < self.V:
            raise UsageError("V exceeds the number of neurons")

    @property
    def N(self) -> int:
        return np.shape(value_of(self.b))[0]

    @property
    def H(self) -> int:
        return self.N - self.V


def theta_to_flat(params: GenerativeParams) -> np.ndarray:
    b = np.asarray(value_of(params.b), dtype=np.float64)
    w = np.asarray(value_of(params.W), dtype=np.float64)
    return np.concatenate([b, w.ravel()])


def theta_from_flat(flat: np.ndarray, v: int, n: int) -> GenerativeParams:
    flat = np.asarray(flat, dtype=np.float64)
    return GenerativeParams(b=flat[:n].copy(), W=flat[n:].reshape(n, n).copy(), V=v)


def apply_nonlinearity(pre, kind: str):
    if kind == "softplus":
        return ad.softplus(pre)
    if kind == "exp":
        return ad.exp(pre)
    raise UsageError(f"unknown nonlinearity {kind!r}")


def history_matrix(num_bins: int, basis: BasisKernel) -> np.ndarray:
    """C with C[t, t-l] = psi_l, so C @ counts filters history with zero
    padding before the first bin."""
    c = np.zeros((num_bins, num_bins))
    for lag, w in enumerate(basis.weights, start=1):
        if lag < num_bins:
            c += w * np.eye(num_bins, k=-lag)
    return c


def convolve_history(counts, basis: BasisKernel):
    """out[..., t, n] = sum_l psi_l * counts[..., t-l, n] (zero-padded)."""
    num_bins = np.shape(value_of(counts))[-2]
    return ad.matmul(history_matrix(num_bins, basis), counts)


def _as_counts(z):
    """Count signal from a HiddenSample, raw struct, or GS component list."""
    if z is None:
        return None
    if isinstance(z, HiddenSample):
        return z.counts()
    if isinstance(z, (list, tuple)):  # soft one-hot components on the tape
        return soft_count(z)
    return z


def _rates_from_filtered(params: GenerativeParams, sx, sz, nonlinearity: str):
    v = params.V
    b, w = params.b, params.W
    pre_vis = ad.add(ad.matmul(sx, ad.transpose(w[:v, :v])), b[:v])
    if params.H > 0:
        pre_vis = ad.add(pre_vis, ad.matmul(sz, ad.transpose(w[:v, v:])))
        pre_hid = ad.add(
            ad.add(ad.matmul(sx, ad.transpose(w[v:, :v])), b[v:]),
            ad.matmul(sz, ad.transpose(w[v:, v:])),
        )
        f_hid = apply_nonlinearity(pre_hid, nonlinearity)
    else:
        t = np.shape(value_of(sx))[-2]
        f_hid = np.zeros((t, 0))
    return apply_nonlinearity(pre_vis, nonlinearity), f_hid


def rates(
    params: GenerativeParams,
    x,
    z=None,
    basis: BasisKernel | None = None,
    nonlinearity: str = "softplus",
):
    """Firing rates (f_visible, f_hidden) for observed X and hidden sample Z.

    Z may be a HiddenSample, a raw (possibly batched or tape-recorded) count
    struct, or None when the model has no hidden neurons.  Leading batch axes
    on Z broadcast through.
    """
    basis = basis or default_basis()
    x = x.counts if isinstance(x, SpikeTrain) else np.asarray(x)
    sx = convolve_history(x.astype(np.float64), basis)
    zc = _as_counts(z)
    if params.H > 0:
        if zc is None:
            raise UsageError("hidden sample required when H > 0")
        sz = convolve_history(zc, basis)
    else:
        sz = None
    return _rates_from_filtered(params, sx, sz, nonlinearity)


_SAMPLE_KIND_FOR_VARIANT = {
    "discrete": ("pois", "cat"),
    "soft_onehot": ("gs",),
    "continuous": ("exp", "ray", "hn"),
}


def _check_variant(z, dist: HiddenDist):
    if isinstance(z, HiddenSample) and dist.kind not in _SAMPLE_KIND_FOR_VARIANT.get(
        z.kind, ()
    ):
        raise UsageError(
            f"hidden sample variant {z.kind!r} does not match distribution {dist.kind!r}"
        )
    if isinstance(z, (list, tuple)) and dist.sample_kind != "soft_onehot":
        raise UsageError(f"component-list sample requires a soft one-hot distribution")


def _dist_sample_struct(z, dist: HiddenDist):
    """The structure dist.log_density expects (component list for soft)."""
    if isinstance(z, HiddenSample):
        z = z.data
    if dist.sample_kind == "soft_onehot" and isinstance(z, np.ndarray):
        z = soft_sample_from_array(z)
    return z


def joint_log_likelihood(
    params: GenerativeParams,
    x,
    z,
    dist: HiddenDist,
    basis: BasisKernel | None = None,
    nonlinearity: str = "softplus",
):
    """ln p(X, Z) = sum_t,v ln Pois(x; f) + sum_t,h ln dist(z; f).

    Works on the tape when params (and, for pathwise distributions, Z) hold
    Vars.  Batched Z with a leading Monte-Carlo axis yields a vector of
    per-sample log likelihoods.
    """
    basis = basis or default_basis()
    x_arr = x.counts if isinstance(x, SpikeTrain) else np.asarray(x)
    if params.H > 0:
        _check_variant(z, dist)
        z = _dist_sample_struct(z, dist)
        f_vis, f_hid = rates(params, x_arr, z, basis, nonlinearity)
    else:
        f_vis, _ = rates(params, x_arr, None, basis, nonlinearity)
    vis_term = _cellsum(PoissonDist().log_density(x_arr.astype(np.float64), f_vis))
    if params.H == 0:
        return vis_term
    hid_term = _cellsum(dist.log_density(_dist_sample_struct(z, dist), f_hid))
    return ad.add(vis_term, hid_term)


def _cellsum(a):
    """Sum over the trailing (time, neuron) axes, keeping batch axes."""
    nd = np.ndim(value_of(a))
    if nd <= 2:
        return ad.vsum(a)
    return ad.vsum(a, axis=(-2, -1))


def generate(
    params: GenerativeParams,
    num_bins: int,
    dist: HiddenDist,
    basis: BasisKernel | None = None,
    rng: SeededRng | None = None,
    burn_in: int = 0,
) -> tuple[SpikeTrain, HiddenSample]:
    """Ancestral simulation: for t = 1..T compute rates from history, draw
    hidden counts from dist, then visible counts from Poisson."""
    basis = basis or default_basis()
    if rng is None:
        raise UsageError("generate requires a SeededRng")
    v, h, lag = params.V, params.H, basis.length
    b = np.asarray(value_of(params.b), dtype=np.float64)
    w = np.asarray(value_of(params.W), dtype=np.float64)
    psi_rev = basis.weights[::-1]

    total = num_bins + burn_in
    xpad = np.zeros((lag + total, v))
    zpad = np.zeros((lag + total, h))
    x_rows = np.zeros((total, v), dtype=np.int64)
    z_rows = []

    for t in range(total):
        sx_t = psi_rev @ xpad[t : t + lag]
        sz_t = psi_rev @ zpad[t : t + lag]
        pre = b + w[:, :v] @ sx_t + w[:, v:] @ sz_t
        f = value_of(apply_nonlinearity(pre, "softplus"))
        if not np.all(np.isfinite(f)) or np.any(f > MAX_RATE):
            bad = int(np.argmax(np.where(np.isfinite(f), f, np.inf)))
            raise SimulationDivergence(
                f"rate diverged at time bin {t - burn_in + 1}, neuron {bad}"
            )
        if h > 0:
            z_t = dist.draw(f[v:], rng)
            zpad[t + lag] = value_of(dist.history_counts(z_t))
            if dist.sample_kind == "soft_onehot":
                z_rows.append(soft_sample_to_array(z_t))
            else:
                z_rows.append(np.asarray(value_of(z_t), dtype=np.float64))
        x_t = rng.poisson(f[:v])
        xpad[t + lag] = x_t
        x_rows[t] = x_t

    x_train = SpikeTrain(x_rows[burn_in:])
    if h == 0:
        z_sample = HiddenSample("discrete", np.zeros((num_bins, 0)))
    else:
        z_data = np.stack(z_rows[burn_in:], axis=0)
        if dist.sample_kind == "soft_onehot":
            z_data = z_data.reshape(num_bins, h, -1)
        z_sample = HiddenSample(dist.sample_kind, z_data)
    return x_train, z_sample
