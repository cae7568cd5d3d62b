"""Adam optimization of the generative and variational parameters.

Training maximizes the Monte-Carlo ELBO over mini-batches of spike trains
(descent on its negation).  The inference method names bundle a hidden-spike
distribution with the gradient estimator used for the variational side:

    pois, cat, gs-s  -- score-function estimator
    gs-p, exp, ray, hn -- pathwise estimator
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import UsageError
from .distributions import HiddenDist, make_hidden_dist
from .estimators import estimate_gradients
from .generative import (
    BasisKernel,
    GenerativeParams,
    SpikeTrain,
    default_basis,
    theta_from_flat,
    theta_to_flat,
)
from .rng import SeededRng
from .variational import (
    Scheme,
    VariationalParams,
    phi_from_flat,
    phi_to_flat,
    scheme_mask,
)

log = logging.getLogger(__name__)

METHODS: dict[str, tuple[str, str]] = {
    "pois": ("pois", "score"),
    "cat": ("cat", "score"),
    "gs-s": ("gs", "score"),
    "gs-p": ("gs", "pathwise"),
    "exp": ("exp", "pathwise"),
    "ray": ("ray", "pathwise"),
    "hn": ("hn", "pathwise"),
}

PATHWISE_METHODS = ("gs-p", "exp", "ray", "hn")
SCORE_METHODS = ("pois", "cat", "gs-s")


class TrainingDiverged(RuntimeError):
    """The epoch loss went non-finite twice in a row."""


@dataclass
class TrainConfig:
    method: str
    scheme: str
    hidden: int
    epochs: int = 20
    batch_size: int = 10
    k: int = 1
    learning_rate: float = 0.05
    seed: int = 0
    m: int = 5
    tau: float = 0.5
    basis_length: int = 5
    nonlinearity: str = "softplus"
    clip_norm: float = 100.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; expected one of {sorted(METHODS)}")
        Scheme.parse(self.scheme)
        if self.hidden < 0:
            raise UsageError("hidden neuron count must be nonnegative")
        dist_kind, estimator = METHODS[self.method]
        if estimator == "pathwise" and not make_hidden_dist(dist_kind).pathwise:
            raise UsageError(f"{dist_kind} cannot use the pathwise estimator")

    def dist(self) -> HiddenDist:
        kind, _ = METHODS[self.method]
        return make_hidden_dist(kind, m=self.m, tau=self.tau)

    def estimator(self) -> str:
        return METHODS[self.method][1]

    def scheme_obj(self) -> Scheme:
        return Scheme.parse(self.scheme)

    def basis(self) -> BasisKernel:
        return default_basis(self.basis_length)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """One Adam update (descent direction); skips on non-finite gradients."""
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise UsageError("parameter/gradient/state layouts disagree")
    if not np.all(np.isfinite(grad)):
        log.warning("skipping optimizer step: non-finite gradient")
        return params
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def init_params(
    v: int,
    h: int,
    scheme: Scheme,
    rng: SeededRng,
    t: int | None = None,
) -> tuple[GenerativeParams, VariationalParams | None]:
    """Random initialization: weights Unif(-2,2), biases Unif(-0.5,0.5);
    variational biases start at zero and free couplings at Unif(-0.1,0.1)."""
    n = v + h
    theta = GenerativeParams(
        b=rng.uniform_range(-0.5, 0.5, size=n),
        W=rng.uniform_range(-2.0, 2.0, size=(n, n)),
        V=v,
    )
    if h == 0:
        return theta, None
    if scheme is Scheme.MEAN_FIELD:
        if t is None:
            raise UsageError("mean-field initialization needs the train length")
        c = np.zeros((t, h))
    else:
        c = np.zeros(h)
    a = rng.uniform_range(-0.1, 0.1, size=(n, n)) * scheme_mask(scheme, v, h)
    return theta, VariationalParams(c=c, A=a, V=v)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    wall_time_s: float
    clip_events: int
    skipped_steps: int

    def format(self) -> str:
        return (
            f"epoch={self.epoch} loss={self.loss:.17g} "
            f"wall_time_s={self.wall_time_s:.3f} clip_events={self.clip_events} "
            f"skipped_steps={self.skipped_steps}"
        )


@dataclass
class FitResult:
    theta: GenerativeParams
    phi: VariationalParams | None
    loss_curve: list[float]
    wall_time: float
    epoch_records: list[EpochRecord] = field(default_factory=list)


def _batches(order: np.ndarray, batch_size: int):
    for start in range(0, order.size, batch_size):
        yield order[start : start + batch_size]


def fit(
    config: TrainConfig,
    train_set: list[SpikeTrain],
    init: tuple[GenerativeParams, VariationalParams | None] | None = None,
) -> FitResult:
    """Mini-batch Adam ascent on the ELBO over a collection of spike trains."""
    if not train_set:
        raise UsageError("empty training set")
    v = train_set[0].num_neurons
    widths = {tr.bin_width for tr in train_set}
    if any(tr.num_neurons != v for tr in train_set) or len(widths) > 1:
        raise UsageError("all trains must share the neuron count and bin width")

    h = config.hidden
    n = v + h
    scheme = config.scheme_obj()
    dist = config.dist()
    estimator = config.estimator()
    basis = config.basis()
    rng = SeededRng(config.seed)

    if init is None:
        t_bins = train_set[0].num_bins
        theta, phi = init_params(v, h, scheme, rng.derive(0), t=t_bins)
    else:
        theta, phi = init

    theta_flat = theta_to_flat(theta)
    theta_state = AdamState.zeros(theta_flat.size)
    if h > 0:
        projection = np.concatenate(
            [np.ones(np.size(phi.c)), scheme_mask(scheme, v, h).ravel().astype(np.float64)]
        )
        c_shape = np.shape(phi.c)
        phi_flat = phi_to_flat(phi) * projection
        phi_state = AdamState.zeros(phi_flat.size)
    else:
        phi_flat = np.zeros(0)

    loss_curve: list[float] = []
    records: list[EpochRecord] = []
    start_time = time.perf_counter()
    bad_epochs = 0

    for epoch in range(1, config.epochs + 1):
        epoch_start = time.perf_counter()
        order = rng.derive(1, epoch).permutation(len(train_set))
        elbos: list[float] = []
        clip_events = 0
        skipped = 0

        for b_idx, batch in enumerate(_batches(order, config.batch_size)):
            d_theta = np.zeros_like(theta_flat)
            d_phi = np.zeros_like(phi_flat)
            for j, item in enumerate(batch):
                estimate = estimate_gradients(
                    theta,
                    phi,
                    train_set[int(item)],
                    scheme,
                    dist,
                    config.k,
                    rng.derive(2, epoch, b_idx, j),
                    phi_estimator=estimator,
                    basis=basis,
                    nonlinearity=config.nonlinearity,
                )
                d_theta += estimate.d_theta
                d_phi += estimate.d_phi
                elbos.append(estimate.elbo_value)
            d_theta /= batch.size
            d_phi /= batch.size

            norm = float(np.sqrt(np.sum(d_theta**2) + np.sum(d_phi**2)))
            if np.isfinite(norm) and norm > config.clip_norm:
                scale = config.clip_norm / norm
                d_theta *= scale
                d_phi *= scale
                clip_events += 1
                log.info("gradient clipped: norm %.3g", norm)
            if not (np.all(np.isfinite(d_theta)) and np.all(np.isfinite(d_phi))):
                skipped += 1
                log.warning("skipping batch %d of epoch %d: non-finite gradient", b_idx, epoch)
                continue

            theta_flat = adam_step(theta_state, theta_flat, -d_theta, config.learning_rate)
            theta = theta_from_flat(theta_flat, v, n)
            if h > 0:
                phi_flat = adam_step(phi_state, phi_flat, -d_phi, config.learning_rate)
                phi_flat = phi_flat * projection
                phi = phi_from_flat(phi_flat, v, h, c_shape=c_shape)

        loss = -float(np.mean(elbos)) if elbos else float("nan")
        loss_curve.append(loss)
        records.append(
            EpochRecord(
                epoch=epoch,
                loss=loss,
                wall_time_s=time.perf_counter() - epoch_start,
                clip_events=clip_events,
                skipped_steps=skipped,
            )
        )
        if not np.isfinite(loss):
            bad_epochs += 1
            if bad_epochs >= 2:
                raise TrainingDiverged(
                    f"loss non-finite in consecutive epochs ending at {epoch} "
                    f"(method={config.method}, scheme={config.scheme}, seed={config.seed})"
                )
        else:
            bad_epochs = 0

    return FitResult(
        theta=theta,
        phi=phi,
        loss_curve=loss_curve,
        wall_time=time.perf_counter() - start_time,
        epoch_records=records,
    )
