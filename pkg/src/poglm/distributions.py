"""Hidden-spike-count distributions: sampling and log densities.

Six families, all parameterized by a single mean rate ``f``:

* ``pois`` -- Poisson counts (discrete, score-function gradients only)
* ``cat``  -- categorical over {0..M-1} from a truncated Poisson (discrete)
* ``gs``   -- Gumbel-Softmax relaxation of the categorical onto the simplex
* ``exp``  -- exponential with mean f
* ``ray``  -- Rayleigh with mean f
* ``hn``   -- half-normal with mean f

The last four support reparameterized sampling, so gradients can flow from a
sample back to the rate that produced it.  Module-level functions implement
the exact textbook forms on plain numpy values; the ``HiddenDist`` classes
wrap them for use inside models, where rates pass through a small floor
before entering any logarithm so likelihoods stay finite.

Gumbel-Softmax samples are handled as a list of M component arrays (one per
category) so each component can live on the autodiff tape; use
``soft_sample_to_array``/``soft_sample_from_array`` at value-level
boundaries.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special, stats

from . import autodiff as ad
from .autodiff import UsageError, clamp_min, value_of
from .rng import SeededRng

PROB_FLOOR = 1e-12  # probability clamp before logs / renormalization
RATE_FLOOR = 1e-8  # rate clamp inside model log terms

DEFAULT_M = 5
DEFAULT_TAU = 0.5


class DomainError(ValueError):
    """An argument lies outside the distribution's domain."""


# ---------------------------------------------------------------------------
# exact value-level forms


def truncated_poisson_probs(f, m: int):
    """Categorical probabilities approximating Poisson(f) on {0..m-1}.

    Entries 1..m-1 carry the exact Poisson mass; entry 0 absorbs the
    complement (the count-zero mass plus the tail beyond m-1).  Components
    are clamped to PROB_FLOOR and renormalized.  For a tape ``Var`` rate the
    result is a list of m component Vars; for numpy input it is an array
    with a trailing axis of length m.
    """
    if m < 2:
        raise DomainError(f"truncation level must be >= 2, got {m}")
    if not ad.is_var(f) and np.any(np.asarray(f) < 0):
        raise DomainError("rate must be nonnegative")
    comps = _pi_components(f, m)
    if ad.is_var(f):
        return comps
    return np.stack([np.asarray(c, dtype=np.float64) for c in comps], axis=-1)


def _pi_components(f, m: int) -> list:
    """Truncated-Poisson probabilities as a list of per-category terms."""
    emf = ad.exp(ad.neg(f))
    raw = []
    head = 1.0
    fact = 1.0
    for k in range(1, m):
        fact *= k
        pk = ad.mul(ad.power(f, k), emf) if k > 1 else ad.mul(f, emf)
        pk = ad.div(pk, float(fact))
        raw.append(pk)
        head = ad.sub(head, pk)
    raw.insert(0, head)
    clamped = [clamp_min(p, PROB_FLOOR) for p in raw]
    total = clamped[0]
    for p in clamped[1:]:
        total = ad.add(total, p)
    return [ad.div(p, total) for p in clamped]


def poisson_log_pmf(z, f):
    """ln Poisson(z; f) = z ln f - f - ln z!  (exact; -inf when f=0, z>0)."""
    z = np.asarray(z)
    if np.any(z < 0):
        raise DomainError("count must be nonnegative")
    f = np.asarray(f, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = z * np.log(f) - f - special.gammaln(z + 1.0)
    out = np.where((z == 0) & (f == 0), 0.0, out)
    out = np.where((z > 0) & (f == 0), -np.inf, out)
    return out if out.ndim else float(out)


def categorical_sample(pi, rng: SeededRng) -> np.ndarray:
    """Inverse-CDF draw from Categorical(pi); pi has a trailing category axis."""
    pi = np.asarray(pi, dtype=np.float64)
    cum = np.cumsum(pi, axis=-1)
    u = rng.uniform(size=pi.shape[:-1])
    idx = np.sum(np.asarray(u)[..., None] > cum, axis=-1)
    return np.minimum(idx, pi.shape[-1] - 1)


def categorical_log_pmf(z, pi):
    pi = np.asarray(pi, dtype=np.float64)
    z = np.asarray(z)
    m = pi.shape[-1]
    if np.any(z < 0) or np.any(z >= m):
        raise DomainError(f"category index outside 0..{m - 1}")
    picked = np.take_along_axis(pi, z[..., None].astype(np.intp), axis=-1)[..., 0]
    out = np.log(picked)
    return out if out.ndim else float(out)


def gs_sample(pi, tau: float, rng: SeededRng) -> np.ndarray:
    """One soft one-hot draw: softmax((ln pi + gumbel) / tau) rows."""
    pi = np.asarray(pi, dtype=np.float64)
    comps = _gs_sample_components(list(np.moveaxis(pi, -1, 0)), tau, rng)
    return np.stack(comps, axis=-1)


def _gs_sample_components(pi_comps: list, tau: float, rng: SeededRng) -> list:
    """Reparameterized Gumbel-Softmax draw over component lists (Var-aware)."""
    if tau <= 0:
        raise DomainError("temperature must be positive")
    shape = np.shape(value_of(pi_comps[0]))
    u = rng.uniform(size=(len(pi_comps),) + shape)
    g = -np.log(-np.log(u))
    logits = [
        ad.div(ad.add(ad.log(p), g[k]), tau) for k, p in enumerate(pi_comps)
    ]
    # constant shift keeps exp in range without touching gradients
    c = np.max([np.asarray(value_of(l)) for l in logits], axis=0)
    exps = [ad.exp(ad.sub(l, c)) for l in logits]
    total = exps[0]
    for e in exps[1:]:
        total = ad.add(total, e)
    return [ad.div(e, total) for e in exps]


def gs_log_pdf(z, pi, tau: float):
    """Gumbel-Softmax log density of a soft one-hot row z given pi."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise DomainError("soft one-hot components must be strictly positive")
    pi = np.asarray(pi, dtype=np.float64)
    out = _gs_log_pdf_components(
        list(np.moveaxis(z, -1, 0)), list(np.moveaxis(pi, -1, 0)), tau
    )
    return out if np.ndim(out) else float(out)


def _gs_log_pdf_components(z_comps: list, pi_comps: list, tau: float):
    m = len(z_comps)
    const = special.gammaln(m) + (m - 1) * math.log(tau)
    ratio_sum = None
    rest = None
    for z_k, p_k in zip(z_comps, pi_comps):
        r = ad.mul(p_k, ad.power(z_k, -tau))
        ratio_sum = r if ratio_sum is None else ad.add(ratio_sum, r)
        term = ad.sub(ad.log(p_k), ad.mul(ad.log(z_k), tau + 1.0))
        rest = term if rest is None else ad.add(rest, term)
    return ad.add(ad.sub(rest, ad.mul(ad.log(ratio_sum), float(m))), const)


def soft_count(z):
    """Collapse a soft one-hot to its expected count: sum_m m * z_m."""
    if isinstance(z, (list, tuple)):
        total = None
        for k, z_k in enumerate(z[1:], start=1):
            term = ad.mul(z_k, float(k))
            total = term if total is None else ad.add(total, term)
        if total is None:
            return ad.mul(z[0], 0.0)
        return total
    z = np.asarray(z, dtype=np.float64)
    weights = np.arange(z.shape[-1], dtype=np.float64)
    out = z @ weights
    return out if np.ndim(out) else float(out)


def exp_sample(f, rng: SeededRng):
    """z = -f ln(1-u): exponential with mean f."""
    _require_positive_rate(f)
    u = rng.uniform(size=np.shape(f))
    out = -np.asarray(f, dtype=np.float64) * np.log1p(-u)
    return out if np.ndim(out) else float(out)


def exp_log_pdf(z, f):
    _require_positive_rate(f)
    f = np.asarray(f, dtype=np.float64)
    out = -np.log(f) - np.asarray(z) / f
    return out if np.ndim(out) else float(out)


def rayleigh_sample(f, rng: SeededRng):
    """Rayleigh with scale sqrt(2/pi)*f, hence mean f."""
    _require_positive_rate(f)
    u = rng.uniform(size=np.shape(f))
    scale = math.sqrt(2.0 / math.pi) * np.asarray(f, dtype=np.float64)
    out = scale * np.sqrt(-2.0 * np.log1p(-u))
    return out if np.ndim(out) else float(out)


def rayleigh_log_pdf(z, f):
    _require_positive_rate(f)
    f = np.asarray(f, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = np.log(math.pi * z / (2.0 * f * f)) - math.pi * z * z / (4.0 * f * f)
    return out if out.ndim else float(out)


def halfnormal_sample(f, rng: SeededRng):
    """|N(0, sigma)| with sigma = sqrt(pi/2)*f, hence mean f."""
    _require_positive_rate(f)
    u = rng.uniform(size=np.shape(f))
    out = math.sqrt(math.pi) * np.asarray(f, dtype=np.float64) * special.erfinv(u)
    return out if np.ndim(out) else float(out)


def halfnormal_log_pdf(z, f):
    _require_positive_rate(f)
    f = np.asarray(f, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    out = np.log(2.0 / (math.pi * f)) - z * z / (math.pi * f * f)
    return out if out.ndim else float(out)


def _require_positive_rate(f):
    if np.any(np.asarray(f, dtype=np.float64) <= 0):
        raise DomainError("rate must be positive")


def soft_sample_to_array(comps: list) -> np.ndarray:
    """List-of-components (tape form) -> (..., M) array (value form)."""
    return np.stack([np.asarray(value_of(c), dtype=np.float64) for c in comps], axis=-1)


def soft_sample_from_array(arr: np.ndarray) -> list:
    return list(np.moveaxis(np.asarray(arr, dtype=np.float64), -1, 0))


# ---------------------------------------------------------------------------
# model-facing distribution objects


class HiddenDist:
    """Common interface: draw samples at given rates, score them, and expose
    the count signal that feeds back into GLM history."""

    kind: str
    pathwise: bool
    sample_kind: str  # "discrete" | "soft_onehot" | "continuous"

    def draw(self, f, rng: SeededRng, reparameterize: bool = False):
        if reparameterize and not self.pathwise:
            raise UsageError(
                f"{self.kind} has no reparameterization; use the score estimator"
            )
        if not reparameterize:
            f = np.asarray(value_of(f), dtype=np.float64)
        return self._draw(f, rng)

    def _draw(self, f, rng):
        raise NotImplementedError

    def log_density(self, z, f):
        """Elementwise log density/mass at floored rates (Var-aware)."""
        raise NotImplementedError

    def history_counts(self, z):
        return z

    def __repr__(self):
        return f"{type(self).__name__}()"


def poisson_inverse_cdf_sample(f, rng: SeededRng) -> np.ndarray:
    """Poisson draw as a per-cell function of one uniform (inverse CDF).

    Keeps the uniform-consumption count independent of the rate, so fixed
    seeds give noise that is stable under rate perturbations and index
    permutations."""
    u = rng.uniform(size=np.shape(f))
    z = stats.poisson.ppf(u, np.maximum(np.asarray(f, dtype=np.float64), 0.0))
    return np.asarray(z, dtype=np.int64)


class PoissonDist(HiddenDist):
    kind = "pois"
    pathwise = False
    sample_kind = "discrete"

    def _draw(self, f, rng):
        return poisson_inverse_cdf_sample(f, rng)

    def log_density(self, z, f):
        fc = clamp_min(f, RATE_FLOOR)
        z = np.asarray(value_of(z), dtype=np.float64)
        return ad.sub(ad.sub(ad.mul(ad.log(fc), z), fc), special.gammaln(z + 1.0))


class CategoricalDist(HiddenDist):
    kind = "cat"
    pathwise = False
    sample_kind = "discrete"

    def __init__(self, m: int = DEFAULT_M):
        if m < 2:
            raise DomainError("truncation level must be >= 2")
        self.m = m

    def _draw(self, f, rng):
        return categorical_sample(truncated_poisson_probs(f, self.m), rng)

    def log_density(self, z, f):
        z = np.asarray(value_of(z))
        if np.any(z >= self.m):
            raise DomainError(f"count {z.max()} outside categorical support")
        comps = _pi_components(clamp_min(f, RATE_FLOOR), self.m)
        out = None
        for k, p_k in enumerate(comps):
            term = ad.mul(ad.log(p_k), (z == k).astype(np.float64))
            out = term if out is None else ad.add(out, term)
        return out

    def __repr__(self):
        return f"CategoricalDist(m={self.m})"


class GumbelSoftmaxDist(HiddenDist):
    kind = "gs"
    pathwise = True
    sample_kind = "soft_onehot"

    def __init__(self, m: int = DEFAULT_M, tau: float = DEFAULT_TAU):
        if m < 2:
            raise DomainError("truncation level must be >= 2")
        if tau <= 0:
            raise DomainError("temperature must be positive")
        self.m = m
        self.tau = tau

    def _draw(self, f, rng):
        # always the component-list form; stack via soft_sample_to_array at
        # value-level boundaries
        return _gs_sample_components(
            _pi_components(clamp_min(f, RATE_FLOOR), self.m), self.tau, rng
        )

    def log_density(self, z, f):
        comps = _pi_components(clamp_min(f, RATE_FLOOR), self.m)
        if not isinstance(z, (list, tuple)):
            z = soft_sample_from_array(value_of(z))
        return _gs_log_pdf_components(z, comps, self.tau)

    def history_counts(self, z):
        return soft_count(z)

    def __repr__(self):
        return f"GumbelSoftmaxDist(m={self.m}, tau={self.tau})"


class ExponentialDist(HiddenDist):
    kind = "exp"
    pathwise = True
    sample_kind = "continuous"

    def _draw(self, f, rng):
        u = rng.uniform(size=np.shape(value_of(f)))
        return ad.mul(clamp_min(f, RATE_FLOOR), -np.log1p(-u))

    def log_density(self, z, f):
        fc = clamp_min(f, RATE_FLOOR)
        return ad.sub(ad.neg(ad.log(fc)), ad.div(z, fc))


class RayleighDist(HiddenDist):
    kind = "ray"
    pathwise = True
    sample_kind = "continuous"

    def _draw(self, f, rng):
        u = rng.uniform(size=np.shape(value_of(f)))
        noise = math.sqrt(2.0 / math.pi) * np.sqrt(-2.0 * np.log1p(-u))
        return ad.mul(clamp_min(f, RATE_FLOOR), noise)

    def log_density(self, z, f):
        fc = clamp_min(f, RATE_FLOOR)
        zc = clamp_min(z, 1e-300)  # density vanishes at 0; keep the log finite
        quad = ad.div(ad.mul(ad.power(z, 2), math.pi / 4.0), ad.power(fc, 2))
        return ad.sub(
            ad.sub(ad.add(ad.log(zc), math.log(math.pi / 2.0)),
                   ad.mul(ad.log(fc), 2.0)),
            quad,
        )


class HalfNormalDist(HiddenDist):
    kind = "hn"
    pathwise = True
    sample_kind = "continuous"

    def _draw(self, f, rng):
        u = rng.uniform(size=np.shape(value_of(f)))
        noise = math.sqrt(math.pi) * special.erfinv(u)
        return ad.mul(clamp_min(f, RATE_FLOOR), noise)

    def log_density(self, z, f):
        fc = clamp_min(f, RATE_FLOOR)
        quad = ad.div(ad.mul(ad.power(z, 2), 1.0 / math.pi), ad.power(fc, 2))
        return ad.sub(ad.sub(math.log(2.0 / math.pi), ad.log(fc)), quad)


_DIST_KINDS = {
    "pois": PoissonDist,
    "cat": CategoricalDist,
    "gs": GumbelSoftmaxDist,
    "exp": ExponentialDist,
    "ray": RayleighDist,
    "hn": HalfNormalDist,
}


def make_hidden_dist(kind: str, m: int = DEFAULT_M, tau: float = DEFAULT_TAU) -> HiddenDist:
    if kind not in _DIST_KINDS:
        raise UsageError(f"unknown hidden distribution {kind!r}")
    if kind == "cat":
        return CategoricalDist(m)
    if kind == "gs":
        return GumbelSoftmaxDist(m, tau)
    return _DIST_KINDS[kind]()
