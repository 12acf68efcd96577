"""Analytic Gaussian-mixture prior standing in for a trained noise predictor.

Under VP noising ``x_t = sqrt(ab) x_0 + sqrt(1 - ab) n`` a mixture with
isotropic components ``N(mu_k, s^2 I)`` stays a mixture, with components
``N(sqrt(ab) mu_k, (ab s^2 + 1 - ab) I)``.  Scores, noise predictions,
posterior means and their Jacobians are therefore available in closed form.

All array functions accept a single point of shape ``(d,)`` or a batch of
shape ``(n, d)``; ``ab`` is a scalar cumulative signal level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from glab.errors import ParameterError, SingularityError
from glab.schedule import NoiseSchedule

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Null:
    def mask(self, K: int) -> np.ndarray:
        return np.ones(K, dtype=bool)

    def __str__(self):
        return "null"


@dataclass(frozen=True)
class Class:
    k: int

    def mask(self, K: int) -> np.ndarray:
        if not 0 <= self.k < K:
            raise ParameterError(f"class index {self.k} outside [0, {K})")
        m = np.zeros(K, dtype=bool)
        m[self.k] = True
        return m

    def __str__(self):
        return f"class:{self.k}"


@dataclass(frozen=True)
class Subset:
    """Condition on a set of components, given by their indices."""

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(sorted({int(i) for i in self.indices}))
        if not idx:
            raise ParameterError("subset condition selects no component")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def from_mask(cls, mask) -> "Subset":
        return cls(tuple(np.flatnonzero(np.asarray(mask, dtype=bool)).tolist()))

    def mask(self, K: int) -> np.ndarray:
        if self.indices[0] < 0 or self.indices[-1] >= K:
            raise ParameterError(f"subset indices {self.indices} outside [0, {K})")
        m = np.zeros(K, dtype=bool)
        m[list(self.indices)] = True
        return m

    def __str__(self):
        return "subset:" + ",".join(map(str, self.indices))


Condition = Null | Class | Subset


def parse_condition(text: str) -> Condition:
    """Parse ``null``, ``class:K`` or ``subset:i,j,...``."""
    text = text.strip().lower()
    if text in ("null", "none", ""):
        return Null()
    kind, _, rest = text.partition(":")
    try:
        if kind == "class":
            return Class(int(rest))
        if kind == "subset":
            return Subset(tuple(int(v) for v in rest.split(",") if v.strip()))
    except ValueError:
        raise ParameterError(f"bad condition {text!r}") from None
    raise ParameterError(f"unknown condition {text!r}")


@dataclass(frozen=True)
class GaussianMixtureModel:
    means: np.ndarray = field(repr=False)
    std: float
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        means = np.array(self.means, dtype=np.float64, ndmin=2)
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        if means.ndim != 2 or means.shape[0] < 1 or means.shape[1] < 1:
            raise ParameterError(f"means must be a (K, d) array, got shape {means.shape}")
        if weights.shape != (means.shape[0],):
            raise ParameterError("need one weight per component")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ParameterError("weights must be positive and sum to 1")
        if not self.std > 0:
            raise ParameterError(f"component std must be positive, got {self.std}")
        for arr in (means, weights):
            arr.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "std", float(self.std))

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _select(self, cond: Condition):
        m = cond.mask(self.K)
        w = self.weights[m]
        return self.means[m], w / w.sum()

    def marginal_var(self, ab: float) -> float:
        return ab * self.std**2 + (1.0 - ab)

    def _component_logpdf(self, x, ab, cond):
        mu, w = self._select(cond)
        v = self.marginal_var(ab)
        diff = x[..., None, :] - math.sqrt(ab) * mu
        sq = np.einsum("...kd,...kd->...k", diff, diff)
        logp = np.log(w) - 0.5 * sq / v - 0.5 * self.dim * (LOG_2PI + math.log(v))
        return logp, mu, v

    def responsibilities(self, x, ab: float, cond: Condition = Null()):
        """Component posteriors over the selected components, computed in log space.

        Far from all modes the max-shift makes the result the one-hot limit on
        the nearest component rather than NaN.
        """
        x = np.asarray(x, dtype=np.float64)
        logp, mu, v = self._component_logpdf(x, ab, cond)
        logp = logp - logp.max(axis=-1, keepdims=True)
        r = np.exp(logp)
        r /= r.sum(axis=-1, keepdims=True)
        return r, mu, v

    def log_density(self, x, ab: float, cond: Condition = Null()):
        x = np.asarray(x, dtype=np.float64)
        logp, _, _ = self._component_logpdf(x, ab, cond)
        top = logp.max(axis=-1)
        return top + np.log(np.exp(logp - top[..., None]).sum(axis=-1))

    def score(self, x, ab: float, cond: Condition = Null()):
        x = np.asarray(x, dtype=np.float64)
        r, mu, v = self.responsibilities(x, ab, cond)
        return -(x - math.sqrt(ab) * (r @ mu)) / v

    def eps(self, x, ab: float, cond: Condition = Null()):
        """Noise prediction ``-sqrt(1 - ab) * score``."""
        return -math.sqrt(1.0 - ab) * self.score(x, ab, cond)

    def tweedie(self, x, ab: float, cond: Condition = Null()):
        if ab <= 0.0:
            raise SingularityError("Tweedie denoising needs alpha_bar > 0")
        x = np.asarray(x, dtype=np.float64)
        return (x - math.sqrt(1.0 - ab) * self.eps(x, ab, cond)) / math.sqrt(ab)

    def posterior_mean(self, x, ab: float, cond: Condition = Null()):
        """Direct mixture posterior mean ``sum_k r_k m_k`` (no Tweedie)."""
        if ab <= 0.0:
            raise SingularityError("posterior mean needs alpha_bar > 0")
        x = np.asarray(x, dtype=np.float64)
        r, mu, v = self.responsibilities(x, ab, cond)
        shrink = self.std**2 * math.sqrt(ab) / v
        # per-component posterior mean m_k = mu_k + shrink (x - sqrt(ab) mu_k)
        m = mu + shrink * (x[..., None, :] - math.sqrt(ab) * mu)
        return np.einsum("...k,...kd->...d", r, m)

    def posterior_jacobian(self, x, ab: float, cond: Condition = Null()):
        """d(posterior mean)/dx: scalar shrinkage plus responsibility covariance of the means."""
        if ab <= 0.0:
            raise SingularityError("posterior Jacobian needs alpha_bar > 0")
        x = np.asarray(x, dtype=np.float64)
        r, mu, v = self.responsibilities(x, ab, cond)
        shrink = self.std**2 * math.sqrt(ab) / v
        centered = mu - np.einsum("...k,kd->...d", r, mu)[..., None, :]
        cov = np.einsum("...k,...ki,...kj->...ij", r, centered, centered)
        eye = np.eye(self.dim)
        return shrink * eye + (math.sqrt(ab) * (1.0 - ab) / v**2) * cov

    def sample(self, cond: Condition, rng: np.random.Generator, n: int | None = None):
        """Ancestral samples from the clean prior restricted to ``cond``.

        Returns ``(x, components)``; component indices refer to the full model.
        """
        m = cond.mask(self.K)
        idx = np.flatnonzero(m)
        w = self.weights[m] / self.weights[m].sum()
        size = 1 if n is None else n
        comp = idx[rng.choice(len(idx), size=size, p=w)]
        x = self.means[comp] + self.std * rng.standard_normal((size, self.dim))
        if n is None:
            return x[0], int(comp[0])
        return x, comp

    def nearest_component(self, x):
        x = np.asarray(x, dtype=np.float64)
        d2 = ((x[..., None, :] - self.means) ** 2).sum(axis=-1)
        return d2.argmin(axis=-1)


def ring_model(K: int = 8, radius: float = 1.0, std: float = 0.1, dim: int = 2) -> GaussianMixtureModel:
    """K equally weighted components with means evenly spaced on a circle in the first two coordinates."""
    if K < 1 or dim < 2:
        raise ParameterError("ring preset needs K >= 1 and dim >= 2")
    angles = 2.0 * math.pi * np.arange(K) / K
    means = np.zeros((K, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return GaussianMixtureModel(means, std, np.full(K, 1.0 / K))


@dataclass(frozen=True)
class EpsPrediction:
    eps: np.ndarray
    t: int
    condition: Condition


def eps_pred(model: GaussianMixtureModel, schedule: NoiseSchedule, x_t, t: int,
             cond: Condition = Null()) -> EpsPrediction:
    x_t = np.asarray(x_t, dtype=np.float64)
    if not np.all(np.isfinite(x_t)):
        raise ParameterError("x_t must be finite")
    eps = model.eps(x_t, schedule.ab(t), cond)
    return EpsPrediction(eps, int(t), cond)


def posterior_mean(model, schedule, x_t, t, cond=Null()):
    return model.tweedie(x_t, schedule.ab(t), cond)


def log_density(model, schedule, x_t, t, cond=Null()):
    return model.log_density(x_t, schedule.ab(t), cond)


def finite_diff_eps(model, schedule, x_t, t, cond=Null(), h: float = 1e-5):
    """Central-difference oracle for ``eps_pred``; independent of the analytic score."""
    if not h > 0:
        raise ParameterError("finite-difference step must be positive")
    ab = schedule.ab(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    grad = np.empty_like(x_t)
    for i in range(x_t.shape[-1]):
        e = np.zeros(x_t.shape[-1])
        e[i] = h
        grad[..., i] = (model.log_density(x_t + e, ab, cond) - model.log_density(x_t - e, ab, cond)) / (2 * h)
    return -math.sqrt(1.0 - ab) * grad


def sample_prior(model, cond, rng, n=None):
    return model.sample(cond, rng, n)[0]
