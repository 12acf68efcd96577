"""Analysis probes over recorded trajectories: SDS loss, posterior-mean drift, off-manifold proxy, mode coverage.

Drift identities for a DDIM step from ``x_s`` (noisier) to ``x_t``, with
``k_t = sqrt(1 - ab_t) / sqrt(ab_t)``, ``Delta = xhat_c - xhat_null`` and
``d z = z(x_t) - z(x_s)``:

    CFG++:  d xhat^lam   = -k_t d eps_null + lam * Delta(x_t)
    CFG:    d xhat^omega = -k_t d eps_null + omega * (Delta(x_t) - (k_t / k_s) Delta(x_s))

Both are exact rearrangements of the update rule, so the residual is round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from glab import rng as rngmod
from glab.errors import ParameterError
from glab.guidance import Cfg, CfgPP, GuidanceMode, ScheduledCfg, Uncond
from glab.schedule import NoiseSchedule
from glab.score_model import Condition, GaussianMixtureModel
from glab.solvers import Trajectory

# stream counter for the fixed probe noise of the loss trace
PROBE_STEP = 2**32 - 2


def sds_loss(model: GaussianMixtureModel, schedule: NoiseSchedule, x, cond: Condition, t: int, eps) -> float:
    """``||eps_hat(sqrt(ab) x + sqrt(1 - ab) eps, c) - eps||^2``."""
    if not 1 <= t <= schedule.T:
        raise ParameterError(f"t must lie in [1, {schedule.T}], got {t}")
    ab = schedule.ab(t)
    x_t = math.sqrt(ab) * np.asarray(x, dtype=np.float64) + math.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)
    r = model.eps(x_t, ab, cond) - eps
    return np.sum(r * r, axis=-1)


def normalized_sds_loss(model, schedule, x, cond, t, eps):
    ab = schedule.ab(t)
    return (1.0 - ab) / ab * sds_loss(model, schedule, x, cond, t, eps)


def denoising_gap(model, schedule, x, cond, t, eps):
    """``||x - xhat_c(x_t)||^2``, equal to the normalized SDS loss."""
    ab = schedule.ab(t)
    x = np.asarray(x, dtype=np.float64)
    x_t = math.sqrt(ab) * x + math.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)
    d = x - model.posterior_mean(x_t, ab, cond)
    return np.sum(d * d, axis=-1)


@dataclass(frozen=True)
class LossTrace:
    t: np.ndarray
    loss: np.ndarray  # (steps,) or (steps, batch)

    def __post_init__(self):
        if np.any(self.loss < 0):
            raise ParameterError("loss trace must be nonnegative")

    def rows(self):
        for i, t in enumerate(self.t):
            yield {"step": i, "t": int(t), "loss_sds": self.loss[i]}


def track_loss(trajectory: Trajectory, model: GaussianMixtureModel, schedule: NoiseSchedule, cond: Condition,
               run: int = 0) -> LossTrace:
    """Normalized SDS loss of each step's guided clean estimate against a fixed probe noise.

    The probe noise is drawn once per trajectory from the counter stream, so
    traces from different guidance modes with the same seed are paired.
    """
    recs = [r for r in trajectory.records if r.t >= 1]
    if not recs:
        raise ParameterError("trajectory has no step with t >= 1")
    seed = 0 if trajectory.seed is None else trajectory.seed
    eps = rngmod.stream(seed, run, PROBE_STEP).standard_normal(np.shape(recs[0].x))
    ts = np.array([r.t for r in recs])
    vals = np.array([denoising_gap(model, schedule, r.xhat_guided, cond, r.t, eps) for r in recs])
    return LossTrace(ts, vals)


@dataclass(frozen=True)
class DriftRecord:
    t: int
    d_xhat_direct: np.ndarray
    uncond_shift: np.ndarray
    cond_shift: np.ndarray
    residual_norm: float

    @property
    def relative_residual(self) -> float:
        return self.residual_norm / (1.0 + float(np.linalg.norm(self.d_xhat_direct)))


def _same_family(a: GuidanceMode, b: GuidanceMode) -> bool:
    return type(a) is type(b) and a == b


def _scale(mode: GuidanceMode, step: int) -> float:
    if isinstance(mode, Uncond):
        return 0.0
    if isinstance(mode, ScheduledCfg):
        return mode.at(min(step, len(mode.omegas) - 1))
    return mode.scale


def drift_decomposition(trajectory: Trajectory, model: GaussianMixtureModel, schedule: NoiseSchedule,
                        cond: Condition, mode: GuidanceMode) -> list[DriftRecord]:
    """Split the per-step change of the guided clean estimate into unconditional and conditional shifts.

    ``model`` and ``cond`` are accepted for interface symmetry; everything
    needed is already in the records.
    """
    if trajectory.solver.kind != "ddim":
        raise ParameterError("drift decomposition needs a DDIM trajectory")
    if not _same_family(trajectory.guidance, mode):
        raise ParameterError(f"trajectory was sampled with {trajectory.guidance}, not {mode}")
    out = []
    recs = trajectory.records
    for i in range(len(recs) - 1):
        a, b = recs[i], recs[i + 1]  # a at the noisier time
        k_t = math.sqrt(1.0 - b.alpha_bar) / math.sqrt(b.alpha_bar)
        k_s = math.sqrt(1.0 - a.alpha_bar) / math.sqrt(a.alpha_bar)
        delta_s = a.xhat_cond - a.xhat_null
        delta_t = b.xhat_cond - b.xhat_null
        w_s, w_t = _scale(mode, i), _scale(mode, i + 1)
        direct = b.xhat_guided - a.xhat_guided
        uncond = -k_t * (b.eps_null - a.eps_null)
        if isinstance(mode, (CfgPP, Uncond)):
            cshift = w_t * delta_t
        elif isinstance(mode, (Cfg, ScheduledCfg)):
            cshift = w_t * delta_t - w_s * (k_t / k_s) * delta_s
        else:
            raise ParameterError(f"unknown guidance mode {mode!r}")
        res = float(np.linalg.norm(direct - uncond - cshift))
        out.append(DriftRecord(b.t, direct, uncond, cshift, res))
    return out


def manifold_proxy(x, model: GaussianMixtureModel):
    """Smallest Mahalanobis distance ``||x - mu_k|| / s`` to any component mean."""
    x = np.asarray(x, dtype=np.float64)
    d = np.linalg.norm(x[..., None, :] - model.means, axis=-1)
    return d.min(axis=-1) / model.std


def mode_coverage(samples, model: GaussianMixtureModel):
    """Nearest-component frequencies and their Shannon entropy (nats)."""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, model.dim)
    if samples.shape[0] < 1:
        raise ParameterError("mode coverage needs at least one sample")
    freq = np.bincount(model.nearest_component(samples), minlength=model.K) / samples.shape[0]
    nz = freq[freq > 0]
    return freq, float(-(nz * np.log(nz)).sum())


def weight_entropy(model: GaussianMixtureModel) -> float:
    return float(-(model.weights * np.log(model.weights)).sum())


@dataclass(frozen=True)
class Interval:
    mean: float
    lo: float
    hi: float
    n: int


def mean_ci(values, z: float = 1.96) -> Interval:
    """Normal-approximation confidence interval of the mean."""
    v = np.asarray(values, dtype=np.float64).ravel()
    m = float(v.mean())
    half = z * float(v.std(ddof=1)) / math.sqrt(v.size) if v.size > 1 else 0.0
    return Interval(m, m - half, m + half, int(v.size))
