"""Guided DPS / DDS data-consistency steps for linear inverse problems on GMM priors.

The data term is the plain squared residual ``||y - A x||^2``; the step size
absorbs any likelihood constant.  Guidance first fixes the denoised estimate
``D`` and the renoising prediction, then the gradient step is applied to ``D``:

    x_prev = sqrt(ab_prev) * (D - gamma * grad) + sqrt(1 - ab_prev) * eps_renoise

DPS differentiates through the Tweedie map (``grad = J_D^T 2 A^T (A D - y)``),
DDS takes the gradient at ``D`` directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from glab import rng as rngmod
from glab.errors import GlabError, ParameterError, SingularityError, StepError
from glab.guidance import Cfg, CfgPP, GuidanceMode, ScheduledCfg, Uncond
from glab.schedule import NoiseSchedule, TimestepGrid
from glab.score_model import Condition, GaussianMixtureModel, Null
from glab.solvers import SolverSpec, StepRecord, Trajectory, evaluate, model_eps_fn


@dataclass(frozen=True)
class LinearOperator:
    kind: str
    dim: int
    mask: np.ndarray | None = field(default=None, repr=False)
    matrix: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind == "identity":
            mat = np.eye(self.dim)
        elif self.kind == "mask":
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != (self.dim,) or not m.any():
                raise ParameterError("mask must be a boolean vector over the state with at least one observed entry")
            object.__setattr__(self, "mask", m)
            mat = np.eye(self.dim)[m]
        elif self.kind == "matrix":
            mat = np.array(self.matrix, dtype=np.float64, ndmin=2)
            if mat.shape[1] != self.dim or mat.shape[0] > self.dim:
                raise ParameterError(f"matrix must be m x {self.dim} with m <= {self.dim}")
            if np.linalg.matrix_rank(mat) < mat.shape[0]:
                raise ParameterError("measurement matrix must have full row rank")
        else:
            raise ParameterError(f"unknown operator kind {self.kind!r}")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def identity(cls, dim):
        return cls("identity", dim)

    @classmethod
    def masked(cls, observed):
        observed = np.asarray(observed, dtype=bool)
        return cls("mask", observed.size, mask=observed)

    @classmethod
    def dense(cls, matrix):
        matrix = np.array(matrix, dtype=np.float64, ndmin=2)
        return cls("matrix", matrix.shape[1], matrix=matrix)

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, x):
        return np.asarray(x) @ self.matrix.T

    def adjoint(self, r):
        return np.asarray(r) @ self.matrix


@dataclass(frozen=True)
class Measurement:
    y: np.ndarray
    noise_std: float
    operator: LinearOperator

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        if y.shape[-1] != self.operator.m:
            raise ParameterError(f"measurement has {y.shape[-1]} entries, operator outputs {self.operator.m}")
        if self.noise_std < 0:
            raise ParameterError("noise_std must be >= 0")
        object.__setattr__(self, "y", y)


def measure(x_true, operator: LinearOperator, noise_std: float, rng: np.random.Generator) -> Measurement:
    clean = operator(x_true)
    return Measurement(clean + noise_std * rng.standard_normal(clean.shape), noise_std, operator)


@dataclass(frozen=True)
class DisParams:
    gamma: float | tuple[float, ...] = 0.5
    mode: str = "dds"
    guidance: GuidanceMode = Uncond()
    ramp: bool = False  # scale gamma by (1 - ab_t)

    def __post_init__(self):
        if self.mode not in ("dps", "dds"):
            raise ParameterError(f"mode must be 'dps' or 'dds', got {self.mode!r}")
        gammas = np.atleast_1d(np.asarray(self.gamma, dtype=np.float64))
        if np.any(gammas <= 0):
            raise ParameterError("step size gamma must be > 0")

    def gamma_at(self, step: int, ab: float) -> float:
        g = self.gamma
        if not np.isscalar(g):
            try:
                g = g[step]
            except IndexError:
                raise ParameterError(f"no step size for step {step}") from None
        return float(g) * ((1.0 - ab) if self.ramp else 1.0)


def loss(x, measurement: Measurement):
    r = measurement.y - measurement.operator(x)
    return np.sum(r * r, axis=-1)


def loss_grad(x, measurement: Measurement):
    """Gradient of ``||y - A x||^2`` with respect to ``x``."""
    op = measurement.operator
    return 2.0 * op.adjoint(op(x) - measurement.y)


def _guided_scale(guidance: GuidanceMode, step: int) -> float:
    if isinstance(guidance, Uncond):
        return 0.0
    if isinstance(guidance, Cfg):
        return guidance.omega
    if isinstance(guidance, CfgPP):
        return guidance.lam
    if isinstance(guidance, ScheduledCfg):
        return guidance.at(step)
    raise ParameterError(f"unknown guidance mode {guidance!r}")


def guided_jacobian(model: GaussianMixtureModel, x, ab: float, cond: Condition, guidance: GuidanceMode, step: int = 0):
    """Jacobian of the leading denoised estimate: ``(1 - s) J_null + s J_cond``."""
    s = _guided_scale(guidance, step)
    j_null = model.posterior_jacobian(x, ab, Null())
    if s == 0.0:
        return j_null
    return (1.0 - s) * j_null + s * model.posterior_jacobian(x, ab, cond)


def _dis_step(kind, record: StepRecord, model, ab_prev, measurement, params: DisParams, cond, step):
    ab = record.alpha_bar
    if ab <= 0.0 or ab_prev <= 0.0:
        raise SingularityError("alpha_bar vanishes")
    d = record.xhat_guided
    g = loss_grad(d, measurement)
    if kind == "dps":
        jac = guided_jacobian(model, record.x, ab, cond, params.guidance, step)
        g = np.einsum("...ji,...j->...i", jac, g)
    gamma = params.gamma_at(step, ab)
    return math.sqrt(ab_prev) * (d - gamma * g) + math.sqrt(1.0 - ab_prev) * record.eps_renoise


def _record_at(model, schedule, x_t, t, params, cond, step):
    return evaluate(model_eps_fn(model, cond), np.asarray(x_t, dtype=np.float64), t, schedule.ab(t), params.guidance, step)


def dps_step(x_t, model, schedule: NoiseSchedule, t: int, t_prev: int, measurement: Measurement,
             params: DisParams, cond: Condition = Null(), step: int = 0):
    rec = _record_at(model, schedule, x_t, t, params, cond, step)
    return _dis_step("dps", rec, model, schedule.ab(t_prev), measurement, params, cond, step)


def dds_step(x_t, model, schedule: NoiseSchedule, t: int, t_prev: int, measurement: Measurement,
             params: DisParams, cond: Condition = Null(), step: int = 0):
    rec = _record_at(model, schedule, x_t, t, params, cond, step)
    return _dis_step("dds", rec, model, schedule.ab(t_prev), measurement, params, cond, step)


@dataclass
class InverseReport:
    residual: np.ndarray | float  # ||y - A x_0||
    error: np.ndarray | float | None  # ||x_0 - x_true|| when ground truth is known
    step_residuals: np.ndarray  # ||y - A D|| per step, D the guided denoised estimate


def solve_inverse(model: GaussianMixtureModel, schedule: NoiseSchedule, grid: TimestepGrid, measurement: Measurement,
                  params: DisParams, seed: int = 0, cond: Condition = Null(), x_true=None,
                  batch: int | None = None, run: int = 0):
    if grid.direction != "sampling":
        raise ParameterError("solve_inverse needs a sampling grid")
    eps_fn = model_eps_fn(model, cond)
    shape = (model.dim,) if batch is None else (batch, model.dim)
    x = rngmod.initial_latent(seed, shape, run)
    records, step_res = [], []
    pairs = grid.pairs()
    for i, (t, t_prev) in enumerate(pairs):
        try:
            rec = evaluate(eps_fn, x, t, schedule.ab(t), params.guidance, i)
            records.append(rec)
            step_res.append(np.sqrt(loss(rec.xhat_guided, measurement)))
            x = _dis_step(params.mode, rec, model, schedule.ab(t_prev), measurement, params, cond, i)
        except GlabError as exc:
            raise StepError(i, t, exc) from exc
    records.append(evaluate(eps_fn, x, grid.indices[-1], schedule.ab(grid.indices[-1]), params.guidance, len(pairs) - 1))
    traj = Trajectory(records, params.guidance, SolverSpec("ddim"), seed)
    err = None if x_true is None else np.linalg.norm(x - np.asarray(x_true), axis=-1)
    return traj, InverseReport(np.sqrt(loss(x, measurement)), err, np.array(step_res))


def exact_posterior(model: GaussianMixtureModel, measurement: Measurement, cond: Condition = Null()):
    """Closed-form posterior of ``x`` given ``y = A x + n`` under the (conditioned) GMM prior.

    Returns ``(weights, means, cov, mean, covariance)``: per-component posterior
    weights and means, the shared component covariance, and the moments of the
    whole mixture.  Used as the Bayes oracle for the samplers.
    """
    A = measurement.operator.matrix
    y = measurement.y
    s2 = model.std**2
    mask = cond.mask(model.K)
    mu = model.means[mask]
    w = model.weights[mask] / model.weights[mask].sum()
    S = s2 * A @ A.T + measurement.noise_std**2 * np.eye(A.shape[0])
    S_inv = np.linalg.inv(S)
    resid = y - mu @ A.T
    _, logdet = np.linalg.slogdet(S)
    logw = np.log(w) - 0.5 * np.einsum("ki,ij,kj->k", resid, S_inv, resid) - 0.5 * logdet
    post_w = np.exp(logw - logw.max())
    post_w /= post_w.sum()
    gain = s2 * A.T @ S_inv
    means = mu + resid @ gain.T
    cov = s2 * np.eye(model.dim) - gain @ (s2 * A)
    mean = post_w @ means
    centered = means - mean
    total = cov + np.einsum("k,ki,kj->ij", post_w, centered, centered)
    return post_w, means, cov, mean, total
