"""Reverse-diffusion solvers under unconditional, CFG, CFG++ and scheduled guidance.

States are VP states ``x_t``.  Euler-type solvers work internally on the VE
state ``x_t / sqrt(ab_t)`` with ``sigma = sqrt(1 - ab) / sqrt(ab)``; the
DPM-Solver++ family uses the solver time ``-log sigma`` so that
``sigma = exp(-time)`` holds literally.

Every step is written in terms of two denoised estimates (see
:func:`glab.guidance.split_eps`): ``D`` leads the update and ``R`` feeds all
renoising and history terms.  For CFG the two coincide; for CFG++ ``D`` is the
lambda-interpolated estimate and ``R`` the unconditional one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from glab import rng as rngmod
from glab.errors import GlabError, ParameterError, SingularityError, StepError
from glab.guidance import GuidanceMode, ScheduledCfg, split_eps, tweedie_from_eps
from glab.schedule import NoiseSchedule, TimestepGrid, alpha_bar_from_sigma, sigma_from_alpha_bar
from glab.score_model import Condition, GaussianMixtureModel, Null

EpsFn = Callable[[np.ndarray, float], tuple[np.ndarray, np.ndarray]]

KINDS = ("ddim", "euler", "euler-ancestral", "dpmpp-2m", "dpmpp-2s")
DETERMINISTIC = ("ddim", "euler", "dpmpp-2m", "dpmpp-2s")
NOISE_POLICIES = ("sigma", "sigma_up")


def model_eps_fn(model: GaussianMixtureModel, cond: Condition) -> EpsFn:
    """Two model calls per evaluation point: unconditional and conditional."""

    def fn(x, ab):
        return model.eps(x, ab, Null()), model.eps(x, ab, cond)

    return fn


@dataclass(frozen=True)
class SolverSpec:
    kind: str = "ddim"
    ancestral_noise: str = "sigma"
    r_mid: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown solver kind {self.kind!r}; expected one of {KINDS}")
        if self.ancestral_noise not in NOISE_POLICIES:
            raise ParameterError(f"ancestral noise policy must be one of {NOISE_POLICIES}")
        if not 0.0 < self.r_mid < 1.0:
            raise ParameterError(f"2S midpoint ratio must lie in (0, 1), got {self.r_mid}")

    @property
    def stochastic(self) -> bool:
        return self.kind not in DETERMINISTIC


@dataclass(frozen=True)
class StepRecord:
    t: int
    alpha_bar: float
    x: np.ndarray
    eps_null: np.ndarray
    eps_cond: np.ndarray
    xhat_null: np.ndarray
    xhat_cond: np.ndarray
    xhat_guided: np.ndarray
    eps_renoise: np.ndarray = field(repr=False)
    xhat_renoise: np.ndarray = field(repr=False)


def make_record(x, t: int, ab: float, eps_null, eps_cond, guidance: GuidanceMode, step: int = 0) -> StepRecord:
    eps_den, eps_ren = split_eps(guidance, eps_null, eps_cond, step)
    return StepRecord(
        t=int(t),
        alpha_bar=ab,
        x=x,
        eps_null=eps_null,
        eps_cond=eps_cond,
        xhat_null=tweedie_from_eps(x, eps_null, ab),
        xhat_cond=tweedie_from_eps(x, eps_cond, ab),
        xhat_guided=tweedie_from_eps(x, eps_den, ab),
        eps_renoise=eps_ren,
        xhat_renoise=tweedie_from_eps(x, eps_ren, ab),
    )


def evaluate(eps_fn: EpsFn, x, t: int, ab: float, guidance: GuidanceMode, step: int = 0) -> StepRecord:
    eps_null, eps_cond = eps_fn(x, ab)
    return make_record(x, t, ab, eps_null, eps_cond, guidance, step)


@dataclass
class Trajectory:
    records: list[StepRecord]
    guidance: GuidanceMode
    solver: SolverSpec
    seed: int | None = None

    @property
    def x0(self) -> np.ndarray:
        return self.records[-1].x

    @property
    def xT(self) -> np.ndarray:
        return self.records[0].x

    def states(self) -> np.ndarray:
        return np.stack([r.x for r in self.records])

    def timesteps(self) -> list[int]:
        return [r.t for r in self.records]


# ---------------------------------------------------------------------------
# level-based updates (alpha-bar floats); the index-based API wraps these


def _check_levels(ab, ab_prev):
    if ab <= 0.0:
        raise SingularityError("alpha_bar vanishes at the current step")
    if ab_prev <= 0.0:
        raise SingularityError("alpha_bar vanishes at the target step")


def ddim_update(x, ab: float, ab_prev: float, eps_den, eps_ren):
    _check_levels(ab, ab_prev)
    xhat = (x - math.sqrt(1.0 - ab) * eps_den) / math.sqrt(ab)
    return math.sqrt(ab_prev) * xhat + math.sqrt(1.0 - ab_prev) * eps_ren


def euler_update(x, ab: float, ab_prev: float, xhat_den, xhat_ren):
    _check_levels(ab, ab_prev)
    sigma, sigma_prev = sigma_from_alpha_bar(ab), sigma_from_alpha_bar(ab_prev)
    if sigma == 0.0:
        raise SingularityError("sigma = 0 at a non-terminal Euler step")
    x_ve = x / math.sqrt(ab)
    out = xhat_den + (x_ve - xhat_ren) / sigma * sigma_prev
    return math.sqrt(ab_prev) * out


def ancestral_sigmas(sigma: float, sigma_prev: float) -> tuple[float, float]:
    """Standard ``(sigma_down, sigma_up)`` split of an ancestral step (eta = 1)."""
    if sigma_prev == 0.0:
        return 0.0, 0.0
    up = min(sigma_prev, math.sqrt(sigma_prev**2 * (sigma**2 - sigma_prev**2) / sigma**2))
    return math.sqrt(sigma_prev**2 - up**2), up


def euler_ancestral_update(x, ab, ab_prev, xhat_den, xhat_ren, noise, *,
                           sigma_down: float | None = None, policy: str = "sigma"):
    """One Euler-ancestral step on the VE state.

    Deterministic part ``D + sigma_down * (x - R) / sigma``; the fresh noise
    is scaled by the current ``sigma`` (``sigma``) or by the variance-completing
    ``sigma_up`` (``sigma_up``).  No noise is added on the step that lands on
    ``sigma = 0``.
    """
    _check_levels(ab, ab_prev)
    if policy not in NOISE_POLICIES:
        raise ParameterError(f"unknown ancestral noise policy {policy!r}")
    sigma, sigma_prev = sigma_from_alpha_bar(ab), sigma_from_alpha_bar(ab_prev)
    if sigma == 0.0:
        raise SingularityError("sigma = 0 at a non-terminal Euler-ancestral step")
    if sigma_down is None:
        sigma_down, sigma_up = ancestral_sigmas(sigma, sigma_prev)
    else:
        if not sigma_prev <= sigma_down <= sigma:
            raise ParameterError("sigma_down must lie between the target and current sigma")
        sigma_up = math.sqrt(max(sigma_prev**2 - sigma_down**2, 0.0))
    x_ve = x / math.sqrt(ab)
    out = xhat_den + (x_ve - xhat_ren) / sigma * sigma_down
    if sigma_prev > 0.0:
        amp = sigma if policy == "sigma" else sigma_up
        out = out + amp * noise
    return math.sqrt(ab_prev) * out


def _solver_time(ab: float) -> float:
    s = sigma_from_alpha_bar(ab)
    return math.inf if s == 0.0 else -math.log(s)


@dataclass(frozen=True)
class DpmSolverState:
    prev_denoised: np.ndarray | None = None  # R(x_{i-2}) in the update for x_i
    prev_h: float | None = None


def dpmpp2m_update(state: DpmSolverState, x, ab, ab_prev, xhat_den, xhat_ren):
    """DPM-Solver++(2M) on the VE state; returns ``(x_prev, new_state)``.

    First step and the step landing on ``sigma = 0`` use the first-order
    update ``D + exp(-h) (x - R)``.
    """
    _check_levels(ab, ab_prev)
    lam, lam_prev = _solver_time(ab), _solver_time(ab_prev)
    h = lam_prev - lam
    if not h >= 0:
        raise ParameterError("DPM-Solver++ grid times must be non-decreasing in -log(sigma)")
    x_ve = x / math.sqrt(ab)
    decay = math.exp(-h)
    if state.prev_denoised is None or math.isinf(h):
        out = xhat_den + decay * (x_ve - xhat_ren)
    else:
        # (1 - e^{-h}) / (2 r) with r = h_prev / h, written to stay finite at h = 0
        coef = -math.expm1(-h) * h / (2.0 * state.prev_h)
        out = xhat_den - decay * xhat_ren + coef * (xhat_ren - state.prev_denoised) + decay * x_ve
    return math.sqrt(ab_prev) * out, DpmSolverState(xhat_ren, h)


def dpmpp2s_update(x, ab, ab_prev, eps_fn: EpsFn, guidance: GuidanceMode, *, r: float = 0.5,
                   step: int = 0, first: StepRecord | None = None):
    """DPM-Solver++(2S) on the VE state with the intermediate time at fraction ``r`` of the step.

    The midpoint is built from ``R`` only; the final combination uses
    ``R(x)`` and the leading estimate ``D(u)`` at the midpoint.  The step that
    lands on ``sigma = 0`` is first order.
    """
    _check_levels(ab, ab_prev)
    if not 0.0 < r < 1.0:
        raise ParameterError(f"2S intermediate fraction must lie in (0, 1), got {r}")
    if first is None:
        first = evaluate(eps_fn, x, -1, ab, guidance, step)
    lam, lam_prev = _solver_time(ab), _solver_time(ab_prev)
    h = lam_prev - lam
    if not h >= 0:
        raise ParameterError("DPM-Solver++ grid times must be non-decreasing in -log(sigma)")
    x_ve = x / math.sqrt(ab)
    xhat_ren = first.xhat_renoise
    if math.isinf(h):
        return math.sqrt(ab_prev) * first.xhat_guided
    if h == 0.0:
        return x.copy() if isinstance(x, np.ndarray) else x
    lam_mid = lam + r * h
    ab_mid = alpha_bar_from_sigma(math.exp(-lam_mid))
    u_ve = math.exp(-r * h) * x_ve - math.expm1(-r * h) * xhat_ren
    mid = evaluate(eps_fn, math.sqrt(ab_mid) * u_ve, -1, ab_mid, guidance, step)
    decay = math.exp(-h)
    out = xhat_ren - decay * xhat_ren + (-math.expm1(-h)) / (2.0 * r) * (mid.xhat_guided - xhat_ren) + decay * x_ve
    return math.sqrt(ab_prev) * out


# ---------------------------------------------------------------------------
# index-based step API


def _levels(schedule: NoiseSchedule, t: int, t_prev: int):
    if not t > t_prev >= 0:
        raise ParameterError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    return schedule.ab(t), schedule.ab(t_prev)


def _record(record, guidance, step):
    # re-split so the caller may pass a record built under another mode
    return make_record(record.x, record.t, record.alpha_bar, record.eps_null, record.eps_cond, guidance, step)


def ddim_step(record: StepRecord, guidance: GuidanceMode, schedule: NoiseSchedule, t_prev: int, step: int = 0):
    ab, ab_prev = _levels(schedule, record.t, t_prev)
    eps_den, eps_ren = split_eps(guidance, record.eps_null, record.eps_cond, step)
    return ddim_update(record.x, ab, ab_prev, eps_den, eps_ren)


def euler_step(record: StepRecord, guidance: GuidanceMode, schedule: NoiseSchedule, t_prev: int, step: int = 0):
    ab, ab_prev = _levels(schedule, record.t, t_prev)
    rec = _record(record, guidance, step)
    return euler_update(rec.x, ab, ab_prev, rec.xhat_guided, rec.xhat_renoise)


def euler_ancestral_step(record: StepRecord, guidance: GuidanceMode, schedule: NoiseSchedule, t_prev: int,
                         rng: np.random.Generator | None = None, *, t_d: int | None = None,
                         noise=None, policy: str = "sigma", step: int = 0):
    """Ancestral step from ``record.t`` to ``t_prev``.

    ``t_d`` optionally fixes the intermediate ("down") timestep with
    ``t > t_d >= t_prev``; otherwise the standard ancestral split is used.
    ``noise`` overrides the draw from ``rng``.
    """
    ab, ab_prev = _levels(schedule, record.t, t_prev)
    sigma_down = None
    if t_d is not None:
        if not record.t > t_d >= t_prev:
            raise ParameterError(f"need t > t_d >= t_prev, got {record.t}, {t_d}, {t_prev}")
        sigma_down = schedule.sigma(t_d)
    if noise is None:
        if rng is None:
            raise ParameterError("Euler-ancestral needs an rng (or an explicit noise draw)")
        noise = rng.standard_normal(np.shape(record.x))
    rec = _record(record, guidance, step)
    return euler_ancestral_update(rec.x, ab, ab_prev, rec.xhat_guided, rec.xhat_renoise, noise,
                                  sigma_down=sigma_down, policy=policy)


def dpmpp2m_step(state: DpmSolverState, record: StepRecord, guidance: GuidanceMode, schedule: NoiseSchedule,
                 t_prev: int, step: int = 0):
    ab, ab_prev = _levels(schedule, record.t, t_prev)
    rec = _record(record, guidance, step)
    return dpmpp2m_update(state, rec.x, ab, ab_prev, rec.xhat_guided, rec.xhat_renoise)


def dpmpp2s_step(record: StepRecord, guidance: GuidanceMode, schedule: NoiseSchedule, t_prev: int,
                 eps_fn: EpsFn, r: float = 0.5, step: int = 0):
    ab, ab_prev = _levels(schedule, record.t, t_prev)
    rec = _record(record, guidance, step)
    return dpmpp2s_update(rec.x, ab, ab_prev, eps_fn, guidance, r=r, step=step, first=rec)


# ---------------------------------------------------------------------------


def _check_schedule_length(guidance, grid):
    if isinstance(guidance, ScheduledCfg) and len(guidance.omegas) != grid.nfe:
        raise ParameterError(f"scheduled guidance has {len(guidance.omegas)} scales for {grid.nfe} steps")


def sample(model: GaussianMixtureModel, schedule: NoiseSchedule, grid: TimestepGrid, guidance: GuidanceMode,
           solver: SolverSpec = SolverSpec(), seed: int = 0, cond: Condition = Null(), x_T=None,
           batch: int | None = None, run: int = 0, eps_fn: EpsFn | None = None) -> Trajectory:
    """Run a full reverse trajectory from ``grid.indices[0]`` down to t = 0.

    ``x_T`` defaults to a standard normal draw keyed by ``(seed, run)``; pass
    ``batch`` to integrate ``batch`` independent states at once.  Ancestral
    noise for step ``i`` comes from the stream keyed ``(seed, run, i)``.
    """
    if grid.direction != "sampling":
        raise ParameterError("sample needs a sampling grid")
    _check_schedule_length(guidance, grid)
    if eps_fn is None:
        eps_fn = model_eps_fn(model, cond)
    if x_T is None:
        shape = (model.dim,) if batch is None else (batch, model.dim)
        x = rngmod.initial_latent(seed, shape, run)
    else:
        x = np.array(x_T, dtype=np.float64)
    records: list[StepRecord] = []
    state = DpmSolverState()
    pairs = grid.pairs()
    for i, (t, t_prev) in enumerate(pairs):
        try:
            ab, ab_prev = schedule.ab(t), schedule.ab(t_prev)
            rec = evaluate(eps_fn, x, t, ab, guidance, i)
            records.append(rec)
            if solver.kind == "ddim":
                x = ddim_update(x, ab, ab_prev, *split_eps(guidance, rec.eps_null, rec.eps_cond, i))
            elif solver.kind == "euler":
                x = euler_update(x, ab, ab_prev, rec.xhat_guided, rec.xhat_renoise)
            elif solver.kind == "euler-ancestral":
                noise = rngmod.stream(seed, run, i).standard_normal(np.shape(x))
                x = euler_ancestral_update(x, ab, ab_prev, rec.xhat_guided, rec.xhat_renoise, noise,
                                           policy=solver.ancestral_noise)
            elif solver.kind == "dpmpp-2m":
                x, state = dpmpp2m_update(state, x, ab, ab_prev, rec.xhat_guided, rec.xhat_renoise)
            else:
                x = dpmpp2s_update(x, ab, ab_prev, eps_fn, guidance, r=solver.r_mid, step=i, first=rec)
        except GlabError as exc:
            raise StepError(i, t, exc) from exc
        if not np.all(np.isfinite(x)):
            raise StepError(i, t, SingularityError("non-finite state"))
    last = grid.indices[-1]
    records.append(evaluate(eps_fn, x, last, schedule.ab(last), guidance, max(len(pairs) - 1, 0)))
    return Trajectory(records, guidance, solver, seed)

