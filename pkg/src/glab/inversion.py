"""DDIM inversion under CFG / CFG++, round-trip reconstruction and condition-swap editing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from glab.errors import GlabError, ParameterError, StepError
from glab.guidance import Cfg, CfgPP, GuidanceMode, ScheduledCfg, Uncond, combine_eps, split_eps, tweedie_from_eps
from glab.schedule import NoiseSchedule, TimestepGrid, uniform_grid
from glab.score_model import Condition, GaussianMixtureModel, Null
from glab.solvers import SolverSpec, model_eps_fn, sample


@dataclass(frozen=True)
class InversionStep:
    t: int
    x: np.ndarray
    eps_null: np.ndarray
    eps_cond: np.ndarray


@dataclass
class InversionResult:
    xT: np.ndarray
    steps: list[InversionStep]  # one per visited grid point, x_0 first


def _sampling_step_index(grid_up: TimestepGrid, j: int) -> int:
    # inversion step j (t_j -> t_{j+1}) mirrors sampling step nfe - 1 - j
    return grid_up.nfe - 1 - j


def ddim_invert(x0, model: GaussianMixtureModel, schedule: NoiseSchedule, grid_up: TimestepGrid,
                guidance: GuidanceMode, cond: Condition = Null(), eps_fn=None) -> InversionResult:
    """Map a clean sample to a latent at ``grid_up.indices[-1]``.

    The Tweedie line uses the renoising prediction and the renoising line the
    leading prediction, which makes each step the time-reversal of the
    matching sampling step under ``eps(x_t) ~ eps(x_{t-1})``.  For CFG both are
    ``eps^omega``; for CFG++ the Tweedie line uses ``eps_null`` and the renoise
    line ``eps^lambda``.  The CFG++ Tweedie output is sometimes labelled
    ``xhat^lambda`` even though it is computed from ``eps_null``; the code
    follows the computation, not the label.
    """
    if grid_up.direction != "inversion":
        raise ParameterError("ddim_invert needs an ascending inversion grid")
    if isinstance(guidance, ScheduledCfg) and len(guidance.omegas) != grid_up.nfe:
        raise ParameterError("scheduled guidance length does not match the grid")
    if eps_fn is None:
        eps_fn = model_eps_fn(model, cond)
    x = np.array(x0, dtype=np.float64)
    steps = []
    for j, (t, t_next) in enumerate(grid_up.pairs()):
        try:
            ab, ab_next = schedule.ab(t), schedule.ab(t_next)
            eps_null, eps_cond = eps_fn(x, ab)
            steps.append(InversionStep(t, x, eps_null, eps_cond))
            eps_den, eps_ren = split_eps(guidance, eps_null, eps_cond, _sampling_step_index(grid_up, j))
            xhat = tweedie_from_eps(x, eps_ren, ab)
            x = math.sqrt(ab_next) * xhat + math.sqrt(1.0 - ab_next) * eps_den
        except GlabError as exc:
            raise StepError(j, t, exc) from exc
    t_last = grid_up.indices[-1]
    eps_null, eps_cond = eps_fn(x, schedule.ab(t_last))
    steps.append(InversionStep(t_last, x, eps_null, eps_cond))
    return InversionResult(x, steps)


def consistency_defects(result: InversionResult, guidance: GuidanceMode, grid_up: TimestepGrid):
    """Per-step local defects of the ``eps(x_t) ~ eps(x_{t-1})`` substitution.

    Returns ``(defects, shift_diffs)`` where ``shift_diffs`` is
    ``||delta_eps_c(x_{j+1}) - delta_eps_c(x_j)||`` and ``delta_eps_c = eps_cond - eps_null``.
    CFG reports the full ``eps^omega`` difference, CFG++ the lambda-scaled
    conditional-shift difference, Uncond the ``eps_null`` difference.
    """
    defects, shifts = [], []
    for j in range(grid_up.nfe):
        a, b = result.steps[j], result.steps[j + 1]
        d_shift = (b.eps_cond - b.eps_null) - (a.eps_cond - a.eps_null)
        shift = np.linalg.norm(d_shift, axis=-1)
        if isinstance(guidance, CfgPP):
            defect = guidance.lam * shift
        elif isinstance(guidance, Uncond):
            defect = np.linalg.norm(b.eps_null - a.eps_null, axis=-1)
        else:
            w = guidance.omega if isinstance(guidance, Cfg) else guidance.at(_sampling_step_index(grid_up, j))
            defect = np.linalg.norm(combine_eps(b.eps_null, b.eps_cond, w) - combine_eps(a.eps_null, a.eps_cond, w), axis=-1)
        defects.append(defect)
        shifts.append(shift)
    return np.array(defects), np.array(shifts)


def data_range(model: GaussianMixtureModel) -> float:
    radius = float(np.max(np.linalg.norm(model.means, axis=1)))
    return 2.0 * (radius + 3.0 * model.std)


def psnr_db(l2_error, model: GaussianMixtureModel):
    rmse = np.asarray(l2_error) / math.sqrt(model.dim)
    with np.errstate(divide="ignore"):
        return 20.0 * np.log10(data_range(model) / rmse)


@dataclass
class InversionReport:
    x0: np.ndarray
    xT: np.ndarray
    x0_rec: np.ndarray
    l2_error: np.ndarray | float
    per_step_residuals: np.ndarray
    shift_diffs: np.ndarray
    guidance: GuidanceMode
    nfe: int
    db: np.ndarray | float


def roundtrip(x0, model: GaussianMixtureModel, schedule: NoiseSchedule, nfe: int, guidance: GuidanceMode,
              cond: Condition = Null()) -> InversionReport:
    """Invert over an ascending uniform grid, then regenerate with DDIM over the mirrored grid."""
    x0 = np.asarray(x0, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise ParameterError("x0 must be finite")
    grid_up = uniform_grid(schedule, nfe, "inversion")
    inv = ddim_invert(x0, model, schedule, grid_up, guidance, cond)
    traj = sample(model, schedule, grid_up.mirrored(), guidance, SolverSpec("ddim"), cond=cond, x_T=inv.xT)
    defects, shifts = consistency_defects(inv, guidance, grid_up)
    l2 = np.linalg.norm(x0 - traj.x0, axis=-1)
    return InversionReport(x0, inv.xT, traj.x0, l2, defects, shifts, guidance, nfe, psnr_db(l2, model))


def edit(x0, model: GaussianMixtureModel, schedule: NoiseSchedule, nfe: int, guidance: GuidanceMode,
         cond_src: Condition, cond_tgt: Condition):
    """Invert under ``cond_src`` and regenerate under ``cond_tgt``; returns ``(xT, x0_edited)``."""
    if cond_src == cond_tgt:
        raise ParameterError("source and target conditions are identical; nothing to edit")
    grid_up = uniform_grid(schedule, nfe, "inversion")
    inv = ddim_invert(x0, model, schedule, grid_up, guidance, cond_src)
    traj = sample(model, schedule, grid_up.mirrored(), guidance, SolverSpec("ddim"), cond=cond_tgt, x_T=inv.xT)
    return inv.xT, traj.x0
