"""Discrete VP noise schedules, timestep grids and VP/VE conversions.

Index convention: ``alpha_bar[0] == 1`` is clean data and ``alpha_bar[T]`` is
(almost) pure noise.  The variance-exploding view of the same process uses
``sigma_t = sqrt(1 - alpha_bar_t) / sqrt(alpha_bar_t)`` and the state
``x_ve = x_vp / sqrt(alpha_bar_t)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from glab.errors import ParameterError, ScheduleIndexError

COSINE_OFFSET = 0.008
COSINE_FLOOR = 1e-5


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    alpha_bar: np.ndarray = field(repr=False)
    beta_min: float | None = None
    beta_max: float | None = None

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.T + 1,):
            raise ParameterError(f"alpha_bar must have T+1={self.T + 1} entries, got {ab.shape}")
        ab = ab.copy()
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    def check_index(self, t: int) -> int:
        if isinstance(t, (bool, np.bool_)) or int(t) != t:
            raise ScheduleIndexError(f"timestep must be an integer, got {t!r}")
        t = int(t)
        if not 0 <= t <= self.T:
            raise ScheduleIndexError(f"timestep {t} outside [0, {self.T}]")
        return t

    def ab(self, t: int) -> float:
        return float(self.alpha_bar[self.check_index(t)])

    def sigma(self, t: int) -> float:
        return sigma_from_alpha_bar(self.ab(t))

    def half_log_snr(self, t: int) -> float:
        """Solver time ``-log sigma_ve``; +inf at t = 0."""
        s = self.sigma(t)
        return math.inf if s == 0.0 else -math.log(s)


def sigma_from_alpha_bar(ab: float) -> float:
    return math.sqrt(1.0 - ab) / math.sqrt(ab)


def alpha_bar_from_sigma(sigma: float) -> float:
    return 1.0 / (1.0 + sigma * sigma)


def build_schedule(kind: str = "vp-linear", T: int = 1000, **params) -> NoiseSchedule:
    """Build a discrete schedule.

    ``vp-linear`` takes ``beta_min`` and ``beta_max`` (defaults 1e-4 and 0.02)
    and uses the cumulative product of ``1 - beta_s`` over linearly spaced
    betas.  ``vp-cosine`` uses the squared-cosine curve with offset 0.008,
    affinely lifted so that the last value equals ``1e-5`` while staying
    strictly decreasing.
    """
    if isinstance(T, bool) or int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if kind == "vp-linear":
        beta_min = float(params.pop("beta_min", 1e-4))
        beta_max = float(params.pop("beta_max", 0.02))
        if params:
            raise ParameterError(f"unknown vp-linear parameters: {sorted(params)}")
        if not 0.0 < beta_min <= beta_max < 1.0:
            raise ParameterError(
                f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
        ab = np.empty(T + 1)
        ab[0] = 1.0
        ab[1:] = np.cumprod(1.0 - betas)
        return NoiseSchedule("vp-linear", T, ab, beta_min, beta_max)
    if kind == "vp-cosine":
        if params:
            raise ParameterError(f"unknown vp-cosine parameters: {sorted(params)}")
        s = COSINE_OFFSET
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1.0 + s) * math.pi / 2.0) ** 2
        ratio = f / f[0]
        ab = COSINE_FLOOR + (1.0 - COSINE_FLOOR) * ratio
        ab[0] = 1.0
        return NoiseSchedule("vp-cosine", T, ab)
    raise ParameterError(f"unknown schedule kind {kind!r}")


def sigma_ve(schedule: NoiseSchedule, t: int) -> float:
    return schedule.sigma(t)


@dataclass(frozen=True)
class TimestepGrid:
    indices: tuple[int, ...]
    direction: str  # "sampling" (descending) or "inversion" (ascending)

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if len(idx) < 2:
            raise ParameterError("a grid needs at least two timesteps")
        diffs = np.diff(idx)
        if self.direction == "sampling":
            if not np.all(diffs < 0) or idx[-1] != 0:
                raise ParameterError("sampling grids must strictly descend to t=0")
        elif self.direction == "inversion":
            if not np.all(diffs > 0) or idx[0] != 0:
                raise ParameterError("inversion grids must strictly ascend from t=0")
        else:
            raise ParameterError(f"unknown grid direction {self.direction!r}")

    @property
    def nfe(self) -> int:
        return len(self.indices) - 1

    def pairs(self):
        """Consecutive ``(t, t_next)`` pairs in grid order."""
        return list(zip(self.indices[:-1], self.indices[1:]))

    def mirrored(self) -> "TimestepGrid":
        other = "inversion" if self.direction == "sampling" else "sampling"
        return TimestepGrid(self.indices[::-1], other)


def uniform_grid(schedule: NoiseSchedule, nfe: int, direction: str = "sampling") -> TimestepGrid:
    if isinstance(nfe, bool) or int(nfe) != nfe or nfe < 1:
        raise ParameterError(f"nfe must be a positive integer, got {nfe!r}")
    if nfe > schedule.T:
        raise ParameterError(f"nfe={nfe} exceeds T={schedule.T}")
    idx = np.rint(np.linspace(0.0, schedule.T, int(nfe) + 1)).astype(int)
    if direction == "sampling":
        idx = idx[::-1]
    return TimestepGrid(tuple(idx.tolist()), direction)
