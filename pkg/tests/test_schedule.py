import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glab import ParameterError, ScheduleIndexError, build_schedule, uniform_grid
from glab.schedule import TimestepGrid, alpha_bar_from_sigma, sigma_from_alpha_bar, sigma_ve

# exp(sum log(1 - beta_s)) at 40 digits for the default linear schedule
AB_1000 = 4.0358297653756833e-05
AB_500 = 0.078587242881778237


def test_default_tail_matches_log_sum(sched):
    betas = np.linspace(1e-4, 0.02, 1000)
    log_sum = math.fsum(math.log1p(-b) for b in betas)
    assert sched.ab(1000) == pytest.approx(math.exp(log_sum), rel=1e-12)
    assert sched.ab(1000) == pytest.approx(AB_1000, rel=1e-12)
    assert sched.ab(500) == pytest.approx(AB_500, rel=1e-12)
    assert sched.ab(1000) < 1e-3


def test_single_factor():
    s = build_schedule("vp-linear", 1, beta_min=0.1, beta_max=0.1)
    assert s.ab(0) == 1.0
    assert s.ab(1) == pytest.approx(0.9, abs=1e-15)


@pytest.mark.parametrize("kind", ["vp-linear", "vp-cosine"])
def test_monotone_everywhere(kind):
    s = build_schedule(kind)
    ab = s.alpha_bar
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert np.all(ab > 0) and np.all(ab <= 1)
    sig = np.array([s.sigma(t) for t in range(s.T + 1)])
    assert np.all(np.diff(sig) > 0)
    assert ab[-1] < 1e-3


def test_cosine_floor():
    s = build_schedule("vp-cosine")
    assert s.ab(s.T) >= 1e-5
    assert math.isfinite(s.sigma(s.T))


@pytest.mark.parametrize("kw", [dict(beta_min=0.0), dict(beta_min=0.02, beta_max=0.01), dict(beta_max=1.0)])
def test_bad_betas(kw):
    with pytest.raises(ParameterError):
        build_schedule("vp-linear", 10, **kw)


def test_bad_T_and_kind():
    with pytest.raises(ParameterError):
        build_schedule("vp-linear", 0)
    with pytest.raises(ParameterError):
        build_schedule("ve-karras")


def test_alpha_bar_is_read_only(sched):
    with pytest.raises(ValueError):
        sched.alpha_bar[3] = 0.5


def test_sigma_values():
    assert sigma_from_alpha_bar(1.0) == 0.0
    assert sigma_from_alpha_bar(0.5) == pytest.approx(1.0, abs=1e-15)
    assert sigma_from_alpha_bar(0.25) == pytest.approx(1.7320508075688773, rel=1e-15)


def test_sigma_ve_index_checks(sched):
    assert sigma_ve(sched, 0) == 0.0
    for t in (-1, 1001):
        with pytest.raises(ScheduleIndexError):
            sigma_ve(sched, t)


@given(st.floats(1e-9, 1 - 1e-9))
def test_sigma_round_trip(ab):
    assert alpha_bar_from_sigma(sigma_from_alpha_bar(ab)) == pytest.approx(ab, rel=1e-12)


def test_half_log_snr(sched):
    assert sched.half_log_snr(0) == math.inf
    assert sched.half_log_snr(500) == pytest.approx(-math.log(sched.sigma(500)))


def test_grid_examples(sched):
    g = uniform_grid(sched, 50)
    assert len(g.indices) == 51 and g.indices[0] == 1000 and g.indices[-1] == 0 and g.nfe == 50
    small = build_schedule("vp-linear", 10)
    assert list(uniform_grid(small, 10, "inversion").indices) == list(range(11))
    assert list(uniform_grid(sched, 1).indices) == [1000, 0]
    with pytest.raises(ParameterError):
        uniform_grid(small, 11)


def test_grid_validation():
    with pytest.raises(ParameterError):
        TimestepGrid((10, 10, 0), "sampling")
    with pytest.raises(ParameterError):
        TimestepGrid((10, 5), "sampling")
    with pytest.raises(ParameterError):
        TimestepGrid((1, 5), "inversion")


@settings(max_examples=40)
@given(st.integers(1, 1000))
def test_grid_mirror(nfe):
    s = build_schedule()
    up = uniform_grid(s, nfe, "inversion")
    down = uniform_grid(s, nfe)
    assert up.mirrored() == down
    assert len(set(down.indices)) == nfe + 1
