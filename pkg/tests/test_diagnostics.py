import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glab import Cfg, CfgPP, Class, Null, ParameterError, ScheduledCfg, Subset, Uncond, uniform_grid
from glab.diagnostics import (
    LossTrace,
    denoising_gap,
    drift_decomposition,
    manifold_proxy,
    mean_ci,
    mode_coverage,
    normalized_sds_loss,
    sds_loss,
    track_loss,
    weight_entropy,
)
from glab.guidance import equivalent_omega_schedule
from glab.score_model import GaussianMixtureModel
from glab.solvers import SolverSpec, sample


@settings(max_examples=200, deadline=None)
@given(t=st.integers(1, 1000), seed=st.integers(0, 2**31), k=st.integers(-1, 7))
def test_normalization_identity(t, seed, k, ring, sched):
    g = np.random.default_rng(seed)
    x, eps = g.normal(size=2), g.normal(size=2)
    cond = Null() if k < 0 else Class(k)
    a = normalized_sds_loss(ring, sched, x, cond, t, eps)
    b = denoising_gap(ring, sched, x, cond, t, eps)
    assert a == pytest.approx(b, rel=1e-10, abs=1e-12)


def test_small_noise_limit(gauss1, sched, rng):
    # near t = 1 the clean estimate of x_t sits at x shrunk slightly toward the mean
    x, eps = rng.normal(size=2), rng.normal(size=2)
    ab = sched.ab(1)
    xt = math.sqrt(ab) * x + math.sqrt(1 - ab) * eps
    assert denoising_gap(gauss1, sched, x, Null(), 1, eps) < 1e-3
    assert np.linalg.norm(gauss1.posterior_mean(xt, ab) - x) < 3e-2


def test_loss_zero_at_fixed_point(gauss1, sched):
    # for a point-mass-like target the predicted noise equals the injected noise exactly
    point = GaussianMixtureModel([[0.3, -0.2]], 1e-8, [1.0])
    x = np.array([0.3, -0.2])
    eps = np.array([0.4, 1.1])
    for t in (1, 200, 900):
        assert sds_loss(point, sched, x, Null(), t, eps) < 1e-12
    with pytest.raises(ParameterError):
        sds_loss(gauss1, sched, x, Null(), 0, eps)
    with pytest.raises(ParameterError):
        sds_loss(gauss1, sched, x, Null(), 1001, eps)


def test_loss_trace_nonnegative():
    with pytest.raises(ParameterError):
        LossTrace(np.array([1, 2]), np.array([0.1, -1e-3]))


def test_zero_scale_traces_match(ring, sched, grid50):
    for seed in range(5):
        a = track_loss(sample(ring, sched, grid50, CfgPP(0.0), seed=seed, cond=Class(1)), ring, sched, Class(1))
        b = track_loss(sample(ring, sched, grid50, Cfg(0.0), seed=seed, cond=Class(1)), ring, sched, Class(1))
        assert np.array_equal(a.loss, b.loss) and np.array_equal(a.t, b.t)
        assert a.t.min() >= 1


def test_single_gaussian_tail_decreases(sched, grid50):
    m = GaussianMixtureModel([[0.5, -0.5]], 1.0, [1.0])
    traces = np.array([track_loss(sample(m, sched, grid50, Uncond(), seed=s), m, sched, Null()).loss
                       for s in range(50)])
    start = int(0.8 * traces.shape[1])
    assert np.all(np.isfinite(traces))
    assert np.all(np.diff(traces.mean(axis=0)[start:]) < 0)
    assert np.all(traces[:, -1] < traces[:, start])


def _traj(mode, ring, sched, grid, seed, cond):
    return sample(ring, sched, grid, mode, seed=seed, cond=cond)


@pytest.mark.parametrize("mode", [Cfg(7.5), CfgPP(0.6), Cfg(0.0), CfgPP(1.0), Uncond()])
def test_drift_identity(mode, ring, sched, grid50):
    for seed in range(10):
        cond = Class(seed % 8)
        recs = drift_decomposition(_traj(mode, ring, sched, grid50, seed, cond), ring, sched, cond, mode)
        assert len(recs) == 50
        assert max(r.relative_residual for r in recs) <= 1e-9


def test_drift_identity_scheduled(ring, sched, grid50):
    mode = ScheduledCfg(equivalent_omega_schedule(0.6, sched, grid50).omega)
    recs = drift_decomposition(_traj(mode, ring, sched, grid50, 3, Class(2)), ring, sched, Class(2), mode)
    assert max(r.relative_residual for r in recs) <= 1e-9


def test_zero_lambda_has_no_cond_shift(ring, sched, grid50):
    recs = drift_decomposition(_traj(CfgPP(0.0), ring, sched, grid50, 1, Class(0)), ring, sched, Class(0), CfgPP(0.0))
    assert all(not np.any(r.cond_shift) for r in recs)


def test_drift_rejects_mismatch(ring, sched, grid50):
    traj = _traj(Cfg(7.5), ring, sched, grid50, 0, Class(0))
    with pytest.raises(ParameterError):
        drift_decomposition(traj, ring, sched, Class(0), CfgPP(0.6))
    with pytest.raises(ParameterError):
        drift_decomposition(traj, ring, sched, Class(0), Cfg(5.0))
    euler = sample(ring, sched, grid50, Cfg(7.5), SolverSpec("euler"), seed=0, cond=Class(0))
    with pytest.raises(ParameterError):
        drift_decomposition(euler, ring, sched, Class(0), Cfg(7.5))


def test_oscillation_witness(ring, sched, grid50):
    traj = _traj(Cfg(7.5), ring, sched, grid50, 0, Class(0))
    terms = np.array([r.cond_shift for r in drift_decomposition(traj, ring, sched, Class(0), Cfg(7.5))])
    assert np.any(terms[1:] * terms[:-1] < 0)
    pp = _traj(CfgPP(0.6), ring, sched, grid50, 0, Class(0))
    for r in pp.records:
        delta = r.xhat_cond - r.xhat_null
        assert np.dot(0.6 * delta, delta) >= 0
        # the guided estimate sits on the segment between the two estimates
        assert np.allclose(r.xhat_guided - r.xhat_null, 0.6 * delta, atol=1e-12)


def test_manifold_proxy(ring):
    assert manifold_proxy(ring.means[3], ring) == 0.0
    assert manifold_proxy(np.zeros(2), ring) == pytest.approx(1.0 / ring.std)
    assert manifold_proxy(np.array([3.0, 0.0]), ring) == pytest.approx(2.0 / ring.std)
    batch = manifold_proxy(np.stack([ring.means[0], np.zeros(2)]), ring)
    assert batch.shape == (2,)


def test_mode_coverage_extremes(ring):
    freq, h = mode_coverage(np.repeat(ring.means[:1], 20, axis=0), ring)
    assert h == 0.0 and freq[0] == 1.0
    freq, h = mode_coverage(np.repeat(ring.means, 5, axis=0), ring)
    assert h == pytest.approx(math.log(8)) and weight_entropy(ring) == pytest.approx(math.log(8))
    with pytest.raises(ParameterError):
        mode_coverage(np.zeros((0, 2)), ring)


def test_mode_coverage_matches_prior(ring, sched):
    traj = sample(ring, sched, uniform_grid(sched, 50), Uncond(), seed=11, batch=10_000)
    _, h = mode_coverage(traj.x0, ring)
    assert abs(h - weight_entropy(ring)) <= 0.05


def test_subset_entropy_bound(ring, sched, grid50):
    traj = sample(ring, sched, grid50, CfgPP(0.6), seed=2, cond=Subset((0, 1)), batch=2000)
    _, h = mode_coverage(traj.x0, ring)
    assert h <= math.log(2) + 0.02


def test_mean_ci():
    iv = mean_ci([1.0, 2.0, 3.0, 4.0])
    assert iv.mean == 2.5 and iv.n == 4
    assert iv.hi - iv.mean == pytest.approx(1.96 * np.std([1, 2, 3, 4], ddof=1) / 2)
    one = mean_ci([5.0])
    assert one.lo == one.hi == 5.0
