import math

import numpy as np
import pytest

from glab import (
    Cfg,
    CfgPP,
    Class,
    GaussianMixtureModel,
    Null,
    ParameterError,
    ScheduledCfg,
    SingularityError,
    StepError,
    Uncond,
    uniform_grid,
)
from glab.guidance import equivalent_omega_schedule
from glab.schedule import alpha_bar_from_sigma
from glab.solvers import (
    KINDS,
    DpmSolverState,
    SolverSpec,
    ddim_step,
    ddim_update,
    dpmpp2m_step,
    dpmpp2m_update,
    dpmpp2s_step,
    dpmpp2s_update,
    euler_ancestral_step,
    euler_ancestral_update,
    euler_step,
    euler_update,
    evaluate,
    make_record,
    model_eps_fn,
    sample,
)

MODES = [Uncond(), Cfg(7.5), CfgPP(0.6), CfgPP(1.0), Cfg(0.0)]


def record(model, sched, x, t, mode, cond=Class(1), step=0):
    return evaluate(model_eps_fn(model, cond), x, t, sched.ab(t), mode, step)


def test_zero_scales_match_uncond_bitwise(ring, sched, grid50):
    for kind in ("ddim", "euler", "dpmpp-2m", "dpmpp-2s", "euler-ancestral"):
        base = sample(ring, sched, grid50, Uncond(), SolverSpec(kind), seed=3, cond=Class(2)).x0
        for mode in (Cfg(0.0), CfgPP(0.0)):
            assert np.array_equal(sample(ring, sched, grid50, mode, SolverSpec(kind), seed=3, cond=Class(2)).x0, base)


def test_unit_scales_differ_by_renoise_term(ring, sched, rng):
    x = rng.normal(size=2)
    rec = record(ring, sched, x, 600, Uncond())
    a = ddim_step(rec, Cfg(1.0), sched, 580)
    b = ddim_step(rec, CfgPP(1.0), sched, 580)
    expected = math.sqrt(1 - sched.ab(580)) * (rec.eps_cond - rec.eps_null)
    assert np.allclose(a - b, expected, rtol=0, atol=1e-12)


def test_ddim_hand_computed_step():
    # 1-D standard normal prior: eps_hat = sqrt(1 - ab) x, so xhat = sqrt(ab) x
    m = GaussianMixtureModel([[0.0]], 1.0, [1.0])
    ab, ab_prev, x = 0.36, 0.81, np.array([2.0])
    eps = m.eps(x, ab)
    assert eps[0] == pytest.approx(1.6, rel=1e-15)
    out = ddim_update(x, ab, ab_prev, eps, eps)
    # xhat = 1.2; 0.9 * 1.2 + sqrt(0.19) * 1.6
    assert out[0] == pytest.approx(1.08 + math.sqrt(0.19) * 1.6, rel=1e-15)


@pytest.mark.parametrize("mode", MODES + [ScheduledCfg((2.0, 5.0))])
def test_euler_equals_ddim(mode, ring, sched, rng):
    for _ in range(20):
        x = rng.normal(size=2) * 3
        t = int(rng.integers(2, 1001))
        t_prev = int(rng.integers(0, t))
        rec = record(ring, sched, x, t, mode, step=1)
        a = ddim_step(rec, mode, sched, t_prev, step=1)
        b = euler_step(rec, mode, sched, t_prev, step=1)
        assert np.linalg.norm(a - b) <= 1e-12 * max(np.linalg.norm(a), 1.0)


def test_euler_special_cases():
    x = np.array([0.4, -0.8])
    xhat = x / math.sqrt(0.3)
    assert np.allclose(euler_update(x, 0.3, 0.7, xhat, xhat), math.sqrt(0.7) * xhat, rtol=1e-15)
    assert np.allclose(euler_update(x, 0.3, 0.3, xhat * 0.5, xhat * 0.5), x, rtol=1e-15)
    with pytest.raises(SingularityError):
        euler_update(x, 1.0, 1.0, x, x)
    with pytest.raises(SingularityError):
        ddim_update(x, 0.0, 0.5, x, x)


@pytest.mark.parametrize("mode", MODES)
def test_ancestral_without_noise_is_euler(mode, ring, sched, rng):
    x = rng.normal(size=2)
    rec = record(ring, sched, x, 500, mode)
    a = euler_ancestral_step(rec, mode, sched, 300, t_d=300, noise=np.zeros(2))
    b = euler_step(rec, mode, sched, 300)
    assert np.allclose(a, b, rtol=1e-14, atol=1e-15)


def test_ancestral_needs_rng(ring, sched):
    rec = record(ring, sched, np.zeros(2), 500, Uncond())
    with pytest.raises(ParameterError):
        euler_ancestral_step(rec, Uncond(), sched, 300)
    with pytest.raises(ParameterError):
        euler_ancestral_step(rec, Uncond(), sched, 300, np.random.default_rng(0), t_d=600)


@pytest.mark.parametrize("policy", ["sigma", "sigma_up"])
def test_ancestral_one_step_variance(policy, gauss1, sched):
    t, t_prev = 600, 400
    rec = record(gauss1, sched, np.array([0.3, 0.2]), t, Uncond(), cond=Null())
    rng = np.random.default_rng(5)
    outs = np.array([euler_ancestral_step(rec, Uncond(), sched, t_prev, rng, policy=policy) for _ in range(10_000)])
    sigma, sigma_prev = sched.sigma(t), sched.sigma(t_prev)
    up = math.sqrt(sigma_prev**2 * (sigma**2 - sigma_prev**2) / sigma**2)
    amp = sigma if policy == "sigma" else up
    var = sched.ab(t_prev) * amp**2
    assert np.allclose(outs.var(axis=0), var, rtol=0.05)


def test_ancestral_last_step_is_noise_free():
    x = np.array([0.5, 0.5])
    a = euler_ancestral_update(x, 0.4, 1.0, x, x, np.ones(2) * 9)
    b = euler_ancestral_update(x, 0.4, 1.0, x, x, np.zeros(2))
    assert np.array_equal(a, b)


def test_ancestral_determinism(ring, sched):
    grid = uniform_grid(sched, 20)
    a = sample(ring, sched, grid, CfgPP(0.6), SolverSpec("euler-ancestral"), seed=9, cond=Class(0))
    b = sample(ring, sched, grid, CfgPP(0.6), SolverSpec("euler-ancestral"), seed=9, cond=Class(0))
    c = sample(ring, sched, grid, CfgPP(0.6), SolverSpec("euler-ancestral"), seed=10, cond=Class(0))
    assert np.array_equal(a.states(), b.states())
    assert not np.array_equal(a.x0, c.x0)


def test_dpm2m_first_step_is_euler(ring, sched, rng):
    x = rng.normal(size=2)
    rec = record(ring, sched, x, 700, Uncond())
    out, state = dpmpp2m_step(DpmSolverState(), rec, Uncond(), sched, 650)
    assert np.allclose(out, euler_step(rec, Uncond(), sched, 650), rtol=1e-13)
    assert np.array_equal(state.prev_denoised, rec.xhat_renoise)


def test_dpm2m_zero_step_is_identity(ring, sched, rng):
    x = rng.normal(size=2)
    rec = record(ring, sched, x, 700, Uncond())
    hist = DpmSolverState(rng.normal(size=2), 0.3)
    out, _ = dpmpp2m_update(hist, x, sched.ab(700), sched.ab(700), rec.xhat_guided, rec.xhat_renoise)
    assert np.allclose(out, x, rtol=1e-15)
    with pytest.raises(ParameterError):
        dpmpp2m_update(hist, x, sched.ab(600), sched.ab(700), rec.xhat_guided, rec.xhat_renoise)


@pytest.mark.parametrize("mode", [CfgPP(0.6), Cfg(3.0)])
def test_dpm2m_two_steps_against_formula(mode, ring, sched):
    """Two 2M steps re-evaluated from the multistep formula with independently recomputed estimates."""
    cond = Class(5)
    ts = [800, 600, 450]
    x0 = np.array([0.2, -0.9])
    st = DpmSolverState()
    x = x0
    for i in range(2):
        rec = record(ring, sched, x, ts[i], mode, cond=cond, step=i)
        x, st = dpmpp2m_step(st, rec, mode, sched, ts[i + 1], step=i)

    def lam(t):
        return -math.log(sched.sigma(t))

    def den(x, t):
        ab = sched.ab(t)
        e0, ec = ring.eps(x, ab), ring.eps(x, ab, cond)
        s = mode.scale
        d = (x - math.sqrt(1 - ab) * (e0 + s * (ec - e0))) / math.sqrt(ab)
        r = d if isinstance(mode, Cfg) else (x - math.sqrt(1 - ab) * e0) / math.sqrt(ab)
        return d, r

    # step 1: first order on the VE state
    ve = x0 / math.sqrt(sched.ab(800))
    d, r = den(x0, 800)
    h1 = lam(600) - lam(800)
    ve1 = d + math.exp(-h1) * (ve - r)
    r_prev = r
    x1 = math.sqrt(sched.ab(600)) * ve1
    d, r = den(x1, 600)
    h2 = lam(450) - lam(600)
    rr = h1 / h2
    ve2 = d - math.exp(-h2) * r + (1 - math.exp(-h2)) / (2 * rr) * (r - r_prev) + math.exp(-h2) * ve1
    assert np.allclose(x, math.sqrt(sched.ab(450)) * ve2, rtol=1e-12, atol=1e-14)


def test_dpm2s_forms_agree_without_guidance(ring, sched, rng):
    x = rng.normal(size=2)
    fn = model_eps_fn(ring, Class(3))
    outs = [dpmpp2s_update(x, sched.ab(700), sched.ab(500), fn, m) for m in (Uncond(), Cfg(0.0), CfgPP(0.0))]
    assert np.array_equal(outs[0], outs[1]) and np.array_equal(outs[0], outs[2])


def test_dpm2s_validation(ring, sched):
    rec = record(ring, sched, np.zeros(2), 700, Uncond())
    fn = model_eps_fn(ring, Class(1))
    for r in (0.0, 1.0, 1.5):
        with pytest.raises(ParameterError):
            dpmpp2s_step(rec, Uncond(), sched, 500, fn, r=r)
    with pytest.raises(ParameterError):
        SolverSpec("dpmpp-2s", r_mid=1.0)
    with pytest.raises(ParameterError):
        SolverSpec("heun")


def _two_s_over(model, x_ve, sig0, h, n_sub):
    fn = model_eps_fn(model, Null())
    lams = np.linspace(-math.log(sig0), -math.log(sig0) + h, n_sub + 1)
    abs_ = [alpha_bar_from_sigma(math.exp(-v)) for v in lams]
    x = math.sqrt(abs_[0]) * x_ve
    for i in range(n_sub):
        x = dpmpp2s_update(x, abs_[i], abs_[i + 1], fn, Uncond())
    return x / math.sqrt(abs_[-1])


def dpm2s_local_slope(model, sig0=1.0):
    """Least-squares slope of log(one-step error) vs log(h) against a 1e4-substep reference."""
    x_ve = np.array([1.3, -2.1])
    hs = 0.8 / 2.0 ** np.arange(5)
    errs = [np.linalg.norm(_two_s_over(model, x_ve, sig0, h, 1) - _two_s_over(model, x_ve, sig0, h, 10_000)) for h in hs]
    return np.polyfit(np.log(hs), np.log(errs), 1)[0], x_ve


def test_dpm2s_reference_matches_closed_form(gauss1):
    # affine denoiser: x_ve(sigma) - mu = (x_ve(sigma0) - mu) sqrt((s^2 + sigma^2) / (s^2 + sigma0^2))
    x_ve = np.array([1.3, -2.1])
    got = _two_s_over(gauss1, x_ve, 1.0, 0.8, 10_000)
    mu, s2, sig1 = gauss1.means[0], gauss1.std**2, math.exp(-0.8)
    exact = mu + (x_ve - mu) * math.sqrt((s2 + sig1**2) / (s2 + 1.0))
    assert np.allclose(got, exact, rtol=1e-9)


def test_cfgpp_conditional_enters_only_leading_term(ring, sched, rng):
    """Perturbing eps_cond moves the output by exactly sqrt(ab_prev) * change in the leading estimate."""
    mode = CfgPP(0.7)
    x = rng.normal(size=2)
    t, t_prev = 640, 600
    ab, ab_prev = sched.ab(t), sched.ab(t_prev)
    e0, ec = ring.eps(x, ab), ring.eps(x, ab, Class(6))
    bump = np.array([0.3, -0.2])
    base = make_record(x, t, ab, e0, ec, mode)
    moved = make_record(x, t, ab, e0, ec + bump, mode)
    assert np.array_equal(base.eps_renoise, moved.eps_renoise)
    assert np.array_equal(base.xhat_renoise, moved.xhat_renoise)
    shift = math.sqrt(ab_prev) * (moved.xhat_guided - base.xhat_guided)
    hist = DpmSolverState(rng.normal(size=2), 0.05)
    noise = rng.normal(size=2)
    steps = [
        lambda r: ddim_step(r, mode, sched, t_prev),
        lambda r: euler_step(r, mode, sched, t_prev),
        lambda r: euler_ancestral_step(r, mode, sched, t_prev, noise=noise),
        lambda r: dpmpp2m_step(hist, r, mode, sched, t_prev)[0],
    ]
    for step in steps:
        assert np.allclose(step(moved) - step(base), shift, rtol=1e-10, atol=1e-13)
    _, s_base = dpmpp2m_step(hist, base, mode, sched, t_prev)
    _, s_moved = dpmpp2m_step(hist, moved, mode, sched, t_prev)
    assert np.array_equal(s_base.prev_denoised, s_moved.prev_denoised)


def test_trajectory_shape_and_order(ring, sched, grid50):
    tr = sample(ring, sched, grid50, CfgPP(0.6), seed=1, cond=Class(0))
    ts = tr.timesteps()
    assert ts[0] == 1000 and ts[-1] == 0 and len(ts) == 51
    assert all(a > b for a, b in zip(ts, ts[1:]))
    assert tr.states().shape == (51, 2)


def test_determinism_and_ddim_euler_agreement(ring, sched, grid50):
    a = sample(ring, sched, grid50, Cfg(4.0), SolverSpec("ddim"), seed=21, cond=Class(3))
    b = sample(ring, sched, grid50, Cfg(4.0), SolverSpec("ddim"), seed=21, cond=Class(3))
    c = sample(ring, sched, grid50, Cfg(4.0), SolverSpec("euler"), seed=21, cond=Class(3))
    assert np.array_equal(a.states(), b.states())
    assert np.allclose(a.states(), c.states(), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_interpolation_identity_every_record(kind, ring, sched, grid50):
    for lam in (0.0, 0.3, 1.0):
        tr = sample(ring, sched, grid50, CfgPP(lam), SolverSpec(kind), seed=4, cond=Class(7))
        for r in tr.records:
            assert np.allclose(r.xhat_guided, (1 - lam) * r.xhat_null + lam * r.xhat_cond, rtol=0, atol=1e-12)


def test_batch_matches_single(ring, sched, grid50):
    x_T = np.random.default_rng(0).normal(size=(4, 2))
    batch = sample(ring, sched, grid50, CfgPP(0.6), x_T=x_T, cond=Class(2)).x0
    for i in range(4):
        one = sample(ring, sched, grid50, CfgPP(0.6), x_T=x_T[i], cond=Class(2)).x0
        assert np.allclose(batch[i], one, rtol=1e-13, atol=1e-15)


def test_errors_carry_step_index(ring, sched, grid50):
    calls = {"n": 0}

    def flaky(x, ab):
        calls["n"] += 1
        if calls["n"] == 4:
            raise SingularityError("boom")
        return ring.eps(x, ab), ring.eps(x, ab, Class(0))

    with pytest.raises(StepError) as err:
        sample(ring, sched, grid50, Uncond(), eps_fn=flaky)
    assert err.value.step == 3 and err.value.t == grid50.indices[3]
    with pytest.raises(ParameterError):
        sample(ring, sched, grid50, ScheduledCfg((1.0, 2.0)))
    with pytest.raises(ParameterError):
        sample(ring, sched, grid50.mirrored(), Uncond())


def test_scheduled_cfg_runs_under_all_solvers(ring, sched, grid50):
    mode = equivalent_omega_schedule(0.5, sched, grid50).mode()
    for kind in KINDS:
        assert np.all(np.isfinite(sample(ring, sched, grid50, mode, SolverSpec(kind), seed=2, cond=Class(1)).x0))
