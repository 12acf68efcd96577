"""Experiment orchestration: one function per experiment kind, plus ``run``."""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import glab
from glab import rng as rngmod
from glab.diagnostics import (
    drift_decomposition,
    manifold_proxy,
    mean_ci,
    mode_coverage,
    track_loss,
)
from glab.errors import ConfigError, InvariantError
from glab.guidance import MATCHED_SCALES, Cfg, CfgPP, Uncond, equivalent_omega_schedule
from glab.harness.config import ExperimentConfig
from glab.harness.io import atomic_write, emit_csv, line_chart
from glab.inverse_problems import DisParams, LinearOperator, measure, solve_inverse
from glab.inversion import consistency_defects, ddim_invert, edit, roundtrip
from glab.schedule import uniform_grid
from glab.score_model import Class, parse_condition
from glab.solvers import sample

DATA_RUN = 1  # stream run slot for ground-truth draws, disjoint from sampler noise
EQUIV_TOL = 1e-9
DRIFT_TOL = 1e-9


def threads() -> int:
    raw = os.environ.get("GLAB_THREADS")
    if raw is None:
        return min(32, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"GLAB_THREADS must be an integer, got {raw!r}", key="GLAB_THREADS") from None
    if n < 1:
        raise ConfigError("GLAB_THREADS must be >= 1", key="GLAB_THREADS")
    return n


def pmap(fn, items):
    """Ordered parallel map with per-item wall-clock times."""

    def timed(item):
        t0 = time.perf_counter()
        out = fn(item)
        return out, time.perf_counter() - t0

    items = list(items)
    n = threads()
    if n == 1 or len(items) <= 1:
        res = [timed(i) for i in items]
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            res = list(pool.map(timed, items))
    return [r for r, _ in res], [dt for _, dt in res]


def mode_label(mode):
    return ("uncond", 0.0) if isinstance(mode, Uncond) else (mode.name, float(mode.scale))


def data_point(model, cond, seed):
    """Ground-truth clean sample for ``seed`` and its component."""
    return model.sample(cond, rngmod.stream(seed, DATA_RUN, 0))


def _xcols(prefix, d):
    return [f"{prefix}{i}" for i in range(d)]


def _xvals(prefix, x):
    return {f"{prefix}{i}": v for i, v in enumerate(np.ravel(x))}


@dataclass
class Outputs:
    out: Path
    files: list = field(default_factory=list)
    runs: list = field(default_factory=list)
    charts: bool = True

    def csv(self, name, rows, schema):
        self.files.append(str(emit_csv(self.out / name, rows, schema).name))

    def svg(self, name, series, **kw):
        if self.charts:
            self.files.append(str(atomic_write(self.out / name, line_chart(series, **kw)).name))

    def timed(self, ids, secs):
        self.runs.extend({"run_id": str(i), "seconds": s} for i, s in zip(ids, secs))


# ---------------------------------------------------------------------------


def exp_sample(cfg: ExperimentConfig, o: Outputs):
    sched, model, mode, cond, solver = cfg.schedule(), cfg.model(), cfg.guidance_mode(), cfg.cond(), cfg.solver()
    grid = uniform_grid(sched, cfg.nfe)

    def one(seed):
        traj = sample(model, sched, grid, mode, solver, seed=seed, cond=cond)
        trace = track_loss(traj, model, sched, cond)
        loss = dict(zip(trace.t.tolist(), trace.loss))
        drift = drift_decomposition(traj, model, sched, cond, mode) if solver.kind == "ddim" else []
        return traj, loss, drift

    results, secs = pmap(one, cfg.seeds)
    o.timed(cfg.seeds, secs)
    d = model.dim
    rows, drows = [], []
    for seed, (traj, loss, drift) in zip(cfg.seeds, results):
        for i, r in enumerate(traj.records):
            rows.append({"run_id": seed, "step": i, "t": r.t, "alpha_bar": r.alpha_bar, **_xvals("x", r.x),
                         "loss_sds": loss.get(r.t, float("nan")),
                         "manifold_proxy": float(manifold_proxy(r.xhat_guided, model))})
        for i, dr in enumerate(drift):
            if not dr.relative_residual <= DRIFT_TOL:
                raise InvariantError(f"drift identity residual {dr.relative_residual:.3g} at seed {seed}, step {i}")
            drows.append({"run_id": seed, "step": i, "t": dr.t, "d_xhat": np.linalg.norm(dr.d_xhat_direct),
                          "uncond_shift": np.linalg.norm(dr.uncond_shift),
                          "cond_shift": np.linalg.norm(dr.cond_shift), "rel_residual": dr.relative_residual})
    o.csv("trajectory.csv", rows, ["run_id", "step", "t", "alpha_bar", *_xcols("x", d), "loss_sds", "manifold_proxy"])
    if drows:
        o.csv("drift.csv", drows, ["run_id", "step", "t", "d_xhat", "uncond_shift", "cond_shift", "rel_residual"])
    traj, loss, drift = results[0]
    ts = sorted(loss)
    o.svg("loss.svg", {str(mode): (ts, [loss[t] for t in ts])}, title=f"normalized SDS loss, seed {cfg.seeds[0]}",
          xlabel="t", ylabel="loss", logy=True)
    if drift:
        t = [dr.t for dr in drift]
        o.svg("drift.svg", {"uncond shift": (t, [np.linalg.norm(dr.uncond_shift) for dr in drift]),
                            "cond shift": (t, [np.linalg.norm(dr.cond_shift) for dr in drift])},
              title="posterior-mean drift norms", xlabel="t", ylabel="norm", logy=True)


def exp_invert(cfg, o):
    sched, model, mode, cond = cfg.schedule(), cfg.model(), cfg.guidance_mode(), cfg.cond()
    grid_up = uniform_grid(sched, cfg.nfe, "inversion")

    def one(seed):
        x0, _ = data_point(model, cond, seed)
        res = ddim_invert(x0, model, sched, grid_up, mode, cond)
        return res, consistency_defects(res, mode, grid_up)

    results, secs = pmap(one, cfg.seeds)
    o.timed(cfg.seeds, secs)
    rows = []
    for seed, (res, (defects, shifts)) in zip(cfg.seeds, results):
        for j, st in enumerate(res.steps):
            last = j == len(res.steps) - 1
            rows.append({"run_id": seed, "step": j, "t": st.t, **_xvals("x", st.x),
                         "defect": None if last else defects[j], "shift_diff": None if last else shifts[j]})
    o.csv("inversion.csv", rows, ["run_id", "step", "t", *_xcols("x", model.dim), "defect", "shift_diff"])


def exp_roundtrip(cfg, o):
    sched, model, mode, cond = cfg.schedule(), cfg.model(), cfg.guidance_mode(), cfg.cond()
    name, scale = mode_label(mode)
    jobs = [(seed, nfe) for seed in cfg.seeds for nfe in cfg.nfes()]

    def one(job):
        seed, nfe = job
        x0, _ = data_point(model, cond, seed)
        return roundtrip(x0, model, sched, nfe, mode, cond)

    reps, secs = pmap(one, jobs)
    o.timed([f"{s}:{n}" for s, n in jobs], secs)
    rows = [{"run_id": f"{s}:{n}", "mode": name, "scale": scale, "nfe": n, "seed": s,
             "l2_error": float(r.l2_error), "db": float(r.db)} for (s, n), r in zip(jobs, reps)]
    o.csv("roundtrip.csv", rows, ["run_id", "mode", "scale", "nfe", "seed", "l2_error", "db"])
    if len(cfg.nfes()) > 1:
        nfes = list(cfg.nfes())
        means = [np.mean([r["l2_error"] for r in rows if r["nfe"] == n]) for n in nfes]
        o.svg("error_vs_nfe.svg", {str(mode): (nfes, means)}, title="round-trip error vs NFE",
              xlabel="NFE", ylabel="mean L2 error", logy=True)


def exp_edit(cfg, o):
    sched, model, mode = cfg.schedule(), cfg.model(), cfg.guidance_mode()
    src, tgt = cfg.cond(), parse_condition(cfg.edit_target)

    def one(seed):
        x0, comp = data_point(model, src, seed)
        xT, x_new = edit(x0, model, sched, cfg.nfe, mode, src, tgt)
        return x0, comp, xT, x_new

    results, secs = pmap(one, cfg.seeds)
    o.timed(cfg.seeds, secs)
    d = model.dim
    rows = [{"run_id": s, "seed": s, "source": str(src), "target": str(tgt), **_xvals("x0_", x0), **_xvals("xT_", xT),
             **_xvals("edited_", xe), "source_component": comp, "edited_component": int(model.nearest_component(xe))}
            for s, (x0, comp, xT, xe) in zip(cfg.seeds, results)]
    o.csv("edit.csv", rows, ["run_id", "seed", "source", "target", *_xcols("x0_", d), *_xcols("xT_", d),
                             *_xcols("edited_", d), "source_component", "edited_component"])


def max_rel_dev(a, b) -> float:
    """Largest per-step ``||a_i - b_i|| / ||b_i||`` over two state stacks."""
    num = np.linalg.norm(a - b, axis=-1)
    den = np.maximum(np.linalg.norm(b, axis=-1), np.finfo(float).tiny)
    return float(np.max(num / den))


def exp_equiv_check(cfg, o):
    mode = cfg.guidance_mode()
    if not isinstance(mode, CfgPP):
        raise ConfigError("equiv-check needs a cfgpp guidance", key="guidance")
    if cfg.solver_kind != "ddim":
        raise ConfigError("equiv-check compares DDIM trajectories", key="solver.kind")
    sched, model, cond = cfg.schedule(), cfg.model(), cfg.cond()
    grid = uniform_grid(sched, cfg.nfe)
    scheduled = equivalent_omega_schedule(mode.lam, sched, grid).mode()

    def one(seed):
        a = sample(model, sched, grid, mode, seed=seed, cond=cond).states()
        b = sample(model, sched, grid, scheduled, seed=seed, cond=cond).states()
        return max_rel_dev(b, a)

    devs, secs = pmap(one, cfg.seeds)
    o.timed(cfg.seeds, secs)
    dev = max(devs)
    ok = dev <= EQUIV_TOL
    o.csv("equivalence.csv", [{"lambda": mode.lam, "nfe": cfg.nfe, "max_rel_dev": dev, "pass": "PASS" if ok else "FAIL"}],
          ["lambda", "nfe", "max_rel_dev", "pass"])
    if not ok:
        worst = cfg.seeds[int(np.argmax(devs))]
        raise InvariantError(f"scheduled CFG deviates from CFG++ by {dev:.3g} (seed {worst})")


def parse_operator(text: str, dim: int) -> LinearOperator:
    kind, _, rest = text.partition(":")
    if kind == "identity":
        return LinearOperator.identity(dim)
    if kind == "mask":
        bits = [int(b) for b in rest.split(",")]
        if len(bits) != dim:
            raise ConfigError(f"mask has {len(bits)} entries for a {dim}-dimensional model", key="inverse.operator")
        return LinearOperator.masked(np.array(bits, dtype=bool))
    rows = [[float(v) for v in r.split(",")] for r in rest.split(";")]
    return LinearOperator.dense(rows)


def _counterpart(mode):
    for lam, om in MATCHED_SCALES:
        if isinstance(mode, CfgPP) and mode.lam == lam:
            return Cfg(om)
        if isinstance(mode, Cfg) and mode.omega == om:
            return CfgPP(lam)
    return None


def exp_inverse_problem(cfg, o):
    sched, model, cond = cfg.schedule(), cfg.model(), cfg.cond()
    grid = uniform_grid(sched, cfg.nfe)
    op = parse_operator(cfg.operator, model.dim)
    mode = cfg.guidance_mode()
    modes = [Uncond()] + ([] if isinstance(mode, Uncond) else [mode])
    if (other := _counterpart(mode)) is not None:
        modes.append(other)
    jobs = [(seed, m) for seed in cfg.seeds for m in modes]

    def one(job):
        seed, m = job
        x_true, _ = data_point(model, cond, seed)
        meas = measure(x_true, op, cfg.noise_std, rngmod.stream(seed, DATA_RUN, 1))
        params = DisParams(cfg.gamma, cfg.inverse_mode, m, cfg.ramp)
        _, rep = solve_inverse(model, sched, grid, meas, params, seed=seed, cond=cond, x_true=x_true)
        return rep

    reps, secs = pmap(one, jobs)
    o.timed([f"{s}:{m}" for s, m in jobs], secs)
    rows = [{"run_id": f"{s}:{m}", "seed": s, "mode": mode_label(m)[0], "scale": mode_label(m)[1],
             "residual": float(r.residual), "error": float(r.error)} for (s, m), r in zip(jobs, reps)]
    o.csv("inverse_problem.csv", rows, ["run_id", "seed", "mode", "scale", "residual", "error"])


def exp_sweep(cfg, o):
    sched, model, cond, solver = cfg.schedule(), cfg.model(), cfg.cond(), cfg.solver()
    grid = uniform_grid(sched, cfg.nfe)
    modes = [m for lam, om in cfg.pairs for m in (CfgPP(lam), Cfg(om))]
    jobs = [(m, seed) for m in modes for seed in cfg.seeds]

    def one(job):
        m, seed = job
        traj = sample(model, sched, grid, m, solver, seed=seed, cond=cond)
        x0, _ = data_point(model, cond, seed)
        rep = roundtrip(x0, model, sched, cfg.nfe, m, cond)
        proxy = np.mean([manifold_proxy(r.xhat_guided, model) for r in traj.records])
        return rep, proxy, int(model.nearest_component(traj.x0))

    res, secs = pmap(one, jobs)
    o.timed([f"{m}:{s}" for m, s in jobs], secs)
    rows = [{"mode": mode_label(m)[0], "scale": mode_label(m)[1], "seed": s, "l2_error": float(rep.l2_error),
             "db": float(rep.db), "manifold_proxy": proxy, "component": comp}
            for (m, s), (rep, proxy, comp) in zip(jobs, res)]
    o.csv("sweep.csv", rows, ["mode", "scale", "seed", "l2_error", "db", "manifold_proxy", "component"])
    idx = list(range(len(cfg.pairs)))
    series = {}
    for name, pos in (("cfgpp", 0), ("cfg", 1)):
        series[name] = (idx, [np.mean([r["l2_error"] for r in rows if r["mode"] == name and r["scale"] == p[pos]])
                              for p in cfg.pairs])
    o.svg("sweep_error.svg", series, title="round-trip error per matched pair", xlabel="pair index",
          ylabel="mean L2 error", logy=True)


# ---------------------------------------------------------------------------
# directional report

REPORT_PAIRS = {"sds_early_loss": (7.5, 0.6), "manifold_proxy": (12.5, 1.0), "mode_entropy": (7.5, 0.6)}


def directional_report(cfg: ExperimentConfig):
    """CFG vs CFG++ directional statistics with per-seed confidence intervals.

    Returns ``(metric_rows, direction_rows)``.  The comparisons are proxies at
    toy scale; only their sign is of interest.
    """
    sched, model = cfg.schedule(), cfg.model()
    grid = uniform_grid(sched, cfg.nfe)
    ent_cond = parse_condition(cfg.report_condition)
    early = max(1, grid.nfe // 5)

    def one(seed):
        cond = Class(seed % model.K)
        out = {}
        for metric, (om, lam) in REPORT_PAIRS.items():
            for m in (Cfg(om), CfgPP(lam)):
                if metric == "mode_entropy":
                    traj = sample(model, sched, grid, m, seed=seed, cond=ent_cond, batch=cfg.report_batch)
                    out[(metric, m.name)] = mode_coverage(traj.x0, model)[1]
                    continue
                traj = sample(model, sched, grid, m, seed=seed, cond=cond)
                if metric == "sds_early_loss":
                    out[(metric, m.name)] = float(track_loss(traj, model, sched, cond).loss[:early].mean())
                else:
                    out[(metric, m.name)] = float(np.mean([manifold_proxy(r.xhat_guided, model) for r in traj.records]))
        # oscillation witness on the same seed
        cfg_traj = sample(model, sched, grid, Cfg(7.5), seed=seed, cond=cond)
        terms = np.array([d.cond_shift for d in drift_decomposition(cfg_traj, model, sched, cond, Cfg(7.5))])
        out[("cfg_cond_shift_sign_change", "cfg")] = float(np.any((terms[1:] * terms[:-1]) < 0))
        pp_traj = sample(model, sched, grid, CfgPP(0.6), seed=seed, cond=cond)
        inner = [float(np.dot(r.xhat_cond - r.xhat_null, 0.6 * (r.xhat_cond - r.xhat_null))) for r in pp_traj.records]
        out[("cfgpp_cond_shift_alignment", "cfgpp")] = float(min(inner) >= 0)
        return out

    per_seed, _ = pmap(one, cfg.seeds)
    keys = list(per_seed[0])
    metric_rows = []
    for metric, name in keys:
        iv = mean_ci([s[(metric, name)] for s in per_seed])
        if metric in REPORT_PAIRS:
            om, lam = REPORT_PAIRS[metric]
            scale = om if name == "cfg" else lam
        else:
            scale = 7.5 if name == "cfg" else 0.6
        metric_rows.append({"metric": metric, "mode": name, "scale": scale, "n": iv.n,
                            "mean": iv.mean, "ci_lo": iv.lo, "ci_hi": iv.hi})
    direction_rows = []
    expected = {"sds_early_loss": "cfg >= cfgpp", "manifold_proxy": "cfg >= cfgpp", "mode_entropy": "cfg <= cfgpp"}
    for metric, exp in expected.items():
        gap = [s[(metric, "cfg")] - s[(metric, "cfgpp")] for s in per_seed]
        iv = mean_ci(gap)
        holds = iv.mean >= 0 if ">=" in exp else iv.mean <= 0
        direction_rows.append({"metric": metric, "expected": exp, "n": iv.n, "gap_mean": iv.mean,
                               "gap_ci_lo": iv.lo, "gap_ci_hi": iv.hi, "holds": holds})
    return metric_rows, direction_rows


def exp_report(cfg, o):
    t0 = time.perf_counter()
    metrics, directions = directional_report(cfg)
    o.runs.append({"run_id": "report", "seconds": time.perf_counter() - t0})
    o.csv("report.csv", metrics, ["metric", "mode", "scale", "n", "mean", "ci_lo", "ci_hi"])
    o.csv("directions.csv", directions, ["metric", "expected", "n", "gap_mean", "gap_ci_lo", "gap_ci_hi", "holds"])


EXPERIMENTS = {
    "sample": exp_sample,
    "invert": exp_invert,
    "roundtrip": exp_roundtrip,
    "edit": exp_edit,
    "equiv-check": exp_equiv_check,
    "inverse-problem": exp_inverse_problem,
    "sweep": exp_sweep,
    "report": exp_report,
}


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    experiment: str
    files: list
    runs: list
    total_seconds: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"


def run(cfg: ExperimentConfig) -> RunManifest:
    """Execute ``cfg.experiment`` into ``cfg.out``; the manifest is written last."""
    t0 = time.perf_counter()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    o = Outputs(out, charts=cfg.charts)
    atomic_write(out / "config.txt", cfg.to_text())
    o.files.append("config.txt")
    EXPERIMENTS[cfg.experiment](cfg, o)
    manifest = RunManifest(cfg.hash(), glab.__version__, cfg.experiment, o.files, o.runs, time.perf_counter() - t0)
    atomic_write(out / "manifest.json", manifest.to_json())
    return manifest
