"""Experiment configuration: flat ``dotted.key = value`` text, with a JSON mirror.

Every key has a documented default; unknown keys are rejected.  ``to_text``
writes every key in canonical form, so ``parse_config(cfg.to_text()) == cfg``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

from glab.errors import ConfigError, GlabError
from glab.guidance import MATCHED_SCALES, GuidanceMode, parse_guidance
from glab.schedule import NoiseSchedule, build_schedule
from glab.score_model import Condition, GaussianMixtureModel, parse_condition, ring_model
from glab.solvers import KINDS, NOISE_POLICIES, SolverSpec

EXPERIMENTS = ("sample", "invert", "roundtrip", "edit", "equiv-check", "inverse-problem", "sweep", "report")


def _choice(*options):
    def parse(v):
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v

    return parse, str


def _int(v):
    f = float(v)
    if not f.is_integer():
        raise ValueError("expected an integer")
    return int(f)


def _float(v):
    f = float(v)
    if not math.isfinite(f):
        raise ValueError("expected a finite number")
    return f


def _bool(v):
    s = str(v).strip().lower()
    if s in ("true", "1", "yes", "on"):
        return True
    if s in ("false", "0", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _seeds(v):
    out = []
    for part in str(v).replace(" ", "").split(","):
        if not part:
            continue
        if ".." in part:
            a, b = part.split("..")
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError(f"empty seed range {part}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    if not out or min(out) < 0:
        raise ValueError("need at least one non-negative seed")
    return tuple(out)


def _fmt_seeds(seeds):
    parts, i = [], 0
    while i < len(seeds):
        j = i
        while j + 1 < len(seeds) and seeds[j + 1] == seeds[j] + 1:
            j += 1
        parts.append(f"{seeds[i]}..{seeds[j]}" if j - i >= 2 else ",".join(map(str, seeds[i:j + 1])))
        i = j + 1
    return ",".join(parts)


def _ints(v):
    return tuple(int(p) for p in str(v).replace(" ", "").split(",") if p)


def _floats(v):
    return tuple(_float(p) for p in str(v).replace(" ", "").split(",") if p)


def _matrix(v):
    rows = [r for r in str(v).replace(" ", "").split(";") if r]
    return tuple(tuple(_float(x) for x in r.split(",")) for r in rows)


def _pairs(v):
    out = []
    for p in str(v).replace(" ", "").split(","):
        if p:
            lam, om = p.split(":")
            out.append((_float(lam), _float(om)))
    if not out:
        raise ValueError("need at least one lambda:omega pair")
    return tuple(out)


def _guidance(v):
    return _fmt_guidance(parse_guidance(str(v)))


def _fmt_guidance(mode):
    if isinstance(mode, str):
        return mode
    if mode.name == "uncond":
        return "uncond"
    return f"{mode.name}:{mode.scale!r}"


def _condition(v):
    return str(parse_condition(str(v)))


def _operator(v):
    s = str(v).strip().lower()
    kind, _, rest = s.partition(":")
    if kind == "identity" and not rest:
        return "identity"
    if kind == "mask":
        bits = _ints(rest)
        if not bits or any(b not in (0, 1) for b in bits):
            raise ValueError("mask needs 0/1 entries")
        return "mask:" + ",".join(map(str, bits))
    if kind == "matrix":
        return "matrix:" + _fmt_matrix(_matrix(rest))
    raise ValueError("expected identity, mask:<bits> or matrix:<rows>")


def _fmt_floats(xs):
    return ",".join(repr(float(x)) for x in xs)


def _fmt_matrix(rows):
    return ";".join(_fmt_floats(r) for r in rows)


_FLOAT = (_float, repr)
_INT = (_int, str)
_BOOL = (_bool, lambda b: "true" if b else "false")
_STR = (str, str)

# dotted key -> (attribute, default, (parse, format))
SCHEMA = {
    "experiment": ("experiment", "sample", _choice(*EXPERIMENTS)),
    "out": ("out", "glab-out", _STR),
    "seeds": ("seeds", (0,), (_seeds, _fmt_seeds)),
    "schedule.kind": ("schedule_kind", "vp-linear", _choice("vp-linear", "vp-cosine")),
    "schedule.T": ("schedule_T", 1000, _INT),
    "schedule.beta_min": ("beta_min", 1e-4, _FLOAT),
    "schedule.beta_max": ("beta_max", 0.02, _FLOAT),
    "model.preset": ("model_preset", "ring", _choice("ring", "explicit")),
    "model.K": ("model_K", 8, _INT),
    "model.radius": ("model_radius", 1.0, _FLOAT),
    "model.std": ("model_std", 0.1, _FLOAT),
    "model.dim": ("model_dim", 2, _INT),
    "model.means": ("model_means", (), (_matrix, _fmt_matrix)),
    "model.weights": ("model_weights", (), (_floats, _fmt_floats)),
    "grid.nfe": ("nfe", 50, _INT),
    "grid.direction": ("direction", "auto", _choice("auto", "sampling", "inversion")),
    "solver.kind": ("solver_kind", "ddim", _choice(*KINDS)),
    "solver.ancestral_noise": ("ancestral_noise", "sigma", _choice(*NOISE_POLICIES)),
    "solver.r_mid": ("r_mid", 0.5, _FLOAT),
    "guidance": ("guidance", "cfgpp:0.6", (_guidance, str)),
    "condition": ("condition", "class:0", (_condition, str)),
    "edit.target": ("edit_target", "class:1", (_condition, str)),
    "inverse.operator": ("operator", "mask:1,0", (_operator, str)),
    "inverse.noise_std": ("noise_std", 0.0, _FLOAT),
    "inverse.gamma": ("gamma", 0.5, _FLOAT),
    "inverse.mode": ("inverse_mode", "dds", _choice("dps", "dds")),
    "inverse.ramp": ("ramp", False, _BOOL),
    "roundtrip.nfes": ("roundtrip_nfes", (), (_ints, lambda xs: ",".join(map(str, xs)))),
    "sweep.pairs": ("pairs", MATCHED_SCALES, (_pairs, lambda ps: ",".join(f"{a!r}:{b!r}" for a, b in ps))),
    "report.batch": ("report_batch", 64, _INT),
    "report.condition": ("report_condition", "subset:0,1", (_condition, str)),
    "charts": ("charts", True, _BOOL),
}
_ATTR = {attr: key for key, (attr, _, _) in SCHEMA.items()}
HASH_EXCLUDED = ("out",)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "sample"
    out: str = "glab-out"
    seeds: tuple[int, ...] = (0,)
    schedule_kind: str = "vp-linear"
    schedule_T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    model_preset: str = "ring"
    model_K: int = 8
    model_radius: float = 1.0
    model_std: float = 0.1
    model_dim: int = 2
    model_means: tuple = ()
    model_weights: tuple = ()
    nfe: int = 50
    direction: str = "auto"
    solver_kind: str = "ddim"
    ancestral_noise: str = "sigma"
    r_mid: float = 0.5
    guidance: str = "cfgpp:0.6"
    condition: str = "class:0"
    edit_target: str = "class:1"
    operator: str = "mask:1,0"
    noise_std: float = 0.0
    gamma: float = 0.5
    inverse_mode: str = "dds"
    ramp: bool = False
    roundtrip_nfes: tuple[int, ...] = ()
    pairs: tuple[tuple[float, float], ...] = MATCHED_SCALES
    report_batch: int = 64
    report_condition: str = "subset:0,1"
    charts: bool = True

    # --- derived objects -------------------------------------------------
    def schedule(self) -> NoiseSchedule:
        if self.schedule_kind == "vp-linear":
            return build_schedule("vp-linear", self.schedule_T, beta_min=self.beta_min, beta_max=self.beta_max)
        return build_schedule(self.schedule_kind, self.schedule_T)

    def model(self) -> GaussianMixtureModel:
        if self.model_preset == "ring":
            return ring_model(self.model_K, self.model_radius, self.model_std, self.model_dim)
        w = self.model_weights or (1.0 / len(self.model_means),) * len(self.model_means)
        return GaussianMixtureModel(self.model_means, self.model_std, w)

    def guidance_mode(self) -> GuidanceMode:
        return parse_guidance(self.guidance)

    def cond(self) -> Condition:
        return parse_condition(self.condition)

    def solver(self) -> SolverSpec:
        return SolverSpec(self.solver_kind, self.ancestral_noise, self.r_mid)

    def nfes(self) -> tuple[int, ...]:
        return self.roundtrip_nfes or (self.nfe,)

    # --- serialization ---------------------------------------------------
    def items(self):
        for key, (attr, _, (_, fmt)) in SCHEMA.items():
            yield key, fmt(getattr(self, attr))

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def to_json(self) -> str:
        return json.dumps(dict(self.items()), indent=2) + "\n"

    def hash(self) -> str:
        body = "".join(f"{k} = {v}\n" for k, v in self.items() if k not in HASH_EXCLUDED)
        return hashlib.sha256(body.encode()).hexdigest()

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        return _build(dict(self.items()) | {k: v for k, v in overrides.items() if v is not None}, {})


def _flatten(obj, prefix=""):
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        elif isinstance(v, list):
            yield key, ",".join(";".join(map(str, x)) if isinstance(x, list) else str(x) for x in v)
        elif isinstance(v, bool):
            yield key, "true" if v else "false"
        else:
            yield key, v


def _build(raw: dict, lines: dict) -> ExperimentConfig:
    values = {}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", line=lines.get(key), key=key)
        attr, _, (parse, _) = SCHEMA[key]
        try:
            values[attr] = parse(value)
        except (ValueError, GlabError) as exc:
            raise ConfigError(f"bad value {value!r} for {key}: {exc}", line=lines.get(key), key=key) from None
    cfg = ExperimentConfig(**values)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig):
    def check(ok, key, msg):
        if not ok:
            raise ConfigError(msg, key=key)

    check(cfg.nfe >= 1, "grid.nfe", "nfe must be >= 1")
    check(cfg.nfe <= cfg.schedule_T, "grid.nfe", "nfe cannot exceed schedule.T")
    check(all(1 <= n <= cfg.schedule_T for n in cfg.roundtrip_nfes), "roundtrip.nfes", "each nfe must lie in [1, T]")
    check(cfg.model_std > 0, "model.std", "must be positive")
    check(cfg.noise_std >= 0, "inverse.noise_std", "must be >= 0")
    check(cfg.gamma > 0, "inverse.gamma", "must be > 0")
    check(cfg.report_batch >= 1, "report.batch", "must be >= 1")
    check(cfg.model_preset != "explicit" or len(cfg.model_means) > 0, "model.means", "explicit model needs means")
    need = {"invert": "inversion", "sample": "sampling", "inverse-problem": "sampling"}.get(cfg.experiment)
    check(cfg.direction in ("auto", need) or need is None, "grid.direction",
          f"{cfg.experiment} needs a {need} grid")
    # build everything once so semantic errors surface at parse time
    for key, build in (("schedule", cfg.schedule), ("model", cfg.model), ("guidance", cfg.guidance_mode),
                       ("condition", cfg.cond), ("solver", cfg.solver)):
        try:
            build()
        except GlabError as exc:
            raise ConfigError(str(exc), key=key) from None
    try:
        model = cfg.model()
        for c in (cfg.condition, cfg.edit_target, cfg.report_condition):
            parse_condition(c).mask(model.K)
    except GlabError as exc:
        raise ConfigError(str(exc), key="condition") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse flat ``key = value`` text (``#`` comments) or a JSON object, flat or nested."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
        return _build(dict(_flatten(obj)), {})
    raw, lines = {}, {}
    for n, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {line.strip()!r}", line=n)
        if key in raw:
            raise ConfigError(f"duplicate key {key!r}", line=n, key=key)
        raw[key], lines[key] = value.strip(), n
    return _build(raw, lines)


def default_config(**overrides) -> ExperimentConfig:
    cfg = dataclasses.replace(ExperimentConfig(), **overrides)
    _validate(cfg)
    return cfg
