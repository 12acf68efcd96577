"""``glab <experiment> [--config PATH] [overrides...]``.

Exit codes: 0 success, 2 configuration error, 3 invariant failure, 4 IO error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from glab.errors import ConfigError, GlabError, InvariantError, ParameterError, StepError
from glab.harness.config import EXPERIMENTS, ExperimentConfig, parse_config
from glab.harness.experiments import run

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_IO = 0, 2, 3, 4

# flag -> config key
FLAGS = {
    "solver": "solver.kind",
    "guidance": "guidance",
    "nfe": "grid.nfe",
    "seed": "seeds",
    "seeds": "seeds",
    "out": "out",
    "ancestral_noise": "solver.ancestral_noise",
    "condition": "condition",
    "target": "edit.target",
    "operator": "inverse.operator",
    "noise_std": "inverse.noise_std",
    "gamma": "inverse.gamma",
    "mode": "inverse.mode",
    "nfes": "roundtrip.nfes",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glab", description="Guidance experiments on analytic Gaussian-mixture priors.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", type=Path, help="key = value or JSON config file")
    p.add_argument("--solver")
    p.add_argument("--guidance", help="uncond | cfg:W | cfgpp:L")
    p.add_argument("--nfe")
    p.add_argument("--seed", help="single seed")
    p.add_argument("--seeds", help="seed list, e.g. 0..99 or 1,5,9")
    p.add_argument("--out")
    p.add_argument("--ancestral-noise", dest="ancestral_noise", help="sigma | sigma_up")
    p.add_argument("--condition")
    p.add_argument("--target", help="edit target condition")
    p.add_argument("--operator", help="identity | mask:1,0 | matrix:a,b;c,d")
    p.add_argument("--noise-std", dest="noise_std")
    p.add_argument("--gamma")
    p.add_argument("--mode", help="dps | dds")
    p.add_argument("--nfes", help="round-trip NFE list")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    return p


def load(args) -> ExperimentConfig:
    base = parse_config(args.config.read_text(encoding="utf-8")) if args.config else ExperimentConfig()
    overrides = {"experiment": args.experiment}
    for flag, key in FLAGS.items():
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    return base.with_overrides(overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args)
    except OSError as exc:
        print(f"glab: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    except ParameterError as exc:
        print(f"glab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = run(cfg)
    except (InvariantError, StepError) as exc:
        print(f"glab: invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except ParameterError as exc:
        print(f"glab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"glab: IO error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GlabError as exc:
        print(f"glab: invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"{cfg.experiment}: wrote {len(manifest.files)} files to {cfg.out} (config {manifest.config_hash[:12]})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
