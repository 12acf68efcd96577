"""Configuration, experiment orchestration, CSV/SVG emission and the ``glab`` CLI."""

from glab.harness.config import ExperimentConfig, default_config, parse_config
from glab.harness.experiments import RunManifest, directional_report, run
from glab.harness.io import emit_csv, line_chart

__all__ = ["ExperimentConfig", "RunManifest", "default_config", "directional_report", "emit_csv", "line_chart",
           "parse_config", "run"]
