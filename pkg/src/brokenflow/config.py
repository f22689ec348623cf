"""Pipeline configuration: INI sections mirroring the modules, unknown keys rejected."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError

STAGES = ("relation", "critical", "boundary_metric", "chord", "focusing", "assemble", "transport",
          "negative_control")

# section -> key -> (type, default)
SCHEMA = {
    "run": {
        "manifolds": (list, ["euclidean_ball", "hemisphere_s3", "conformal_ball"]),
        "stages": (list, list(STAGES)),
        "seed": (int, 0),
        "workers": (int, 1),
        "out": (str, "out"),
    },
    "relation": {
        "mesh_size": (int, 256),
        "depth_spacing": (float, 0.02),
        "angle_tol": (float, 0.02),
        "reversal_samples": (int, 10000),
        "replay_samples": (int, 1000),
    },
    "critical": {
        "points": (int, 200),
        "slack": (float, 2e-2),
        "tau_b_points": (int, 3),
        "witness_angle": (float, 0.1),
    },
    "boundary_metric": {
        "manifolds": (list, ["euclidean_ball"]),
        "levels": (list, [8, 16, 32, 64]),
    },
    "chord": {
        "N": (int, 32),
    },
    "focusing": {
        "patch_size": (int, 9),
        "accept": (float, 0.95),
        "anchors": (int, 4),
        "depths": (list, [0.3, 0.6, 0.9]),
        "shift": (float, 0.1),
        "tilt": (float, 0.2),
    },
    "assemble": {
        "manifolds": (list, ["euclidean_ball", "hemisphere_s3"]),
        "anchors": (int, 3),
        "stride": (int, 8),
        "offset": (int, 4),
        "dedupe": (float, 0.0),
        "quantile": (float, 0.25),
    },
    "transport": {
        "manifold": (str, "hemisphere_s3"),
        "sources": (int, 6),
        "source_radius": (float, 1.15),
        "observe_radius": (float, 1.3),
        "tilt": (float, 0.3),
        "scatter_spacing": (float, 0.1),
        "directions": (int, 40),
        "sigma_c0": (float, 0.1),
        "sigma_c2": (float, 0.2),
        "kernel_scale": (float, 2.0),
        "kernel_aniso": (float, 0.5),
        "match_tol": (float, 1e-3),
    },
    "negative_control": {
        "mesh_size": (int, 64),
        "depths": (list, [0.3, 0.6, 0.9]),
    },
}

_LIST_ITEM = {("run", "manifolds"): str, ("boundary_metric", "manifolds"): str,
              ("assemble", "manifolds"): str, ("run", "stages"): str, ("boundary_metric", "levels"): int,
              ("focusing", "depths"): float, ("negative_control", "depths"): float}


def _convert(section, key, typ, raw: str):
    try:
        if typ is list:
            item = _LIST_ITEM[(section, key)]
            return [item(v.strip()) for v in raw.replace(",", " ").split() if v.strip()]
        if typ is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return typ(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


@dataclass
class PipelineConfig:
    values: dict = field(default_factory=dict)
    source: Optional[str] = None

    def __getitem__(self, section):
        return self.values[section]

    def get(self, section, key):
        return self.values[section][key]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def out(self) -> Path:
        return Path(self.values["run"]["out"])

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for sec, items in self.values.items():
            cp[sec] = {k: " ".join(map(str, v)) if isinstance(v, list) else str(v) for k, v in items.items()}
        import io
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def override(self, section, key, value) -> "PipelineConfig":
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown key [{section}] {key}")
        vals = {s: dict(v) for s, v in self.values.items()}
        vals[section][key] = value
        return PipelineConfig(vals, self.source)


def defaults() -> PipelineConfig:
    return PipelineConfig({s: {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in keys.items()}
                           for s, keys in SCHEMA.items()})


def parse(text: str, source: Optional[str] = None) -> PipelineConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str            # keys are case-sensitive ([chord] N)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = defaults()
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        for key, raw in cp[sec].items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key [{sec}] {key}")
            cfg.values[sec][key] = _convert(sec, key, SCHEMA[sec][key][0], raw)
    bad = [s for s in cfg.values["run"]["stages"] if s not in STAGES]
    if bad:
        raise ConfigError(f"unknown stages {bad}; known: {list(STAGES)}")
    cfg.source = source
    return cfg


def load(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    return parse(path.read_text(), str(path))
