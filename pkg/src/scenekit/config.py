"""Plain-text ``key = value`` configuration with per-module sections.

Every section maps onto a dataclass below; its field defaults are the
documented defaults.  Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional


@dataclass(frozen=True)
class CorrespondenceParams:
    cross_threshold: float = 0.5        # px
    static_threshold: float = 3.84      # px^2
    epipole_radius: float = 40.0        # px
    ransac_iters: int = 200
    n_samples: int = 1000


@dataclass(frozen=True)
class DbaParams:
    max_iters: int = 50
    damping: float = 1e-4
    tol: float = 1e-10
    stride: int = 4
    max_pixel_rms: float = 1.0          # px, a grid depth counts as solved below this


@dataclass(frozen=True)
class ScaleCovParams:
    length_scale: float = 0.15
    variance: float = 1.0
    sigma_n: float = 0.05
    n_obs_max: int = 1024


@dataclass(frozen=True)
class ScaleParams:
    ransac_iters: int = 256
    inlier_tol: float = 0.05
    max_landmarks: int = 400


@dataclass(frozen=True)
class NeuralPointParams:
    levels: int = 3
    r0: float = 0.005
    multiplier: float = 4.0
    feature_dim: int = 8
    k: int = 4
    lr: float = 1e-3
    n_train: int = 1024
    jump_start: bool = True


@dataclass(frozen=True)
class RasterParams:
    th: float = 0.05
    k_ray: int = 8
    sigma: float = 1.0


@dataclass(frozen=True)
class PipelineParams:
    keyframe_interval: int = 8
    window: int = 3                     # frames still owned by tracking
    n_patches: int = 256
    depth_gap: int = 2                  # frames between tracking depth refreshes
    mono_baseline: float = 0.1          # gauge: length of the first mono baseline
    tau_baseline: float = 0.05
    tau_facing: float = 0.0             # rad
    tau_nb: int = 2
    facing_greater: bool = True
    recon_steps: int = 50               # training steps per published frame
    recon_final_steps: int = 0


@dataclass(frozen=True)
class Config:
    seed: int = 0
    correspondence: CorrespondenceParams = field(default_factory=CorrespondenceParams)
    dba: DbaParams = field(default_factory=DbaParams)
    scalecov: ScaleCovParams = field(default_factory=ScaleCovParams)
    scale: ScaleParams = field(default_factory=ScaleParams)
    neuralpoints: NeuralPointParams = field(default_factory=NeuralPointParams)
    raster: RasterParams = field(default_factory=RasterParams)
    pipeline: PipelineParams = field(default_factory=PipelineParams)


SECTIONS = {f.name: f.default_factory for f in fields(Config) if f.name != "seed"}


class ConfigError(ValueError):
    pass


def _coerce(raw: str, typ, key: str):
    try:
        if typ in (bool, "bool"):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str, base: Optional[Config] = None) -> Config:
    cp = configparser.ConfigParser(default_section="__none__", interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = base or Config()
    updates = {}
    for sec in cp.sections():
        if sec == "global":
            for key, raw in cp[sec].items():
                if key != "seed":
                    raise ConfigError(f"unknown key [global] {key}")
                updates["seed"] = _coerce(raw, int, "seed")
            continue
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        current = getattr(cfg, sec)
        types = {f.name: f.type for f in fields(current)}
        vals = {}
        for key, raw in cp[sec].items():
            if key not in types:
                raise ConfigError(f"unknown key [{sec}] {key}")
            vals[key] = _coerce(raw, types[key], f"[{sec}] {key}")
        updates[sec] = replace(current, **vals)
    return replace(cfg, **updates)


def load_config(path=None, seed: Optional[int] = None) -> Config:
    cfg = Config() if path is None else parse_config(Path(path).read_text())
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def dump_config(cfg: Config) -> str:
    lines = ["[global]", f"seed = {cfg.seed}", ""]
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        obj = getattr(cfg, sec)
        for f in fields(obj):
            lines.append(f"{f.name} = {getattr(obj, f.name)}")
        lines.append("")
    return "\n".join(lines)
