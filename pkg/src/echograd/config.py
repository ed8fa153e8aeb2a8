"""Run configuration: dataclasses, presets, key=value files, validation.

A run is described by a flat ``section.key = value`` text file.  Presets
bake complete experiment setups; an explicit config file and then
command-line flags override preset values.  All defaults follow the
standard sensor setup: 1 degree horizontal and 50 degree vertical
openings, 30 degree tilt, 50 m maximum slant range, 256 bins.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

import numpy as np

from .renderer import RenderParams
from .reconstruct import AdamConfig, LossSpec
from .scene import Heightfield, make_dome_scene, make_flat_scene, make_rocky_scene
from .sonar import (BeamPattern, SonarIntrinsics, SonarPose, SurveyLeg,
                    intrinsics_from_fov, make_box_survey, make_survey_lines)


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class SceneConfig:
    kind: str = "dome"            # dome | rocky | flat
    nx: int = 49
    ny: int = 49
    cell_size: float = 0.5
    depth: float = 20.0           # seafloor (dome/flat) or base depth (rocky)
    dome_radius: float = 5.0
    seed: int = 0
    amplitude: float = 4.0        # rocky roughness, metres
    smooth_cells: float = 3.0
    depth_min: float = 9.0
    depth_max: float = 25.0


@dataclass
class SurveyConfig:
    kind: str = "box"             # box | line
    standoff: float = 16.0
    half_length: float = 15.0
    spacing: float = 0.75
    z: float = 0.0
    start_x: float = 0.0          # line survey only
    start_y: float = 0.0
    end_x: float = 10.0
    end_y: float = 0.0


@dataclass
class SonarConfig:
    phi_deg: float = 1.0
    alpha_deg: float = 50.0
    tilt_deg: float = 30.0
    max_range: float = 50.0
    bins: int = 256
    k_phi: float = 159.46
    phi0_deg: float = 0.5


@dataclass
class RenderConfig:
    k_faces: int = 8
    top_m: int = 0                # 0 means "all"
    sigma: float = 1e-4
    gamma: float = 0.0            # 0 means (2 * bin width)^2
    width: int = 4
    use_beam_pattern: bool = True
    occlusion_tolerance: float = 0.0   # 0 means sqrt(gamma)
    spreading_loss: bool = False


@dataclass
class InitConfig:
    kind: str = "flat"            # flat | file
    depth: float = 20.0
    path: str = ""


@dataclass
class RunSection:
    epochs: int = 100
    seed: int = 0
    threads: int = 0              # 0 means all available cores
    checkpoint_every: int = 10
    freeze_boundary: bool = True
    albedo: float = 1.0
    grad_eps: float = 1e-4
    grad_tol: float = 1e-4


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    survey: SurveyConfig = field(default_factory=SurveyConfig)
    sonar: SonarConfig = field(default_factory=SonarConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    init: InitConfig = field(default_factory=InitConfig)
    run: RunSection = field(default_factory=RunSection)
    lambda_nc: float = 1e-2
    adam_lr: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999

    # -- object factories -------------------------------------------------

    def intrinsics(self) -> SonarIntrinsics:
        return intrinsics_from_fov(np.deg2rad(self.sonar.phi_deg),
                                   np.deg2rad(self.sonar.alpha_deg),
                                   self.sonar.max_range, self.sonar.bins)

    def beam(self) -> BeamPattern:
        return BeamPattern(self.sonar.k_phi, np.deg2rad(self.sonar.phi0_deg))

    def render_params(self) -> RenderParams:
        r = self.render
        return RenderParams(
            k_faces=r.k_faces,
            top_m=r.top_m if r.top_m > 0 else None,
            sigma=r.sigma,
            gamma=r.gamma if r.gamma > 0 else None,
            width=r.width,
            use_beam_pattern=r.use_beam_pattern,
            occlusion_tolerance=r.occlusion_tolerance if r.occlusion_tolerance > 0 else None,
            spreading_loss=r.spreading_loss,
        )

    def loss_spec(self) -> LossSpec:
        return LossSpec(lambda_nc=self.lambda_nc)

    def adam(self) -> AdamConfig:
        return AdamConfig(lr=self.adam_lr, beta1=self.adam_beta1, beta2=self.adam_beta2)

    def threads(self) -> int:
        return self.run.threads if self.run.threads > 0 else (os.cpu_count() or 1)

    def truth_heightfield(self) -> Heightfield:
        s = self.scene
        if s.kind == "dome":
            return make_dome_scene(s.dome_radius, s.depth, s.nx, s.ny, s.cell_size)
        if s.kind == "rocky":
            return make_rocky_scene(s.seed, s.nx, s.ny, s.cell_size, s.depth,
                                    s.amplitude, s.smooth_cells,
                                    (s.depth_min, s.depth_max))
        if s.kind == "flat":
            return make_flat_scene(s.depth, s.nx, s.ny, s.cell_size)
        raise ConfigError(f"unknown scene kind {s.kind!r}")

    def survey_poses(self) -> list[SonarPose]:
        tilt = float(np.deg2rad(self.sonar.tilt_deg))
        sv = self.survey
        if sv.kind == "box":
            return make_box_survey((0.0, 0.0), sv.standoff, sv.half_length,
                                   sv.z, sv.spacing, tilt)
        if sv.kind == "line":
            leg = SurveyLeg((sv.start_x, sv.start_y), (sv.end_x, sv.end_y),
                            sv.z, sv.spacing)
            return make_survey_lines([leg], tilt)
        raise ConfigError(f"unknown survey kind {sv.kind!r}")

    def init_heightfield(self) -> Heightfield:
        from .io import read_heightfield

        s = self.scene
        if self.init.kind == "flat":
            return make_flat_scene(self.init.depth, s.nx, s.ny, s.cell_size)
        if self.init.kind == "file":
            if not self.init.path:
                raise ConfigError("init.kind = file requires init.path")
            return read_heightfield(self.init.path)
        raise ConfigError(f"unknown init kind {self.init.kind!r}")

    def validate(self) -> None:
        problems = []
        if not 0.0 < self.sonar.phi_deg < self.sonar.alpha_deg < 180.0:
            problems.append("need 0 < phi_deg < alpha_deg < 180")
        if self.sonar.max_range <= 0.0:
            problems.append("max_range must be positive")
        if self.sonar.bins <= 1:
            problems.append("bins must exceed 1")
        if self.sonar.k_phi <= 0.0:
            problems.append("k_phi must be positive")
        if not 0.0 <= self.sonar.tilt_deg < 90.0:
            problems.append("tilt_deg must lie in [0, 90)")
        if self.scene.nx < 2 or self.scene.ny < 2:
            problems.append("scene grid must be at least 2x2")
        if self.scene.cell_size <= 0.0:
            problems.append("cell_size must be positive")
        if self.render.k_faces < 1 or self.render.width < 1:
            problems.append("render.k_faces and render.width must be at least 1")
        if self.render.sigma <= 0.0:
            problems.append("render.sigma must be positive")
        if self.render.top_m < 0:
            problems.append("render.top_m must be 0 (all) or positive")
        if self.lambda_nc < 0.0:
            problems.append("lambda_nc must be non-negative")
        if self.run.epochs < 0:
            problems.append("epochs must be non-negative")
        if self.survey.spacing <= 0.0:
            problems.append("survey.spacing must be positive")
        if problems:
            raise ConfigError("; ".join(problems))


_SECTIONS = {
    "scene": ("scene", SceneConfig),
    "survey": ("survey", SurveyConfig),
    "sonar": ("sonar", SonarConfig),
    "render": ("render", RenderConfig),
    "init": ("init", InitConfig),
    "run": ("run", RunSection),
}

_TOP_LEVEL = {
    "loss.lambda_nc": "lambda_nc",
    "adam.lr": "adam_lr",
    "adam.beta1": "adam_beta1",
    "adam.beta2": "adam_beta2",
}

PRESETS: dict[str, dict[str, str]] = {
    "dome": {
        "scene.kind": "dome",
        "init.depth": "20.0",
        "run.epochs": "100",
        "adam.lr": "0.12",
        "loss.lambda_nc": "0.01",
    },
    "rocky": {
        "scene.kind": "rocky",
        "scene.depth": "17.0",
        "survey.standoff": "13.0",
        "survey.half_length": "13.0",
        "survey.spacing": "1.5",
        "init.depth": "17.0",
        "run.epochs": "100",
        "adam.lr": "0.12",
        "loss.lambda_nc": "0.01",
    },
    "flat": {
        "scene.kind": "flat",
        "init.depth": "20.0",
        "run.epochs": "0",
    },
    "gradcheck": {
        "scene.kind": "flat",
        "scene.nx": "10",
        "scene.ny": "10",
        "scene.cell_size": "1.0",
        "scene.depth": "20.0",
        "survey.kind": "line",
        "survey.start_x": "-17.0",
        "survey.start_y": "-0.63",
        "survey.end_x": "-17.0",
        "survey.end_y": "0.79",
        "survey.spacing": "1.31",
        "init.depth": "19.6",
    },
}


def parse_value(text: str, target_type: type):
    text = text.strip()
    if target_type is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    try:
        return target_type(text)
    except ValueError:
        raise ConfigError(f"expected {target_type.__name__}, got {text!r}") from None


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def apply_mapping(cfg: RunConfig, mapping: dict[str, str]) -> None:
    for key, raw in mapping.items():
        if key in _TOP_LEVEL:
            setattr(cfg, _TOP_LEVEL[key], parse_value(raw, float))
            continue
        if "." not in key:
            raise ConfigError(f"unknown config key {key!r}")
        sec, name = key.split(".", 1)
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown config section {sec!r}")
        attr, cls = _SECTIONS[sec]
        target = getattr(cfg, attr)
        if not hasattr(target, name):
            raise ConfigError(f"unknown config key {key!r}")
        ftype = type(getattr(cls(), name))
        setattr(target, name, parse_value(raw, ftype))


def build_config(preset: str | None = None, config_path: str | None = None,
                 overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        apply_mapping(cfg, PRESETS[preset])
    if config_path is not None:
        try:
            text = open(config_path).read()
        except OSError as err:
            raise ConfigError(f"cannot read config file: {err}") from err
        apply_mapping(cfg, parse_config_text(text))
    if overrides:
        apply_mapping(cfg, overrides)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Config snapshot in the same key=value format that is parsed."""
    lines = []
    for sec, (attr, cls) in _SECTIONS.items():
        obj = getattr(cfg, attr)
        for f in fields(cls):
            lines.append(f"{sec}.{f.name} = {getattr(obj, f.name)}")
    lines.append(f"loss.lambda_nc = {cfg.lambda_nc}")
    lines.append(f"adam.lr = {cfg.adam_lr}")
    lines.append(f"adam.beta1 = {cfg.adam_beta1}")
    lines.append(f"adam.beta2 = {cfg.adam_beta2}")
    return "\n".join(lines) + "\n"
