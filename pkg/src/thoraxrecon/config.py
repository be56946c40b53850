"""Flat run configuration shared by every CLI command.

A config is one JSON object.  Keys not listed in :class:`RunConfig` are
rejected, and ``--set key=value`` overrides are parsed as JSON when
possible (so ``--set k_b=4`` is an int and ``--set mode=parallel`` a
string).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .phantom import PhantomSpec
from .projector import PerturbationSpec, ProjectionGeometry
from .ptxseg import SegParams
from .recon import OptSettings

__all__ = ["RunConfig", "ConfigError", "load_config", "SCHEMA_VERSION"]

SCHEMA_VERSION = "1.0"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    input: str | None = None
    reference: str | None = None
    candidate: str | None = None
    lung_masks: list = field(default_factory=list)
    segmentation_dir: str | None = None
    reference_masks_dir: str | None = None
    candidate_masks_dir: str | None = None
    cohort: str | None = None
    projections_manifest: str | None = None
    output_dir: str = "."
    case_id: str = "case"
    seed: int = 0
    threads: int = 1
    figures: bool = True

    # projection geometry
    mode: str = "cone_beam"
    detector_rows: int = 224
    detector_cols: int = 224
    detector_pixel_spacing: list | None = None
    source_to_isocenter: float = 600.0
    source_to_detector: float = 1100.0
    ray_step: float | None = None
    mu_water: float = 0.02
    radiographic: bool = False

    # segmentation
    t_b: float = -400.0
    t_p: float = -500.0
    air_hu: float = -950.0
    k_l: int = 2
    k_b: int = 6
    k_p: int = 2
    grow_connectivity: int = 6
    label_connectivity: int = 26
    v_t: float = 10.0

    # reconstruction
    view_set: str = "orbit"
    n_views: int = 36
    arc_degrees: float = 180.0
    orbit_axis: str = "z"
    perturb: bool = False
    rotation_range_deg: float = 5.0
    translation_range_mm: float = 10.0
    norm: str = "l2"
    delta: float = 1e-3
    lambda_re: float = 0.0
    input_units: str = "attenuation"
    step: float | None = None
    step_scale: float = 1.0
    iterations: int = 200
    clamp_nonnegative: bool = True
    tolerance: float = 0.0
    log_every: int = 0
    target_dims: list | None = None
    target_spacing: list | None = None

    # metrics
    data_range: float = 4095.0
    ssim_window: int = 7

    # phantom
    phantom_kind: str = "chest"
    phantom_dims: list = field(default_factory=lambda: [112, 112, 112])
    phantom_spacing: list = field(default_factory=lambda: [1.6, 1.6, 1.6])
    body_semi_axes: list = field(default_factory=lambda: [80.0, 62.0, 80.0])
    lung_semi_axes: list = field(default_factory=lambda: [55.0, 38.0, 26.0])
    lung_offset_x: float = 36.0
    cap_ml: float = 0.0
    pocket_ml: float = 0.0
    decoy_ml: float = 0.0
    noise_hu: float = 0.0

    # ---- derived module objects (each validates its own invariants)

    def geometry(self) -> ProjectionGeometry:
        px = tuple(self.detector_pixel_spacing) if self.detector_pixel_spacing else None
        return ProjectionGeometry(
            mode=self.mode,
            detector_dims=(self.detector_rows, self.detector_cols),
            detector_pixel_spacing=px,
            source_to_isocenter=self.source_to_isocenter,
            source_to_detector=self.source_to_detector,
            ray_step=self.ray_step,
        )

    def seg_params(self) -> SegParams:
        return SegParams(
            t_b=self.t_b, t_p=self.t_p, air_hu=self.air_hu, k_l=self.k_l, k_b=self.k_b, k_p=self.k_p,
            grow_connectivity=self.grow_connectivity, label_connectivity=self.label_connectivity, v_t=self.v_t,
        )

    def opt_settings(self) -> OptSettings:
        return OptSettings(
            step=self.step, step_scale=self.step_scale, iterations=self.iterations,
            clamp_nonnegative=self.clamp_nonnegative, tolerance=self.tolerance, log_every=self.log_every,
        )

    def perturbation(self) -> PerturbationSpec:
        return PerturbationSpec(
            rotation_range=(math.radians(self.rotation_range_deg),) * 3,
            translation_range=(self.translation_range_mm,) * 3,
            seed=self.seed,
        )

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(
            dims=tuple(self.phantom_dims), spacing=tuple(self.phantom_spacing),
            body_semi_axes=tuple(self.body_semi_axes), lung_semi_axes=tuple(self.lung_semi_axes),
            lung_offset_x=self.lung_offset_x, cap_ml=self.cap_ml, pocket_ml=self.pocket_ml,
            decoy_ml=self.decoy_ml, noise_hu=self.noise_hu, seed=self.seed,
        )

    def validate(self) -> "RunConfig":
        try:
            self.geometry()
            self.seg_params()
            self.opt_settings()
            self.perturbation()
            self.phantom_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.n_views < 1:
            raise ConfigError("n_views must be >= 1")
        if self.view_set not in ("orbit", "standard"):
            raise ConfigError("view_set must be 'orbit' or 'standard'")
        if self.orbit_axis not in ("x", "y", "z"):
            raise ConfigError("orbit_axis must be x, y or z")
        if self.norm not in ("l2", "l1_smooth", "l1"):
            raise ConfigError("norm must be l2, l1_smooth or l1")
        if self.input_units not in ("hu", "attenuation"):
            raise ConfigError("input_units must be 'hu' or 'attenuation'")
        if self.phantom_kind not in ("chest", "two_ellipsoid"):
            raise ConfigError("phantom_kind must be 'chest' or 'two_ellipsoid'")
        if self.data_range <= 0 or self.ssim_window < 1:
            raise ConfigError("data_range and ssim_window must be positive")
        if self.mu_water <= 0:
            raise ConfigError("mu_water must be positive")
        if self.norm == "l1_smooth" and not self.delta > 0:
            raise ConfigError("delta must be positive for l1_smooth")
        if self.lambda_re < 0:
            raise ConfigError("lambda_re must be >= 0")
        return self

    def to_dict(self):
        return asdict(self)


_FIELDS = {f.name for f in fields(RunConfig)}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=(), extra=None) -> RunConfig:
    """Build a validated config from a JSON file, ``key=value`` overrides and a dict."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        values.update(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        values[key.strip()] = _parse_value(text)
    values.update({k: v for k, v in (extra or {}).items() if v is not None})
    unknown = sorted(set(values) - _FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()
