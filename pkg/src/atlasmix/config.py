"""Experiment configuration: flat key-value file, strict schema, full validation.

Config files are flat YAML mappings (scalars only, except velocity_scales).
Unknown keys are rejected and validation always reports the complete list of
violations rather than failing on the first.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .losses import LossWeights
from .networks import ModelConfig
from .synthetic import GeneratorConfig


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _int_list(v):
    if isinstance(v, str):
        v = [p for p in v.replace(",", " ").split() if p]
    if not isinstance(v, (list, tuple)):
        raise TypeError("expected a list")
    return tuple(int(x) for x in v)


# key -> (coercion, default)
SCHEMA: dict[str, tuple] = {
    # experiment
    "seed": (int, 0),
    "output_root": (str, "runs"),
    "data_root": (str, "data/synthetic"),
    "deterministic": (bool, False),
    # model
    "image_size": (int, 64),
    "num_classes": (int, 3),
    "levels": (int, 5),
    "velocity_scales": (_int_list, (1, 3, 5)),
    "num_bases": (int, 6),
    "latent_channels": (int, 16),
    "base_channels": (int, 16),
    "style_dim": (int, 128),
    "svf_steps": (int, 7),
    "smooth_precision": (float, 10.0),
    "magnitude_precision": (float, 0.01),
    # loss weights (lambda_1..lambda_5 in the usual ordering)
    "lambda_seg": (float, 5.0),
    "lambda_recon": (float, 15.0),
    "lambda_vel": (float, 15.0),
    "lambda_tem": (float, 0.05),
    "lambda_struct": (float, 1.0),
    "usage_threshold": (float, 0.05),
    "usage_weight": (float, 1.0),
    # training
    "batch_size_source": (int, 8),
    "batch_size_target": (int, 8),
    "learning_rate": (float, 1e-3),
    "weight_decay": (float, 1e-4),
    "grad_clip": (float, 5.0),
    "epochs_sa": (int, 60),
    "epochs_sf1": (int, 60),
    "epochs_sf2": (int, 20),
    "val_every": (int, 5),
    "sf2_selector": (str, "nll"),
    # synthetic benchmark generator
    "gen_source_train": (int, 200),
    "gen_source_val": (int, 25),
    "gen_target_train": (int, 200),
    "gen_target_val": (int, 25),
    "gen_target_test": (int, 50),
    "gen_noise_source": (float, 0.02),
    "gen_noise_target": (float, 0.04),
    "gen_bias_source": (float, 0.1),
    "gen_bias_target": (float, 0.3),
    "gen_gamma_target": (float, 1.6),
    "gen_invert_target": (bool, True),
    "gen_topology_variants": (int, 5),
    "gen_spacing_mm": (float, 1.0),
    "gen_elastic_px": (float, 2.5),
    "gen_level_jitter": (float, 0.05),
    "gen_target_anatomy_offset": (int, 100_000),
}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            image_size=v["image_size"],
            num_classes=v["num_classes"],
            levels=v["levels"],
            velocity_scales=tuple(v["velocity_scales"]),
            num_bases=v["num_bases"],
            latent_channels=v["latent_channels"],
            base_channels=v["base_channels"],
            style_dim=v["style_dim"],
            svf_steps=v["svf_steps"],
            smooth_precision=v["smooth_precision"],
            magnitude_precision=v["magnitude_precision"],
        )

    def loss_weights(self) -> LossWeights:
        v = self.values
        return LossWeights(
            lam_seg=v["lambda_seg"],
            lam_recon=v["lambda_recon"],
            lam_vel=v["lambda_vel"],
            lam_tem=v["lambda_tem"],
            lam_struct=v["lambda_struct"],
            tau=v["usage_threshold"],
            usage_weight=v["usage_weight"],
        )

    def generator_config(self) -> GeneratorConfig:
        v = self.values
        return GeneratorConfig(
            height=v["image_size"],
            width=v["image_size"],
            num_classes=v["num_classes"],
            topology_variants=v["gen_topology_variants"],
            n_source_train=v["gen_source_train"],
            n_source_val=v["gen_source_val"],
            n_target_train=v["gen_target_train"],
            n_target_val=v["gen_target_val"],
            n_target_test=v["gen_target_test"],
            spacing_mm=v["gen_spacing_mm"],
            seed=v["seed"],
            target_gamma=v["gen_gamma_target"],
            target_invert=v["gen_invert_target"],
            noise_source=v["gen_noise_source"],
            noise_target=v["gen_noise_target"],
            bias_source=v["gen_bias_source"],
            bias_target=v["gen_bias_target"],
            elastic_px=v["gen_elastic_px"],
            level_jitter=v["gen_level_jitter"],
            target_anatomy_offset=v["gen_target_anatomy_offset"],
        )

    def hash(self) -> str:
        canon = json.dumps(
            {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.values.items())}
        )
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _coerce(key: str, raw, errors: list[str]):
    coerce, default = SCHEMA[key]
    if coerce is bool:
        if isinstance(raw, bool):
            return raw
        if isinstance(raw, str) and raw.lower() in ("true", "false"):
            return raw.lower() == "true"
        errors.append(f"{key}: expected a boolean, got {raw!r}")
        return default
    if coerce is int and isinstance(raw, bool):
        errors.append(f"{key}: expected an integer, got a boolean")
        return default
    try:
        return coerce(raw)
    except (TypeError, ValueError):
        errors.append(f"{key}: cannot interpret {raw!r} as {getattr(coerce, '__name__', 'value')}")
        return default


def validate_values(overrides: dict) -> tuple[ExperimentConfig | None, list[str]]:
    """Apply defaults + overrides and run every semantic check."""
    errors: list[str] = []
    values = {k: default for k, (_, default) in SCHEMA.items()}
    for key, raw in overrides.items():
        if key not in SCHEMA:
            errors.append(f"unknown key: {key}")
            continue
        values[key] = _coerce(key, raw, errors)

    cfg = ExperimentConfig(values=values)
    errors.extend(cfg.model_config().validate())
    errors.extend(cfg.loss_weights().validate(num_bases=values["num_bases"]))
    errors.extend(cfg.generator_config().validate())

    for key in ("batch_size_source", "batch_size_target", "epochs_sa", "epochs_sf1", "epochs_sf2", "val_every"):
        if values[key] < 1:
            errors.append(f"{key} must be >= 1")
    if values["lambda_struct"] > 0 and values["batch_size_source"] < 2:
        errors.append("batch_size_source must be >= 2 when lambda_struct > 0 (pairwise loss)")
    if values["learning_rate"] <= 0:
        errors.append("learning_rate must be positive")
    if values["weight_decay"] < 0:
        errors.append("weight_decay must be >= 0")
    if values["sf2_selector"] not in ("nll", "dsc"):
        errors.append(f"sf2_selector must be 'nll' or 'dsc', got {values['sf2_selector']!r}")
    if values["smooth_precision"] <= 0 or values["magnitude_precision"] <= 0:
        errors.append("smooth_precision and magnitude_precision must be positive")

    if errors:
        return None, errors
    return cfg, []


def validate_config(path: str | Path | None, require_data: bool = False) -> ExperimentConfig:
    """Load, validate, and resolve a config file (None uses pure defaults).

    Raises ConfigError carrying the exhaustive violation list.
    """
    overrides = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError([f"config file not found: {p}"])
        try:
            loaded = yaml.safe_load(p.read_text())
        except yaml.YAMLError as e:
            raise ConfigError([f"config is not valid YAML: {e}"]) from e
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(["config must be a flat key: value mapping"])
        for key, v in loaded.items():
            if isinstance(v, dict):
                raise ConfigError([f"{key}: nested sections are not allowed (flat schema)"])
        overrides = loaded

    cfg, errors = validate_values(overrides)
    if errors:
        raise ConfigError(errors)
    if require_data and not Path(cfg.data_root).exists():
        raise ConfigError([f"data_root does not exist: {cfg.data_root}"])
    return cfg
