"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment. Tuples are written as comma
separated numbers (``crop_size = 32, 32, 48``). Every key has a default
below; unknown keys are rejected. After the file, environment variables
``LACARE_<KEY>`` (upper case) override individual keys; LACARE_ variables
that do not name a key are left alone since the package uses a few for
other purposes (e.g. LACARE_BACKEND).
"""
from __future__ import annotations

import os
from dataclasses import replace

from lacare.augment import AugmentConfig
from lacare.cascade.train import TrainConfig
from lacare.cascade.unet import UNetConfig
from lacare.phantom import PhantomConfig

ENV_PREFIX = "LACARE_"


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _tuple(conv, n):
    def parse(s: str):
        parts = [p for p in s.replace(",", " ").split()]
        if len(parts) != n:
            raise ValueError(f"expected {n} values, got {len(parts)}")
        return tuple(conv(p) for p in parts)
    return parse


def _choice(*options):
    def parse(s: str):
        if s not in options:
            raise ValueError(f"expected one of {options}")
        return s
    return parse


_U, _T, _A, _P = UNetConfig(), TrainConfig(), AugmentConfig(), PhantomConfig()

# key -> (parser, default, help)
SCHEMA = {
    # network
    "levels": (int, _U.levels, "U-Net depth"),
    "base_filters": (int, _U.base_filters, "channels of every 3x3x3 convolution"),
    "convs_per_level": (int, _U.convs_per_level, "convolutions per level"),
    "pre_convs": (int, _U.pre_convs, "convolutions before the contracting path"),
    "post_convs": (int, _U.post_convs, "convolutions after the expanding path"),
    "dropout": (float, _U.dropout, "dropout rate between paired convolutions"),
    "leaky_slope": (float, _U.leaky_slope, "negative slope of the leaky ReLU"),
    # training
    "iterations": (int, _T.iterations, "training iterations"),
    "learning_rate": (float, _T.learning_rate, "Adam step size"),
    "batch_size": (int, _T.batch_size, "crops per iteration"),
    "ema_decay": (float, _T.ema_decay, "decay of the weight moving average"),
    "seed": (int, _T.seed, "master seed"),
    "crop_size": (_tuple(int, 3), _T.crop_size, "training crop (voxels)"),
    "eval_crop": (_tuple(int, 3), _T.eval_crop, "inference crop (voxels)"),
    "checkpoint_every": (int, _T.checkpoint_every, "iterations between checkpoints, 0 = final only"),
    "task_mode": (_choice("two_stage", "stage1_only"), _T.task_mode, "cascade or Stage 1 alone"),
    "lambda1": (float, _T.loss_weights[0], "weight of the Stage-1 loss term"),
    "lambda2": (float, _T.loss_weights[1], "weight of the Stage-2 loss term"),
    "ensemble_size": (int, 5, "models trained and averaged by `pipeline`"),
    "folds": (int, 1, "1 = every member sees all training cases; k > 1 = k-fold splits"),
    # preprocessing
    "target_spacing": (_tuple(float, 3), (0.8, 0.8, 0.8), "processing grid spacing (mm)"),
    # augmentation
    "augment": (_bool, _A.enabled, "apply training augmentation"),
    "aug_translation": (float, _A.translation, "max |translation| (voxels)"),
    "aug_rotation": (float, _A.rotation, "max |rotation| per axis (radians)"),
    "aug_iso_scale": (_tuple(float, 2), _A.iso_scale, "isotropic scale range"),
    "aug_aniso_scale": (_tuple(float, 2), _A.aniso_scale, "per-axis scale range"),
    "aug_elastic_nodes": (int, _A.elastic_nodes, "elastic control nodes per axis"),
    "aug_elastic": (float, _A.elastic, "max |elastic displacement| (voxels)"),
    "aug_intensity_shift": (float, _A.intensity_shift, "max |intensity shift|"),
    "aug_intensity_scale": (_tuple(float, 2), _A.intensity_scale, "intensity scale range"),
    "aug_label_factor": (_tuple(float, 2), _A.label_factor, "per-label intensity factor range"),
    # postprocessing
    "postprocess": (_bool, True, "filter disconnected components"),
    "dilation_iterations": (int, 1, "dilation passes on the atrium mask"),
    "connectivity": (int, 26, "component connectivity, 6 or 26"),
    # phantoms
    "phantom_n": (int, 20, "phantoms generated by `pipeline`"),
    "phantom_n_test": (int, 4, "held-out phantoms"),
    "phantom_domain_shift": (_choice("none", "intensity", "resolution"), "none", "cohort variation"),
    "phantom_erase_fraction": (float, 0.25, "fraction of headers reset to 1 mm"),
    "phantom_grid": (_tuple(int, 3), _P.grid, "phantom grid (voxels)"),
    "phantom_spacing": (_tuple(float, 3), _P.native_spacing, "phantom native spacing (mm)"),
    "phantom_semi_axes": (_tuple(float, 3), _P.semi_axes, "cavity semi-axes (mm)"),
    "phantom_wall_thickness": (float, _P.wall_thickness, "wall thickness (mm)"),
    "phantom_noise_sigma": (float, _P.noise_sigma, "noise standard deviation"),
}


class RunConfig(dict):
    """Typed mapping over :data:`SCHEMA` keys."""

    def __init__(self, values: dict | None = None):
        super().__init__({k: v[1] for k, v in SCHEMA.items()})
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            try:
                value = SCHEMA[key][0](value.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        self[key] = value

    def snapshot(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.items())}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path=None, environ=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file, then LACARE_<KEY> variables, then ``overrides``."""
    rc = RunConfig()
    if path is not None:
        with open(path) as f:
            for k, v in parse_config_text(f.read(), os.fspath(path)).items():
                rc.set(k, v)
    env = os.environ if environ is None else environ
    for name, value in env.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key in SCHEMA:
                rc.set(key, value)
    for k, v in (overrides or {}).items():
        if v is not None:
            rc.set(k, v)
    return rc


def write_config(path, rc: RunConfig) -> None:
    with open(path, "w") as f:
        for k in SCHEMA:
            v = rc[k]
            text = ", ".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
            f.write(f"{k} = {text}\n")


# -- typed views -----------------------------------------------------------------

def unet_config(rc: RunConfig) -> UNetConfig:
    return UNetConfig(levels=rc["levels"], base_filters=rc["base_filters"],
                      convs_per_level=rc["convs_per_level"], pre_convs=rc["pre_convs"],
                      post_convs=rc["post_convs"], dropout=rc["dropout"],
                      leaky_slope=rc["leaky_slope"])


def train_config(rc: RunConfig, seed: int | None = None) -> TrainConfig:
    return TrainConfig(iterations=rc["iterations"], learning_rate=rc["learning_rate"],
                       batch_size=rc["batch_size"], ema_decay=rc["ema_decay"],
                       seed=rc["seed"] if seed is None else seed, crop_size=rc["crop_size"],
                       eval_crop=rc["eval_crop"], checkpoint_every=rc["checkpoint_every"],
                       task_mode=rc["task_mode"], loss_weights=(rc["lambda1"], rc["lambda2"]))


def augment_config(rc: RunConfig) -> AugmentConfig:
    return AugmentConfig(translation=rc["aug_translation"], rotation=rc["aug_rotation"],
                         iso_scale=rc["aug_iso_scale"], aniso_scale=rc["aug_aniso_scale"],
                         elastic_nodes=rc["aug_elastic_nodes"], elastic=rc["aug_elastic"],
                         intensity_shift=rc["aug_intensity_shift"],
                         intensity_scale=rc["aug_intensity_scale"],
                         label_factor=rc["aug_label_factor"], enabled=rc["augment"])


def phantom_config(rc: RunConfig) -> PhantomConfig:
    return replace(PhantomConfig(), grid=rc["phantom_grid"], native_spacing=rc["phantom_spacing"],
                   semi_axes=rc["phantom_semi_axes"], wall_thickness=rc["phantom_wall_thickness"],
                   noise_sigma=rc["phantom_noise_sigma"])
