"""Flat `key = value` configuration covering model and training knobs.

Two named presets mirror the two reference model sizes; a config file
and per-key command-line overrides layer on top.  Unknown keys are
rejected so typos fail loudly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError
from .grids import GridConfig
from .model import ModelConfig
from .trainer import TrainConfig


def _bool(s):
    s = str(s).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _ints(s):
    if isinstance(s, (tuple, list)):
        return tuple(int(v) for v in s)
    return tuple(int(v) for v in str(s).split(",") if v.strip() != "")


# key -> (parser, default, help)
CONFIG_SPEC = {
    # model
    "gop_size": (int, 10, "frames per GOP; first frame is the keyframe"),
    "neighbors": (_ints, (0, 1), "GOP offsets whose grids each frame samples"),
    "r_th": (float, 0.5, "density threshold for box normalization"),
    "box_bins": (int, 256, "histogram buckets for box fitting"),
    "embed_dim": (int, 16, "sine-cosine time embedding width"),
    "flow_width": (int, 8, "neurons per generated flow-net layer"),
    "flow_layers": (int, 5, "affine layers in the generated flow net"),
    "flow_omega": (float, 10.0, "sine frequency of the flow net"),
    "latent_base": (int, 16, "latent grid base resolution"),
    "latent_levels": (int, 7, "latent grid levels"),
    "latent_scale": (float, 1.8, "latent grid per-level growth"),
    "latent_feats": (int, 4, "features per latent level"),
    "static_enabled": (_bool, True, "concatenate a time-independent grid"),
    "static_base": (int, 16, "static grid base resolution"),
    "static_levels": (int, 16, "static grid levels"),
    "static_scale": (float, 1.35, "static grid per-level growth"),
    "static_feats": (int, 2, "features per static level"),
    "net_depth": (int, 3, "sine layers in the base network"),
    "net_width": (int, 185, "neurons per base-network layer"),
    "omega0": (float, 30.0, "first-layer sine frequency"),
    "omega_hidden": (float, 30.0, "hidden-layer sine frequency"),
    "time_gain": (float, 1.0, "temporal bandwidth of the base network"),
    "latent_mode": (str, "modulate", "modulate | direct (latent as input)"),
    "alignment_mode": (str, "learned", "learned | zero | random"),
    "align_scale_px": (float, 0.0, "pixel scale of the random-flow baseline"),
    "align_seed": (int, 0, "seed of the random-flow baseline"),
    # training
    "iterations": (int, 100_000, "optimization steps"),
    "batch_fraction": (float, 0.001, "share of all coordinates per step"),
    "lr_max": (float, 1e-3, "cosine schedule start learning rate"),
    "lr_min": (float, 1e-5, "cosine schedule floor"),
    "weight_decay": (float, 1e-3, "decoupled decay on network weights"),
    "w_aux": (float, 0.5, "auxiliary flow loss weight"),
    "aux_fraction": (float, 0.1, "share of iterations with the flow loss on"),
    "box_refresh_interval": (int, 1000, "iterations between box refits"),
    "box_freeze_fraction": (float, 1.0,
                            "stop refits after this share of iterations"),
    "box_sample": (int, 4096, "warped points sampled per box refit"),
    "seed": (int, 0, "seed for init and sampling"),
    "precision": (str, "f32", "f32 | f64 parameter precision"),
    "deterministic": (_bool, True, "fixed-order reductions"),
    "log_interval": (int, 100, "iterations between report rows"),
    # guidance
    "flows": (str, "auto", "auto | none | exact | path to a flow manifest"),
    "flow_alpha": (float, 15.0, "smoothness weight of the built-in estimator"),
    "flow_iters": (int, 200, "iterations of the built-in estimator"),
}

PRESETS = {
    "default": {},
    "small": {"latent_levels": 5, "latent_feats": 2, "net_width": 165},
}

_MODEL_KEYS = ("gop_size", "r_th", "box_bins", "embed_dim", "flow_width",
               "flow_layers", "flow_omega", "net_depth", "net_width",
               "omega0", "omega_hidden", "time_gain", "latent_mode", "alignment_mode",
               "align_scale_px", "align_seed")
_TRAIN_KEYS = ("iterations", "batch_fraction", "lr_max", "lr_min",
               "weight_decay", "w_aux", "aux_fraction",
               "box_refresh_interval", "box_freeze_fraction",
               "box_sample", "seed", "precision",
               "deterministic", "log_interval")


def defaults():
    return {k: v for k, (_, v, _h) in CONFIG_SPEC.items()}


def parse_value(key, value):
    if key not in CONFIG_SPEC:
        raise ConfigError(f"unknown config key: {key}")
    parser = CONFIG_SPEC[key][0]
    try:
        return parser(value)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None


def parse_config_file(path):
    """`key = value` lines; '#' starts a comment; unknown keys rejected."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`")
        key, value = (s.strip() for s in body.split("=", 1))
        out[key] = parse_value(key, value)
    return out


def resolve(preset="default", file=None, overrides=None):
    """defaults <- preset <- config file <- explicit overrides."""
    if preset not in PRESETS:
        raise ConfigError(
            f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = defaults()
    merged.update(PRESETS[preset])
    if file is not None:
        merged.update(parse_config_file(file))
    for key, value in (overrides or {}).items():
        merged[key] = parse_value(key, value)
    return merged


def model_config(conf, frames, height, width) -> ModelConfig:
    kwargs = {k: conf[k] for k in _MODEL_KEYS}
    kwargs["neighbors"] = tuple(conf["neighbors"])
    kwargs["latent"] = GridConfig(conf["latent_base"], conf["latent_levels"],
                                  conf["latent_scale"], conf["latent_feats"])
    kwargs["static"] = None
    if conf["static_enabled"]:
        kwargs["static"] = GridConfig(conf["static_base"],
                                      conf["static_levels"],
                                      conf["static_scale"],
                                      conf["static_feats"])
    return ModelConfig(frames=frames, height=height, width=width, **kwargs)


def train_config(conf) -> TrainConfig:
    return TrainConfig(**{k: conf[k] for k in _TRAIN_KEYS})


def write_config(conf, path):
    lines = [f"{k} = {','.join(str(i) for i in v) if isinstance(v, tuple) else v}"
             for k, v in conf.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def help_table() -> str:
    rows = ["configuration keys (key = default  description):", ""]
    for key, (_p, default, help_text) in CONFIG_SPEC.items():
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        rows.append(f"  {key} = {default}")
        rows.append(f"      {help_text}")
    return "\n".join(rows)
