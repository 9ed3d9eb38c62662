"""Run configuration: one flat namespace of dotted keys.

Configs are YAML files whose nested mappings flatten to the dotted keys
below; command-line ``key=value`` overrides win over the file.  Unknown
keys are rejected, every key has a default, and the fully resolved config
is echoed verbatim into the run directory so any run can be reproduced
from its own artifacts.  ``sweep.<key>: [v1, v2, ...]`` entries fan a
train invocation out into one run per grid point.
"""

import copy
import itertools
import json
from pathlib import Path

import yaml

from .errors import ConfigError

# key -> (default, type); None-able keys store (default, type, True)
DEFAULTS = {
    "seed": (0, int),
    "output_dir": ("runs/run", str),
    "deterministic": (True, bool),
    "data.path": ("data/shapes32", str),
    "data.name": ("shapes32", str),
    "data.image_size": (32, int),
    "data.num_train": (2000, int),
    "data.num_val": (256, int),
    "data.seed": (0, int),
    "model.family": ("unet", str),
    "model.width": (32, int),
    "model.student_multiplier": (0.25, float),
    "model.image_size": (32, int),
    "model.disc_width": (32, int),
    "model.disc_depth": (3, int),
    "ebm.base_channels": (32, int),
    "ebm.num_res_blocks": (7, int),
    "ebm.leaky_slope": (0.2, float),
    "ebm.sn_power_iters": (1, int),
    "sampler.steps": (10, int),
    "sampler.step_size": (100.0, float),
    "sampler.noise_std": (0.005, float),
    "sampler.init": ("student", str),
    "sampler.clamp": ((-1.0, 1.0), tuple, True),
    "sampler.buffer_capacity": (256, int),
    "sampler.buffer_reinit_prob": (0.05, float),
    "vem.enabled": (True, bool),
    "vem.lambda_mi": (0.1, float),
    "vem.alpha_reg": (1.0, float),
    "vem.target_source": ("real", str),
    "vem.variational": ("ebm", str),
    "distill.algorithm": ("omgd", str),
    "distill.lambda_cd": (1.0, float),
    "distill.lambda_tv": (1.0, float),
    "distill.lambda_ssim": (1.0, float),
    "distill.lambda_pl": (1.0, float),
    "distill.lambda_recon": (10.0, float),
    "distill.lambda_mse": (1.0, float),
    "distill.lambda_style": (1.0, float),
    "distill.lambda_distill": (1.0, float),
    "distill.lambda_ka": (1.0, float),
    "distill.lambda_lpips": (1.0, float),
    "distill.taps": ((), list),
    "schedule.total_iters": (1000, int),
    "schedule.batch_size": (16, int),
    "schedule.lr_student": (0.0002, float),
    "schedule.lr_teacher": (0.0002, float),
    "schedule.lr_ebm": (0.0001, float),
    "schedule.mode": ("online-paired", str),
    "schedule.lambda_rec": (100.0, float),
    "schedule.lambda_gan": (1.0, float),
    "schedule.log_every": (1, int),
    "schedule.eval_every": (0, int),
    "schedule.checkpoint_every": (0, int),
    "schedule.teacher_ckpt": ("", str),
}

MODES = ("online-paired", "offline-paired", "offline-unpaired-teacher-target")


def _flatten(mapping, prefix=""):
    flat = {}
    for key, value in mapping.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, prefix=f"{name}."))
        else:
            flat[name] = value
    return flat


def _coerce(key: str, value):
    spec = DEFAULTS[key]
    default, typ = spec[0], spec[1]
    nullable = len(spec) > 2 and spec[2]
    if value is None:
        if nullable:
            return None
        raise ConfigError(f"config key {key!r} may not be null")
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"config key {key!r} expects a boolean, got {value!r}")
    if typ is tuple:
        if isinstance(value, str):
            value = json.loads(value)
        if not isinstance(value, (list, tuple)) or len(value) != 2:
            raise ConfigError(f"config key {key!r} expects a [lo, hi] pair, got {value!r}")
        return (float(value[0]), float(value[1]))
    if typ is list:
        if isinstance(value, str):
            value = json.loads(value)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {key!r} expects a list, got {value!r}")
        return tuple(str(v) for v in value)
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} expects {typ.__name__}, got {value!r}") from None


def resolve_config(file_values: dict = None, overrides: dict = None) -> dict:
    """Merge defaults <- file <- overrides into a validated flat config."""
    cfg = {key: spec[0] for key, spec in DEFAULTS.items()}
    sweeps = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in _flatten(source).items():
            if key.startswith("sweep."):
                target = key[len("sweep.") :]
                if target not in DEFAULTS:
                    raise ConfigError(f"unknown sweep target {target!r}")
                if not isinstance(value, (list, tuple)):
                    raise ConfigError(f"sweep.{target} must be a list of values")
                sweeps[target] = [_coerce(target, v) for v in value]
                continue
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value)
    if cfg["schedule.mode"] not in MODES:
        raise ConfigError(f"schedule.mode must be one of {MODES}, got {cfg['schedule.mode']!r}")
    cfg["_sweeps"] = sweeps
    return cfg


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text())
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file must be a mapping, got {type(data).__name__}")
    return data


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        out[key.strip()] = value
    return out


def expand_sweep(cfg: dict):
    """Yield (run_suffix, config) per sweep grid point; the base config
    itself when no sweep keys are present."""
    sweeps = cfg.get("_sweeps") or {}
    if not sweeps:
        single = dict(cfg)
        single.pop("_sweeps", None)
        yield "", single
        return
    keys = sorted(sweeps)
    for combo in itertools.product(*(sweeps[k] for k in keys)):
        sub = dict(cfg)
        sub.pop("_sweeps", None)
        parts = []
        for key, value in zip(keys, combo):
            sub[key] = value
            parts.append(f"{key.split('.')[-1]}={value}")
        yield "__".join(parts), sub


def echo_config(cfg: dict, directory) -> Path:
    """Write the resolved config (nested YAML) into the run directory."""
    nested = {}
    for key, value in cfg.items():
        if key.startswith("_"):
            continue
        node = nested
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = list(value) if isinstance(value, tuple) else value
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = directory / "config.yaml"
    out.write_text(yaml.safe_dump(nested, sort_keys=True))
    return out


def config_copy(cfg: dict, **updates) -> dict:
    new = copy.deepcopy(cfg)
    for key, value in updates.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        new[key] = _coerce(key, value)
    return new
