"""Run configuration: YAML with a strict, versioned schema.

Unknown keys are errors, not warnings: a typo in a bit-width knob must
never silently configure a different experiment. validate() also fills
defaults, so an accepted config re-serializes to a stable normalized form.
"""
from __future__ import annotations

import math

import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def _is_bits(v):
    return v == "inf" or (isinstance(v, int) and not isinstance(v, bool) and v >= 1)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


# (default, checker, description); default None with required=True markers
_SCHEMA = {
    "schema_version": (SCHEMA_VERSION, lambda v: v == SCHEMA_VERSION,
                       f"must be {SCHEMA_VERSION}"),
    "run": {
        "seed": (0, _is_int, "integer"),
        "out": ("runs", lambda v: isinstance(v, str), "string"),
        "threads": (0, lambda v: _is_int(v) and v >= 0, "nonnegative int"),
    },
    "model": {
        "kind": ("cnn", lambda v: v in ("cnn", "mlp", "stack"),
                 "cnn | mlp | stack"),
        "classes": (10, lambda v: _is_int(v) and v >= 2, "int >= 2"),
        "in_ch": (3, _is_int, "int"),
        "blocks": ([16, 16, 32, 32],
                   lambda v: isinstance(v, list) and all(_is_int(x) for x in v),
                   "list of ints"),
        "pool_after": ([0, 1, 2],
                       lambda v: isinstance(v, list) and all(_is_int(x) for x in v),
                       "list of ints"),
        "n_in": (2, _is_int, "int"),
        "hidden": ([32], lambda v: isinstance(v, list), "list of ints"),
        "seed": (0, _is_int, "integer"),
    },
    "pim": {
        "enabled": (True, lambda v: isinstance(v, bool), "bool"),
        "scheme": ("bit_serial",
                   lambda v: v in ("native", "differential", "bit_serial"),
                   "native | differential | bit_serial"),
        "b_train": (5, _is_bits, 'bits or "inf"'),
        "b_w": (4, lambda v: _is_int(v) and v >= 2, "int >= 2"),
        "b_a": (4, lambda v: _is_int(v) and v >= 1, "int >= 1"),
        "dac_bits": (4, lambda v: _is_int(v) and v >= 1, "int >= 1"),
        "unit_in_channels": (16, lambda v: _is_int(v) and v >= 1, "int >= 1"),
        "unit_out_channels": (8, lambda v: _is_int(v) and v >= 1, "int >= 1"),
        "eta": ("auto", lambda v: v == "auto" or (_is_num(v) and v > 0),
                '"auto" or positive number'),
        "rescale_backward": (True, lambda v: isinstance(v, bool), "bool"),
    },
    "train": {
        "epochs": (30, lambda v: _is_int(v) and v >= 0, "int >= 0"),
        "batch_size": (128, lambda v: _is_int(v) and v >= 1, "int >= 1"),
        "lr0": (0.1, lambda v: _is_num(v) and v > 0, "positive number"),
        "lr_milestones": ([20, 25], lambda v: isinstance(v, list),
                          "list of epochs"),
        "lr_decay": (0.1, lambda v: _is_num(v) and v > 0, "positive number"),
        "momentum": (0.9, lambda v: _is_num(v) and 0 <= v < 1, "[0, 1)"),
        "nesterov": (True, lambda v: isinstance(v, bool), "bool"),
        "weight_decay": (1e-4, lambda v: _is_num(v) and v >= 0,
                         "nonnegative number"),
        "eval_every": (0, lambda v: _is_int(v) and v >= 0, "int >= 0"),
    },
    "dataset": {
        "kind": ("synthetic_blobs",
                 lambda v: v in ("cifar10_binary", "synthetic_blobs",
                                 "synthetic_moons"), "dataset kind"),
        "path": ("", lambda v: isinstance(v, str), "string"),
        "train_size": (0, lambda v: _is_int(v) and v >= 0, "int >= 0"),
        "test_size": (0, lambda v: _is_int(v) and v >= 0, "int >= 0"),
        "classes": (10, lambda v: _is_int(v) and v >= 2, "int >= 2"),
        "shape": ([3, 32, 32], lambda v: isinstance(v, list), "list of ints"),
        "noise": (0.18, _is_num, "number"),
        "jitter": (0.16, _is_num, "number"),
        "separation": (2.0, _is_num, "number"),
        "seed": (0, _is_int, "integer"),
        "augment": (False, lambda v: isinstance(v, bool), "bool"),
    },
    "interface": {
        "b_imc": (5, _is_bits, 'bits or "inf"'),
        "sigma_lsb": (0.0, lambda v: _is_num(v) and v >= 0,
                      "nonnegative number"),
        "noise_seed": (0, _is_int, "integer"),
        "curves": ("", lambda v: isinstance(v, str), "path or empty"),
    },
    "calibrate": {
        "num_batches": (20, lambda v: _is_int(v) and v >= 1, "int >= 1"),
        "batch_size": (128, lambda v: _is_int(v) and v >= 1, "int >= 1"),
        "seed": (0, _is_int, "integer"),
        "apply_nonideal": (True, lambda v: isinstance(v, bool), "bool"),
    },
    "sweep": {
        "axes": ({}, lambda v: isinstance(v, dict), "axis -> value list"),
        "calibrate_children": (False, lambda v: isinstance(v, bool), "bool"),
    },
    "diag": {
        "study": ("scale_ratio",
                  lambda v: v in ("scale_ratio", "bn_drift", "gradient_ratio",
                                  "noise_error"), "study name"),
        "b_imc_list": ([3, 4, 5, 7, 9], lambda v: isinstance(v, list),
                       "list of bits"),
        "sigmas": ([0.0, 0.35], lambda v: isinstance(v, list),
                   "list of numbers"),
        "samples": (100, lambda v: _is_int(v) and v >= 1, "int >= 1"),
        "blocks": (6, _is_int, "int"),
        "width": (144, _is_int, "int"),
        "batches": (100, _is_int, "int"),
        "batch_size": (256, _is_int, "int"),
        "xi_policy": ("rescale", lambda v: v in ("rescale", "one"),
                      "rescale | one"),
        "use_curves": (False, lambda v: isinstance(v, bool), "bool"),
        "curves": ("", lambda v: isinstance(v, str), "path or empty"),
        "bits": (7, lambda v: _is_int(v) and v >= 1, "int >= 1"),
        "dac_bits": (1, lambda v: _is_int(v) and v >= 1, "int >= 1"),
        "seed": (0, _is_int, "integer"),
    },
    "gen_curves": {
        "bits": (7, lambda v: _is_int(v) and v >= 1, "int >= 1"),
        "count": (32, lambda v: _is_int(v) and v >= 1, "int >= 1"),
        "sigma_offset": (2.04, lambda v: _is_num(v) and v >= 0,
                         "nonnegative number"),
        "sigma_gain": (0.024, lambda v: _is_num(v) and v >= 0,
                       "nonnegative number"),
        "seed": (0, _is_int, "integer"),
        "out_file": ("bank.curves", lambda v: isinstance(v, str), "path"),
    },
    "checkpoint": ("", lambda v: isinstance(v, str), "path or empty"),
}

_ALLOWED_SWEEP_AXES = ("sigma_lsb", "scheme", "b_imc", "b_train")


def validate(raw: dict) -> dict:
    """Validate against the strict schema and return the normalized config."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    if "schema_version" not in raw:
        raise ConfigError("missing schema_version")
    out = {}
    for key, rule in _SCHEMA.items():
        if isinstance(rule, dict):
            section = raw.get(key, {})
            if not isinstance(section, dict):
                raise ConfigError(f"{key}: must be a mapping")
            for unk in set(section) - set(rule):
                raise ConfigError(f"{key}.{unk}: unknown key")
            norm = {}
            for sub, (default, check, desc) in rule.items():
                v = section.get(sub, default)
                if not check(v):
                    raise ConfigError(f"{key}.{sub}: expected {desc}, got {v!r}")
                norm[sub] = v
            out[key] = norm
        else:
            default, check, desc = rule
            v = raw.get(key, default)
            if not check(v):
                raise ConfigError(f"{key}: expected {desc}, got {v!r}")
            out[key] = v
    for unk in set(raw) - set(_SCHEMA):
        raise ConfigError(f"{unk}: unknown key")
    for axis, vals in out["sweep"]["axes"].items():
        if axis not in _ALLOWED_SWEEP_AXES:
            raise ConfigError(f"sweep.axes.{axis}: unknown axis "
                              f"(allowed: {', '.join(_ALLOWED_SWEEP_AXES)})")
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"sweep.axes.{axis}: must be a non-empty list")
    return out


def load_config(path) -> dict:
    with open(path) as f:
        raw = yaml.safe_load(f)
    if raw is None:
        raw = {}
    try:
        return validate(raw)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


def bits_value(v):
    """'inf' -> math.inf, ints pass through."""
    return math.inf if v == "inf" else v
