"""Flat key-value run configuration with dotted namespaces.

File format: one `key = value` per line, `#` comments, blank lines ignored.
Unknown keys are rejected; all violations are reported together.
"""

from __future__ import annotations

from . import losses
from .train import TrainConfig


class ConfigError(Exception):
    pass


def _bool(s):
    if str(s).lower() in ("1", "true", "yes", "on"):
        return True
    if str(s).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (type, default, help)
SCHEMA = {
    "paths.moving": (str, "", "moving image (.vh/.raw base path)"),
    "paths.fixed": (str, "", "fixed image"),
    "paths.mask": (str, "", "moving-image mask"),
    "paths.fixed_mask": (str, "", "fixed-image mask (tuning)"),
    "paths.landmarks": (str, "", "landmark CSV"),
    "paths.out": (str, "run", "output directory"),
    "train.epochs": (int, 50000, "training epochs"),
    "train.batch_points": (int, 10000, "points sampled per epoch"),
    "train.learning_rate": (float, 1e-4, "Adam learning rate"),
    "train.mode": (str, "conditioned", "conditioned | baseline"),
    "train.baseline_alpha": (float, 10.0, "fixed weight in baseline mode"),
    "train.reg": (str, "bending", "jacobian | hyperelastic | bending"),
    "train.hyper.alpha_l": (float, 1.0, "hyperelastic length weight"),
    "train.hyper.alpha_a": (float, 1.0, "hyperelastic area weight"),
    "train.hyper.alpha_v": (float, 1.0, "hyperelastic volume weight"),
    "train.seed": (int, 0, "RNG seed"),
    "train.width": (int, 256, "main-net hidden width"),
    "train.depth": (int, 3, "main-net hidden layers"),
    "train.omega0": (float, 30.0, "frequency base of the sine activation"),
    "train.checkpoint_every": (int, 1000, "checkpoint cadence in epochs"),
    "train.float64": (_bool, False, "64-bit verification mode"),
    "train.grad_clip": (float, 0.0, "gradient norm clip (0 disables)"),
    "train.jitter": (_bool, True, "continuous jitter inside sampled voxels"),
    "train.log_every": (int, 1, "loss-log cadence in epochs"),
    "tune.grid_points": (int, 11, "alpha grid resolution"),
    "tune.invert_iters": (int, 10, "fixed-point iterations for mask warping"),
    "eval.alpha": (float, 0.5, "alpha used for evaluation"),
    "eval.invert_iters": (int, 10, "fixed-point iterations for warping"),
    "eval.one_based_landmarks": (_bool, False, "landmark CSV uses 1-based indices"),
    "eval.jac_samples": (int, 10000, "sample count for Jacobian statistics"),
}


def defaults():
    return {k: v for k, (_, v, _) in SCHEMA.items()}


def parse_file(path):
    raw = {}
    errors = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" in line:
                key, val = (s.strip() for s in line.split("=", 1))
            else:
                errors.append(f"line {ln}: expected 'key = value', got {line!r}")
                continue
            raw[key] = val
    if errors:
        raise ConfigError("config syntax errors:\n  " + "\n  ".join(errors))
    return raw


def build(raw_overrides=None, file_path=None):
    """Merge defaults, optional file, and --set overrides; validate all at
    once and return a plain dict keyed by schema names."""
    cfg = defaults()
    errors = []
    merged = {}
    if file_path:
        merged.update(parse_file(file_path))
    if raw_overrides:
        merged.update(raw_overrides)
    for key, val in merged.items():
        if key not in SCHEMA:
            errors.append(f"unknown config key '{key}'")
            continue
        typ = SCHEMA[key][0]
        try:
            cfg[key] = typ(val) if isinstance(val, str) else val
        except ValueError as e:
            errors.append(f"bad value for '{key}': {e}")
    if errors:
        raise ConfigError("config errors:\n  " + "\n  ".join(errors))
    return cfg


def train_config(cfg) -> TrainConfig:
    width, depth = cfg["train.width"], cfg["train.depth"]
    try:
        return TrainConfig(
            epochs=cfg["train.epochs"],
            batch_points=cfg["train.batch_points"],
            learning_rate=cfg["train.learning_rate"],
            mode=cfg["train.mode"],
            baseline_alpha=cfg["train.baseline_alpha"],
            reg=cfg["train.reg"],
            hyper=losses.HyperelasticWeights(cfg["train.hyper.alpha_l"],
                                             cfg["train.hyper.alpha_a"],
                                             cfg["train.hyper.alpha_v"]),
            seed=cfg["train.seed"],
            main_widths=(3, *([width] * depth), 3),
            omega0=cfg["train.omega0"],
            checkpoint_every=cfg["train.checkpoint_every"],
            float64=cfg["train.float64"],
            grad_clip=cfg["train.grad_clip"],
            jitter=cfg["train.jitter"],
        )
    except Exception as e:
        raise ConfigError(str(e)) from e


def write(cfg, path):
    with open(path, "w") as fh:
        for k in sorted(cfg):
            fh.write(f"{k} = {cfg[k]}\n")
