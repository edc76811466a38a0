"""Run configuration: a YAML file validated in full before any compute.

Layout (all sections optional except where noted)::

    seed: 0                      # default: $DUALVDT_SEED, else 0
    output_dir: runs/demo        # required for train / ablate; relative to this file
    dataset:
      schema: synthetic          # ett | generic | synthetic
      path: data/ETTh1.csv       # required unless synthetic
      target: OT
      T_x: 24
      T_y: 8
      stride: 1
      split: [0.7, 0.1, 0.2]
      synthetic: {n: 4, T: 512, noise_std: 0.1, seed: 0}
    model:
      encoder: LT                # FC | CNN | LT
      score_model: FC            # FC | CNN
      dual: true
      score_prior: true
      sampler: {kind: AS, sub_steps: 1, steps: null}
      latent_dim: 8
      schedule: {N: 50, sigma_sq_min: 1.0e-4, sigma_sq_max: 0.02}
      loss_weights: [1.0, 1.0]
    training:
      epochs: 30
      batch_size: 32
      learning_rate: 1.0e-3
      clip_norm: 1.0
      optimizer: adam
"""

from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

SEED_ENV = "DUALVDT_SEED"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


_NUM = (int, float)

# key -> (types, default) or nested dict
SCHEMA = {
    "seed": ((int,), None),
    "output_dir": ((str,), None),
    "dataset": {
        "schema": ((str,), "synthetic"),
        "path": ((str, type(None)), None),
        "target": ((str, type(None)), None),
        "time_column": ((str, type(None)), None),
        "T_x": ((int,), 24),
        "T_y": ((int,), 8),
        "stride": ((int,), 1),
        "split": ((list,), [0.7, 0.1, 0.2]),
        "synthetic": {
            "n": ((int,), 4),
            "T": ((int,), 512),
            "noise_std": (_NUM, 0.1),
            "seed": ((int,), 0),
        },
    },
    "model": {
        "encoder": ((str,), "LT"),
        "score_model": ((str,), "FC"),
        "dual": ((bool,), True),
        "score_prior": ((bool,), True),
        "sampler": {
            "kind": ((str,), "AS"),
            "sub_steps": ((int,), 1),
            "steps": ((int, type(None)), None),
        },
        "latent_dim": ((int,), 8),
        "schedule": {
            "N": ((int,), 50),
            "sigma_sq_min": (_NUM, 1e-4),
            "sigma_sq_max": (_NUM, 0.02),
            "convention": ((str,), "ddpm"),
        },
        "loss_weights": ((list,), [1.0, 1.0]),
        "d_model": ((int,), 64),
        "heads": ((int,), 4),
        "blocks": ((int,), 2),
        "hidden": ((int,), 128),
        "fusion_hidden": ((int,), 64),
        "scale_mode": ((str,), "sqrt-d"),
        "fusion_step": ((int, type(None)), None),
        "prior_start": ((str,), "posterior"),
        "dsm_mode": ((str,), "eps"),
    },
    "training": {
        "epochs": ((int,), 30),
        "batch_size": ((int,), 32),
        "learning_rate": (_NUM, 1e-3),
        "clip_norm": (_NUM, 1.0),
        "optimizer": ((str,), "adam"),
    },
}

CHOICES = {
    "dataset.schema": ("ett", "generic", "synthetic"),
    "model.encoder": ("FC", "CNN", "LT"),
    "model.score_model": ("FC", "CNN"),
    "model.sampler.kind": ("AS", "RD", "PF"),
    "model.schedule.convention": ("ddpm", "variance-product"),
    "model.scale_mode": ("sqrt-d", "num-variables"),
    "model.prior_start": ("posterior", "gaussian"),
    "model.dsm_mode": ("score", "eps"),
    "training.optimizer": ("adam",),
}

POSITIVE = {
    "dataset.T_x", "dataset.T_y", "dataset.stride", "dataset.synthetic.n", "dataset.synthetic.T",
    "model.sampler.sub_steps", "model.latent_dim", "model.schedule.N", "model.d_model", "model.heads",
    "model.blocks", "model.hidden", "model.fusion_hidden", "training.epochs", "training.batch_size",
    "training.learning_rate", "training.clip_norm",
}


def _coerce(value, types, key):
    # YAML 1.1 reads "1e-4" as a string
    if isinstance(value, str) and float in types:
        try:
            return float(value)
        except ValueError:
            pass
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(key, f"expected {'/'.join(t.__name__ for t in types)}, got bool")
    if isinstance(value, int) and float in types and int not in types:
        return float(value)
    if not isinstance(value, types):
        raise ConfigError(key, f"expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")
    return value


def _validate(raw: dict, schema: dict, prefix: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(prefix or "<root>", "expected a mapping")
    for key in raw:
        if key not in schema:
            raise ConfigError(f"{prefix}{key}", "unknown key")
    out = {}
    for key, spec in schema.items():
        path = f"{prefix}{key}"
        if isinstance(spec, dict):
            out[key] = _validate(raw.get(key) or {}, spec, path + ".")
            continue
        types, default = spec
        if key not in raw:
            out[key] = copy.deepcopy(default)
            continue
        value = _coerce(raw[key], types, path)
        if path in CHOICES and value not in CHOICES[path]:
            raise ConfigError(path, f"must be one of {CHOICES[path]}, got {value!r}")
        if path in POSITIVE and value is not None and value <= 0:
            raise ConfigError(path, f"must be positive, got {value}")
        out[key] = value
    return out


def validate(raw: dict | None) -> dict:
    """Return a fully populated config dict or raise :class:`ConfigError` naming the key path."""
    cfg = _validate(raw or {}, SCHEMA, "")
    if cfg["seed"] is None:
        env = os.environ.get(SEED_ENV)
        try:
            cfg["seed"] = int(env) if env else 0
        except ValueError:
            raise ConfigError("seed", f"${SEED_ENV} is not an integer: {env!r}") from None
    if cfg["seed"] < 0:
        raise ConfigError("seed", "must be non-negative")
    ds = cfg["dataset"]
    split = ds["split"]
    if len(split) != 3 or not all(isinstance(v, _NUM) and not isinstance(v, bool) and v >= 0 for v in split) \
            or abs(sum(split) - 1) > 1e-9:
        raise ConfigError("dataset.split", f"expected three non-negative ratios summing to 1, got {split}")
    if ds["schema"] != "synthetic" and not ds["path"]:
        raise ConfigError("dataset.path", f"required for schema {ds['schema']!r}")
    if ds["synthetic"]["noise_std"] < 0:
        raise ConfigError("dataset.synthetic.noise_std", "must be non-negative")
    m = cfg["model"]
    w = m["loss_weights"]
    if len(w) != 2 or not all(isinstance(v, _NUM) and not isinstance(v, bool) and v >= 0 for v in w):
        raise ConfigError("model.loss_weights", f"expected two non-negative numbers, got {w}")
    if m["dual"] and not m["score_prior"]:
        raise ConfigError("model.dual", "dual fusion requires model.score_prior: true")
    s = m["schedule"]
    if not 0 < s["sigma_sq_min"] < s["sigma_sq_max"] < 1:
        raise ConfigError("model.schedule", "need 0 < sigma_sq_min < sigma_sq_max < 1")
    if m["d_model"] % m["heads"]:
        raise ConfigError("model.heads", f"must divide d_model={m['d_model']}")
    if m["sampler"]["steps"] is not None and not 1 <= m["sampler"]["steps"] <= s["N"]:
        raise ConfigError("model.sampler.steps", f"must lie in 1..{s['N']}")
    if m["fusion_step"] is not None and not 1 <= m["fusion_step"] <= s["N"]:
        raise ConfigError("model.fusion_step", f"must lie in 1..{s['N']}")
    return cfg


def load(path) -> dict:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError("<file>", f"{path} does not exist") from None
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"YAML parse error: {exc}") from None
    cfg = validate(raw)
    # relative paths are read against the config file's directory
    if cfg["dataset"]["path"] and not Path(cfg["dataset"]["path"]).is_absolute():
        cfg["dataset"]["path"] = str((path.parent / cfg["dataset"]["path"]).resolve())
    if cfg["output_dir"] and not Path(cfg["output_dir"]).is_absolute():
        cfg["output_dir"] = str((path.parent / cfg["output_dir"]).resolve())
    return cfg
