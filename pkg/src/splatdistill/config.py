"""Run configuration: built-in defaults, a YAML file on top, then ``--set`` overrides.

The schema lives next to this module (``data/config.schema.json``) and is
checked after all layers are merged.
"""

from __future__ import annotations

import copy
import json
import re
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from .errors import ConfigError

TEACHER_DEFAULTS = [
    {"id": "lang", "dim": 16, "labels": "semantic", "noise": 0.0, "seed": 0,
     "weight": 1.0, "contrastive_weight": 0.02, "start_epoch": 0},
    {"id": "dino", "dim": 32, "labels": "semantic", "noise": 0.0, "seed": 1,
     "weight": 1.0, "contrastive_weight": 0.02, "start_epoch": 0},
    {"id": "pe", "dim": 8, "labels": "instance", "noise": 0.0, "seed": 2,
     "weight": 1.0, "contrastive_weight": 0.02, "start_epoch": 0},
]

DEFAULTS = {
    "seed": 0,
    "workdir": "run",
    "scenes": {
        "train": [{"name": "train0", "layout": "tabletop", "variant": 0},
                  {"name": "train1", "layout": "tabletop", "variant": 1}],
        "heldout": [{"name": "heldout", "layout": "tabletop", "variant": 2, "palette_shift": 0.15}],
        "count_scale": 1.0,
    },
    "views": {"n_views": 12, "width": 96, "height": 72, "fov_x_deg": 70.0},
    "raster": {"tile_size": 16, "guard_band": 1.3, "near": 0.01},
    "teachers": TEACHER_DEFAULTS,
    "uplift": {"tau_w": 0.05, "standardize_first": True},
    "encoder": {"input_mode": "gs_full", "hidden_widths": [64, 64, 64], "out_dim": 64,
                "neighborhood_k": 16, "head_hidden": 64, "estimate_normals": True},
    "loss": {"cosine": 1.0, "smooth_l1": 1.0, "smooth_l1_beta": 1.0, "temperature": 0.1},
    "optim": {"lr": 0.003, "epochs": 100, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
              "min_lr_fraction": 0.0},
    "augment": {"epsilon": 0.0, "gamma": 0.0, "rho": 0.3, "rigid": False},
    "plan": {"n_positions": 6, "eye_height": 1.5, "voxel": 0.25, "clearance": 0.3, "d_min": 0.5,
             "pitch_deg": -35.0, "width": 160, "height": 120, "fov_x_deg": 90.0,
             "min_overlap": 0.1, "max_pairs_per_view": 3},
    "adapt": {"steps": 300, "epochs": 100, "lr": 2e-4, "omega_threshold": 0.5, "feature_scale": 0.25,
              "group_size": 4, "train_heads": True, "teachers": ["lang"]},
    "eval": {"background_classes": [0, 1], "retrieval_sigma_fraction": 0.02, "min_miou": None,
             "pca_width": 160, "pca_height": 120},
}


class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 reads "1e-3" as a string; accept exponent-only floats too
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*\.[0-9_]*|\.[0-9_]+|[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)?$"
               r"|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."))


def _yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def schema() -> dict:
    return json.loads(resources.files("splatdistill").joinpath("data/config.schema.json").read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply ``a.b.c=value``; the value is parsed as YAML (so ``1e-3``, ``[1, 2]``, ``true`` work)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = _yaml(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in {assignment!r}: {exc}") from None
    node = cfg
    parts = key.strip().split(".")
    for p in parts[:-1]:
        if isinstance(node, list):
            try:
                node = node[int(p)]
            except (ValueError, IndexError):
                raise ConfigError(f"bad list index {p!r} in {key!r}") from None
            continue
        if p not in node or not isinstance(node[p], (dict, list)):
            raise ConfigError(f"unknown config section {p!r} in {key!r}")
        node = node[p]
    last = parts[-1]
    if isinstance(node, list):
        try:
            node[int(last)] = value
        except (ValueError, IndexError):
            raise ConfigError(f"bad list index {last!r} in {key!r}") from None
    elif last not in node:
        raise ConfigError(f"unknown config key {key!r}")
    else:
        node[last] = value


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = _yaml(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, data)
    for o in overrides:
        apply_override(cfg, o)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, schema())
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    ids = [t["id"] for t in cfg["teachers"]]
    if len(set(ids)) != len(ids):
        raise ConfigError("teacher ids must be unique")
    if "lang" not in ids:
        raise ConfigError("a 'lang' teacher is required for zero-shot evaluation")
