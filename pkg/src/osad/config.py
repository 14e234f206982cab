"""Nested run configuration: defaults < file < ``--set`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import yaml

from .attacks import AttackConfig, RoaRect
from .data import CHANNELS, IMAGE_SIZES, DataConfig, load_split
from .errors import ConfigError
from .networks import ModelConfig
from .training import TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "run_id": None,
    "output_dir": "runs",
    "method": None,
    "data": {
        "dataset": "toy",
        "split": 1,
        "root": None,
        "cache_dir": None,
        "val_fraction": 0.1,
        "toy_train_per_class": 300,
        "toy_test_per_class": 100,
    },
    "model": {
        "profile": "toy",
        "widths": None,
        "blocks": None,
        "peer_widths": None,
        "dec": True,
        "ssd": True,
        "caml": True,
        "denoiser": None,
    },
    "dadl": {"enabled": True, "reduction_ratio": 16, "spatial_kernel": 7},
    "train": {
        "epochs": 10,
        "batch_size": 16,
        "learning_rate": 1e-3,
        "adversarial": True,
        "val_attack": True,
        "weights": {"cls_adv": 1.0, "rec": 1.0, "ssd": 1.0, "mut": 1.0},
        "rec_reduction": "sum",
    },
    "attack": {
        "family": "pgd",
        "epsilon": 0.3,
        "step_size": 0.01,
        "iterations": 5,
        "pixel_range": [0.0, 1.0],
        "loss_target": "softmax_ce",
        "roa": {"height": None, "width": None, "search": "grid", "inner_steps": 10,
                "stride": None, "candidates": 5, "step_size": 0.05},
    },
    "openmax": {"sigma": 3, "tail_size": 20, "threshold": 0.95, "feature_space": "latent", "belief": "cdf"},
    "eval": {
        "attacks": ["none", "fgsm", "pgd"],
        "batch_size": 256,
        "blackbox": {"substitute": "toy_alt", "epochs": 5, "width": 16},
        "ood": {"source": "synthetic", "path": None, "mode": "resize", "count": 400},
    },
}

REQUIRED = ("data.root",)

# component presets for the baselines and the full model
METHODS: dict[str, dict] = {
    "clean": {"train.adversarial": False, "model.dec": False, "dadl.enabled": False,
              "model.ssd": False, "model.caml": False, "model.denoiser": "none"},
    "adversarial_training": {"model.dec": False, "dadl.enabled": False, "model.ssd": False,
                             "model.caml": False, "model.denoiser": "none"},
    "feature_denoising": {"model.dec": False, "dadl.enabled": False, "model.ssd": False,
                          "model.caml": False, "model.denoiser": "mean_filter"},
    "osdn": {"model.dec": True, "dadl.enabled": False, "model.ssd": True, "model.caml": False,
             "model.denoiser": "mean_filter"},
    "ours_dadl": {"model.dec": True, "dadl.enabled": True, "model.ssd": True, "model.caml": False,
                  "model.denoiser": None},
    "ours": {"model.dec": True, "dadl.enabled": True, "model.ssd": True, "model.caml": True,
             "model.denoiser": None},
}


def _get(tree: dict, dotted: str):
    node = tree
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise KeyError(dotted)
        node = node[part]
    return node


def set_key(tree: dict, dotted: str, value, strict: bool = True):
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            if strict:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[part] = {}
        node = node[part]
    if strict and parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def deep_merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        key = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[k], dict) and isinstance(v, dict) and k != "weights":
            out[k] = deep_merge(out[k], v, key + ".")
        else:
            out[k] = v
    return out


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path: str | os.PathLike | None = None, overrides=(), env=None) -> dict:
    """Resolve a configuration tree; raises ConfigError naming any missing key."""
    env = os.environ if env is None else env
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        loaded = yaml.safe_load(p.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must contain a mapping")
        cfg = deep_merge(cfg, loaded)
    parsed = [parse_override(o) if isinstance(o, str) else o for o in overrides]
    method = dict(parsed).get("method", cfg.get("method"))
    if method is not None:
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; valid options: {', '.join(METHODS)}")
        for k, v in METHODS[method].items():
            set_key(cfg, k, v)
    for k, v in parsed:
        set_key(cfg, k, v)
    if env.get("OSAD_DATA_ROOT"):
        cfg["data"]["root"] = env["OSAD_DATA_ROOT"]
    validate(cfg)
    return cfg


def validate(cfg: dict):
    for key in REQUIRED:
        if _get(cfg, key) in (None, ""):
            raise ConfigError(f"missing required key {key}")
    load_split(cfg["data"]["dataset"], cfg["data"]["split"])
    data_config(cfg)
    model_config(cfg, num_classes=2)
    attack_config(cfg)
    train_config(cfg)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


# -- typed views -------------------------------------------------------------------

def data_config(cfg: dict) -> DataConfig:
    d = cfg["data"]
    cache = d["cache_dir"] or str(Path(d["root"]) / "cache")
    return DataConfig(d["dataset"], int(d["split"]), d["root"], cache, float(d["val_fraction"]),
                      int(cfg["seed"]), int(d["toy_train_per_class"]), int(d["toy_test_per_class"]))


def model_config(cfg: dict, num_classes: int) -> ModelConfig:
    m, dadl = cfg["model"], cfg["dadl"]
    ds = cfg["data"]["dataset"]
    tup = lambda v: tuple(v) if v is not None else None  # noqa: E731
    try:
        return ModelConfig(
            num_classes=num_classes, in_channels=CHANNELS[ds], image_size=IMAGE_SIZES[ds],
            profile=m["profile"], widths=tup(m["widths"]), blocks=tup(m["blocks"]),
            peer_widths=tup(m["peer_widths"]), dec=bool(m["dec"]), dadl=bool(dadl["enabled"]),
            ssd=bool(m["ssd"]), caml=bool(m["caml"]), denoiser=m["denoiser"],
            reduction_ratio=int(dadl["reduction_ratio"]), spatial_kernel=int(dadl["spatial_kernel"]),
            pixel_range=tuple(cfg["attack"]["pixel_range"]),
        )
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"invalid model configuration: {exc}") from exc


def attack_config(cfg: dict, family: str | None = None) -> AttackConfig:
    a = cfg["attack"]
    r = a["roa"]
    fam = (family or a["family"]).lower()
    step = r["step_size"] if fam == "roa" else a["step_size"]
    rect = RoaRect(r["height"], r["width"], r["search"], int(r["inner_steps"]), r["stride"], int(r["candidates"]))
    return AttackConfig(fam, float(a["epsilon"]), float(step), int(a["iterations"]),
                        tuple(a["pixel_range"]), rect, a["loss_target"])


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    attack = attack_config(cfg) if t["adversarial"] else attack_config(cfg, "none")
    try:
        return TrainConfig(epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
                           learning_rate=float(t["learning_rate"]), seed=int(cfg["seed"]),
                           attack=attack, val_attack=bool(t["val_attack"]), weights=dict(t["weights"]),
                           rec_reduction=t["rec_reduction"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
