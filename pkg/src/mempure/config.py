"""Run configuration: one YAML file drives every CLI subcommand.

A config is a nested dict. Unknown keys are rejected (typo safety), known
keys are merged over the defaults below, and the resolved result is echoed
next to the artifacts of every run together with its hash.
"""

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .attacks import AttackSpec
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration file or option combination."""


DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {
        "source": "synth",            # synth | directory | npz
        "npz_path": None,             # for source: npz
        "synth": {
            "n_classes": 10,
            "per_class": 10,
            "image_size": 64,
        },
        "manifest": {                 # for source: directory
            "root": None,
            "class_count": 0,
            "images_per_class": 0,
            "train_k": 0,
            "test_k": 1,
            "image_size": 64,
            "channels": 1,
        },
        "train_k": 8,                 # split rule for synth / npz sources
    },
    "model": {
        "top_channels": 64,
        "bottom_channels": None,
        "n_items": 100,
        "reduce_top": 4,
        "reduce_bottom": 8,
        "gamma": None,
        "scorer_hidden": None,
        "metric": "learned",
    },
    "train": {
        "targets": ["purifier", "classifier"],
        "epochs": 300,
        "batch_size": 32,
        "lr_init": 1e-3,
        "lr_final": 1e-4,
        "warmup_epochs": 10,
        "gan_start_epoch": None,      # default: right after lr warmup
        "weight_decay": 0.05,
        "entropy_alpha": 2e-4,
        "sigma": 1e-4,
        "beta_max": 1e4,
        "use_adversarial": True,
        "perceptual_weights": None,
        "checkpoint_every": 0,
        "disc_params": {},            # PatchDiscriminator overrides, e.g. base_channels
    },
    "classifier": {
        "backbone": "veincnn",
        "epochs": 30,
        "batch_size": 32,
        "lr": 1e-3,
        "embedding_dim": 128,
    },
    "attacks": [
        {"family": "fgsm", "epsilon": 0.05},
    ],
    "evaluate": {
        "classifier_id": "veincnn",
        "attack_batch": 64,
    },
}


def _merge(defaults, override, path):
    if not isinstance(override, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(override).__name__}")
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict) and defaults[key]:
            merged[key] = _merge(defaults[key], value, here)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(path=None, overrides=None):
    """Read a YAML config, layer it over the defaults, and validate it.

    `overrides` is a flat dict applied last (used by CLI flags): keys are
    dotted paths like "train.epochs"; None values are skipped.
    """
    user = {}
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
    cfg = _merge(DEFAULTS, user, "")
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node[part]
        node[leaf] = value
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    """Check everything up front so no subcommand fails halfway through."""
    if not isinstance(cfg.get("seed"), int):
        raise ConfigError("seed: must be an integer")
    source = cfg["data"]["source"]
    if source not in ("synth", "directory", "npz"):
        raise ConfigError(f"data.source: unknown source {source!r}")
    if source == "npz" and not cfg["data"]["npz_path"]:
        raise ConfigError("data.npz_path: required when data.source is npz")
    if source == "directory" and not cfg["data"]["manifest"]["root"]:
        raise ConfigError("data.manifest.root: required when data.source is directory")
    synth = cfg["data"]["synth"]
    if source == "synth":
        if synth["n_classes"] < 1 or synth["per_class"] < 2:
            raise ConfigError("data.synth: need n_classes >= 1 and per_class >= 2")
        if not (1 <= cfg["data"]["train_k"] < synth["per_class"]):
            raise ConfigError("data.train_k: must leave at least one test image per class")
    for target in cfg["train"]["targets"]:
        if target not in ("purifier", "classifier"):
            raise ConfigError(f"train.targets: unknown target {target!r}")
    if cfg["model"]["metric"] not in ("learned", "cosine"):
        raise ConfigError("model.metric: must be 'learned' or 'cosine'")
    try:
        build_train_config(cfg).validate()
        build_attack_specs(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["classifier"]["epochs"] < 1:
        raise ConfigError("classifier.epochs: must be >= 1")
    return cfg


def build_train_config(cfg):
    """TrainConfig assembled from the train + model sections and the run seed."""
    t = cfg["train"]
    return TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"], lr_init=t["lr_init"],
        lr_final=t["lr_final"], warmup_epochs=t["warmup_epochs"],
        gan_start_epoch=t["gan_start_epoch"],
        weight_decay=t["weight_decay"], entropy_alpha=t["entropy_alpha"],
        sigma=t["sigma"], beta_max=t["beta_max"],
        use_adversarial=t["use_adversarial"],
        perceptual_weights=t["perceptual_weights"],
        checkpoint_every=t["checkpoint_every"], seed=cfg["seed"],
        model_params=dict(cfg["model"]), disc_params=dict(t["disc_params"]))


def build_attack_specs(cfg):
    """AttackSpec list from the attacks section; unknown fields rejected."""
    specs = []
    for i, entry in enumerate(cfg["attacks"]):
        entry = dict(entry)
        entry.setdefault("seed", cfg["seed"])
        try:
            specs.append(AttackSpec(**entry).validate())
        except TypeError as exc:
            raise ConfigError(f"attacks[{i}]: {exc}") from exc
    return specs


def config_hash(cfg):
    """Stable short digest of the resolved config."""
    blob = json.dumps(cfg, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def dump_config(cfg, path):
    """Echo the effective config (plus its hash) next to the run artifacts."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(cfg)
    payload["config_hash"] = config_hash(cfg)
    with open(path, "w") as fh:
        yaml.safe_dump(payload, fh, sort_keys=True)
    return path
