"""Run configuration: a JSON document with sections
data / model / loss / optim / schedule / eval plus a top-level seed.

``default_config`` is the desk-scale setup; ``smoke_config`` is a tiny
2-identity variant for fast end-to-end checks. CLI flags overlay the loaded
document (deep merge, scalars replace)."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .train import OptimConfig, Schedule, TrainSettings


def default_config() -> dict:
    return {
        "seed": 7,
        "data": {
            "identities": 20,
            "tracklets_per_identity": 8,
            "cameras": 2,
            "frames_per_tracklet": 12,
            "image": [64, 32],
            "palette": "a",
            "query_per_identity": 1,
            "gallery_per_identity": 2,
            "unmatched_queries": 0,
            "distractors": 0,
            "batch_p": 8,
            "batch_k": 4,
        },
        "model": {
            "channels": 32,
            "frames_per_clip": 6,
            "fusion": "b",
            "use_asre": True,
            "branches": ["identity", "re", "ir"],
            "fuse_attributes": True,
        },
        "loss": {
            "lambda_cent": 1.5,
            "lambda_bce": 0.0005,
            "lambda_pmi_low": 0.005,
            "lambda_pmi_high": 0.01,
            "bce_threshold": 0.15,
            "smoothing_eps": 0.1,
            "use_pmi": True,
            "use_bce": True,
        },
        "optim": {
            "lr": 0.0003,
            "weight_decay": 0.0005,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
            "center_lr": 0.5,
        },
        "schedule": {
            "epochs": 60,
            "decay_epochs": [20, 40],
            "decay_factor": 0.1,
            "checkpoint_every": 20,
            "passes_per_epoch": 4,
        },
        "eval": {
            "metric": "cosine",
            "setup": "usual",
            "same_camera_rule": True,
            "seed": 99,
        },
    }


def smoke_config() -> dict:
    cfg = default_config()
    cfg["data"].update({
        "identities": 2, "tracklets_per_identity": 6, "frames_per_tracklet": 6,
        "image": [32, 16], "batch_p": 2, "batch_k": 3,
    })
    cfg["model"].update({"channels": 8, "frames_per_clip": 2})
    cfg["schedule"].update({
        "epochs": 50, "decay_epochs": [], "checkpoint_every": 0,
        "passes_per_epoch": 1,
    })
    return cfg


def _merge(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides: dict | None = None, preset: str | None = None) -> dict:
    """Resolve defaults (or a preset), an optional JSON file, and overrides."""
    if preset is None:
        cfg = default_config()
    elif preset == "smoke":
        cfg = smoke_config()
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


# -- section constructors ----------------------------------------------------

def model_config(cfg: dict, num_identities: int) -> ModelConfig:
    m = cfg["model"]
    h, w = cfg["data"]["image"]
    return ModelConfig(
        channels=m["channels"],
        frames_per_clip=m["frames_per_clip"],
        image_height=h,
        image_width=w,
        num_identities=num_identities,
        fusion=m["fusion"],
        use_asre=m["use_asre"],
        branches=tuple(m["branches"]),
        fuse_attributes=m["fuse_attributes"],
    )


def loss_weights(cfg: dict) -> LossWeights:
    s = cfg["loss"]
    return LossWeights(
        lambda_cent=s["lambda_cent"],
        lambda_bce=s["lambda_bce"],
        lambda_pmi_low=s["lambda_pmi_low"],
        lambda_pmi_high=s["lambda_pmi_high"],
        bce_threshold=s["bce_threshold"],
        smoothing_eps=s["smoothing_eps"],
    )


def optim_config(cfg: dict) -> OptimConfig:
    s = cfg["optim"]
    return OptimConfig(
        lr=s["lr"], weight_decay=s["weight_decay"], beta1=s["beta1"],
        beta2=s["beta2"], eps=s["eps"], center_lr=s["center_lr"],
    )


def schedule(cfg: dict) -> Schedule:
    s = cfg["schedule"]
    return Schedule(
        total_epochs=s["epochs"],
        decay_epochs=tuple(s["decay_epochs"]),
        decay_factor=s["decay_factor"],
    )


def train_settings(cfg: dict) -> TrainSettings:
    return TrainSettings(
        batch_p=cfg["data"]["batch_p"],
        batch_k=cfg["data"]["batch_k"],
        passes_per_epoch=cfg["schedule"]["passes_per_epoch"],
        checkpoint_every=cfg["schedule"]["checkpoint_every"],
        use_pmi=cfg["loss"]["use_pmi"],
        use_bce=cfg["loss"]["use_bce"],
        seed=cfg["seed"],
    )


def dataset_kwargs(cfg: dict) -> dict:
    d = cfg["data"]
    return {
        "num_identities": d["identities"],
        "tracklets_per_identity": d["tracklets_per_identity"],
        "cameras": d["cameras"],
        "frames_per_tracklet": d["frames_per_tracklet"],
        "image": tuple(d["image"]),
        "palette": d["palette"],
        "query_per_identity": d["query_per_identity"],
        "gallery_per_identity": d["gallery_per_identity"],
        "unmatched_queries": d["unmatched_queries"],
        "distractors": d["distractors"],
    }
