"""Run configuration (JSON) with validation and named presets."""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any

from .errors import ConfigError

DEFAULTS: dict[str, Any] = {
    "model": {"d_in": 32, "D": 64, "H": 256, "blocks": 2},
    "K": 16,
    "rank": 4,
    "tau": 5.0,
    "strategy": "balanced",
    "cluster_mode": "stacked",
    "kmeans_iters": 50,
    "fading": {"start_epoch": None, "end_epoch": None},
    "qr": {"enabled": True, "momentum": 0.9, "weight_clamp": 0.05, "enabled_after_epoch": 0, "ce_mode": "batch"},
    "optimizer": {
        "lr": 1e-3,
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "weight_decay": 1e-4,
        "epochs": 100,
        "warmup_epochs": 10,
        "batch_size": 64,
    },
    "pretrain": {"epochs": 30, "warmup_epochs": 3, "lr": 3e-3, "weight_decay": 1e-4, "batch_size": 64},
    "data": {
        "d_in": None,
        "mean_scale": 3.0,
        "tasks": [
            {"classes": 8, "train_per_class": 30, "test_per_class": 30, "noise": 0.3},
            {"classes": 8, "train_per_class": 30, "test_per_class": 30, "noise": 0.6},
            {"classes": 6, "train_per_class": 30, "test_per_class": 30, "noise": 1.0},
            {"classes": 6, "train_per_class": 30, "test_per_class": 30, "noise": 1.5},
        ],
        "csv": None,
    },
    "precision": "f32",
    "seed": 0,
}

PRESETS: dict[str, dict[str, Any]] = {
    "EMTAL-1": {"rank": 1},
    "EMTAL-2": {"rank": 2},
    "EMTAL-4": {"rank": 4},
    # dense-layer LoRA with QR: the K=1 reduction of the MoLE layer
    "QR-only": {"K": 1},
    "MoLE-only": {"qr": {"enabled": False}},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _req(cond: bool, field: str, msg: str):
    if not cond:
        raise ConfigError(f"config field '{field}': {msg}")


def resolve(raw: dict | None = None, **overrides) -> dict:
    """Defaults <- preset <- raw <- overrides, with derived fields filled and everything validated."""
    raw = dict(raw or {})
    preset = overrides.pop("preset", None) or raw.get("preset")
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        _req(preset in PRESETS, "preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = _merge(cfg, PRESETS[preset])
        cfg["preset"] = preset
    cfg = _merge(cfg, raw)
    cfg = _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    unknown = set(cfg) - set(DEFAULTS) - {"preset"}
    _req(not unknown, sorted(unknown)[0] if unknown else "", "unknown field")

    m, opt = cfg["model"], cfg["optimizer"]
    if cfg["data"]["d_in"] is None:
        cfg["data"]["d_in"] = m["d_in"]
    epochs = opt["epochs"]
    fad = cfg["fading"]
    if fad["start_epoch"] is None:
        fad["start_epoch"] = epochs // 2
    if fad["end_epoch"] is None:
        fad["end_epoch"] = epochs
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    m, opt, qr, fad = cfg["model"], cfg["optimizer"], cfg["qr"], cfg["fading"]
    for key in ("d_in", "D", "H"):
        _req(isinstance(m[key], int) and m[key] >= 1, f"model.{key}", "must be a positive integer")
    _req(isinstance(m["blocks"], int) and m["blocks"] >= 0, "model.blocks", "must be a non-negative integer")
    K = cfg["K"]
    _req(isinstance(K, int) and K >= 1 and m["H"] % K == 0, "K", f"K={K} must divide H={m['H']}")
    r = cfg["rank"]
    _req(isinstance(r, int) and r >= 1, "rank", "must be >= 1")
    _req(r <= min(m["D"], m["H"] // K), "rank", f"rank={r} exceeds min(D, H/K)={min(m['D'], m['H'] // K)}")
    _req(cfg["tau"] > 0, "tau", "must be > 0")
    _req(cfg["strategy"] in ("balanced", "contiguous"), "strategy", "must be 'balanced' or 'contiguous'")
    _req(cfg["cluster_mode"] in ("stacked", "up"), "cluster_mode", "must be 'stacked' or 'up'")
    _req(0 < qr["momentum"] < 1, "qr.momentum", "must lie in (0, 1)")
    _req(qr["weight_clamp"] > 0, "qr.weight_clamp", "must be > 0")
    _req(qr["ce_mode"] in ("batch", "ema"), "qr.ce_mode", "must be 'batch' or 'ema'")
    _req(opt["lr"] > 0, "optimizer.lr", "must be > 0")
    _req(opt["epochs"] >= 1, "optimizer.epochs", "must be >= 1")
    _req(0 <= opt["warmup_epochs"] < opt["epochs"], "optimizer.warmup_epochs", "must be < epochs")
    _req(opt["batch_size"] >= 1, "optimizer.batch_size", "must be >= 1")
    _req(len(opt["betas"]) == 2 and all(0 <= b < 1 for b in opt["betas"]), "optimizer.betas", "two values in [0, 1)")
    _req(fad["start_epoch"] < fad["end_epoch"], "fading.start_epoch", "must be < fading.end_epoch")
    pre = cfg["pretrain"]
    _req(pre["epochs"] >= 1 and 0 <= pre["warmup_epochs"] < pre["epochs"], "pretrain.warmup_epochs",
         "must be < pretrain.epochs")
    _req(cfg["precision"] in ("f32", "f64"), "precision", "must be 'f32' or 'f64'")
    _req(isinstance(cfg["seed"], int) and cfg["seed"] >= 0, "seed", "must be a non-negative integer")
    _req(len(cfg["data"]["tasks"]) >= 1, "data.tasks", "need at least one task")


def load(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc})") from None


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
