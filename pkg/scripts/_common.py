"""Shared helpers for the experiment scripts."""
import json
import logging
from pathlib import Path

from ckfnet.training import TrainingConfig, generate_all, load_weights, save_weights, train, write_history


def load_config(path, overrides=None) -> TrainingConfig:
    cfg = TrainingConfig.load(path) if path else TrainingConfig()
    return cfg.with_overrides(overrides or {})


def train_or_load(cfg: TrainingConfig, out: Path, tag: str):
    """Reuse ``out/weights_<tag>.json`` if present, otherwise train and save it."""
    path = out / f"weights_{tag}.json"
    if path.exists():
        logging.info("loading %s", path)
        return load_weights(path)
    model = cfg.model()
    result = train(cfg, model, generate_all(cfg, model))
    save_weights(path, result.arch, result.params, {"best_epoch": result.best_epoch, "config": cfg.to_dict()})
    write_history(out / f"loss_history_{tag}.txt", result.history)
    return result.arch, result.params


def parse_sets(pairs):
    out = {}
    for pair in pairs or []:
        key, _, value = pair.partition("=")
        out[key] = value
    return out


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
