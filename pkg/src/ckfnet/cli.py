"""Command-line entry point: ``ckfnet <verb> --config cfg.json --out DIR [--set key=value ...]``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from . import bench
from .training import (
    ConfigError,
    NonFiniteLoss,
    TrainingConfig,
    generate_all,
    generate_dataset,
    read_dataset,
    save_weights,
    load_weights,
    train,
    write_dataset,
    write_history,
)

VERBS = ("gen-data", "train", "eval", "bench", "horizon", "noise-sweep")
SEED_ENV = "CKFNET_SEED"

log = logging.getLogger("ckfnet")


@dataclass
class Command:
    verb: str
    config: Optional[str]
    overrides: dict
    out: str
    data: Optional[str] = None
    weights: Optional[str] = None
    resume: bool = False
    threads: Optional[int] = None
    horizons: tuple = bench.HORIZONS
    scales: tuple = bench.NOISE_SCALES
    retrain: bool = False
    n_traj: int = 50
    argv: list = field(default_factory=list)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def _overrides(pairs: Sequence[str], parser: argparse.ArgumentParser) -> dict:
    out = {}
    keys = set(TrainingConfig.keys())
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            parser.error(f"--set expects key=value, got {pair!r}")
        if key not in keys:
            parser.error(f"unknown override key {key!r}")
        out[key] = value
    return out


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.split(",") if t)


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.split(",") if t)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ckfnet", description="Cubature Kalman filter and CKFNet experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", metavar="verb", parser_class=_Parser)
    sub.required = True
    helps = {
        "gen-data": "simulate train/val/test trajectories",
        "train": "train CKFNet",
        "eval": "AMSE of CKF, KF oracle and CKFNet on the test split",
        "bench": "time the filters per trajectory",
        "horizon": "AMSE at longer test horizons",
        "noise-sweep": "AMSE under scaled noise with a mismatched CKF",
    }
    for verb in VERBS:
        p = sub.add_parser(verb, help=helps[verb])
        p.add_argument("--config", help="JSON config file (defaults are used when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
        if verb in ("train", "eval"):
            p.add_argument("--data", help="directory written by gen-data")
        if verb in ("eval", "bench", "horizon", "noise-sweep"):
            p.add_argument("--weights", help="weights file (default: <out>/weights.json)")
        if verb == "train":
            p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.json")
        if verb == "horizon":
            p.add_argument("--horizons", type=_ints, default=bench.HORIZONS)
        if verb == "noise-sweep":
            p.add_argument("--scales", type=_floats, default=bench.NOISE_SCALES)
            p.add_argument("--retrain", action="store_true", help="train one model per noise scale")
        if verb == "bench":
            p.add_argument("--n-traj", type=int, default=50)
    return parser


def parse_args(argv: Sequence[str]) -> Command:
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        parser.exit(2, "ckfnet: error: a verb is required\n")
    if argv[0] not in VERBS and not argv[0].startswith("-"):
        parser.exit(2, f"ckfnet: error: unknown verb {argv[0]!r} (choose from {', '.join(VERBS)})\n")
    ns = parser.parse_args(argv)
    if ns.threads is not None and ns.threads < 1:
        parser.error("--threads must be >= 1")
    return Command(
        verb=ns.verb,
        config=ns.config,
        overrides=_overrides(ns.overrides, parser),
        out=ns.out,
        data=getattr(ns, "data", None),
        weights=getattr(ns, "weights", None),
        resume=getattr(ns, "resume", False),
        threads=ns.threads,
        horizons=getattr(ns, "horizons", bench.HORIZONS),
        scales=getattr(ns, "scales", bench.NOISE_SCALES),
        retrain=getattr(ns, "retrain", False),
        n_traj=getattr(ns, "n_traj", 50),
        argv=list(argv),
    )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def resolve_config(cmd: Command) -> tuple[TrainingConfig, dict]:
    if cmd.config:
        path = Path(cmd.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = TrainingConfig.load(path)
    else:
        cfg = TrainingConfig()
    cfg = cfg.with_overrides(cmd.overrides)
    seed_source = {"base_seed": cfg.base_seed, "source": "config"}
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg = cfg.with_overrides({"base_seed": int(env)})
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
        seed_source = {"base_seed": cfg.base_seed, "source": SEED_ENV}
    return cfg, seed_source


def _write_manifest(cmd: Command, out: Path, cfg: TrainingConfig, seeds: dict, artifacts: Sequence[Path],
                    inputs: Sequence[Path] = ()) -> None:
    manifest = {
        "verb": cmd.verb,
        "argv": cmd.argv,
        "version": __version__,
        "config": cfg.to_dict(),
        "config_fingerprint": cfg.fingerprint(),
        "overrides": cmd.overrides,
        "seed": seeds,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "artifacts": {str(p.relative_to(out)): _sha256(p) for p in artifacts},
    }
    (out / f"manifest_{cmd.verb}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_split(cmd: Command, cfg: TrainingConfig, split: str, inputs: list):
    if cmd.data:
        path = Path(cmd.data) / f"{split}.jsonl"
        if not path.is_file():
            raise FileNotFoundError(f"dataset file not found: {path}")
        inputs.append(path)
        return read_dataset(path, split)
    return generate_dataset(cfg, cfg.model(), split)


def _weights(cmd: Command, out: Path, inputs: list):
    path = Path(cmd.weights) if cmd.weights else out / "weights.json"
    if not path.is_file():
        raise FileNotFoundError(f"weights file not found: {path}")
    inputs.append(path)
    return load_weights(path)


def _do_gen(cmd, cfg, out, inputs):
    data = generate_all(cfg)
    paths = []
    for split, ds in data.items():
        p = out / f"{split}.jsonl"
        write_dataset(p, ds)
        paths.append(p)
    return paths


def _do_train(cmd, cfg, out, inputs):
    model = cfg.model()
    data = {s: _load_split(cmd, cfg, s, inputs) for s in ("train", "val")}
    ckpt = out / "checkpoint.json"
    history_path = out / "loss_history.txt"
    result = train(cfg, model, data, checkpoint_path=ckpt, resume=cmd.resume)
    weights = out / "weights.json"
    save_weights(weights, result.arch, result.params, {"best_epoch": result.best_epoch, "best_val": result.best_val})
    final = out / "final_weights.json"
    save_weights(final, result.arch, result.final_params, {"epoch": cfg.epochs})
    write_history(history_path, result.history)
    return [weights, final, ckpt, history_path]


def _do_eval(cmd, cfg, out, inputs):
    arch, tape = _weights(cmd, out, inputs)
    model = cfg.model()
    test = _load_split(cmd, cfg, "test", inputs)
    data_model = model.scaled(cfg.noise_scale)
    rows = bench.evaluate(data_model, test.trajectories, tape, arch, cfg.noise_scale)
    return [bench.write_csv(bench.timestamped(out, "eval"), rows)]


def _do_bench(cmd, cfg, out, inputs):
    arch, tape = _weights(cmd, out, inputs)
    rows = bench.time_filters(tape, arch, cfg.model(), cmd.n_traj, cfg.T, cfg.base_seed)
    for r in rows:
        log.info("%-10s %.6f s/trajectory (sd %.6f)", r.algorithm, r.time_s, r.row()["time_std_s"])
    return [bench.write_csv(bench.timestamped(out, "bench"), rows, extra_columns=("time_std_s",))]


def _do_horizon(cmd, cfg, out, inputs):
    arch, tape = _weights(cmd, out, inputs)
    rows = bench.horizon_sweep(tape, arch, cfg.model(), cmd.horizons, cfg.n_test, cfg.base_seed, cfg.noise_scale)
    return [bench.write_csv(bench.timestamped(out, "horizon"), rows)]


def _do_noise(cmd, cfg, out, inputs):
    model = cfg.model()
    artifacts = []
    if cmd.retrain:
        params = {}
        arch = None
        for s in cmd.scales:
            scfg = cfg.with_overrides({"noise_scale": s})
            result = train(scfg, model, {k: generate_dataset(scfg, model, k) for k in ("train", "val")})
            params[s] = result.params
            arch = result.arch
            w = out / f"weights_scale{s:g}.json"
            save_weights(w, result.arch, result.params, {"noise_scale": s})
            artifacts.append(w)
    else:
        arch, params = _weights(cmd, out, inputs)
    rows = bench.noise_sweep(params, arch, model, cmd.scales, cfg.n_test, cfg.base_seed, cfg.T)
    artifacts.append(bench.write_csv(bench.timestamped(out, "noise_sweep"), rows))
    return artifacts


HANDLERS = {
    "gen-data": _do_gen,
    "train": _do_train,
    "eval": _do_eval,
    "bench": _do_bench,
    "horizon": _do_horizon,
    "noise-sweep": _do_noise,
}


def _thread_limit(n: Optional[int]):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(cmd: Command) -> int:
    try:
        cfg, seeds = resolve_config(cmd)
        out = Path(cmd.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs: list = [Path(cmd.config)] if cmd.config else []
        with _thread_limit(cmd.threads):
            artifacts = HANDLERS[cmd.verb](cmd, cfg, out, inputs)
        _write_manifest(cmd, out, cfg, seeds, artifacts, inputs)
        for a in artifacts:
            print(a)
        return 0
    except (FileNotFoundError, ConfigError, NonFiniteLoss, ValueError, OSError) as exc:
        print(f"ckfnet {cmd.verb}: error: {exc}", file=sys.stderr)
        return 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    argv = sys.argv[1:] if argv is None else list(argv)
    return run(parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
