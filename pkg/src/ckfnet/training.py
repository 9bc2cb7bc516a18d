"""Datasets, the regularized sequence loss, and the BPTT training loop."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .hybrid import Architecture, ckfnet_backward, ckfnet_run, init_params, validate_params
from .linalg import spd_perturb
from .neural import AdamState, ParamTape, adam_step, dump_tensors, load_tensors
from .ssm import (
    MODEL_IDS,
    RngStream,
    StateSpaceModel,
    Trajectory,
    fmt17,
    make_model,
    simulate_trajectory,
)

log = logging.getLogger(__name__)

SPLIT_OFFSETS = {"train": 0, "val": 100_000, "test": 200_000}
PREDICTION_LAYERS = ("gru_S", "gru_w", "gru_fuse", "head_S", "head_w", "head_Q")
UPDATE_LAYERS = ("gru_Pxz", "gru_Pzz", "head_Pxz", "head_Pzz")


class NonFiniteLoss(RuntimeError):
    """Training diverged; the message names the batch's trajectory ids."""


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    model_id: str = "linear_full"
    T: int = 100
    n_train: int = 256
    n_val: int = 32
    n_test: int = 64
    hidden_dim: int = 128
    lr: float = 1e-3
    lam: float = 1e-4
    sigma_theta2: float = 1e4
    batch_size: int = 8
    epochs: int = 50
    clip_norm: float = 1.0
    base_seed: int = 0
    augment: bool = False
    augment_range: float = 0.2
    q: float = 0.1
    r: float = 0.1
    dt: float = 1.0
    noise_scale: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.model_id not in MODEL_IDS:
            raise ConfigError(f"model_id must be one of {MODEL_IDS}, got {self.model_id!r}")
        for key in ("T", "n_train", "n_val", "n_test", "hidden_dim", "batch_size", "epochs"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be positive")
        for key in ("clip_norm", "sigma_theta2", "q", "r", "dt", "noise_scale"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be > 0")
        if self.lr < 0 or self.lam < 0:
            raise ConfigError("lr and lam must be non-negative")
        if abs(self.lam * self.sigma_theta2 - 1.0) > 1e-12 and self.lam > 0:
            raise ConfigError(f"lam * sigma_theta2 must equal 1 (got {self.lam} * {self.sigma_theta2})")
        if not 0 <= self.augment_range < 1:
            raise ConfigError("augment_range must lie in [0, 1)")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainingConfig":
        unknown = sorted(set(raw) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        raw = dict(raw)
        # lam and sigma_theta2 are two views of one number; fill whichever is missing
        if "lam" in raw and "sigma_theta2" not in raw and raw["lam"] > 0:
            raw["sigma_theta2"] = 1.0 / raw["lam"]
        elif "sigma_theta2" in raw and "lam" not in raw:
            raw["lam"] = 1.0 / raw["sigma_theta2"]
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        out = {}
        for k, v in raw.items():
            t = types[k]
            try:
                if t == "bool":
                    if isinstance(v, str):
                        if v.lower() not in ("true", "false", "1", "0"):
                            raise ValueError(v)
                        v = v.lower() in ("true", "1")
                    out[k] = bool(v)
                elif t == "int":
                    if isinstance(v, float) and not v.is_integer():
                        raise ValueError(v)
                    out[k] = int(v)
                elif t == "float":
                    out[k] = float(v)
                else:
                    out[k] = str(v)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {k}: {v!r}") from None
        return cls(**out)

    @classmethod
    def load(cls, path) -> "TrainingConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed config ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)

    def with_overrides(self, overrides: dict) -> "TrainingConfig":
        raw = self.to_dict()
        if "lam" in overrides and "sigma_theta2" not in overrides:
            raw.pop("sigma_theta2")
        if "sigma_theta2" in overrides and "lam" not in overrides:
            raw.pop("lam")
        raw.update(overrides)
        return TrainingConfig.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Hash of everything except the epoch budget, so longer runs can resume shorter ones."""
        d = self.to_dict()
        d.pop("epochs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def model(self) -> StateSpaceModel:
        return make_model(self.model_id, self.q, self.r, self.dt)


@dataclass
class Dataset:
    split: str
    trajectories: list
    multipliers: list = field(default_factory=list)

    @property
    def states(self) -> np.ndarray:
        return np.stack([t.states for t in self.trajectories])

    @property
    def measurements(self) -> np.ndarray:
        return np.stack([t.measurements for t in self.trajectories])

    def __len__(self) -> int:
        return len(self.trajectories)


def split_seed(base_seed: int, split: str, index: int) -> int:
    return base_seed + SPLIT_OFFSETS[split] + index


def simulate_set(model: StateSpaceModel, T: int, seeds: Sequence[int], augment_range: float = 0.0):
    """Simulate one trajectory per seed; optionally jitter the eigenvalues of W and V."""
    trajs, mults = [], []
    x0 = np.zeros(model.n)
    for idx, seed in enumerate(seeds):
        mw = np.ones(model.n)
        mv = np.ones(model.m)
        gen = model
        if augment_range > 0:
            u = RngStream(seed, stream=1).uniform(1 - augment_range, 1 + augment_range, model.n + model.m)
            mw, mv = u[: model.n], u[model.n:]
            gen = model.with_noise(spd_perturb(model.W, mw), spd_perturb(model.V, mv))
        trajs.append(simulate_trajectory(gen, x0, T, RngStream(seed, stream=0), traj_id=idx))
        mults.append({"W": mw, "V": mv})
    return trajs, mults


def generate_dataset(config: TrainingConfig, model: StateSpaceModel, split: str = "train") -> Dataset:
    count = {"train": config.n_train, "val": config.n_val, "test": config.n_test}[split]
    seeds = [split_seed(config.base_seed, split, i) for i in range(count)]
    data_model = model.scaled(config.noise_scale)
    aug = config.augment_range if (config.augment and split == "train") else 0.0
    trajs, mults = simulate_set(data_model, config.T, seeds, aug)
    return Dataset(split, trajs, mults)


def generate_all(config: TrainingConfig, model: Optional[StateSpaceModel] = None) -> dict:
    model = model or config.model()
    return {s: generate_dataset(config, model, s) for s in SPLIT_OFFSETS}


def write_dataset(path, data: Dataset) -> None:
    lines = []
    for traj, mult in zip(data.trajectories, data.multipliers):
        lines.append(
            f'{{"traj_id":{traj.traj_id},"seed":{traj.seed},"model_id":{json.dumps(traj.model_id)},'
            f'"T":{traj.T},"split":{json.dumps(data.split)},'
            f'"multipliers":{{"W":{fmt17(mult["W"])},"V":{fmt17(mult["V"])}}},'
            f'"states":{fmt17(traj.states)},"measurements":{fmt17(traj.measurements)}}}'
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path, split: Optional[str] = None) -> Dataset:
    trajs, mults = [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        trajs.append(Trajectory(np.array(rec["states"], dtype=np.float64),
                                np.array(rec["measurements"], dtype=np.float64),
                                int(rec["seed"]), rec["model_id"], int(rec["traj_id"])))
        m = rec.get("multipliers") or {}
        mults.append({"W": np.array(m.get("W", [])), "V": np.array(m.get("V", []))})
        split = split or rec.get("split")
    return Dataset(split or "unknown", trajs, mults)


# -- loss --------------------------------------------------------------------

def sequence_loss(estimates, truths, params_sq_norm: float = 0.0, lam: float = 0.0, T_s: Optional[int] = None) -> float:
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truths, dtype=np.float64)
    if est.shape != tru.shape:
        raise ValueError(f"estimates {est.shape} and truths {tru.shape} differ in shape")
    T_s = T_s or est.shape[0]
    return float(np.sum((est - tru) ** 2) / T_s + lam * params_sq_norm)


def batch_data_loss(estimates: np.ndarray, truths: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over trajectories of the time-averaged squared error, and its gradient."""
    B, T, _ = estimates.shape
    diff = estimates - truths
    loss = float(np.sum(diff * diff) / (B * T))
    return loss, 2.0 * diff / (B * T)


def clip_gradients(tape: ParamTape, max_norm: float) -> float:
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = tape.grad_norm()
    if norm > max_norm:
        scale = max_norm / norm
        for g in tape.grads.values():
            g *= scale
    return norm


def loss_and_grad(tape: ParamTape, arch: Architecture, model: StateSpaceModel, measurements: np.ndarray,
                  truths: np.ndarray, x0=None) -> float:
    """Data loss of one batch; its gradient is accumulated into ``tape.grads``."""
    x0 = np.zeros(model.n) if x0 is None else x0
    rec = ckfnet_run(tape, model, measurements, x0, arch, keep_cache=True)
    loss, grad = batch_data_loss(rec.estimates, truths)
    if np.isfinite(loss):
        ckfnet_backward(tape, model, arch, rec, grad)
    return loss


def evaluate_loss(tape: ParamTape, arch: Architecture, model: StateSpaceModel, data: Dataset, lam: float) -> float:
    est = ckfnet_run(tape, model, data.measurements, np.zeros(model.n), arch)
    loss, _ = batch_data_loss(est, data.states)
    return loss + lam * tape.sq_norm()


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    params: ParamTape  # best-validation parameters
    final_params: ParamTape
    history: list  # (train_loss, val_loss) per epoch
    best_epoch: int
    best_val: float
    arch: Architecture


@dataclass
class _Progress:
    tape: ParamTape
    opt: AdamState
    best: ParamTape
    best_val: float = float("inf")
    best_epoch: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)


def save_checkpoint(path, config: TrainingConfig, arch: Architecture, prog: _Progress) -> None:
    manifest = {
        "kind": "checkpoint",
        "architecture": arch.manifest(),
        "epoch": prog.epoch,
        "best_val": prog.best_val,
        "best_epoch": prog.best_epoch,
        "history": [list(h) for h in prog.history],
        "config": config.to_dict(),
        "config_fingerprint": config.fingerprint(),
        "adam": {"lr": prog.opt.lr, "beta1": prog.opt.beta1, "beta2": prog.opt.beta2,
                 "eps": prog.opt.eps, "step": prog.opt.step},
    }
    dump_tensors(path, manifest, prog.tape.params,
                 extra={"best": prog.best.params, "adam_m": prog.opt.m, "adam_v": prog.opt.v})


def load_checkpoint(path, config: TrainingConfig) -> _Progress:
    manifest, tensors, extra = load_tensors(path)
    if manifest.get("config_fingerprint") != config.fingerprint():
        raise ConfigError(f"{path} was written for a different configuration")
    arch = Architecture(**{k: manifest["architecture"][k] for k in ("n", "m", "hidden_dim")})
    tape, best = ParamTape(), ParamTape()
    for k, v in tensors.items():
        tape.add(k, v)
    for k, v in extra["best"].items():
        best.add(k, v)
    validate_params(arch, tape)
    validate_params(arch, best)
    a = manifest["adam"]
    opt = AdamState(lr=config.lr, beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"],
                    m=dict(extra["adam_m"]), v=dict(extra["adam_v"]))
    return _Progress(tape, opt, best, manifest["best_val"], manifest["best_epoch"], manifest["epoch"],
                     [tuple(h) for h in manifest["history"]])


def save_weights(path, arch: Architecture, tape: ParamTape, meta: Optional[dict] = None) -> None:
    manifest = {"kind": "weights", "architecture": arch.manifest()}
    if meta:
        manifest["meta"] = meta
    dump_tensors(path, manifest, tape.params)


def load_weights(path) -> tuple[Architecture, ParamTape]:
    manifest, tensors, _ = load_tensors(path)
    a = manifest["architecture"]
    arch = Architecture(a["n"], a["m"], a["hidden_dim"])
    if arch.manifest() != a:
        raise ValueError(f"{path}: manifest does not describe a valid architecture")
    tape = ParamTape()
    for k, v in tensors.items():
        tape.add(k, v)
    validate_params(arch, tape)
    return arch, tape


def train(config: TrainingConfig, model: StateSpaceModel, data: dict,
          checkpoint_path=None, resume: bool = False,
          on_epoch: Optional[Callable[[int, float, float], None]] = None) -> TrainResult:
    """Minimize the l2-regularized trajectory MSE with full-sequence BPTT.

    ``data`` maps split names to :class:`Dataset`; "train" and "val" are used.
    With ``checkpoint_path`` the full training state is written after every
    epoch, and ``resume`` continues from it.
    """
    train_set, val_set = data["train"], data["val"]
    arch = Architecture(model.n, model.m, config.hidden_dim)
    if resume and checkpoint_path and Path(checkpoint_path).exists():
        prog = load_checkpoint(checkpoint_path, config)
    else:
        tape = init_params(arch, seed=config.base_seed)
        prog = _Progress(tape, AdamState(lr=config.lr), tape.copy())

    X = train_set.states
    Z = train_set.measurements
    x0 = np.zeros(model.n)
    N = len(train_set)
    while prog.epoch < config.epochs:
        epoch = prog.epoch + 1
        order = RngStream(config.base_seed, stream=1_000_000 + epoch).permutation(N)
        losses = []
        for start in range(0, N, config.batch_size):
            idx = order[start:start + config.batch_size]
            reg = config.lam * prog.tape.sq_norm()
            data_loss = loss_and_grad(prog.tape, arch, model, Z[idx], X[idx], x0)
            if not np.isfinite(data_loss):
                ids = [train_set.trajectories[i].traj_id for i in idx]
                raise NonFiniteLoss(f"non-finite loss in epoch {epoch} on trajectories {ids}; try a lower lr")
            clip_gradients(prog.tape, config.clip_norm)
            adam_step(prog.opt, prog.tape, config.lam)
            losses.append(data_loss + reg)
        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(prog.tape, arch, model, val_set, config.lam)
        if not np.isfinite(val_loss):
            raise NonFiniteLoss(f"non-finite validation loss in epoch {epoch}; try a lower lr")
        if val_loss < prog.best_val:
            prog.best_val = val_loss
            prog.best_epoch = epoch
            prog.best = prog.tape.copy()
        prog.history.append((train_loss, val_loss))
        prog.epoch = epoch
        log.info("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if on_epoch:
            on_epoch(epoch, train_loss, val_loss)
        if checkpoint_path:
            save_checkpoint(checkpoint_path, config, arch, prog)
    return TrainResult(prog.best, prog.tape, prog.history, prog.best_epoch, prog.best_val, arch)


def write_history(path, history: Sequence) -> None:
    lines = ["train_loss val_loss"] + [f"{a:.17g} {b:.17g}" for a, b in history]
    Path(path).write_text("\n".join(lines) + "\n")
