"""AMSE evaluation, the horizon and noise sweeps, filter timing and CSV output."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .ckf import means, run_ckf, run_kf
from .hybrid import Architecture, ckfnet_run
from .neural import ParamTape
from .ssm import StateSpaceModel
from .training import simulate_set

HORIZONS = (100, 120, 150, 180)
NOISE_SCALES = (0.5, 1.0, 2.0, 5.0)
SCENARIO_COLUMNS = ("model_id", "T", "noise_scale", "obs_mode")
COLUMNS = SCENARIO_COLUMNS + ("algorithm", "amse", "time_s")
HORIZON_OFFSET = 300_000
NOISE_OFFSET = 400_000
TIMING_OFFSET = 500_000
WARMUP = 3


def trajectory_mse(estimates, truths) -> float:
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truths, dtype=np.float64)
    if est.shape != tru.shape:
        raise ValueError(f"estimates {est.shape} and truths {tru.shape} differ in shape")
    return float(np.sum((est - tru) ** 2) / est.shape[0])


def amse(mses: Sequence[float]) -> float:
    mses = np.asarray(mses, dtype=np.float64)
    if mses.size < 1:
        raise ValueError("need at least one trajectory")
    return float(np.mean(mses))


def obs_mode(model: StateSpaceModel) -> str:
    return {"linear_full": "full", "linear_partial": "partial"}.get(model.model_id, model.model_id)


@dataclass
class EvalResult:
    algorithm: str
    scenario: dict
    mse: np.ndarray
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def amse(self) -> float:
        return amse(self.mse)

    @property
    def time_s(self) -> float:
        return float(np.mean(self.times)) if self.times.size else 0.0

    def row(self) -> dict:
        return {**self.scenario, "algorithm": self.algorithm, "amse": self.amse, "time_s": self.time_s,
                "time_std_s": float(np.std(self.times)) if self.times.size else 0.0}


def scenario(model: StateSpaceModel, T: int, noise_scale: float) -> dict:
    return {"model_id": model.model_id, "T": T, "noise_scale": noise_scale, "obs_mode": obs_mode(model)}


def _initial(model: StateSpaceModel):
    return np.zeros(model.n), np.eye(model.n)


def eval_ckf(filter_model: StateSpaceModel, trajectories, oracle: bool = False):
    """Per-trajectory MSE and wall time of the CKF (or the KF oracle)."""
    x0, P0 = _initial(filter_model)
    run = run_kf if oracle else run_ckf
    mses, times = [], []
    for traj in trajectories:
        t0 = time.perf_counter()
        est = means(run(filter_model, traj.measurements, x0, P0))
        times.append(time.perf_counter() - t0)
        mses.append(trajectory_mse(est, traj.states))
    return np.array(mses), np.array(times)


def eval_ckfnet(tape: ParamTape, arch: Architecture, model: StateSpaceModel, trajectories, batched: bool = True):
    x0 = np.zeros(model.n)
    if batched:
        Z = np.stack([t.measurements for t in trajectories])
        t0 = time.perf_counter()
        est = ckfnet_run(tape, model, Z, x0, arch)
        elapsed = time.perf_counter() - t0
        mses = np.array([trajectory_mse(e, t.states) for e, t in zip(est, trajectories)])
        return mses, np.full(len(trajectories), elapsed / len(trajectories))
    mses, times = [], []
    for traj in trajectories:
        t0 = time.perf_counter()
        est = ckfnet_run(tape, model, traj.measurements, x0, arch)
        times.append(time.perf_counter() - t0)
        mses.append(trajectory_mse(est, traj.states))
    return np.array(mses), np.array(times)


def evaluate(model: StateSpaceModel, trajectories, tape: Optional[ParamTape] = None,
             arch: Optional[Architecture] = None, noise_scale: float = 1.0,
             nominal: Optional[StateSpaceModel] = None) -> list:
    """CKF with the true covariances, the KF oracle (linear models) and CKFNet on one test set.

    ``model`` carries the data-generating covariances. With ``nominal`` an
    extra "ckf" row uses those (mismatched) covariances and the matched CKF
    is tagged "ckf_matched".
    """
    T = trajectories[0].T
    sc = scenario(model, T, noise_scale)
    out = []
    if nominal is not None:
        out.append(EvalResult("ckf", sc, *eval_ckf(nominal, trajectories)))
        out.append(EvalResult("ckf_matched", sc, *eval_ckf(model, trajectories)))
    else:
        out.append(EvalResult("ckf", sc, *eval_ckf(model, trajectories)))
    if model.is_linear:
        out.append(EvalResult("kf_oracle", sc, *eval_ckf(model, trajectories, oracle=True)))
    if tape is not None:
        out.append(EvalResult("ckfnet", sc, *eval_ckfnet(tape, arch, model, trajectories)))
    return out


def make_test_set(model: StateSpaceModel, T: int, count: int, first_seed: int):
    trajs, _ = simulate_set(model, T, [first_seed + i for i in range(count)])
    return trajs


def horizon_sweep(tape: ParamTape, arch: Architecture, model: StateSpaceModel,
                  horizons: Sequence[int] = HORIZONS, n_test: int = 64, base_seed: int = 0,
                  noise_scale: float = 1.0) -> list:
    """Fresh test sets at each horizon, every algorithm on identical measurements."""
    data_model = model.scaled(noise_scale)
    rows = []
    for T in horizons:
        trajs = make_test_set(data_model, T, n_test, base_seed + HORIZON_OFFSET + 1000 * T)
        rows.extend(evaluate(data_model, trajs, tape, arch, noise_scale))
    return rows


def noise_sweep(params: Union[ParamTape, Mapping[float, ParamTape], None], arch: Optional[Architecture],
                model: StateSpaceModel, scales: Sequence[float] = NOISE_SCALES, n_test: int = 64,
                base_seed: int = 0, T: int = 100) -> list:
    """Data generated with s*W, s*V; the "ckf" rows keep the nominal covariances.

    ``params`` is one parameter set used at every scale (transfer) or a mapping
    from scale to parameters trained at that scale.
    """
    rows = []
    for k, s in enumerate(scales):
        data_model = model.scaled(s)
        trajs = make_test_set(data_model, T, n_test, base_seed + NOISE_OFFSET + 1000 * k)
        tape = params.get(s) if isinstance(params, Mapping) else params
        rows.extend(evaluate(data_model, trajs, tape, arch, s, nominal=model))
    return rows


def time_filters(tape: ParamTape, arch: Architecture, model: StateSpaceModel, n_traj: int = 50,
                 T: int = 100, base_seed: int = 0) -> list:
    """Sequential per-trajectory wall time; the first three trajectories are warm-up."""
    trajs = make_test_set(model, T, n_traj + WARMUP, base_seed + TIMING_OFFSET)
    sc = scenario(model, T, 1.0)
    rows = []
    runs = [("ckf", lambda: eval_ckf(model, trajs))]
    if model.is_linear:
        runs.append(("kf_oracle", lambda: eval_ckf(model, trajs, oracle=True)))
    runs.append(("ckfnet", lambda: eval_ckfnet(tape, arch, model, trajs, batched=False)))
    for name, fn in runs:
        mses, times = fn()
        rows.append(EvalResult(name, sc, mses[WARMUP:], times[WARMUP:]))
    return rows


def timing_table(rows: Sequence[EvalResult]) -> list:
    return [
        {"algorithm": r.algorithm, "mean_s": r.time_s, "std_s": float(np.std(r.times)), "n": int(r.times.size)}
        for r in rows
    ]


def format_csv(rows: Sequence, extra_columns: Sequence[str] = ()) -> str:
    cols = list(COLUMNS) + list(extra_columns)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for r in rows:
        d = r.row() if isinstance(r, EvalResult) else r
        writer.writerow([format(d[c], ".17g") if isinstance(d[c], float) else d[c] for c in cols])
    return buf.getvalue()


def write_csv(path, rows: Sequence, extra_columns: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.write_text(format_csv(rows, extra_columns))
    return path


def timestamped(out_dir, sweep: str) -> Path:
    stamp = time.strftime("%Y%m%dT%H%M%S")
    path = Path(out_dir) / f"{sweep}_{stamp}.csv"
    k = 1
    while path.exists():
        path = Path(out_dir) / f"{sweep}_{stamp}_{k}.csv"
        k += 1
    return path
