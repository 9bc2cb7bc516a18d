"""End-to-end acceptance checks.

Each test prints one PASS/FAIL line (collected in the terminal summary).
Tolerances are fixed here and are never relaxed to make a run pass.

The trainings use the default configuration and take most of the runtime
(roughly 41 minutes on one core). Set CKFNET_ACCEPTANCE_CACHE to a
directory to reuse trained weights across runs; training is deterministic,
so cached and fresh weights are bit-identical.
"""
import csv
import io
import os
import time
from pathlib import Path

import numpy as np
import pytest

from ckfnet import bench
from ckfnet.ckf import cubature_points, run_ckf, run_kf
from ckfnet.cli import main as cli_main
from ckfnet.training import TrainingConfig, generate_all, generate_dataset, load_weights, save_weights, train
from ckfnet.ssm import RngStream, linear_nav_model, simulate_trajectory

from conftest import ACCEPTANCE
from toys import fd_errors, nonlinear_toy, toy_problem

# tolerances
C1_MEAN_TOL, C1_COV_TOL, C1_TIME_S = 1e-8, 1e-7, 5.0
C2_MEAN_TOL, C2_SCATTER_TOL = 1e-12, 1e-11
C3_REL_TOL, C3_TIME_S = 1e-4, 60.0
C4_LOSS_RATIO, C4_TIME_S = 0.5, 30 * 60.0
C5_RATIO, C5_BAND = 1.3, (0.3, 2.0)
C6_SCALE, C6_SEEDS, C6_MIN_WINS = 5.0, 5, 4
C7_RATIO, C7_HORIZONS = 1.5, (100, 120, 150, 180)
C8_SIZES, C8_MARGIN = (64, 128, 256), 0.05

C6_TEST_OFFSET = 600_000
CACHE = os.environ.get("CKFNET_ACCEPTANCE_CACHE")


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def _trained(cfg: TrainingConfig):
    """Train (or load from the cache) and return (result-like dict, seconds)."""
    model = cfg.model()
    if CACHE:
        path = Path(CACHE) / f"{cfg.fingerprint()}_{cfg.epochs}.json"
        hist = path.with_suffix(".history.npy")
        if path.exists() and hist.exists():
            arch, tape = load_weights(path)
            return {"arch": arch, "params": tape, "history": [tuple(h) for h in np.load(hist)]}, 0.0
    t0 = time.perf_counter()
    result = train(cfg, model, generate_all(cfg, model))
    elapsed = time.perf_counter() - t0
    out = {"arch": result.arch, "params": result.params, "history": result.history, "best_epoch": result.best_epoch}
    if CACHE:
        Path(CACHE).mkdir(parents=True, exist_ok=True)
        save_weights(path, result.arch, result.params)
        np.save(hist, np.array(result.history))
    return out, elapsed


@pytest.fixture(scope="session")
def linear_runs():
    """Default-config trainings on the linear model at each hidden size."""
    return {h: _trained(TrainingConfig(hidden_dim=h)) for h in C8_SIZES}


@pytest.fixture(scope="session")
def linear_128(linear_runs):
    return linear_runs[128][0]


def test_c1_ckf_matches_kalman_oracle():
    model = linear_nav_model(dt=1.0, q=0.1, r=0.1)
    trajs = [simulate_trajectory(model, np.zeros(4), 100, RngStream(seed)) for seed in range(20)]
    t0 = time.perf_counter()
    worst_mean = worst_cov = 0.0
    for traj in trajs:
        a = run_ckf(model, traj.measurements, np.zeros(4), np.eye(4))
        b = run_kf(model, traj.measurements, np.zeros(4), np.eye(4))
        for sa, sb in zip(a, b):
            worst_mean = max(worst_mean, np.max(np.abs(sa.mean - sb.mean)))
            worst_cov = max(worst_cov, np.max(np.abs(sa.cov - sb.cov)))
    elapsed = time.perf_counter() - t0
    ok = worst_mean < C1_MEAN_TOL and worst_cov < C1_COV_TOL and elapsed < C1_TIME_S
    verdict(1, ok, f"CKF vs KF max |mean| {worst_mean:.2e} (< {C1_MEAN_TOL}), max |cov| {worst_cov:.2e} "
                   f"(< {C1_COV_TOL}), {elapsed:.2f} s (< {C1_TIME_S} s)")


def test_c2_cubature_moment_matching():
    rng = np.random.default_rng(2024)
    worst_mean = worst_scatter = 0.0
    for i in range(1000):
        n = 1 + i % 6
        A = rng.normal(size=(n, n))
        P = A @ A.T + 0.1 * np.eye(n)
        mean = rng.normal(size=n) * 3
        L = np.linalg.cholesky(P)
        pts = cubature_points(mean, L)
        worst_mean = max(worst_mean, np.max(np.abs(pts.mean() - mean)))
        worst_scatter = max(worst_scatter, np.max(np.abs(pts.scatter(mean) - L @ L.T)))
    ok = worst_mean < C2_MEAN_TOL and worst_scatter < C2_SCATTER_TOL
    verdict(2, ok, f"1000 pairs n=1..6: mean err {worst_mean:.2e} (< {C2_MEAN_TOL}), "
                   f"scatter err {worst_scatter:.2e} (< {C2_SCATTER_TOL})")


def test_c3_gradient_suite():
    model = nonlinear_toy()
    arch, tape, Z, X, x0 = toy_problem(model, hidden=3, T=5, seed=1)
    t0 = time.perf_counter()
    errs = fd_errors(tape, model, arch, Z, X, x0, lam=1e-4)
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    layers = {k.split(".")[0] for k in errs}
    ok = errs[worst] < C3_REL_TOL and elapsed < C3_TIME_S and len(layers) == 10
    verdict(3, ok, f"{len(errs)} tensors over {len(layers)} layers, worst rel err {errs[worst]:.2e} "
                   f"({worst}, < {C3_REL_TOL}), {elapsed:.1f} s (< {C3_TIME_S} s)")


def test_c4_training_converges(linear_runs):
    run, elapsed = linear_runs[128]
    hist = run["history"]
    first_train, last_train = hist[0][0], hist[-1][0]
    best_val = min(h[1] for h in hist)
    ok = (len(hist) == 50 and last_train < C4_LOSS_RATIO * first_train and best_val < hist[0][1]
          and elapsed < C4_TIME_S)
    verdict(4, ok, f"train loss epoch1 {first_train:.4g} -> epoch{len(hist)} {last_train:.4g} "
                   f"(need < {C4_LOSS_RATIO}x); best val {best_val:.4g} < epoch-1 val {hist[0][1]:.4g}; "
                   f"{elapsed / 60:.1f} min (< {C4_TIME_S / 60:.0f} min)")


def test_c5_matched_noise_quality(linear_128):
    cfg = TrainingConfig()
    model = cfg.model()
    test = generate_dataset(cfg, model, "test")
    rows = {r.algorithm: r.amse for r in bench.evaluate(model, test.trajectories, linear_128["params"],
                                                        linear_128["arch"])}
    net, ckf = rows["ckfnet"], rows["ckf"]
    ratio_ok = net <= C5_RATIO * ckf
    band_ok = C5_BAND[0] <= net <= C5_BAND[1]
    verdict(5, ratio_ok and band_ok,
            f"CKFNet AMSE {net:.4f}, CKF {ckf:.4f}, KF {rows['kf_oracle']:.4f}; ratio {net / ckf:.3f} "
            f"(<= {C5_RATIO}: {'ok' if ratio_ok else 'no'}); band {list(C5_BAND)} "
            f"({'ok' if band_ok else 'outside'})")


def test_c6_mismatch_advantage():
    cfg = TrainingConfig(model_id="nonlinear", noise_scale=C6_SCALE, augment=True, augment_range=0.2)
    run, _ = _trained(cfg)
    nominal = cfg.model()
    data_model = nominal.scaled(C6_SCALE)
    wins, parts = 0, []
    for k in range(C6_SEEDS):
        trajs = bench.make_test_set(data_model, cfg.T, cfg.n_test, cfg.base_seed + C6_TEST_OFFSET + 1000 * k)
        net = bench.amse(bench.eval_ckfnet(run["params"], run["arch"], data_model, trajs)[0])
        ckf = bench.amse(bench.eval_ckf(nominal, trajs)[0])
        wins += net < ckf
        parts.append(f"{net:.3f}/{ckf:.3f}")
    verdict(6, wins >= C6_MIN_WINS, f"x{C6_SCALE:g} noise, CKFNet/mismatched-CKF AMSE per seed "
                                    f"{', '.join(parts)}; wins {wins}/{C6_SEEDS} (need >= {C6_MIN_WINS})")


def test_c7_horizon_generalization(linear_128):
    rows = bench.horizon_sweep(linear_128["params"], linear_128["arch"], linear_nav_model(), C7_HORIZONS, n_test=64)
    net = {r.scenario["T"]: r for r in rows if r.algorithm == "ckfnet"}
    finite = all(np.all(np.isfinite(r.mse)) for r in net.values())
    ratio = net[180].amse / net[100].amse
    verdict(7, finite and ratio <= C7_RATIO,
            f"CKFNet AMSE by horizon {', '.join(f'{T}: {r.amse:.4f}' for T, r in net.items())}; "
            f"ratio 180/100 {ratio:.3f} (<= {C7_RATIO}); all finite: {finite}")


def test_c8_hidden_size_sweep(linear_runs):
    cfg = TrainingConfig()
    model = cfg.model()
    test = generate_dataset(cfg, model, "test")
    scores = {}
    for h in C8_SIZES:
        run = linear_runs[h][0]
        scores[h] = bench.amse(bench.eval_ckfnet(run["params"], run["arch"], model, test.trajectories)[0])
    best = min(scores.values())
    ok = scores[128] <= (1 + C8_MARGIN) * best
    verdict(8, ok, f"AMSE by hidden size {', '.join(f'{h}: {v:.4f}' for h, v in scores.items())}; "
                   f"128 within {C8_MARGIN:.0%} of best {best:.4f}: {ok}")


def test_c9_timing_table(linear_128):
    rows = bench.time_filters(linear_128["params"], linear_128["arch"], linear_nav_model(), n_traj=50, T=100)
    t = {r.algorithm: r for r in rows}
    ok = t["ckfnet"].time_s > t["ckf"].time_s and all(r.times.size == 50 for r in rows)
    verdict(9, ok, "seconds/trajectory " + ", ".join(
        f"{r.algorithm} {r.time_s:.4f} (sd {np.std(r.times):.4f})" for r in rows) + "; CKFNet slower than CKF")


def test_c10_determinism(tmp_path):
    small = ["--set", "T=30", "--set", "n_train=16", "--set", "n_val=4", "--set", "n_test=8",
             "--set", "hidden_dim=16", "--set", "epochs=3"]
    for run in ("a", "b"):
        assert cli_main(["train", "--out", str(tmp_path / run), *small]) == 0
        for _ in range(2):
            assert cli_main(["eval", "--out", str(tmp_path / run), *small]) == 0
    same_weights = (tmp_path / "a" / "weights.json").read_bytes() == (tmp_path / "b" / "weights.json").read_bytes()
    same_ckpt = (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()

    def without_timing(path):
        rows = list(csv.DictReader(io.StringIO(path.read_text())))
        return [{k: v for k, v in r.items() if k != "time_s"} for r in rows]

    csvs = [without_timing(p) for run in ("a", "b") for p in sorted((tmp_path / run).glob("eval_*.csv"))]
    same_csv = len(csvs) == 4 and all(c == csvs[0] for c in csvs)
    verdict(10, same_weights and same_ckpt and same_csv,
            f"weights identical: {same_weights}, checkpoints identical: {same_ckpt}, "
            f"eval CSVs identical without timing: {same_csv}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
