import csv
import io

import numpy as np
import pytest

from ckfnet import bench
from ckfnet.hybrid import Architecture, init_params
from ckfnet.ssm import RngStream, linear_nav_model, make_model, simulate_trajectory


@pytest.fixture(scope="module")
def small_net():
    arch = Architecture(4, 4, 4)
    return arch, init_params(arch, seed=0)


class TestMetrics:
    def test_perfect(self):
        x = np.ones((6, 4))
        assert bench.trajectory_mse(x, x) == 0.0

    def test_constant_error(self):
        truth = np.zeros((7, 3))
        e = np.array([1.0, -2.0, 0.5])
        assert bench.trajectory_mse(truth + e, truth) == pytest.approx(e @ e)

    def test_zero_estimator(self):
        traj = simulate_trajectory(linear_nav_model(), np.zeros(4), 30, RngStream(2))
        brute = 0.0
        for x in traj.states:
            brute += sum(v * v for v in x)
        assert bench.trajectory_mse(np.zeros_like(traj.states), traj.states) == pytest.approx(brute / 30, rel=1e-13)

    def test_amse(self):
        assert bench.amse([0.7]) == 0.7
        assert bench.amse([1.0, 3.0]) == 2.0
        with pytest.raises(ValueError):
            bench.amse([])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            bench.trajectory_mse(np.zeros((3, 4)), np.zeros((4, 4)))


def test_horizon_sweep(small_net):
    arch, tape = small_net
    horizons = (100, 120, 150, 180)
    rows = bench.horizon_sweep(tape, arch, linear_nav_model(), horizons, n_test=12)
    assert len(rows) == 3 * len(horizons)
    ckf = [r.amse for r in rows if r.algorithm == "ckf"]
    assert max(ckf) / min(ckf) < 1.3
    assert [r.scenario["T"] for r in rows if r.algorithm == "ckfnet"] == list(horizons)


def test_noise_sweep(small_net):
    arch, tape = small_net
    scales = (0.5, 1.0, 2.0, 5.0)
    rows = bench.noise_sweep(tape, arch, linear_nav_model(), scales, n_test=12, T=60)
    assert len(rows) == 4 * len(scales)
    mismatched = [r.amse for r in rows if r.algorithm == "ckf"]
    assert all(b > a for a, b in zip(mismatched, mismatched[1:]))
    at_one = {r.algorithm: r.amse for r in rows if r.scenario["noise_scale"] == 1.0}
    assert at_one["ckf_matched"] == pytest.approx(at_one["kf_oracle"], rel=1e-9)


def test_noise_sweep_per_scale_params(small_net):
    arch, tape = small_net
    rows = bench.noise_sweep({0.5: tape, 2.0: tape}, arch, linear_nav_model(), (0.5, 2.0), n_test=3, T=10)
    assert sum(r.algorithm == "ckfnet" for r in rows) == 2


def test_nonlinear_has_no_oracle(small_net):
    arch, tape = small_net
    model = make_model("nonlinear")
    trajs = bench.make_test_set(model, 15, 3, 0)
    algorithms = [r.algorithm for r in bench.evaluate(model, trajs, tape, arch)]
    assert algorithms == ["ckf", "ckfnet"]


def test_timing(small_net):
    arch, tape = small_net
    rows = bench.time_filters(tape, arch, linear_nav_model(), n_traj=4, T=20)
    assert [r.algorithm for r in rows] == ["ckf", "kf_oracle", "ckfnet"]
    for r in rows:
        assert r.times.size == 4 and r.time_s > 0
        assert "time_std_s" in r.row()
    table = bench.timing_table(rows)
    assert all(t["n"] == 4 for t in table)


def test_csv_layout_and_determinism(small_net, tmp_path):
    arch, tape = small_net
    model = linear_nav_model()
    trajs = bench.make_test_set(model, 20, 3, 0)

    def strip_time(text):
        rows = list(csv.DictReader(io.StringIO(text)))
        return [{k: v for k, v in r.items() if k != "time_s"} for r in rows]

    a = bench.format_csv(bench.evaluate(model, trajs, tape, arch))
    b = bench.format_csv(bench.evaluate(model, trajs, tape, arch))
    assert a.splitlines()[0] == ",".join(bench.COLUMNS)
    assert strip_time(a) == strip_time(b)
    path = bench.write_csv(bench.timestamped(tmp_path, "eval"), bench.evaluate(model, trajs, tape, arch))
    assert path.name.startswith("eval_") and path.suffix == ".csv"
    assert bench.timestamped(tmp_path, "eval") != path
