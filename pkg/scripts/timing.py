"""Per-trajectory wall time of the CKF, the KF oracle and CKFNet (sequential, one core).

    python3 scripts/timing.py --weights runs/horizon/weights_h128.json --n-traj 50
"""
import argparse
from pathlib import Path

from ckfnet import bench
from ckfnet.hybrid import Architecture, init_params
from ckfnet.ssm import make_model
from ckfnet.training import load_weights


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--weights", default=None, help="trained weights; an untrained net times the same")
    ap.add_argument("--model-id", default="linear_full")
    ap.add_argument("--hidden-dim", type=int, default=128)
    ap.add_argument("--n-traj", type=int, default=50)
    ap.add_argument("--T", type=int, default=100)
    ap.add_argument("--out", default="runs/timing")
    args = ap.parse_args()

    model = make_model(args.model_id)
    if args.weights:
        arch, tape = load_weights(args.weights)
    else:
        arch = Architecture(model.n, model.m, args.hidden_dim)
        tape = init_params(arch)
    rows = bench.time_filters(tape, arch, model, args.n_traj, args.T)
    for t in bench.timing_table(rows):
        print(f"{t['algorithm']:10s} {t['mean_s']:.5f} s/trajectory  (sd {t['std_s']:.5f}, n={t['n']})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(bench.write_csv(bench.timestamped(out, "timing"), rows, extra_columns=("time_std_s",)))


if __name__ == "__main__":
    main()
