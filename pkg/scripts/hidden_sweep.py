"""Test AMSE of CKFNet at several hidden sizes with an identical training budget.

    python3 scripts/hidden_sweep.py --out runs/hidden --sizes 64,128,256
"""
import argparse
import logging
from pathlib import Path

from ckfnet import bench
from ckfnet.training import generate_dataset

from _common import load_config, parse_sets, train_or_load


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    ap.add_argument("--sizes", default="64,128,256")
    ap.add_argument("--out", default="runs/hidden")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = load_config(args.config, parse_sets(args.overrides))
    model = base.model()
    test = generate_dataset(base, model, "test")
    rows = []
    for h in (int(s) for s in args.sizes.split(",")):
        cfg = base.with_overrides({"hidden_dim": h})
        arch, tape = train_or_load(cfg, out, f"h{h}")
        mse, times = bench.eval_ckfnet(tape, arch, model, test.trajectories)
        row = bench.EvalResult("ckfnet", bench.scenario(model, cfg.T, cfg.noise_scale), mse, times).row()
        row["hidden_dim"] = h
        rows.append(row)
        print(f"hidden {h:4d}  AMSE {row['amse']:.4f}")
    for r in bench.evaluate(model, test.trajectories):
        rows.append({**r.row(), "hidden_dim": 0})
    path = bench.write_csv(bench.timestamped(out, "hidden_sweep"), rows, extra_columns=("hidden_dim",))
    print(path)


if __name__ == "__main__":
    main()
