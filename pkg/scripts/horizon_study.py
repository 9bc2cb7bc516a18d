"""Train at T=100 and evaluate every filter on fresh test sets at longer horizons.

    python3 scripts/horizon_study.py --out runs/horizon --horizons 100,120,150,180
"""
import argparse
import logging
from pathlib import Path

from ckfnet import bench

from _common import load_config, parse_sets, train_or_load


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    ap.add_argument("--horizons", default="100,120,150,180")
    ap.add_argument("--out", default="runs/horizon")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(args.config, parse_sets(args.overrides))
    arch, tape = train_or_load(cfg, out, f"h{cfg.hidden_dim}")
    horizons = tuple(int(s) for s in args.horizons.split(","))
    rows = bench.horizon_sweep(tape, arch, cfg.model(), horizons, cfg.n_test, cfg.base_seed, cfg.noise_scale)
    for r in rows:
        print(f"T={r.scenario['T']:4d}  {r.algorithm:10s} AMSE {r.amse:.4f}")
    print(bench.write_csv(bench.timestamped(out, "horizon"), rows))


if __name__ == "__main__":
    main()
