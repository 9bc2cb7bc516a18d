"""CKFNet against a CKF that keeps the nominal noise covariances while the data noise is scaled.

By default one network, trained at --train-scale with eigenvalue augmentation,
is evaluated at every scale; --retrain trains one network per scale instead.

    python3 scripts/noise_study.py --out runs/noise --scales 0.5,1,2,5
"""
import argparse
import logging
from pathlib import Path

from ckfnet import bench

from _common import load_config, parse_sets, train_or_load


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/nonlinear_mismatch.json")
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    ap.add_argument("--scales", default="0.5,1,2,5")
    ap.add_argument("--train-scale", type=float, default=None, help="defaults to the config's noise_scale")
    ap.add_argument("--retrain", action="store_true")
    ap.add_argument("--out", default="runs/noise")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(args.config, parse_sets(args.overrides))
    scales = tuple(float(s) for s in args.scales.split(","))
    if args.retrain:
        params = {}
        for s in scales:
            arch, params[s] = train_or_load(cfg.with_overrides({"noise_scale": s}), out, f"s{s:g}")
    else:
        s = args.train_scale if args.train_scale is not None else cfg.noise_scale
        arch, params = train_or_load(cfg.with_overrides({"noise_scale": s}), out, f"s{s:g}")
    rows = bench.noise_sweep(params, arch, cfg.model(), scales, cfg.n_test, cfg.base_seed, cfg.T)
    for r in rows:
        print(f"scale {r.scenario['noise_scale']:4g}  {r.algorithm:12s} AMSE {r.amse:.4f}")
    print(bench.write_csv(bench.timestamped(out, "noise_sweep"), rows))


if __name__ == "__main__":
    main()
