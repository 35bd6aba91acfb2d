"""Block-count and W2-scale sensitivity sweep on the toy bandit.

Writes per-run, baseline and aggregated CSVs and prints the plateau, spread and
baseline checks.

    python scripts/sensitivity_sweep.py --out results/sweep --seeds 10
"""

import argparse
import json
import logging
import time
from pathlib import Path

from swfp.trainer import sweep, sweep_checks, toy_config


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/sweep")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--blocks", default="1,2,3,4,5,6,7,8")
    p.add_argument("--scales", default="0.1,0.4,1,5")
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    blocks = [int(x) for x in args.blocks.split(",")]
    scales = [float(x) for x in args.scales.split(",")]
    t0 = time.perf_counter()

    def show(row):
        print(f"[{time.perf_counter() - t0:7.1f}s] seed={row['seed']} N={row['block_count']} "
              f"scale={row['w2_scale']} success={row['success']:.4f}", flush=True)

    res = sweep(toy_config(), blocks, scales, range(args.seeds), progress=show, workers=args.workers)
    res.to_csv(out / "runs.csv", out / "aggregate.csv", out / "baselines.csv")
    checks = sweep_checks(res)
    summary = {k: {"value": v, "passed": ok} for k, (v, ok) in checks.items()}
    summary["seconds"] = res.seconds
    (out / "checks.json").write_text(json.dumps(summary, indent=2))
    for k, (v, ok) in checks.items():
        print(f"{k:16s} {v:+.4f} {'pass' if ok else 'FAIL'}")
    print(f"total {res.seconds:.0f}s")


if __name__ == "__main__":
    main()
