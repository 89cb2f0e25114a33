"""Desk-scale method comparison: SPOS, SPOS+FixMatch and MatchNAS over three seeds.

    python3 scripts/run_benchmark.py                      # configs/desk.conf, about 25 min on one core
    python3 scripts/run_benchmark.py --config configs/smoke.conf --out runs/smoke
"""

import argparse
import logging
from pathlib import Path

import numpy as np

from elasticnas import harness as hz

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.conf"))
    ap.add_argument("--out", help="output directory (default: the config's out)")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = hz.load_config(args.config, dict(kv.split("=", 1) for kv in args.set))
    out = Path(args.out or cfg.out)
    (out / "metrics.jsonl").unlink(missing_ok=True)
    rows = hz.compare_protocol(cfg, out)
    print(f"{'method':<16}{'role':<10}{'mean':>8}{'std':>8}")
    for m in hz.mean_rows(rows):
        print(f"{m['method']:<16}{m['role']:<10}{m['mean_top1']:>8.4f}{m['std_top1']:>8.4f}")
    small = {m: np.mean([r.top1 for r in rows if r.method == m and r.role == "smallest"]) for m in cfg.methods}
    order = " > ".join(sorted(small, key=small.get, reverse=True))
    print(f"smallest-subnet ordering: {order}")
    print(f"summary written to {out / 'summary.csv'}")


if __name__ == "__main__":
    main()
