"""MatchNAS ablations at desk scale: confidence threshold, distillation view, space narrowing.

    python3 scripts/ablations.py threshold
    python3 scripts/ablations.py all --config configs/smoke.conf

The baseline MatchNAS run per seed is trained once and shared by every ablation.
"""

import argparse
import json
import logging
from pathlib import Path

import numpy as np

from elasticnas import experiments as ex
from elasticnas import harness as hz

ROOT = Path(__file__).resolve().parents[1]
ABLATIONS = {
    "threshold": ex.threshold_ablation,
    "view": ex.distill_view_ablation,
    "narrowing": ex.narrowing_ablation,
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("which", choices=[*ABLATIONS, "all"])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.conf"))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--json", help="also dump the per-seed numbers here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = hz.load_config(args.config, dict(kv.split("=", 1) for kv in args.set))
    runner = hz.Runner(cfg)
    names = list(ABLATIONS) if args.which == "all" else [args.which]
    dump = {}
    for name in names:
        res = ABLATIONS[name](runner)
        dump[name] = {str(k): v for k, v in res.items()}
        print(f"[{name}]")
        for line in ex.summarize(res):
            print(line)
        a, b = (np.mean(v) for v in res.values())
        print(f"  difference {a - b:+.4f}")
    if args.json:
        Path(args.json).write_text(json.dumps(dump, indent=2))


if __name__ == "__main__":
    main()
