"""Recompute the independent oracle values and freeze them under tests/frozen/.

The tests compare the library against these numbers; rerun only when an
oracle itself changes.
"""

import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from oracles import adam_scalar, brute_force_count, walk_resources  # noqa: E402

from elasticnas import space as sp  # noqa: E402  (space containers and sampler only)


def stage_choices(space):
    return [(st.depths, st.kernels, st.expands) for st in space.stages]


def main() -> None:
    desk = sp.build_space("desk-tiny")
    rng = np.random.default_rng(20240531)
    archs = [sp.sample_uniform(desk, rng) for _ in range(5)]
    frozen = {
        "desk_tiny_count": brute_force_count(stage_choices(desk), desk.n_widths),
        "desk_tiny_resources": {
            sp.encode(a): dict(zip(("flops", "params"), walk_resources(desk, a)))
            for a in archs + [sp.largest(desk), sp.smallest(desk), sp.medium(desk)]
        },
        "mbv3_large_resources": {
            sp.encode(a): dict(zip(("flops", "params"), walk_resources(sp.build_space("mbv3-large"), a)))
            for a in (sp.largest(sp.build_space("mbv3-large")), sp.smallest(sp.build_space("mbv3-large")))
        },
        "adam_constant_grad": adam_scalar([1.0, 1.0, 1.0], lr0=0.1, wd=0.0, horizon=10, w0=0.5),
        "adam_with_decay": adam_scalar([0.3, -1.2, 0.7, 2.0, -0.1], lr0=0.05, wd=0.01, horizon=5, w0=-1.5),
    }
    out = ROOT / "tests" / "frozen" / "oracle_values.json"
    out.write_text(json.dumps(frozen, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
