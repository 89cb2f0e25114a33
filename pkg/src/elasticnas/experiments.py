"""Desk-scale method comparisons and ablations built on the harness Runner.

Each function returns per-seed accuracies so callers can print, test or
tabulate them. Runs are cached by the Runner, so sharing one across calls
trains the baseline MatchNAS cells once.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import space as sp
from .harness import Runner


def smallest_accuracy(runner: Runner, method: str, seed: int, tag: str = "", **train_overrides) -> float:
    tc = replace(runner.config.train_config(method, seed), **train_overrides) if train_overrides else None
    result = runner.run(method, seed, tc, tag)
    return runner.accuracy(result, sp.smallest(runner.space), "smallest")


def method_ordering(runner: Runner, methods=("spos", "spos+fixmatch", "matchnas")) -> dict[str, list[float]]:
    return {m: [smallest_accuracy(runner, m, s) for s in runner.config.seeds] for m in methods}


def threshold_ablation(runner: Runner, taus=(0.95, 0.0)) -> dict[float, list[float]]:
    out = {}
    for tau in taus:
        same = tau == runner.config.train.tau
        out[tau] = [smallest_accuracy(runner, "matchnas", s) if same else
                    smallest_accuracy(runner, "matchnas", s, f"tau={tau}", tau=tau)
                    for s in runner.config.seeds]
    return out


def distill_view_ablation(runner: Runner) -> dict[str, list[float]]:
    out = {}
    for view in ("weak", "strong"):
        same = view == runner.config.train.distill_view
        out[view] = [smallest_accuracy(runner, "matchnas", s) if same else
                     smallest_accuracy(runner, "matchnas", s, f"view={view}", distill_view=view)
                     for s in runner.config.seeds]
    return out


def narrowing_ablation(runner: Runner) -> dict[str, list[float]]:
    """Mean accuracy over the narrowed members: trained on them vs on the full space."""
    out = {"narrowed": [], "full": []}
    for s in runner.config.seeds:
        members = [c.arch for c in runner.narrowed(s)]
        for key, method in (("narrowed", "matchnas-narrow"), ("full", "matchnas")):
            result = runner.run(method, s)
            out[key].append(float(np.mean([runner.accuracy(result, a) for a in members])))
    return out


def summarize(results: dict) -> list[str]:
    return [f"{k!s:>16}: mean {np.mean(v):.4f}  per seed {', '.join(f'{x:.4f}' for x in v)}"
            for k, v in results.items()]

