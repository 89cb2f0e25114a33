"""Command-line entry point: gen-data, train, search, narrow, eval, compare, report."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness as hz
from . import space as sp
from .data import save_binary
from .errors import EXIT_CODES, ElasticNasError
from .supernet import Supernet, load_model, save_model
from .trainer import evaluate
from .zeroshot import narrow_space, narrowed_text, zero_shot_search

log = logging.getLogger("elasticnas")


def _exit_code_text() -> str:
    return "exit codes:\n" + "\n".join(f"  {code:>2}  {text}" for code, text in sorted(EXIT_CODES.items()))


def _config(args) -> hz.ExperimentConfig:
    overrides = {}
    if getattr(args, "space", None):
        overrides["space"] = args.space
    if getattr(args, "method", None):
        overrides["method"] = args.method
    if getattr(args, "constraints", None):
        overrides["constraints"] = args.constraints
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    return hz.load_config(args.config, overrides)


def _seed(args, cfg) -> int:
    return cfg.seeds[0] if args.seed is None else args.seed


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    ds = hz.build_dataset(cfg.data, _seed(args, cfg))
    out = Path(args.out or "data.ends")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_binary(ds, out)
    log.info("wrote %s (%d images, split %s)", out, len(ds), ds.counts())
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with hz.MetricsSink(out / "metrics.jsonl") as sink:
        runner = hz.Runner(cfg, sink)
        result = runner.run(cfg.method, seed)
    if isinstance(result.net, dict):
        for role, net in result.net.items():
            save_model(net, out / f"model-{role}.enas")
    else:
        save_model(result.net, out / "model.enas")
    log.info("trained %s seed %d: %d steps in %.1fs", cfg.method, seed, len(result.records), result.seconds)
    return 0


def cmd_search(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    runner = hz.Runner(cfg)
    cs = runner.constraints()
    trace: list = []
    cands = zero_shot_search(runner.space, runner.scorer(seed), cs, cfg.search.samples_per_constraint, seed,
                             trace=trace)
    out = Path(args.out or Path(cfg.out) / "search.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.unlink(missing_ok=True)
    hz.metrics_sink(hz.search_records(cands, cs), out)
    for c in cands:
        log.info("constraint %d: %s score=%.4f flops=%d", c.constraint_id, sp.encode(c.arch), c.score,
                 c.resources.flops)
    return 0


def cmd_narrow(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    runner = hz.Runner(cfg)
    cs = runner.constraints()
    members = narrow_space(runner.space, runner.scorer(seed), cs, cfg.search.samples_per_constraint, seed)
    out = Path(args.out or Path(cfg.out) / "narrowed.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(narrowed_text(runner.space, members, cs))
    log.info("wrote %d members to %s", len(members), out)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    seed = _seed(args, cfg)
    out = Path(args.out or cfg.out)
    data = hz.build_dataset(cfg.data, seed)
    rows = []
    models = sorted(out.glob("model*.enas")) if args.model is None else [Path(args.model)]
    if not models:
        raise FileNotFoundError(f"no model files under {out}")
    for path in models:
        net = load_model(path)
        space = net.space
        if args.arch:
            targets = {"": sp.decode(args.arch, space)}
        elif path.stem.partition("-")[2]:
            # one file per role; a largest-arch standalone loads back as a supernet
            role = path.stem.partition("-")[2]
            targets = {role: net.arch if not isinstance(net, Supernet) else hz.role_archs(space)[role]}
        elif isinstance(net, Supernet):
            targets = hz.role_archs(space)
        else:
            targets = {"": net.arch}
        for role, arch in targets.items():
            acc = evaluate(net, arch, data)
            r = sp.count_resources(space, arch)
            rows.append(hz.ResultRow(cfg.method, sp.encode(arch), r.flops, r.params, acc, seed, 0.0, role))
    hz.metrics_sink(rows, out / "metrics.jsonl")
    for row in rows:
        log.info("%s %s top1=%.4f", row.method, row.arch, row.top1)
    return 0


def cmd_compare(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = replace(cfg, seeds=tuple(args.seed + i for i in range(len(cfg.seeds))))
    out = Path(args.out or cfg.out)
    (out / "metrics.jsonl").unlink(missing_ok=True)
    rows = hz.compare_protocol(cfg, out)
    for m in hz.mean_rows(rows):
        log.info("%-18s %-8s mean top1 %.4f", m["method"], m["role"], m["mean_top1"])
    return 0


def cmd_report(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.out)
    text = hz.build_report(out, cfg.latency)
    sys.stdout.write(text)
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate (or split) a dataset and write an ENDS file"),
    "train": (cmd_train, "train the configured method; writes model file(s) and metrics.jsonl"),
    "search": (cmd_search, "zero-shot search per constraint; writes a search report"),
    "narrow": (cmd_narrow, "narrow the space to one scored member per constraint"),
    "eval": (cmd_eval, "evaluate trained models and append result rows"),
    "compare": (cmd_compare, "multi-method, multi-seed protocol; writes summary.csv"),
    "report": (cmd_report, "rebuild the trade-off CSV from persisted logs"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elasticnas", epilog=_exit_code_text(),
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, epilog=_exit_code_text(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="key-path config file")
        p.add_argument("--seed", type=int, help="run seed (compare: first of consecutive seeds)")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--space", help="named space, space file or narrowed-space file")
        p.add_argument("--constraints", help="constraint file ('flops <= N' per line)")
        p.add_argument("--method", choices=sorted(hz.METHODS))
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if name == "eval":
            p.add_argument("--model", help="model file (default: every model*.enas under --out)")
            p.add_argument("--arch", help="architecture encoding to evaluate")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command][0](args)
    except ElasticNasError as e:
        log.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        log.error("filesystem error: %s", e)
        return 12
    except Exception as e:  # noqa: BLE001
        log.exception("unexpected error: %s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
