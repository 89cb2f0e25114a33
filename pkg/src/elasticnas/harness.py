"""Experiment configs, method labels, metrics logs, the comparison protocol and reports."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import time
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import space as sp
from .data import Dataset, gen_synthetic, load_binary, split
from .errors import ConfigError
from .ssl import TermWeights
from .supernet import init_supernet
from .trainer import StepRecord, TrainConfig, evaluate, train, train_single
from .zeroshot import ConstraintSet, ScoredCandidate, ZenScorer, flops_budgets, load_constraints, narrow_space

# label -> (loss_mode, sampling_strategy, space handling)
METHODS: dict[str, tuple[str, str, str]] = {
    "matchnas": ("matchnas", "spos", "full"),
    "spos": ("supervised-nas", "spos", "full"),
    "spos+fixmatch": ("naive-ssl-nas", "spos", "full"),
    "fixmatch-single": ("fixmatch-single", "spos", "single"),
    "supervised-single": ("supervised-single", "spos", "single"),
    "matchnas-narrow": ("matchnas", "spos", "narrow"),
    "matchnas-sandwich": ("matchnas", "sandwich", "full"),
}
ARCH_ROLES = ("smallest", "medium", "largest")
SUMMARY_FIELDS = ("method", "arch", "flops", "params", "top1", "seed")


# -- configuration ---------------------------------------------------------------

@dataclass(frozen=True)
class DataConfig:
    path: str = ""  # ENDS file; empty means synthetic
    classes: int = 10
    per_class: int = 532
    resolution: int = 16
    noise_sigma: float = 0.3
    jitter: float = 3.0
    labelled_per_class: int = 40
    test_fraction: float = 0.2
    calib_count: int = 256
    seed_offset: int = 0  # dataset seed = run seed + offset


@dataclass(frozen=True)
class SearchConfig:
    samples_per_constraint: int = 20
    repeats: int = 16
    perturb_eps: float = 1e-2
    batch: int = 8
    narrow_budgets: int = 16


@dataclass(frozen=True)
class ExperimentConfig:
    space: str = "desk-tiny"
    method: str = "matchnas"
    methods: tuple[str, ...] = ("spos", "spos+fixmatch", "matchnas")
    seeds: tuple[int, ...] = (0, 1, 2)
    out: str = "runs"
    constraints: str = ""
    latency: str = ""
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)

    def __post_init__(self):
        for label in (self.method, *self.methods):
            if label not in METHODS:
                raise ConfigError(f"method: unknown label {label!r}; expected one of {sorted(METHODS)}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")

    def load_space(self) -> tuple[sp.SearchSpace, list[sp.ArchConfig] | None]:
        return resolve_space(self.space)

    def train_config(self, method: str, seed: int) -> TrainConfig:
        loss_mode, strategy, _ = METHODS[method]
        return replace(self.train, loss_mode=loss_mode, sampling_strategy=strategy, seed=seed)


_METHOD_KEYS = ("train.loss_mode", "train.sampling_strategy")


def _coerce(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            inner = typing.get_args(tp)[0]
            return tuple(_coerce(p.strip(), inner, key) for p in raw.split(",") if p.strip())
        if origin is typing.Union or origin is types.UnionType:
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            if raw.lower() in ("", "none", "null"):
                return None
            return _coerce(raw, args[0], key)
        if tp is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if tp in (int, float, str):
            return tp(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _build(cls, values: dict[str, Any], prefix: str):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    known = {f.name for f in fields(cls)}
    nested: dict[str, dict] = {}
    for key, raw in values.items():
        head, _, rest = key.partition(".")
        path = f"{prefix}{head}"
        if head not in known:
            raise ConfigError(f"{prefix}{key}: unknown key")
        tp = hints[head]
        if dataclasses.is_dataclass(tp):
            if not rest:
                raise ConfigError(f"{path}: is a section; set {path}.<field>")
            nested.setdefault(head, {})[rest] = raw
        else:
            if rest:
                raise ConfigError(f"{prefix}{key}: unknown key")
            kwargs[head] = raw if not isinstance(raw, str) else _coerce(raw.strip(), tp, path)
    for head, sub in nested.items():
        kwargs[head] = _build(hints[head], sub, f"{prefix}{head}.")
    try:
        return cls(**kwargs)
    except ConfigError as e:
        msg = str(e)
        raise ConfigError(msg if msg.startswith(prefix) else f"{prefix}{msg}") from None
    except TypeError as e:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {e}") from None


def config_from_mapping(values: dict[str, Any]) -> ExperimentConfig:
    for key in _METHOD_KEYS:
        if key in values:
            raise ConfigError(f"{key}: determined by the method label; set 'method' instead")
    return _build(ExperimentConfig, dict(values), "")


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected 'key.path = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{key}: set twice (line {no})")
        values[key] = raw
    return values


def load_config(path=None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return config_from_mapping(values)


def resolve_space(source: str) -> tuple[sp.SearchSpace, list[sp.ArchConfig] | None]:
    """A named space, or a space / narrowed-space file (members returned if present)."""
    from .zeroshot import parse_narrowed

    if source in sp.NAMED_SPACES:
        return sp.build_space(source), None
    p = Path(source)
    if not p.exists():
        raise ConfigError(f"space: {source!r} is neither a named space nor a file")
    space, members = parse_narrowed(p.read_text())
    return space, members or None


# -- data -------------------------------------------------------------------------

def build_dataset(cfg: DataConfig, seed: int) -> Dataset:
    if cfg.path:
        ds = load_binary(cfg.path)
        if (ds.tags == ds.tags[0]).all():
            ds = split(ds, cfg.labelled_per_class, cfg.test_fraction, cfg.calib_count, seed + cfg.seed_offset)
        return ds
    base = gen_synthetic(cfg.classes, cfg.per_class, cfg.resolution, cfg.noise_sigma,
                         seed + cfg.seed_offset, jitter=cfg.jitter)
    return split(base, cfg.labelled_per_class, cfg.test_fraction, cfg.calib_count, seed + cfg.seed_offset)


# -- metrics log ------------------------------------------------------------------

class MetricsSink:
    """Append-only newline-delimited JSON; every record is flushed and synced."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def __call__(self, record) -> None:
        self.write(record.to_dict() if hasattr(record, "to_dict") else record)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def metrics_sink(records: Iterable, path) -> None:
    with MetricsSink(path) as sink:
        for r in records:
            sink(r)


def read_records(path, kind: str | None = None) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                if kind is None or rec.get("kind") == kind:
                    out.append(rec)
    return out


# -- results ------------------------------------------------------------------------

@dataclass(frozen=True)
class ResultRow:
    method: str
    arch: str
    flops: int
    params: int
    top1: float
    seed: int
    wall_seconds: float = 0.0
    role: str = ""

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kind"] = "result"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRow":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


def summary_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in rows:
        w.writerow([r.method, r.arch, r.flops, r.params, f"{r.top1:.6f}", r.seed])
    return buf.getvalue()


def mean_rows(rows: Sequence[ResultRow]) -> list[dict]:
    groups: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.method, r.role, r.arch), []).append(r)
    return [{"method": m, "role": role, "arch": a, "mean_top1": float(np.mean([r.top1 for r in g])),
             "std_top1": float(np.std([r.top1 for r in g])), "seeds": len(g)}
            for (m, role, a), g in groups.items()]


def role_archs(space: sp.SearchSpace) -> dict[str, sp.ArchConfig]:
    return {"smallest": sp.smallest(space), "medium": sp.medium(space), "largest": sp.largest(space)}


def _row(method, role, arch, space, acc, seed, seconds) -> ResultRow:
    r = sp.count_resources(space, arch)
    return ResultRow(method, sp.encode(arch), r.flops, r.params, acc, seed, seconds, role)


# -- protocol -----------------------------------------------------------------------

@dataclass
class RunResult:
    method: str
    seed: int
    net: Any  # supernet, or {role: standalone} for single-network methods
    records: list[StepRecord]
    seconds: float
    members: list[sp.ArchConfig] | None = None


class Runner:
    """Trains (method, seed) cells once and keeps them for later evaluation."""

    def __init__(self, config: ExperimentConfig, sink: Callable | None = None):
        self.config = config
        self.space, self.members = config.load_space()
        self.sink = sink
        self._data: dict[int, Dataset] = {}
        self._runs: dict[tuple, RunResult] = {}
        self._narrowed: dict[int, list[ScoredCandidate]] = {}

    def dataset(self, seed: int) -> Dataset:
        if seed not in self._data:
            self._data[seed] = build_dataset(self.config.data, seed)
        return self._data[seed]

    def constraints(self) -> ConstraintSet:
        if self.config.constraints:
            return load_constraints(self.config.constraints, self.space)
        return flops_budgets(self.space, self.config.search.narrow_budgets)

    def scorer(self, seed: int) -> ZenScorer:
        s = self.config.search
        return ZenScorer(seed=seed, repeats=s.repeats, perturb_eps=s.perturb_eps, batch=s.batch)

    def narrowed(self, seed: int) -> list[ScoredCandidate]:
        if seed not in self._narrowed:
            self._narrowed[seed] = narrow_space(self.space, self.scorer(seed), self.constraints(),
                                                self.config.search.samples_per_constraint, seed)
        return self._narrowed[seed]

    def run(self, method: str, seed: int, tc: TrainConfig | None = None, tag: str = "") -> RunResult:
        key = (method, seed, tag)
        if key in self._runs:
            return self._runs[key]
        tc = tc or self.config.train_config(method, seed)
        data = self.dataset(seed)
        handling = METHODS[method][2]
        sink = None
        if self.sink is not None:
            def sink(rec, _m=method, _s=seed):
                d = rec.to_dict()
                d.update(method=_m, seed=_s)
                self.sink(d)
        start = time.perf_counter()
        members = None
        if handling == "single":
            nets = {}
            records = []
            for role, arch in role_archs(self.space).items():
                nets[role], recs = train_single(self.space, arch, data, tc, sink)
                records += recs
            net = nets
        else:
            if handling == "narrow":
                members = self.members or [c.arch for c in self.narrowed(seed)]
            elif self.members:
                members = self.members
            net, records = train(init_supernet(self.space, seed), data, tc, members, sink)
        result = RunResult(method, seed, net, records, time.perf_counter() - start, members)
        self._runs[key] = result
        return result

    def accuracy(self, result: RunResult, arch: sp.ArchConfig, role: str = "") -> float:
        data = self.dataset(result.seed)
        if isinstance(result.net, dict):
            return evaluate(result.net[role], arch, data)
        return evaluate(result.net, arch, data)

    def rows(self, method: str, seed: int) -> list[ResultRow]:
        result = self.run(method, seed)
        return [_row(method, role, arch, self.space, self.accuracy(result, arch, role), seed, result.seconds)
                for role, arch in role_archs(self.space).items()]


def compare_protocol(config: ExperimentConfig, out_dir=None, runner: Runner | None = None) -> list[ResultRow]:
    """Train every method for every seed; score smallest, medium and largest.

    With ``out_dir``, step and result records go to ``metrics.jsonl`` and the
    per-seed table to ``summary.csv`` (plus ``summary_means.csv``).
    """
    sink = MetricsSink(Path(out_dir) / "metrics.jsonl") if out_dir else None
    runner = runner or Runner(config, sink)
    if sink is not None:
        runner.sink = sink
    rows = []
    try:
        for method in config.methods:
            for seed in config.seeds:
                for row in runner.rows(method, seed):
                    rows.append(row)
                    if sink is not None:
                        sink(row)
    finally:
        if sink is not None:
            sink.close()
    if out_dir:
        write_summary(rows, out_dir)
    return rows


def write_summary(rows: Sequence[ResultRow], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(summary_csv(rows))
    means = mean_rows(rows)
    buf = io.StringIO()
    w = csv.DictWriter(buf, ["method", "role", "arch", "mean_top1", "std_top1", "seeds"], lineterminator="\n")
    w.writeheader()
    for m in means:
        w.writerow({**m, "mean_top1": f"{m['mean_top1']:.6f}", "std_top1": f"{m['std_top1']:.6f}"})
    (out / "summary_means.csv").write_text(buf.getvalue())
    return out / "summary.csv"


# -- report ---------------------------------------------------------------------------

REPORT_FIELDS = ("method", "arch", "flops", "params", "latency_ms", "top1", "seed", "constraint", "score")


def report_rows(results: Sequence[dict], searches: Sequence[dict], latency: sp.LatencyModel) -> list[dict]:
    """Left join of result rows with search records on arch encoding."""
    by_arch: dict[str, dict] = {}
    for s in searches:
        by_arch.setdefault(s["arch"], s)
    out = []
    for r in sorted(results, key=lambda r: (r["method"], r["flops"], r["arch"], r["seed"])):
        s = by_arch.get(r["arch"], {})
        out.append({"method": r["method"], "arch": r["arch"], "flops": r["flops"], "params": r["params"],
                    "latency_ms": f"{latency(r['flops']):.6f}", "top1": f"{r['top1']:.6f}", "seed": r["seed"],
                    "constraint": s.get("constraint", ""),
                    "score": "" if "score" not in s else f"{s['score']:.6f}"})
    return out


def build_report(out_dir, latency_path: str = "") -> str:
    """CSV trade-off table rebuilt from ``metrics.jsonl`` and any ``search*.jsonl`` logs."""
    out = Path(out_dir)
    results = read_records(out / "metrics.jsonl", "result")
    searches = []
    for p in sorted(out.glob("search*.jsonl")):
        searches += read_records(p, "search")
    latency = sp.LatencyModel.load(latency_path) if latency_path else sp.LatencyModel()
    buf = io.StringIO()
    w = csv.DictWriter(buf, REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for row in report_rows(results, searches, latency):
        w.writerow(row)
    text = buf.getvalue()
    (out / "report.csv").write_text(text)
    return text


def search_records(cands: Sequence[ScoredCandidate], constraints: ConstraintSet) -> list[dict]:
    return [{"kind": "search", **c.to_dict(constraints.budgets[c.constraint_id])} for c in cands]


__all__ = [
    "METHODS", "DataConfig", "SearchConfig", "ExperimentConfig", "TermWeights", "load_config",
    "config_from_mapping", "parse_config_text", "build_dataset", "MetricsSink", "metrics_sink",
    "read_records", "ResultRow", "summary_csv", "compare_protocol", "Runner", "build_report",
    "report_rows", "search_records", "role_archs",
]
