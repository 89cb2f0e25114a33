"""Training-free subnet scoring, constrained selection and candidate-list narrowing."""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import space as sp
from .errors import ConfigError, InfeasibleConstraintError, ScoringError
from .optim import ParamStore
from .supernet import Standalone, param_shapes
from .tensor import Tensor, no_grad

REJECTION_BUDGET = 10_000
METRICS = ("flops", "params")


# -- scoring ----------------------------------------------------------------------

def expansion_score(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, delta: np.ndarray,
                    eps: float) -> float:
    """``||fn(x + eps*delta) - fn(x)||_F / eps`` for one draw."""
    base = fn(x)
    moved = fn(x + eps * delta)
    return float(np.linalg.norm((moved - base).astype(np.float64).ravel())) / eps


def gaussian_params(space: sp.SearchSpace, arch: sp.ArchConfig, rng: np.random.Generator,
                    dtype=np.float32) -> ParamStore:
    """Unit Gaussian conv and dense weights, identity normalization affine, zero bias."""
    store = ParamStore()
    for path, (shape, _, _) in param_shapes(space, arch).items():
        if path.endswith(".bn.scale"):
            data = np.ones(shape)
        elif path.endswith(".bn.shift") or path.endswith(".b"):
            data = np.zeros(shape)
        else:
            data = rng.standard_normal(shape)
        store.add(path, Tensor(data.astype(dtype)))
    return store


def zen_score(space: sp.SearchSpace, arch: sp.ArchConfig, repeats: int = 16, perturb_eps: float = 1e-2,
              rng: np.random.Generator | int = 0, batch: int = 8) -> float:
    """log of the mean input-perturbation expansion of the pre-pooling features.

    Every repeat draws fresh weights, a Gaussian input and a Gaussian
    perturbation; normalization runs on batch statistics.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    if perturb_eps <= 0:
        raise ValueError(f"perturb_eps must be > 0, got {perturb_eps}")
    rng = np.random.default_rng(rng)
    sp.validate_arch(space, arch)
    shape = (batch, space.in_channels, space.resolution, space.resolution)
    total = 0.0
    with no_grad():
        for _ in range(repeats):
            net = Standalone(space, arch, gaussian_params(space, arch, rng))
            x = rng.standard_normal(shape).astype(np.float32)
            delta = rng.standard_normal(shape).astype(np.float32)
            total += expansion_score(lambda a: net.forward(Tensor(a), features=True).data, x, delta, perturb_eps)
    mean = total / repeats
    if not math.isfinite(mean) or mean <= 0.0:
        raise ScoringError(f"non-finite score for {sp.encode(arch)} (mean expansion {mean})")
    return math.log(mean)


@dataclass
class ZenScorer:
    """Deterministic per (seed, arch): the rng is keyed on a stable hash of both."""

    seed: int = 0
    repeats: int = 16
    perturb_eps: float = 1e-2
    batch: int = 8
    cache: dict = field(default_factory=dict, repr=False)

    def arch_seed(self, arch: sp.ArchConfig) -> int:
        return zlib.crc32(f"{self.seed}:{sp.encode(arch)}".encode())

    def __call__(self, space: sp.SearchSpace, arch: sp.ArchConfig) -> float:
        key = (space.name, arch)
        if key not in self.cache:
            self.cache[key] = zen_score(space, arch, self.repeats, self.perturb_eps,
                                        np.random.default_rng(self.arch_seed(arch)), self.batch)
        return self.cache[key]


# -- constraints -----------------------------------------------------------------

@dataclass(frozen=True)
class Budget:
    metric: str
    limit: float

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigError(f"constraint metric must be one of {METRICS}, got {self.metric!r}")
        if not self.limit > 0:
            raise ConfigError(f"constraint limit must be positive, got {self.limit}")

    def allows(self, report: sp.ResourceReport) -> bool:
        return getattr(report, self.metric) <= self.limit

    def __str__(self) -> str:
        return f"{self.metric} <= {self.limit:g}"


@dataclass(frozen=True)
class ConstraintSet:
    budgets: tuple[Budget, ...]

    def __len__(self) -> int:
        return len(self.budgets)

    def __iter__(self):
        return iter(self.budgets)

    def check(self, space: sp.SearchSpace) -> None:
        """Every budget must admit the smallest subnet, else nothing fits it."""
        floor = sp.count_resources(space, sp.smallest(space))
        for i, b in enumerate(self.budgets):
            if not b.allows(floor):
                raise InfeasibleConstraintError(
                    f"constraint {i} ({b}) is below the smallest subnet ({b.metric}={getattr(floor, b.metric)})")


_LINE = re.compile(r"^\s*(flops|params)\s*<=\s*([0-9.eE+_]+)\s*$")


def parse_constraints(text: str) -> ConstraintSet:
    budgets = []
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0]
        if not line.strip():
            continue
        m = _LINE.match(line)
        if not m:
            raise ConfigError(f"constraints line {no}: expected 'flops <= N' or 'params <= N', got {line.strip()!r}")
        try:
            limit = float(m.group(2).replace("_", ""))
        except ValueError:
            raise ConfigError(f"constraints line {no}: bad number {m.group(2)!r}") from None
        budgets.append(Budget(m.group(1), limit))
    if not budgets:
        raise ConfigError("constraints file holds no budgets")
    return ConstraintSet(tuple(budgets))


def load_constraints(path, space: sp.SearchSpace | None = None) -> ConstraintSet:
    cs = parse_constraints(Path(path).read_text())
    if space is not None:
        cs.check(space)
    return cs


def flops_budgets(space: sp.SearchSpace, m: int) -> ConstraintSet:
    """``m`` FLOPs budgets evenly spaced from the smallest to the largest subnet."""
    lo = sp.count_resources(space, sp.smallest(space)).flops
    hi = sp.count_resources(space, sp.largest(space)).flops
    limits = np.linspace(lo, hi, m) if m > 1 else [hi]
    return ConstraintSet(tuple(Budget("flops", float(round(v))) for v in limits))


# -- search -------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoredCandidate:
    arch: sp.ArchConfig
    score: float
    resources: sp.ResourceReport
    constraint_id: int

    def to_dict(self, budget: Budget | None = None) -> dict:
        d = {"constraint": self.constraint_id, "arch": sp.encode(self.arch), "score": self.score,
             "flops": self.resources.flops, "params": self.resources.params}
        if budget is not None:
            d["budget"] = str(budget)
        return d


Scorer = Callable[[sp.SearchSpace, sp.ArchConfig], float]


class _ResourceCache:
    def __init__(self, space: sp.SearchSpace):
        self.space = space
        self.memo: dict[sp.ArchConfig, sp.ResourceReport] = {}

    def __call__(self, arch: sp.ArchConfig) -> sp.ResourceReport:
        r = self.memo.get(arch)
        if r is None:
            r = self.memo[arch] = sp.count_resources(self.space, arch)
        return r


def rank_key(score: float, resources: sp.ResourceReport, arch: sp.ArchConfig):
    """Sort key: best score first, then fewer FLOPs, then encoding."""
    return (-score, resources.flops, sp.encode(arch))


def _feasible_samples(space, budget, n, rng, resources) -> list[sp.ArchConfig]:
    found = []
    for _ in range(REJECTION_BUDGET):
        a = sp.sample_uniform(space, rng)
        if budget.allows(resources(a)):
            found.append(a)
            if len(found) == n:
                break
    return found


def _select(space, scorer, candidates, budget, cid, resources, trace) -> ScoredCandidate:
    best = None
    for a in candidates:
        r = resources(a)
        try:
            s = float(scorer(space, a))
            if not math.isfinite(s):
                raise ScoringError(f"non-finite score {s} for {sp.encode(a)}")
        except ScoringError as e:
            if trace is not None:
                trace.append({"constraint": cid, "arch": sp.encode(a), "error": str(e)})
            continue
        if trace is not None:
            trace.append({"constraint": cid, "arch": sp.encode(a), "score": s, "flops": r.flops})
        if best is None or rank_key(s, r, a) < rank_key(best.score, best.resources, best.arch):
            best = ScoredCandidate(a, s, r, cid)
    if best is None:
        raise ScoringError(f"every candidate for constraint {cid} ({budget}) failed to score")
    return best


def _candidates(space, budget, samples, rng, resources, exhaustive, cid):
    if exhaustive:
        cands = [a for a in sp.enumerate_archs(space) if budget.allows(resources(a))]
    else:
        cands = _feasible_samples(space, budget, samples, rng, resources)
    if not cands:
        raise InfeasibleConstraintError(
            f"no architecture satisfies constraint {cid} ({budget})"
            + ("" if exhaustive else f" after {REJECTION_BUDGET} draws"))
    return cands


def zero_shot_search(space: sp.SearchSpace, scorer: Scorer, constraints: ConstraintSet,
                     samples_per_constraint: int = 20, rng: np.random.Generator | int = 0,
                     exhaustive: bool = False, trace: list | None = None) -> list[ScoredCandidate]:
    """Best-scoring feasible subnet per budget.

    Candidates are rejection-sampled uniformly (``exhaustive`` instead scores
    every feasible subnet of an enumerable space).
    """
    if samples_per_constraint < 1:
        raise ValueError(f"samples_per_constraint must be >= 1, got {samples_per_constraint}")
    rng = np.random.default_rng(rng)
    resources = _ResourceCache(space)
    out = []
    for cid, budget in enumerate(constraints):
        cands = _candidates(space, budget, samples_per_constraint, rng, resources, exhaustive, cid)
        out.append(_select(space, scorer, cands, budget, cid, resources, trace))
    return out


def narrow_space(space: sp.SearchSpace, scorer: Scorer, constraints: ConstraintSet,
                 samples_per_constraint: int = 20, rng: np.random.Generator | int = 0,
                 trace: list | None = None) -> list[ScoredCandidate]:
    """One (arch, budget) pair per budget with encodings kept distinct where possible.

    A winner that repeats an earlier member is re-drawn once from a fresh
    sample set; a repeat that persists is kept.
    """
    rng = np.random.default_rng(rng)
    resources = _ResourceCache(space)
    chosen: list[ScoredCandidate] = []
    seen: set[sp.ArchConfig] = set()
    for cid, budget in enumerate(constraints):
        cands = _candidates(space, budget, samples_per_constraint, rng, resources, False, cid)
        best = _select(space, scorer, cands, budget, cid, resources, trace)
        if best.arch in seen:
            cands = _candidates(space, budget, samples_per_constraint, rng, resources, False, cid)
            best = _select(space, scorer, cands, budget, cid, resources, trace)
        seen.add(best.arch)
        chosen.append(best)
    return chosen


def validation_search(net, candidates: Sequence, val_set) -> sp.ArchConfig:
    """Highest-accuracy candidate, ties to fewer FLOPs then encoding."""
    from .trainer import evaluate

    if not candidates:
        raise ValueError("validation_search needs at least one candidate")
    archs = [c.arch if isinstance(c, ScoredCandidate) else c for c in candidates]
    scored = []
    for a in archs:
        acc = evaluate(net, a, val_set)
        scored.append((-acc, sp.count_resources(net.space, a).flops, sp.encode(a), a))
    return min(scored, key=lambda t: t[:3])[3]


# -- narrowed-space files -------------------------------------------------------------

MEMBER_PREFIX = "member:"


def narrowed_text(space: sp.SearchSpace, members: Sequence[ScoredCandidate],
                  constraints: ConstraintSet) -> str:
    lines = [sp.space_to_text(space).rstrip("\n")]
    for m in members:
        lines.append(f"{MEMBER_PREFIX} arch={sp.encode(m.arch)} budget={constraints.budgets[m.constraint_id]}"
                     f" score={m.score!r} flops={m.resources.flops} params={m.resources.params}")
    return "\n".join(lines) + "\n"


def parse_narrowed(text: str) -> tuple[sp.SearchSpace, list[sp.ArchConfig]]:
    """Space plus member list; plain space texts parse with an empty list."""
    space_lines, members = [], []
    for line in text.splitlines():
        if line.strip().startswith(MEMBER_PREFIX):
            members.append(line.strip()[len(MEMBER_PREFIX):])
        else:
            space_lines.append(line)
    space = sp.space_from_text("\n".join(space_lines))
    archs = []
    for raw in members:
        fields = dict(tok.split("=", 1) for tok in raw.split() if "=" in tok)
        if "arch" not in fields:
            raise ConfigError(f"narrowed member line lacks arch=: {raw!r}")
        archs.append(sp.decode(fields["arch"], space))
    return space, archs
