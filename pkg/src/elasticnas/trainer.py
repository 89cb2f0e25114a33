"""Supernet and single-network training loops, subnet sampling and evaluation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import space as sp
from .data import Dataset
from .errors import ConfigError, DataError, DivergenceError
from .optim import OptimState, optimizer_step
from .ssl import (LOSS_MODES, VIEWS, TermWeights, assemble_step_loss, augment_strong, augment_weak,
                  labelled_loss, pseudo_label, unlabelled_loss_distilled)
from .supernet import Standalone, Supernet, init_supernet
from .tensor import Tensor, no_grad

SSL_MODES = ("matchnas", "naive-ssl-nas", "fixmatch-single")
SUPERNET_MODES = ("matchnas", "naive-ssl-nas", "supervised-nas")
SINGLE_MODES = ("fixmatch-single", "supervised-single")
STRATEGIES = ("spos", "sandwich")
EVAL_CHUNK = 256


@dataclass(frozen=True)
class TrainConfig:
    loss_mode: str = "matchnas"
    n_subnets_per_step: int = 4
    tau: float = 0.95
    mu: int = 4
    labelled_batch: int = 16
    epochs: int = 30
    lr0: float = 3e-4
    weight_decay: float = 3e-5
    sampling_strategy: str = "spos"
    distill_view: str = "weak"
    seed: int = 0
    term_weights: TermWeights = field(default_factory=TermWeights)
    max_steps: int | None = None  # truncates the schedule; the cosine horizon follows it
    joint_bn: bool = True  # one forward over all views per subnet, so they share batch statistics

    def __post_init__(self):
        checks = [
            (self.loss_mode in LOSS_MODES, "loss_mode", f"one of {LOSS_MODES}"),
            (self.n_subnets_per_step >= 1, "n_subnets_per_step", ">= 1"),
            (0.0 <= self.tau <= 1.0, "tau", "in [0, 1]"),
            (self.mu >= 0, "mu", ">= 0"),
            (self.labelled_batch >= 1, "labelled_batch", ">= 1"),
            (self.epochs >= 1, "epochs", ">= 1"),
            (self.lr0 > 0, "lr0", "> 0"),
            (self.weight_decay >= 0, "weight_decay", ">= 0"),
            (self.sampling_strategy in STRATEGIES, "sampling_strategy", f"one of {STRATEGIES}"),
            (self.distill_view in VIEWS, "distill_view", f"one of {VIEWS}"),
            (self.max_steps is None or self.max_steps >= 1, "max_steps", ">= 1"),
        ]
        for ok, key, want in checks:
            if not ok:
                raise ConfigError(f"train.{key} must be {want}, got {getattr(self, key)!r}")
        if self.loss_mode in SSL_MODES and self.mu < 1:
            raise ConfigError(f"train.mu must be >= 1 for loss_mode {self.loss_mode}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    step: int
    losses: dict[str, float]
    pass_fraction: float | None
    archs: list[str]
    lr: float

    def to_dict(self) -> dict:
        return {"kind": "step", "step": self.step, "losses": dict(self.losses),
                "pass_fraction": self.pass_fraction, "archs": list(self.archs), "lr": self.lr}

    @classmethod
    def from_dict(cls, d: dict) -> "StepRecord":
        return cls(d["step"], dict(d["losses"]), d["pass_fraction"], list(d["archs"]), d["lr"])


# -- subnet sampling ----------------------------------------------------------------

def sample_step_archs(space: sp.SearchSpace, strategy: str, n: int, rng: np.random.Generator,
                      members: Sequence[sp.ArchConfig] | None = None) -> list[sp.ArchConfig]:
    """Teacher first, then the strategy's students.

    With ``members`` (a narrowed candidate list) the random students are drawn
    uniformly from the members plus the largest subnet.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    if n < 1 or (strategy == "sandwich" and n < 2):
        raise ValueError(f"{strategy} sampling needs n >= {2 if strategy == 'sandwich' else 1}, got {n}")
    top = sp.largest(space)
    out = [top]
    if strategy == "sandwich":
        out.append(sp.smallest(space))
    pool = None
    if members is not None:
        pool = list(dict.fromkeys([top, *members]))
    while len(out) < n:
        if pool is None:
            out.append(sp.sample_uniform(space, rng))
        else:
            out.append(pool[int(rng.integers(len(pool)))])
    return out


# -- training loop -------------------------------------------------------------------

class _Streams:
    """Independent random streams so that each data source is read on its own."""

    def __init__(self, seed: int):
        ss = np.random.SeedSequence(seed)
        kids = ss.spawn(5)
        self.labelled, self.unlabelled, self.aug_l, self.aug_u, self.archs = (
            np.random.default_rng(k) for k in kids)


class _Cycler:
    def __init__(self, indices: np.ndarray, rng: np.random.Generator):
        self.indices = indices
        self.rng = rng
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos >= len(self.order):
                self.order = self.indices[self.rng.permutation(len(self.indices))]
                self.pos = 0
            got = self.order[self.pos:self.pos + k]
            self.pos += len(got)
            k -= len(got)
            out.append(got)
        return np.concatenate(out)


def _schedule(data: Dataset, config: TrainConfig) -> tuple[int, int]:
    n_lab = len(data.indices("labelled"))
    if n_lab == 0:
        raise DataError("the labelled split is empty")
    per_epoch = max(1, n_lab // config.labelled_batch)
    total = per_epoch * config.epochs
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    return per_epoch, total


def _concat(*parts: Tensor) -> Tensor:
    return Tensor(np.concatenate([p.data for p in parts], axis=0))


def _views(net, arch, parts, joint: bool, grad_mask=None) -> list:
    """Logits for each batch in ``parts``.

    Joint mode runs one forward over the concatenation (the views share
    normalization statistics); otherwise each view is its own forward and
    views flagged False in ``grad_mask`` skip graph recording.
    """
    if joint:
        out = net.forward(arch, _concat(*parts))
        bounds = np.cumsum([0] + [p.shape[0] for p in parts])
        return [out[int(a):int(b)] for a, b in zip(bounds[:-1], bounds[1:])]
    outs = []
    for i, p in enumerate(parts):
        if grad_mask is not None and not grad_mask[i]:
            with no_grad():
                outs.append(net.forward(arch, p))
        else:
            outs.append(net.forward(arch, p))
    return outs


def _step_terms(net, config: TrainConfig, archs, x_w, y, u_w, u_s):
    """Forward every sampled subnet and return (teacher terms, student terms, pass fraction)."""
    mode = config.loss_mode
    joint = config.joint_bn
    teacher = archs[0]
    if mode in ("supervised-nas", "supervised-single"):
        terms = [{"l": labelled_loss(net.forward(a, x_w), y)} for a in archs]
        return terms[0], terms[1:], None
    # the weak unlabelled view only yields pseudo-labels, which are constants
    lx, lw, ls = _views(net, teacher, [x_w, u_w, u_s], joint, (True, False, True))
    pseudo = pseudo_label(lw.data, config.tau)
    t_terms = {"l": labelled_loss(lx, y), "u": unlabelled_loss_distilled(ls, pseudo, "strong")}
    s_terms = []
    for a in archs[1:]:
        if mode == "matchnas":
            view = u_w if config.distill_view == "weak" else u_s
            sx, sv = _views(net, a, [x_w, view], joint)
            u_term = unlabelled_loss_distilled(sv, pseudo, config.distill_view)
        else:
            sx, sw, ss = _views(net, a, [x_w, u_w, u_s], joint, (True, False, True))
            u_term = unlabelled_loss_distilled(ss, pseudo_label(sw.data, config.tau), "strong")
        s_terms.append({"l": labelled_loss(sx, y), "u": u_term})
    return t_terms, s_terms, pseudo.pass_fraction


def _run(net, data: Dataset, config: TrainConfig, pick: Callable[[np.random.Generator], list],
         sink: Callable[[StepRecord], None] | None) -> list[StepRecord]:
    per_epoch, total = _schedule(data, config)
    uses_u = config.loss_mode in SSL_MODES
    st = _Streams(config.seed)
    lab = _Cycler(data.indices("labelled"), st.labelled)
    unl = None
    if uses_u:
        u_idx = data.unlabelled_indices()
        if len(u_idx) == 0:
            raise DataError("the unlabelled stream is empty")
        unl = _Cycler(u_idx, st.unlabelled)
    state = OptimState(lr0=config.lr0, horizon=total, weight_decay=config.weight_decay)
    records = []
    for step in range(total):
        idx = lab.take(config.labelled_batch)
        x_w = augment_weak(data.images[idx], st.aug_l)
        y = data.labels[idx]
        u_w = u_s = None
        if uses_u:
            u = data.images[unl.take(config.mu * len(idx))]
            u_w = augment_weak(u, st.aug_u)
            u_s = augment_strong(u, st.aug_u)
        archs = pick(st.archs)
        net.params.zero_grad()
        t_terms, s_terms, passed = _step_terms(net, config, archs, x_w, y, u_w, u_s)
        loss = assemble_step_loss(config.loss_mode, t_terms, s_terms, config.term_weights)
        value = float(loss.total.data)
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at step {step}; terms {loss.breakdown}")
        loss.total.backward()
        lr = optimizer_step(net.params, state)
        net.mark_updated()
        rec = StepRecord(step, loss.breakdown, passed, [sp.encode(a) for a in archs], lr)
        records.append(rec)
        if sink is not None:
            sink(rec)
    return records


def train(supernet: Supernet, data: Dataset, config: TrainConfig,
          members: Sequence[sp.ArchConfig] | None = None,
          sink: Callable[[StepRecord], None] | None = None) -> tuple[Supernet, list[StepRecord]]:
    """Weight-sharing training; ``members`` restricts sampling to a narrowed list."""
    if config.loss_mode not in SUPERNET_MODES:
        raise ConfigError(f"train.loss_mode {config.loss_mode!r} is not a supernet mode {SUPERNET_MODES}")
    space = supernet.space
    for a in members or ():
        sp.validate_arch(space, a)

    def pick(rng):
        return sample_step_archs(space, config.sampling_strategy, config.n_subnets_per_step, rng, members)

    return supernet, _run(supernet, data, config, pick, sink)


def train_single(space: sp.SearchSpace, arch: sp.ArchConfig, data: Dataset, config: TrainConfig,
                 sink: Callable[[StepRecord], None] | None = None) -> tuple[Standalone, list[StepRecord]]:
    """Train one architecture on its own, starting from the same-seed supernet slice."""
    if config.loss_mode not in SINGLE_MODES:
        raise ConfigError(f"train.loss_mode {config.loss_mode!r} is not a single-network mode {SINGLE_MODES}")
    net = init_supernet(space, config.seed).extract_standalone(arch)
    return net, _run(net, data, config, lambda rng: [arch], sink)


# -- evaluation ---------------------------------------------------------------------

def _predict(net, arch, images: np.ndarray) -> np.ndarray:
    preds = []
    with no_grad():
        for i in range(0, len(images), EVAL_CHUNK):
            out = net.forward(arch, Tensor(images[i:i + EVAL_CHUNK].astype(net.dtype, copy=False)), mode="eval")
            preds.append(out.data.argmax(axis=1))
    return np.concatenate(preds)


def evaluate(net, arch: sp.ArchConfig, test_set, calib_batch: np.ndarray | None = None) -> float:
    """Top-1 accuracy in eval mode.

    ``test_set`` is a Dataset (its test split is scored and its calibration
    split recalibrates ``arch``) or an (images, labels) pair, in which case
    ``calib_batch`` or an earlier ``recalibrate`` call supplies statistics.
    """
    if isinstance(test_set, Dataset):
        images, labels = test_set.part("test")
        if calib_batch is None:
            calib_batch = test_set.part("calibration")[0]
            if len(calib_batch) == 0:
                calib_batch = None
    else:
        images, labels = test_set
    if len(images) == 0:
        raise DataError("the test set is empty")
    if calib_batch is not None:
        net.recalibrate(arch, calib_batch)
    preds = _predict(net, arch, np.asarray(images))
    return float((preds == np.asarray(labels)).mean())
