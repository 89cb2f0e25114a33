"""Semi-supervised loss terms: augmentations, pseudo-labels and step assembly."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AssemblyError, DimensionError
from .tensor import Tensor, cross_entropy_from_logits, softmax

MAX_SHIFT = 2
LOSS_MODES = ("matchnas", "naive-ssl-nas", "supervised-nas", "fixmatch-single", "supervised-single")
VIEWS = ("weak", "strong")


# -- augmentation -----------------------------------------------------------------

def _as_array(batch) -> np.ndarray:
    a = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if a.ndim != 4:
        raise DimensionError(f"augmentation wants an N x C x H x W batch, got shape {a.shape}")
    return a


def apply_weak(batch, flips, shifts) -> np.ndarray:
    """Flip then translate each image with edge replication.

    ``flips`` is a boolean per image, ``shifts`` an (N, 2) integer array of
    (dy, dx). Translation clamps source indices, which equals edge padding.
    """
    x = _as_array(batch)
    n, c, h, w = x.shape
    flips = np.asarray(flips, dtype=bool)
    shifts = np.asarray(shifts, dtype=np.int64).reshape(n, 2)
    rows = np.clip(np.arange(h)[None, :] - shifts[:, :1], 0, h - 1)
    cols = np.clip(np.arange(w)[None, :] - shifts[:, 1:], 0, w - 1)
    cols = np.where(flips[:, None], w - 1 - cols, cols)
    idx_n = np.arange(n)[:, None, None, None]
    idx_c = np.arange(c)[None, :, None, None]
    return x[idx_n, idx_c, rows[:, None, :, None], cols[:, None, None, :]]


def draw_weak(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    flips = rng.random(n) < 0.5
    shifts = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=(n, 2))
    return flips, shifts


def augment_weak(batch, rng: np.random.Generator) -> Tensor:
    x = _as_array(batch)
    flips, shifts = draw_weak(x.shape[0], rng)
    return Tensor(apply_weak(x, flips, shifts).astype(x.dtype, copy=False))


def apply_erase(batch, boxes, fill: float) -> np.ndarray:
    """Overwrite one (top, left, height, width) box per image with ``fill``."""
    out = np.array(_as_array(batch), copy=True)
    for i, (t, l, bh, bw) in enumerate(np.asarray(boxes, dtype=np.int64)):
        out[i, :, t:t + bh, l:l + bw] = fill
    return out


def draw_erase(n: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    # half the height times half the width caps the box at a quarter of the image
    bh = rng.integers(1, max(h // 2, 1) + 1, size=n)
    bw = rng.integers(1, max(w // 2, 1) + 1, size=n)
    top = (rng.random(n) * (h - bh + 1)).astype(np.int64)
    left = (rng.random(n) * (w - bw + 1)).astype(np.int64)
    return np.stack([top, left, bh, bw], axis=1)


def batch_mean(batch) -> float:
    """Erase fill value; accumulated in float64 so a constant batch maps to itself."""
    return float(_as_array(batch).mean(dtype=np.float64))


def augment_strong(batch, rng: np.random.Generator) -> Tensor:
    x = _as_array(batch)
    n, _, h, w = x.shape
    weak = apply_weak(x, *draw_weak(n, rng))
    erased = apply_erase(weak, draw_erase(n, h, w, rng), batch_mean(weak))
    scale = rng.uniform(0.7, 1.3, size=(n, 1, 1, 1))
    return Tensor(np.clip(erased * scale, 0.0, 1.0).astype(x.dtype, copy=False))


# -- pseudo-labels and losses -------------------------------------------------------

@dataclass(frozen=True)
class PseudoLabelResult:
    labels: np.ndarray
    mask: np.ndarray
    pass_fraction: float


def _logits(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def pseudo_label(teacher_logits, tau: float) -> PseudoLabelResult:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    z = _logits(teacher_logits).astype(np.float64)
    probs = softmax(z)
    mask = probs.max(axis=1) >= tau
    return PseudoLabelResult(probs.argmax(axis=1), mask, float(mask.mean()) if mask.size else 0.0)


def labelled_loss(logits: Tensor, y) -> Tensor:
    return cross_entropy_from_logits(logits, np.asarray(y))


def _masked_ce(logits: Tensor, pseudo: PseudoLabelResult) -> Tensor:
    # masked rows get all-zero targets: zero loss and zero gradient, while the
    # mean still divides by the full row count M
    m, k = logits.shape
    if pseudo.labels.shape[0] != m:
        raise ValueError(f"{m} student rows but {pseudo.labels.shape[0]} pseudo-labels")
    if pseudo.labels.size and pseudo.labels.max() >= k:
        raise IndexError(f"pseudo-label {pseudo.labels.max()} out of range for {k} classes")
    targets = np.zeros((m, k), dtype=logits.dtype)
    targets[np.arange(m), pseudo.labels] = pseudo.mask
    return cross_entropy_from_logits(logits, targets)


def unlabelled_loss_self(student_logits_strong: Tensor, teacher_logits_weak, tau: float) -> Tensor:
    if student_logits_strong.shape[0] != _logits(teacher_logits_weak).shape[0]:
        raise ValueError("student and teacher logits have different row counts")
    return _masked_ce(student_logits_strong, pseudo_label(teacher_logits_weak, tau))


def unlabelled_loss_distilled(student_logits: Tensor, teacher_pseudo: PseudoLabelResult,
                              view: str = "weak") -> Tensor:
    """Student loss against the largest subnet's labels and mask.

    ``view`` only documents which augmentation produced ``student_logits``; the
    caller picks the batch.
    """
    if view not in VIEWS:
        raise ValueError(f"view must be one of {VIEWS}, got {view!r}")
    return _masked_ce(student_logits, teacher_pseudo)


# -- step assembly -------------------------------------------------------------------

@dataclass
class SslBatch:
    labelled_x: Tensor
    labelled_y: np.ndarray
    unlabelled_u: Tensor
    u_weak: Tensor
    u_strong: Tensor
    x_weak: Tensor
    mu: int

    def __post_init__(self):
        m = self.unlabelled_u.shape[0]
        if not (self.u_weak.shape[0] == self.u_strong.shape[0] == m == self.mu * self.labelled_x.shape[0]):
            raise DimensionError(
                f"unlabelled views hold {self.u_weak.shape[0]}/{self.u_strong.shape[0]}/{m} rows, "
                f"expected mu * labelled = {self.mu * self.labelled_x.shape[0]}")


@dataclass(frozen=True)
class TermWeights:
    l_teacher: float = 1.0
    u_teacher: float = 1.0
    l_student: float = 1.0
    u_student: float = 1.0


_REQUIRED = {
    # mode: (teacher keys, student keys, students allowed)
    "matchnas": ({"l", "u"}, {"l", "u"}, True),
    "naive-ssl-nas": ({"l", "u"}, {"l", "u"}, True),
    "supervised-nas": ({"l"}, {"l"}, True),
    "fixmatch-single": ({"l", "u"}, set(), False),
    "supervised-single": ({"l"}, set(), False),
}


@dataclass
class StepLoss:
    total: Tensor
    breakdown: dict[str, float] = field(default_factory=dict)


def assemble_step_loss(mode: str, teacher_terms: dict, student_terms: list[dict],
                       weights: TermWeights = TermWeights()) -> StepLoss:
    """Weighted sum of one step's terms.

    ``teacher_terms`` holds ``l`` and optionally ``u`` for the first sampled
    subnet; ``student_terms`` one such dict per remaining subnet.
    """
    if mode not in _REQUIRED:
        raise AssemblyError(f"unknown loss mode {mode!r}")
    t_keys, s_keys, students_ok = _REQUIRED[mode]
    if set(teacher_terms) != t_keys:
        raise AssemblyError(f"{mode}: teacher terms {sorted(teacher_terms)} but expected {sorted(t_keys)}")
    if student_terms and not students_ok:
        raise AssemblyError(f"{mode} trains one network; got {len(student_terms)} student term sets")
    for i, terms in enumerate(student_terms, 1):
        if set(terms) != s_keys:
            raise AssemblyError(f"{mode}: student {i} terms {sorted(terms)} but expected {sorted(s_keys)}")
    parts = [("loss_l_A", teacher_terms["l"], weights.l_teacher)]
    if "u" in teacher_terms:
        parts.append(("loss_u_A", teacher_terms["u"], weights.u_teacher))
    for i, terms in enumerate(student_terms, 1):
        parts.append((f"loss_l_sub_{i}", terms["l"], weights.l_student))
        if "u" in terms:
            parts.append((f"loss_u_sub_{i}", terms["u"], weights.u_student))
    total = None
    breakdown = {}
    for name, term, wt in parts:
        breakdown[name] = float(term.data)
        scaled = term if wt == 1.0 else term * wt
        total = scaled if total is None else total + scaled
    return StepLoss(total, breakdown)
