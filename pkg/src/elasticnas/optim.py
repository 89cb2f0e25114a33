"""Parameter store and Adam with decoupled weight decay and cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import NoGradientError
from .tensor import Tensor


class ParamStore:
    """Ordered map from parameter path to leaf tensor."""

    def __init__(self, tensors: dict[str, Tensor] | None = None, rng_seed: int = 0):
        self._tensors: dict[str, Tensor] = {}
        self.rng_seed = rng_seed
        for path, t in (tensors or {}).items():
            self.add(path, t)

    def add(self, path: str, tensor: Tensor) -> None:
        if path in self._tensors:
            raise KeyError(f"duplicate parameter path {path!r}")
        tensor.requires_grad = True
        self._tensors[path] = tensor

    def __getitem__(self, path: str) -> Tensor:
        return self._tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def num_elements(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p: t.data.copy() for p, t in self._tensors.items()}


def cosine_lr(lr0: float, step: int, horizon: int | None) -> float:
    if not horizon:
        return lr0
    t = min(step, horizon)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / horizon))


@dataclass
class OptimState:
    lr0: float = 3e-4
    horizon: int | None = None
    weight_decay: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return cosine_lr(self.lr0, self.step, self.horizon)


def optimizer_step(params: ParamStore, state: OptimState) -> float:
    """One AdamW step over the gradient support of each parameter.

    Only elements whose ``grad_mask`` is set (i.e. reached by backward in this
    step) have moments, decay and value updated, so a subnet step leaves the
    rest of the shared weights bit-identical. Returns the learning rate used.
    """
    if not any(t.grad is not None for _, t in params.items()):
        raise NoGradientError("optimizer_step called before any backward pass")
    lr = state.lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for path, p in params.items():
        if p.grad is None:
            continue
        if path not in state.m:
            state.m[path] = np.zeros_like(p.data)
            state.v[path] = np.zeros_like(p.data)
        m, v = state.m[path], state.v[path]
        mask = p.grad_mask
        full = bool(mask.all())
        sel = slice(None) if full else mask
        g = p.grad[sel]
        m_new = state.beta1 * m[sel] + (1.0 - state.beta1) * g
        v_new = state.beta2 * v[sel] + (1.0 - state.beta2) * g * g
        update = (m_new / c1) / (np.sqrt(v_new / c2) + state.eps)
        w = p.data[sel]
        w_new = w * (1.0 - lr * state.weight_decay) - lr * update
        m[sel] = m_new
        v[sel] = v_new
        p.data[sel] = w_new.astype(p.data.dtype, copy=False)
    return lr
