"""Weight-sharing supernet and standalone subnets.

A subnet is a slice view of the maximal tensors: leading-prefix channels,
centred k x k kernel windows and the first ``d`` blocks of each stage.
Extraction copies those slices into an independent :class:`Standalone`
network that runs the very same layer code.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import space as sp
from .errors import FormatError, MissingCalibrationError
from .optim import ParamStore
from .tensor import (ACTIVATIONS, DEFAULT_DTYPE, Tensor, conv2d, global_avg_pool, linear, no_grad,
                     normalize_batch)

MODEL_MAGIC = b"ENAS"
MODEL_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _layers(plan: sp.LayerPlan):
    yield plan.head
    for b in plan.blocks:
        yield from b.convs
    yield plan.tail_conv


def param_shapes(space: sp.SearchSpace, arch: sp.ArchConfig, kernel_override: Callable | None = None):
    """Parameter path -> (shape, active index, fan_in) for the layers of ``arch``.

    ``kernel_override(layer)`` substitutes the stored kernel size (the supernet
    stores every depthwise kernel at the stage maximum).
    """
    plan = sp.layer_plan(space, arch)
    out = {}
    for layer in _layers(plan):
        k_store = kernel_override(layer) if kernel_override else layer.kernel
        cin_g = layer.cin // layer.groups
        c0 = (k_store - layer.kernel) // 2
        out[f"{layer.path}.w"] = ((layer.cout, cin_g, k_store, k_store),
                                  (slice(0, layer.cout), slice(0, cin_g), slice(c0, c0 + layer.kernel),
                                   slice(c0, c0 + layer.kernel)),
                                  cin_g * k_store * k_store)
        out[f"{layer.path}.bn.scale"] = ((layer.cout,), (slice(0, layer.cout),), None)
        out[f"{layer.path}.bn.shift"] = ((layer.cout,), (slice(0, layer.cout),), None)
    for d in plan.dense:
        out[f"{d.path}.w"] = ((d.fout, d.fin), (slice(0, d.fout), slice(0, d.fin)), d.fin)
        out[f"{d.path}.b"] = ((d.fout,), (slice(0, d.fout),), None)
    return out


def _init_params(shapes, seed: int, dtype) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore(rng_seed=seed)
    for path, (shape, _, fan_in) in shapes.items():
        if path.endswith(".bn.scale"):
            data = np.ones(shape)
        elif path.endswith((".bn.shift", ".b")):
            data = np.zeros(shape)
        else:
            gain = 1.0 if path.startswith("classifier") else 2.0
            data = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
        store.add(path, Tensor(data.astype(dtype)))
    return store


class _Network:
    """Layer execution shared by supernet and standalone networks."""

    space: sp.SearchSpace

    def __init__(self):
        self.calib_cache: dict[str, tuple[int, dict]] = {}
        self.version = 0

    def _weights(self, arch: sp.ArchConfig) -> Callable[[str], Tensor]:
        raise NotImplementedError

    def _check_input(self, x: Tensor) -> None:
        s = self.space
        expected = (s.in_channels, s.resolution, s.resolution)
        if tuple(x.shape[1:]) != expected:
            raise sp.SpaceValidationError(f"input shape {x.shape[1:]} does not match space input {expected}")

    def _run(self, arch: sp.ArchConfig, x, mode: str, stats: dict | None = None,
             collect: dict | None = None, trace: list | None = None, features: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        self._check_input(x)
        plan = sp.layer_plan(self.space, arch)
        weight = self._weights(arch)
        act = ACTIVATIONS[self.space.activation]

        def unit(layer: sp.ConvLayer, h: Tensor) -> Tensor:
            w = weight(f"{layer.path}.w")
            y = conv2d(h, w, layer.stride, layer.kernel // 2, layer.groups)
            if trace is not None:
                trace.append(("conv", layer.path, tuple(w.shape), tuple(y.shape), layer.groups))
            bn_stats = None
            sink = None
            if mode == "eval":
                bn_stats = stats[layer.path]
            elif collect is not None:
                sink = []
            y = normalize_batch(y, weight(f"{layer.path}.bn.scale"), weight(f"{layer.path}.bn.shift"),
                                "eval" if mode == "eval" else "train", bn_stats, stats_out=sink)
            if sink is not None:
                collect[layer.path] = sink[0]
            return act(y) if layer.act else y

        h = unit(plan.head, x)
        for block in plan.blocks:
            inp = h
            for layer in block.convs:
                h = unit(layer, h)
            if block.residual:
                h = h + inp
        h = unit(plan.tail_conv, h)
        if features:
            return h
        h = global_avg_pool(h)
        for d in plan.dense:
            w, b = weight(f"{d.path}.w"), weight(f"{d.path}.b")
            h = linear(h, w, b)
            if trace is not None:
                trace.append(("dense", d.path, tuple(w.shape), tuple(h.shape), 1))
            if d.act:
                h = act(h)
        return h

    def _forward(self, arch, x, mode="train", trace=None, features=False) -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        stats = None
        if mode == "eval":
            entry = self.calib_cache.get(sp.encode(arch))
            if entry is None or entry[0] != self.version:
                raise MissingCalibrationError(
                    f"no current calibration statistics for {sp.encode(arch)}; call recalibrate() first")
            stats = entry[1]
        return self._run(arch, x, mode, stats=stats, trace=trace, features=features)

    def _recalibrate(self, arch, calib_batch) -> dict:
        batch = calib_batch.data if isinstance(calib_batch, Tensor) else np.asarray(calib_batch)
        if batch.shape[0] == 0:
            raise ValueError("recalibrate needs a non-empty calibration batch")
        collect: dict = {}
        with no_grad():
            self._run(arch, Tensor(batch.astype(self.dtype, copy=False)), "train", collect=collect)
        self.calib_cache[sp.encode(arch)] = (self.version, collect)
        return collect

    def mark_updated(self) -> None:
        """Invalidate calibration after a weight update."""
        self.version += 1
        self.calib_cache.clear()

    def param_count(self) -> int:
        return self.params.num_elements()


@dataclass(frozen=True)
class SubnetView:
    arch: sp.ArchConfig
    slices: dict

    def covered(self, shapes: dict) -> dict[str, np.ndarray]:
        """Boolean mask per parameter of the elements this view touches."""
        out = {}
        for path, shape in shapes.items():
            m = np.zeros(shape, dtype=bool)
            if path in self.slices:
                m[self.slices[path]] = True
            out[path] = m
        return out


class Supernet(_Network):
    """Maximal parameter store plus per-architecture slice views."""

    def __init__(self, space: sp.SearchSpace, params: ParamStore, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.space = space
        self.params = params
        self.dtype = np.dtype(dtype)
        self._max_kernel = {}
        for i, st in enumerate(space.stages):
            for j in range(st.max_depth):
                self._max_kernel[f"s{i}.b{j}.dw"] = max(st.kernels)
        self._view_cache: dict[sp.ArchConfig, SubnetView] = {}

    def _kernel_store(self, layer: sp.ConvLayer) -> int:
        return self._max_kernel.get(layer.path, layer.kernel)

    def slice_view(self, arch: sp.ArchConfig) -> SubnetView:
        view = self._view_cache.get(arch)
        if view is None:
            sp.validate_arch(self.space, arch)
            shapes = param_shapes(self.space, arch, self._kernel_store)
            view = SubnetView(arch, {p: idx for p, (_, idx, _) in shapes.items()})
            if len(self._view_cache) > 4096:
                self._view_cache.clear()
            self._view_cache[arch] = view
        return view

    def _weights(self, arch):
        view = self.slice_view(arch)
        params = self.params
        return lambda path: params[path][view.slices[path]]

    def forward(self, arch: sp.ArchConfig, x, mode: str = "train", trace: list | None = None,
                features: bool = False) -> Tensor:
        return self._forward(arch, x, mode, trace=trace, features=features)

    def recalibrate(self, arch: sp.ArchConfig, calib_batch) -> dict:
        return self._recalibrate(arch, calib_batch)

    def shapes(self) -> dict[str, tuple]:
        return {p: t.shape for p, t in self.params.items()}

    def dynamic_param_count(self) -> int:
        return sum(t.data.size for p, t in self.params.items() if p.startswith("s"))

    def extract_standalone(self, arch: sp.ArchConfig) -> "Standalone":
        view = self.slice_view(arch)
        store = ParamStore(rng_seed=self.params.rng_seed)
        for path, idx in view.slices.items():
            store.add(path, Tensor(self.params[path].data[idx].copy()))
        return Standalone(self.space, arch, store, self.dtype)


class Standalone(_Network):
    """An independent network holding copies of one subnet's weights."""

    def __init__(self, space: sp.SearchSpace, arch: sp.ArchConfig, params: ParamStore, dtype=DEFAULT_DTYPE):
        super().__init__()
        sp.validate_arch(space, arch)
        self.space = space
        self.arch = arch
        self.params = params
        self.dtype = np.dtype(dtype)

    @classmethod
    def random(cls, space: sp.SearchSpace, arch: sp.ArchConfig, seed: int, dtype=DEFAULT_DTYPE) -> "Standalone":
        return cls(space, arch, _init_params(param_shapes(space, arch), seed, dtype), dtype)

    def _weights(self, arch):
        params = self.params
        return lambda path: params[path]

    def _own(self, arch):
        if arch is not None and arch != self.arch:
            raise sp.SpaceValidationError(f"standalone network is {sp.encode(self.arch)}, not {sp.encode(arch)}")
        return self.arch

    def forward(self, arch_or_x, x=None, mode: str = "train", trace: list | None = None,
                features: bool = False) -> Tensor:
        """``forward(x, mode=...)`` or, to mirror the supernet, ``forward(arch, x, mode=...)``."""
        if isinstance(arch_or_x, sp.ArchConfig):
            arch = self._own(arch_or_x)
        else:
            arch, x = self.arch, arch_or_x
        return self._forward(arch, x, mode, trace=trace, features=features)

    def recalibrate(self, arch_or_batch, calib_batch=None) -> dict:
        if isinstance(arch_or_batch, sp.ArchConfig):
            arch = self._own(arch_or_batch)
        else:
            arch, calib_batch = self.arch, arch_or_batch
        return self._recalibrate(arch, calib_batch)


def init_supernet(space: sp.SearchSpace, seed: int = 0, dtype=DEFAULT_DTYPE) -> Supernet:
    """He fan-in Gaussian init of the maximal tensors; deterministic per seed."""
    top = sp.largest(space)
    shapes = param_shapes(space, top)
    return Supernet(space, _init_params(shapes, seed, dtype), dtype)


def slice_view(supernet: Supernet, arch: sp.ArchConfig) -> SubnetView:
    return supernet.slice_view(arch)


def forward(net, arch, x, mode: str = "train") -> Tensor:
    return net.forward(arch, x, mode=mode)


def recalibrate(net, arch, calib_batch) -> dict:
    return net.recalibrate(arch, calib_batch)


def extract_standalone(supernet: Supernet, arch: sp.ArchConfig) -> Standalone:
    return supernet.extract_standalone(arch)


def train_step_grads(net, archs, losses) -> dict[str, np.ndarray]:
    """Backpropagate every per-architecture loss into the shared buffers.

    Gradients accumulate, so the result is the sum over the listed subnets.
    """
    if len(archs) != len(losses):
        raise ValueError(f"{len(archs)} architectures but {len(losses)} losses")
    for loss in losses:
        loss.backward()
    return {p: t.grad for p, t in net.params.items() if t.grad is not None}


# -- model files -----------------------------------------------------------------------

def _put_str(buf: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    buf += struct.pack("<I", len(raw))
    buf += raw


def model_bytes(net: _Network) -> bytes:
    arch = net.arch if isinstance(net, Standalone) else sp.largest(net.space)
    buf = bytearray(MODEL_MAGIC)
    buf += struct.pack("<H", MODEL_VERSION)
    _put_str(buf, net.space.to_text())
    _put_str(buf, sp.encode(arch))
    for path, t in net.params.items():
        raw = path.encode("utf-8")
        data = np.ascontiguousarray(t.data)
        buf += struct.pack("<H", len(raw))
        buf += raw
        buf += struct.pack("<BB", _DTYPE_CODES[data.dtype], data.ndim)
        buf += struct.pack(f"<{data.ndim}I", *data.shape)
        buf += data.astype(data.dtype.newbyteorder("<"), copy=False).tobytes()
    return bytes(buf)


def save_model(net: _Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_bytes(net))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated model file reading {what} at byte offset {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<I", what + " length")
        return self.take(n, what).decode("utf-8")


def parse_model(raw: bytes):
    """Return (space, arch, ParamStore, dtype) from model-file bytes."""
    r = _Reader(raw)
    if r.take(4, "magic") != MODEL_MAGIC:
        raise FormatError("bad magic at byte offset 0 (expected ENAS)")
    (version,) = r.unpack("<H", "version")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version} at byte offset 4")
    space = sp.space_from_text(r.string("space text"))
    arch = sp.decode(r.string("arch encoding"), space)
    store = ParamStore()
    dtype = None
    while r.pos < len(raw):
        start = r.pos
        (n,) = r.unpack("<H", "path length")
        name = r.take(n, "path").decode("utf-8")
        code, ndim = r.unpack("<BB", "dtype/ndim")
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} at byte offset {start}")
        shape = r.unpack(f"<{ndim}I", "shape")
        dt = _CODE_DTYPES[code]
        size = int(np.prod(shape)) * dt.itemsize
        data = np.frombuffer(r.take(size, f"payload of {name}"), dtype=dt.newbyteorder("<")).astype(dt)
        store.add(name, Tensor(data.reshape(shape)))
        dtype = dt
    return space, arch, store, dtype or np.dtype(DEFAULT_DTYPE)


def load_model(path):
    """Load a model file: a supernet when it stores the maximal arch, else a standalone."""
    with open(path, "rb") as fh:
        raw = fh.read()
    space, arch, store, dtype = parse_model(raw)
    for p, (shape, _, _) in param_shapes(space, arch).items():
        if p not in store or store[p].shape != shape:
            raise FormatError(f"model file parameter {p} missing or misshapen")
    if arch == sp.largest(space):
        return Supernet(space, store, dtype)
    return Standalone(space, arch, store, dtype)


def load_into_supernet(supernet: Supernet, path) -> None:
    """Copy a stored network's weights into the matching leading slices (seed model)."""
    with open(path, "rb") as fh:
        space, arch, store, _ = parse_model(fh.read())
    view = supernet.slice_view(arch)
    for p, idx in view.slices.items():
        if p not in store:
            raise FormatError(f"seed model lacks parameter {p}")
        supernet.params[p].data[idx] = store[p].data
    supernet.mark_updated()
