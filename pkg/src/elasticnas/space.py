"""Stage-structured elastic search spaces and their resource accounting.

A space is a fixed head conv, an optional fixed first block, a sequence of
dynamic stages and a fixed tail (one 1x1 conv before pooling, then fully
connected layers).  Width is one global multiplier index shared by all
stages; each stage lists its output width under every multiplier.

Canonical architecture string::

    w<idx>|d<d1>,<d2>,...|k<k11>.<k12>...,<k21>...|e<e11>.<e12>...,<e21>...

``k``/``e`` hold one comma-separated group per stage with one dot-separated
value per block up to the stage's maximal depth (inactive trailing blocks
keep their values).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import DecodeError, SpaceValidationError


@dataclass(frozen=True)
class StageSpec:
    depths: tuple[int, ...]
    widths: tuple[int, ...]  # output width under each width-multiplier index
    expands: tuple[int, ...]
    kernels: tuple[int, ...]
    stride: int = 1

    @property
    def max_depth(self) -> int:
        return max(self.depths)


@dataclass(frozen=True)
class FixedBlock:
    width: int
    kernel: int = 3
    expand: int = 1
    stride: int = 1


@dataclass(frozen=True)
class SearchSpace:
    name: str
    stages: tuple[StageSpec, ...]
    width_labels: tuple[str, ...]
    resolution: int
    classes: int = 10
    in_channels: int = 3
    head_width: int = 16
    head_kernel: int = 3
    head_stride: int = 1
    first_block: FixedBlock | None = None
    tail: tuple[int, ...] = (32,)
    activation: str = "hswish"

    def __post_init__(self):
        validate_space(self)

    @property
    def n_widths(self) -> int:
        return len(self.width_labels)

    def to_text(self) -> str:
        return space_to_text(self)


@dataclass(frozen=True, order=True)
class ArchConfig:
    width: int
    depths: tuple[int, ...]
    kernels: tuple[tuple[int, ...], ...]
    expands: tuple[tuple[int, ...], ...]

    def encode(self) -> str:
        return encode(self)


@dataclass(frozen=True)
class ResourceReport:
    flops: int
    params: int
    latency_proxy: float
    dynamic_params: int = 0


@dataclass(frozen=True)
class LatencyModel:
    """Linear FLOPs-to-milliseconds map: ms = a * GFLOPs + b."""

    a: float = 10.0
    b: float = 0.0

    def __call__(self, flops: int) -> float:
        return self.a * flops / 1e9 + self.b

    @classmethod
    def load(cls, path) -> "LatencyModel":
        vals = {}
        with open(path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if line:
                    key, _, value = line.partition("=")
                    vals[key.strip()] = float(value)
        return cls(a=vals.get("a", cls.a), b=vals.get("b", cls.b))


DEFAULT_LATENCY = LatencyModel()


# -- validation ------------------------------------------------------------------

def validate_space(space: SearchSpace) -> None:
    if not space.stages:
        raise SpaceValidationError("space has no dynamic stages")
    if space.n_widths < 1:
        raise SpaceValidationError("space needs at least one width multiplier")
    if space.classes < 2:
        raise SpaceValidationError("space needs at least two classes")
    if space.head_kernel % 2 == 0:
        raise SpaceValidationError("head kernel must be odd")
    if not space.tail or min(space.tail) < 1:
        raise SpaceValidationError("tail needs at least one positive layer width")
    for i, st in enumerate(space.stages):
        where = f"stage {i}"
        for name in ("depths", "widths", "expands", "kernels"):
            vals = getattr(st, name)
            if not vals:
                raise SpaceValidationError(f"{where}: empty {name} choice set")
            if min(vals) < 1:
                raise SpaceValidationError(f"{where}: {name} must be positive")
            if len(set(vals)) != len(vals):
                raise SpaceValidationError(f"{where}: duplicate {name} choices")
        if any(k % 2 == 0 for k in st.kernels):
            raise SpaceValidationError(f"{where}: kernels must be odd")
        if len(st.widths) != space.n_widths:
            raise SpaceValidationError(
                f"{where}: {len(st.widths)} widths but the space has {space.n_widths} width multipliers")
        if list(st.widths) != sorted(st.widths):
            raise SpaceValidationError(f"{where}: widths must be non-decreasing in multiplier index")
        if st.stride < 1:
            raise SpaceValidationError(f"{where}: stride must be >= 1")
    size = space.resolution
    for s in [space.head_stride] + ([space.first_block.stride] if space.first_block else []) + [
            st.stride for st in space.stages]:
        size = (size - 1) // s + 1
        if size < 1:
            raise SpaceValidationError("feature map collapses to zero size")


# -- named spaces ----------------------------------------------------------------------

def _desk_tiny() -> SearchSpace:
    stage = dict(depths=(1, 2), widths=(8, 16), expands=(2, 4), kernels=(3, 5))
    return SearchSpace(
        name="desk-tiny",
        stages=(StageSpec(stride=1, **stage), StageSpec(stride=2, **stage), StageSpec(stride=1, **stage)),
        width_labels=("0.5x", "1.0x"),
        resolution=16,
        classes=10,
        in_channels=3,
        head_width=8,
        head_kernel=3,
        head_stride=2,
        tail=(32,),
    )


def _mbv3_large() -> SearchSpace:
    half = (12, 20, 40, 56, 80)
    full = (24, 40, 80, 112, 160)
    strides = (2, 2, 2, 1, 2)
    stages = tuple(
        StageSpec(depths=(2, 3, 4), widths=(half[i], full[i]), expands=(3, 4, 6), kernels=(3, 5, 7), stride=strides[i])
        for i in range(5))
    return SearchSpace(name="mbv3-large", stages=stages, width_labels=("0.5x", "1.0x"), resolution=32,
                       head_width=16, head_stride=2, first_block=FixedBlock(16, 3, 1, 1), tail=(960, 1280))


def _mbv3_small() -> SearchSpace:
    widths = ((12, 24, 36), (20, 40, 60), (24, 48, 72), (48, 96, 144))
    strides = (2, 2, 1, 2)
    stages = tuple(
        StageSpec(depths=(2, 3, 4), widths=widths[i], expands=(3, 4, 6), kernels=(3, 5), stride=strides[i])
        for i in range(4))
    return SearchSpace(name="mbv3-small", stages=stages, width_labels=("0.5x", "1.0x", "1.5x"), resolution=32,
                       head_width=16, head_stride=2, first_block=FixedBlock(16, 3, 1, 1), tail=(576, 1024))


def _proxyless() -> SearchSpace:
    widths = (24, 40, 80, 96, 192)
    strides = (2, 2, 2, 1, 2)
    stages = tuple(
        StageSpec(depths=(2, 3, 4), widths=(widths[i],), expands=(3, 4, 6), kernels=(3, 5, 7), stride=strides[i])
        for i in range(5))
    return SearchSpace(name="proxyless", stages=stages, width_labels=("1.0x",), resolution=32,
                       head_width=32, head_stride=2, first_block=FixedBlock(16, 3, 1, 1), tail=(1280,),
                       activation="relu")


NAMED_SPACES = {
    "desk-tiny": _desk_tiny,
    "mbv3-large": _mbv3_large,
    "mbv3-small": _mbv3_small,
    "proxyless": _proxyless,
}


# -- text form -------------------------------------------------------------------------

def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def space_to_text(space: SearchSpace) -> str:
    lines = [
        f"name: {space.name}",
        f"resolution: {space.resolution}",
        f"classes: {space.classes}",
        f"in_channels: {space.in_channels}",
        f"activation: {space.activation}",
        f"width_labels: {','.join(space.width_labels)}",
        f"head: width={space.head_width} kernel={space.head_kernel} stride={space.head_stride}",
    ]
    if space.first_block:
        fb = space.first_block
        lines.append(f"first_block: width={fb.width} kernel={fb.kernel} expand={fb.expand} stride={fb.stride}")
    for st in space.stages:
        lines.append(
            "stage: depth={} width={} expand={} kernel={} stride={}".format(
                ",".join(map(str, st.depths)), ",".join(map(str, st.widths)),
                ",".join(map(str, st.expands)), ",".join(map(str, st.kernels)), st.stride))
    lines.append(f"tail: {','.join(map(str, space.tail))}")
    return "\n".join(lines) + "\n"


def _kv(fields: str, where: str) -> dict[str, str]:
    out = {}
    for tok in fields.split():
        if "=" not in tok:
            raise SpaceValidationError(f"{where}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def space_from_text(text: str) -> SearchSpace:
    """Parse the ``key: value`` space format written by :func:`space_to_text`."""
    kw: dict = {}
    stages = []
    try:
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition(":")
            if not sep:
                raise SpaceValidationError(f"line {lineno}: missing ':'")
            key, value = key.strip(), value.strip()
            where = f"line {lineno}"
            if key == "stage":
                f = _kv(value, where)
                stages.append(StageSpec(depths=_ints(f["depth"]), widths=_ints(f["width"]),
                                        expands=_ints(f["expand"]), kernels=_ints(f["kernel"]),
                                        stride=int(f.get("stride", 1))))
            elif key == "head":
                f = _kv(value, where)
                kw["head_width"] = int(f["width"])
                kw["head_kernel"] = int(f.get("kernel", 3))
                kw["head_stride"] = int(f.get("stride", 1))
            elif key == "first_block":
                f = _kv(value, where)
                kw["first_block"] = FixedBlock(int(f["width"]), int(f.get("kernel", 3)),
                                               int(f.get("expand", 1)), int(f.get("stride", 1)))
            elif key == "tail":
                kw["tail"] = _ints(value)
            elif key == "width_labels":
                kw["width_labels"] = tuple(v.strip() for v in value.split(","))
            elif key in ("resolution", "classes", "in_channels"):
                kw[key] = int(value)
            elif key in ("name", "activation"):
                kw[key] = value
            else:
                raise SpaceValidationError(f"{where}: unknown key {key!r}")
    except (KeyError, ValueError) as exc:
        if isinstance(exc, SpaceValidationError):
            raise
        raise SpaceValidationError(f"malformed space text: {exc}") from exc
    if not stages:
        raise SpaceValidationError("space text lists no stages")
    kw.setdefault("name", "custom")
    kw.setdefault("width_labels", tuple(f"w{i}" for i in range(len(stages[0].widths))))
    if "resolution" not in kw:
        raise SpaceValidationError("space text needs a resolution")
    return SearchSpace(stages=tuple(stages), **kw)


def build_space(source, **overrides) -> SearchSpace:
    """Build a space from a registered name, space text, a dict, or a stage list."""
    if isinstance(source, SearchSpace):
        space = source
    elif isinstance(source, str) and source in NAMED_SPACES:
        space = NAMED_SPACES[source]()
    elif isinstance(source, str):
        space = space_from_text(source)
    elif isinstance(source, dict):
        d = dict(source)
        d["stages"] = tuple(s if isinstance(s, StageSpec) else StageSpec(**{
            k: (tuple(v) if isinstance(v, (list, tuple)) else v) for k, v in s.items()}) for s in d["stages"])
        d.setdefault("name", "custom")
        d.setdefault("width_labels", tuple(f"w{i}" for i in range(len(d["stages"][0].widths))))
        space = SearchSpace(**d)
    elif isinstance(source, (list, tuple)):
        return build_space({"stages": list(source), **overrides})
    else:
        raise SpaceValidationError(f"cannot build a space from {type(source).__name__}")
    if overrides:
        space = SearchSpace(**{**space.__dict__, **overrides})
    return space


# -- counting, enumeration, sampling ------------------------------------------------------

def count_subnets(space: SearchSpace) -> int:
    total = space.n_widths
    for st in space.stages:
        per_block = len(st.kernels) * len(st.expands)
        total *= sum(per_block ** d for d in st.depths)
    return total


def enumerate_archs(space: SearchSpace) -> Iterator[ArchConfig]:
    """Every distinct architecture; inactive blocks carry the smallest choices."""
    per_stage = []
    for st in space.stages:
        options = []
        for d in sorted(st.depths):
            for ks in itertools.product(sorted(st.kernels), repeat=d):
                for es in itertools.product(sorted(st.expands), repeat=d):
                    pad = st.max_depth - d
                    options.append((d, ks + (min(st.kernels),) * pad, es + (min(st.expands),) * pad))
        per_stage.append(options)
    for w in range(space.n_widths):
        for combo in itertools.product(*per_stage):
            yield ArchConfig(width=w, depths=tuple(c[0] for c in combo),
                             kernels=tuple(c[1] for c in combo), expands=tuple(c[2] for c in combo))


def validate_arch(space: SearchSpace, arch: ArchConfig) -> None:
    if not 0 <= arch.width < space.n_widths:
        raise SpaceValidationError(f"width index {arch.width} outside [0, {space.n_widths})")
    n = len(space.stages)
    if not (len(arch.depths) == len(arch.kernels) == len(arch.expands) == n):
        raise SpaceValidationError(f"architecture has the wrong number of stages (space has {n})")
    for i, st in enumerate(space.stages):
        if arch.depths[i] not in st.depths:
            raise SpaceValidationError(f"stage {i}: depth {arch.depths[i]} not in {st.depths}")
        if len(arch.kernels[i]) != st.max_depth or len(arch.expands[i]) != st.max_depth:
            raise SpaceValidationError(f"stage {i}: need {st.max_depth} per-block choices")
        for k in arch.kernels[i]:
            if k not in st.kernels:
                raise SpaceValidationError(f"stage {i}: kernel {k} not in {st.kernels}")
        for e in arch.expands[i]:
            if e not in st.expands:
                raise SpaceValidationError(f"stage {i}: expand {e} not in {st.expands}")


def is_valid(space: SearchSpace, arch: ArchConfig) -> bool:
    try:
        validate_arch(space, arch)
    except SpaceValidationError:
        return False
    return True


def sample_uniform(space: SearchSpace, rng: np.random.Generator) -> ArchConfig:
    """Independent uniform draw for every choice, inactive blocks included."""
    width = int(rng.integers(space.n_widths))
    depths, kernels, expands = [], [], []
    for st in space.stages:
        depths.append(st.depths[rng.integers(len(st.depths))])
        kernels.append(tuple(st.kernels[i] for i in rng.integers(len(st.kernels), size=st.max_depth)))
        expands.append(tuple(st.expands[i] for i in rng.integers(len(st.expands), size=st.max_depth)))
    return ArchConfig(width, tuple(int(d) for d in depths), tuple(kernels), tuple(expands))


def _pick(space: SearchSpace, fn) -> ArchConfig:
    return ArchConfig(
        width=fn(list(range(space.n_widths))),
        depths=tuple(fn(sorted(st.depths)) for st in space.stages),
        kernels=tuple((fn(sorted(st.kernels)),) * st.max_depth for st in space.stages),
        expands=tuple((fn(sorted(st.expands)),) * st.max_depth for st in space.stages),
    )


def largest(space: SearchSpace) -> ArchConfig:
    return _pick(space, lambda xs: xs[-1])


def smallest(space: SearchSpace) -> ArchConfig:
    return _pick(space, lambda xs: xs[0])


def medium(space: SearchSpace) -> ArchConfig:
    """Per-dimension median; even-sized sets take the upper median for depth and
    expand and the lower one for width and kernel."""
    def upper(xs):
        return xs[len(xs) // 2]

    def lower(xs):
        return xs[(len(xs) - 1) // 2]

    return ArchConfig(
        width=lower(list(range(space.n_widths))),
        depths=tuple(upper(sorted(st.depths)) for st in space.stages),
        kernels=tuple((lower(sorted(st.kernels)),) * st.max_depth for st in space.stages),
        expands=tuple((upper(sorted(st.expands)),) * st.max_depth for st in space.stages),
    )


def describe(space: SearchSpace, arch: ArchConfig) -> str:
    parts = [f"W={space.width_labels[arch.width]}"]
    for i in range(len(space.stages)):
        d = arch.depths[i]
        parts.append(f"s{i}:D={d},K={list(arch.kernels[i][:d])},E={list(arch.expands[i][:d])}")
    return " ".join(parts)


# -- encoding -----------------------------------------------------------------------------

def encode(arch: ArchConfig) -> str:
    k = ",".join(".".join(map(str, ks)) for ks in arch.kernels)
    e = ",".join(".".join(map(str, es)) for es in arch.expands)
    return f"w{arch.width}|d{','.join(map(str, arch.depths))}|k{k}|e{e}"


def decode(text: str, space: SearchSpace | None = None) -> ArchConfig:
    parts = text.strip().split("|")
    if len(parts) != 4 or [p[:1] for p in parts] != ["w", "d", "k", "e"]:
        raise DecodeError(f"malformed architecture string {text!r}")
    try:
        width = int(parts[0][1:])
        depths = tuple(int(v) for v in parts[1][1:].split(","))
        kernels = tuple(tuple(int(v) for v in grp.split(".")) for grp in parts[2][1:].split(","))
        expands = tuple(tuple(int(v) for v in grp.split(".")) for grp in parts[3][1:].split(","))
    except ValueError as exc:
        raise DecodeError(f"malformed architecture string {text!r}: {exc}") from exc
    arch = ArchConfig(width, depths, kernels, expands)
    if space is not None:
        try:
            validate_arch(space, arch)
        except SpaceValidationError as exc:
            raise DecodeError(f"{text!r} is not in space {space.name}: {exc}") from exc
    return arch


# -- layer plan & resources ------------------------------------------------------------------

@dataclass(frozen=True)
class ConvLayer:
    path: str
    cin: int
    cout: int
    kernel: int
    stride: int
    groups: int
    act: bool
    in_size: int
    out_size: int

    @property
    def flops(self) -> int:
        return 2 * self.cout * (self.cin // self.groups) * self.kernel ** 2 * self.out_size ** 2

    @property
    def params(self) -> int:
        return self.cout * (self.cin // self.groups) * self.kernel ** 2 + 2 * self.cout


@dataclass(frozen=True)
class Block:
    path: str
    convs: tuple[ConvLayer, ...]
    residual: bool
    dynamic: bool


@dataclass(frozen=True)
class DenseLayer:
    path: str
    fin: int
    fout: int
    act: bool

    @property
    def flops(self) -> int:
        return 2 * self.fin * self.fout

    @property
    def params(self) -> int:
        return self.fin * self.fout + self.fout


@dataclass(frozen=True)
class LayerPlan:
    head: ConvLayer
    blocks: tuple[Block, ...]
    tail_conv: ConvLayer
    dense: tuple[DenseLayer, ...] = field(default=())


def _block(path, cin, cout, hidden, k, stride, size, dynamic) -> tuple[Block, int]:
    out_size = (size - 1) // stride + 1
    convs = []
    if dynamic or hidden != cin:
        convs.append(ConvLayer(f"{path}.expand", cin, hidden, 1, 1, 1, True, size, size))
    convs.append(ConvLayer(f"{path}.dw", hidden, hidden, k, stride, hidden, True, size, out_size))
    convs.append(ConvLayer(f"{path}.project", hidden, cout, 1, 1, 1, False, out_size, out_size))
    return Block(path, tuple(convs), stride == 1 and cin == cout, dynamic), out_size


def layer_plan(space: SearchSpace, arch: ArchConfig) -> LayerPlan:
    """Active layers of ``arch`` with their channel counts and feature sizes."""
    size = space.resolution
    head_out = (size - 1) // space.head_stride + 1
    head = ConvLayer("head", space.in_channels, space.head_width, space.head_kernel, space.head_stride, 1, True,
                     size, head_out)
    size, cin = head_out, space.head_width
    blocks = []
    if space.first_block:
        fb = space.first_block
        b, size = _block("first", cin, fb.width, cin * fb.expand if fb.expand > 1 else cin, fb.kernel,
                         fb.stride, size, False)
        blocks.append(b)
        cin = fb.width
    for i, st in enumerate(space.stages):
        cout = st.widths[arch.width]
        for j in range(arch.depths[i]):
            stride = st.stride if j == 0 else 1
            hidden = cout * arch.expands[i][j]
            b, size = _block(f"s{i}.b{j}", cin, cout, hidden, arch.kernels[i][j], stride, size, True)
            blocks.append(b)
            cin = cout
    tail_conv = ConvLayer("tail", cin, space.tail[0], 1, 1, 1, True, size, size)
    dense = []
    fin = space.tail[0]
    for j, width in enumerate(space.tail[1:]):
        dense.append(DenseLayer(f"fc{j}", fin, width, True))
        fin = width
    dense.append(DenseLayer("classifier", fin, space.classes, False))
    return LayerPlan(head, tuple(blocks), tail_conv, tuple(dense))


def count_resources(space: SearchSpace, arch: ArchConfig, resolution: int | None = None,
                    latency: LatencyModel = DEFAULT_LATENCY) -> ResourceReport:
    """FLOPs (2 per multiply-accumulate, bias and normalization excluded) and
    parameter count (conv/dense weights, biases, normalization affine)."""
    validate_arch(space, arch)
    if resolution is not None and resolution != space.resolution:
        space = SearchSpace(**{**space.__dict__, "resolution": resolution})
    plan = layer_plan(space, arch)
    flops = params = dynamic = 0
    for layer in (plan.head, *[c for b in plan.blocks for c in b.convs], plan.tail_conv, *plan.dense):
        flops += layer.flops
        params += layer.params
    for b in plan.blocks:
        if b.dynamic:
            dynamic += sum(c.params for c in b.convs)
    return ResourceReport(flops=flops, params=params, latency_proxy=latency(flops), dynamic_params=dynamic)


def conv_flops(cin: int, cout: int, kernel: int, out_h: int, out_w: int, groups: int = 1) -> int:
    return 2 * cout * (cin // groups) * kernel * kernel * out_h * out_w


def is_nested(a: ArchConfig, b: ArchConfig) -> bool:
    """True when every active choice of ``a`` is <= the matching choice of ``b``."""
    if a.width > b.width:
        return False
    for i in range(len(a.depths)):
        if a.depths[i] > b.depths[i]:
            return False
        for j in range(a.depths[i]):
            if a.kernels[i][j] > b.kernels[i][j] or a.expands[i][j] > b.expands[i][j]:
                return False
    return True


def log10_count(space: SearchSpace) -> float:
    return math.log10(count_subnets(space))
