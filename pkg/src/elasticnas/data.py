"""Synthetic pattern datasets, labelled/unlabelled splits and the ENDS file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError

MAGIC = b"ENDS"
VERSION = 1
TAGS = {"labelled": 0, "unlabelled": 1, "test": 2, "calibration": 3}
TAG_NAMES = {v: k for k, v in TAGS.items()}
_HEADER = struct.Struct("<4sH5I")


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # N x C x H x W float32 in [0, 1]
    labels: np.ndarray  # N int64
    tags: np.ndarray  # N uint8, see TAGS
    classes: int

    def __post_init__(self):
        n = self.images.shape[0]
        if self.images.ndim != 4:
            raise DataError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if self.labels.shape != (n,) or self.tags.shape != (n,):
            raise DataError(f"{n} images but {self.labels.shape[0]} labels and {self.tags.shape[0]} tags")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError(f"labels must lie in [0, {self.classes})")
        if n and not np.isin(self.tags, list(TAGS.values())).all():
            raise DataError("unknown split tag code")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]

    def indices(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.tags == TAGS[tag])

    def part(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(tag)
        return self.images[idx], self.labels[idx]

    def unlabelled_indices(self) -> np.ndarray:
        """Every training image, labelled ones included."""
        return np.flatnonzero((self.tags == TAGS["labelled"]) | (self.tags == TAGS["unlabelled"]))

    def unlabelled_images(self) -> np.ndarray:
        return self.images[self.unlabelled_indices()]

    def with_unlabelled(self, images: np.ndarray) -> "Dataset":
        """Copy with the unlabelled stream's pixels replaced (labelled rows kept)."""
        idx = self.indices("unlabelled")
        if images.shape != (len(idx),) + self.shape:
            raise DataError(f"replacement has shape {images.shape}, need {(len(idx),) + self.shape}")
        new = self.images.copy()
        new[idx] = images
        return Dataset(new, self.labels, self.tags, self.classes)

    def counts(self) -> dict[str, int]:
        return {name: int((self.tags == code).sum()) for name, code in TAGS.items()}


# -- generator --------------------------------------------------------------------

_KIND_COLOURS = np.array([
    [1.0, 0.55, 0.25],
    [0.25, 1.0, 0.55],
    [0.55, 0.25, 1.0],
    [0.8, 0.8, 0.8],
])


def class_params(c: int) -> tuple[int, float, float]:
    """(pattern kind, spatial frequency, orientation) of class ``c``.

    Kinds cycle bars, rings, checkers, ramps; classes sharing a kind differ
    in frequency and orientation.
    """
    kind = c % 4
    variant = c // 4
    freq = (1.5, 2.0, 1.5, 1.0)[kind] + 1.25 * variant
    theta = variant * np.pi / 3 + kind * np.pi / 8
    return kind, freq, theta


def _pattern(kind: int, u: np.ndarray, v: np.ndarray, freq: float, phase: np.ndarray) -> np.ndarray:
    if kind == 0:
        return np.cos(np.pi * freq * u + phase)
    if kind == 1:
        return np.cos(np.pi * freq * np.sqrt(u * u + v * v) * 1.5 + phase)
    if kind == 2:
        return np.cos(np.pi * freq * u + phase) * np.cos(np.pi * freq * v + phase)
    return np.tanh(2.0 * freq * u + phase / 2)


def gen_synthetic(classes: int, per_class: int, resolution: int, noise_sigma: float, seed: int,
                  jitter: float = 1.0, channels: int = 3) -> Dataset:
    """Class-conditional patterns with per-sample jitter and Gaussian pixel noise.

    ``jitter`` scales the per-sample phase, rotation, offset and contrast
    perturbations; 0 makes every image of a class identical before noise.
    """
    if classes < 2:
        raise DataError("need at least two classes")
    if resolution not in (8, 16, 32):
        raise DataError(f"resolution must be 8, 16 or 32, got {resolution}")
    if per_class < 0 or noise_sigma < 0:
        raise DataError("per_class and noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    grid = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    gy, gx = np.meshgrid(grid, grid, indexing="ij")
    phase = rng.uniform(-0.18, 0.18, n) * np.pi * jitter
    tilt = rng.uniform(-0.075, 0.075, n) * jitter
    offset = rng.uniform(-0.045, 0.045, (n, 2)) * jitter
    contrast = 1.0 + rng.uniform(-0.06, 0.06, n) * jitter
    noise = rng.standard_normal((n, channels, resolution, resolution)) * noise_sigma
    images = np.empty((n, channels, resolution, resolution))
    for c in range(classes):
        kind, freq, theta = class_params(c)
        sel = slice(c * per_class, (c + 1) * per_class)
        ang = (theta + tilt[sel])[:, None, None]
        x0 = gx[None] - offset[sel, 1, None, None]
        y0 = gy[None] - offset[sel, 0, None, None]
        u = x0 * np.cos(ang) + y0 * np.sin(ang)
        v = -x0 * np.sin(ang) + y0 * np.cos(ang)
        base = _pattern(kind, u, v, freq, phase[sel, None, None]) * contrast[sel, None, None]
        colour = np.resize(_KIND_COLOURS[kind], channels)
        images[sel] = 0.5 + 0.4 * base[:, None] * colour[None, :, None, None]
    images = np.clip(images + noise, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), np.full(n, TAGS["unlabelled"], dtype=np.uint8), classes)


# -- splitting ---------------------------------------------------------------------

def split(dataset: Dataset, labelled_per_class: int, test_fraction: float, calib_count: int,
          seed: int) -> Dataset:
    """Tag a random test and calibration subset, then a stratified labelled subset.

    The remaining training images are tagged unlabelled; the unlabelled stream
    (``unlabelled_indices``) still includes the labelled ones.
    """
    if not 0.0 <= test_fraction < 1.0:
        raise DataError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    n = len(dataset)
    n_test = int(round(n * test_fraction))
    if n_test + calib_count > n:
        raise DataError(f"{n} images cannot hold {n_test} test plus {calib_count} calibration images")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    tags = np.full(n, TAGS["unlabelled"], dtype=np.uint8)
    tags[order[:n_test]] = TAGS["test"]
    tags[order[n_test:n_test + calib_count]] = TAGS["calibration"]
    train = order[n_test + calib_count:]
    for c in range(dataset.classes):
        members = train[dataset.labels[train] == c]
        if len(members) < labelled_per_class:
            raise DataError(f"class {c} has {len(members)} training images, "
                            f"fewer than labelled_per_class={labelled_per_class}")
        tags[members[:labelled_per_class]] = TAGS["labelled"]
    return Dataset(dataset.images, dataset.labels, tags, dataset.classes)


# -- binary format -------------------------------------------------------------------

def dataset_bytes(dataset: Dataset) -> bytes:
    n, c, h, w = dataset.images.shape
    if dataset.classes > 0xFFFF:
        raise DataError("class count does not fit the u16 label field")
    return b"".join([
        _HEADER.pack(MAGIC, VERSION, n, c, h, w, dataset.classes),
        np.ascontiguousarray(dataset.images, dtype="<f4").tobytes(),
        dataset.labels.astype("<u2").tobytes(),
        dataset.tags.astype("u1").tobytes(),
    ])


def save_binary(dataset: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(dataset))


def parse_dataset(raw: bytes) -> Dataset:
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: {len(raw)} bytes at offset 0, need {_HEADER.size}")
    magic, version, n, c, h, w, k = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    off = _HEADER.size
    sizes = [("image payload", n * c * h * w * 4), ("labels", n * 2), ("split tags", n)]
    chunks = []
    for what, size in sizes:
        if off + size > len(raw):
            raise FormatError(f"truncated {what} at offset {off}: need {size} bytes, {len(raw) - off} left")
        chunks.append(raw[off:off + size])
        off += size
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes at offset {off}")
    images = np.frombuffer(chunks[0], dtype="<f4").reshape(n, c, h, w).astype(np.float32)
    labels = np.frombuffer(chunks[1], dtype="<u2").astype(np.int64)
    tags = np.frombuffer(chunks[2], dtype="u1").copy()
    try:
        return Dataset(images, labels, tags, k)
    except DataError as e:
        raise FormatError(f"inconsistent payload after header at offset {_HEADER.size}: {e}") from e


def load_binary(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())
