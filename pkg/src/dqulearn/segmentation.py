"""Split images into filter-sized patches and map patches to encoding angles."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError


@dataclass(frozen=True)
class Patch:
    source_id: int
    offset: tuple[int, int]
    pixels: np.ndarray


def patch_grid(height: int, width: int, stride: int, size: int) -> tuple[int, int]:
    """Number of patch rows and columns for a valid (unpadded) sweep."""
    if stride < 1:
        raise ArgumentError(f"stride must be >= 1, got {stride}")
    if size < 1 or size > min(height, width):
        raise ShapeError(f"filter width {size} does not fit a {height}x{width} image")
    return (height - size) // stride + 1, (width - size) // stride + 1


def segment(image, stride: int, width: int, source_id: int = 0) -> list[Patch]:
    """Row-major ``width`` x ``width`` patches at offsets ``(i*stride, j*stride)``."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {image.shape}")
    rows, cols = patch_grid(*image.shape, stride, width)
    patches = []
    for i in range(rows):
        for j in range(cols):
            r, c = i * stride, j * stride
            pixels = image[r : r + width, c : c + width].reshape(-1).copy()
            pixels.flags.writeable = False
            patches.append(Patch(source_id, (r, c), pixels))
    return patches


@dataclass
class DenseLayer:
    weights: np.ndarray  # (input_dim, output_dim)
    bias: np.ndarray  # (output_dim,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def input_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights.shape[1]


def init_dense(input_dim: int, n_data_qubits: int, rng: np.random.Generator) -> DenseLayer:
    """Weights uniform in [0, pi), zero bias."""
    weights = rng.uniform(0.0, 1.0, size=(input_dim, 2 * n_data_qubits)) * math.pi
    return DenseLayer(weights, np.zeros(2 * n_data_qubits))


def center_bias(layer: DenseLayer, inputs) -> DenseLayer:
    """Shift the bias so pre-activations average to zero over ``inputs``.

    Positive weights on [0, 1] pixels otherwise push every pre-activation deep
    into the sigmoid's flat tail, collapsing all patches onto the same angles.
    """
    mean = np.asarray(inputs, dtype=float).reshape(-1, layer.input_dim).mean(axis=0)
    return DenseLayer(layer.weights, -(layer.weights.T @ mean))


def dense_preactivation(layer: DenseLayer, h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.shape[-1] != layer.input_dim:
        raise ShapeError(f"input length {h.shape[-1]} != dense input_dim {layer.input_dim}")
    return h @ layer.weights + layer.bias


def squash(y) -> np.ndarray:
    """pi * sigmoid(y), written to stay finite for any finite input."""
    y = np.asarray(y, dtype=float)
    out = np.empty_like(y)
    pos = y >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-y[pos]))
    ey = np.exp(y[~pos])
    out[~pos] = ey / (1.0 + ey)
    return math.pi * out


def dense_forward(layer: DenseLayer, h) -> np.ndarray:
    return squash(dense_preactivation(layer, h))


# -- datasets ----------------------------------------------------------------


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W), min-max scaled to [0, 1]
    labels: np.ndarray  # (N,)

    def __len__(self):
        return len(self.labels)

    def subset(self, labels=None, limit: int | None = None) -> Dataset:
        keep = np.ones(len(self), dtype=bool) if labels is None else np.isin(self.labels, labels)
        idx = np.flatnonzero(keep)
        if limit is not None:
            idx = idx[:limit]
        return Dataset(self.images[idx], self.labels[idx])


def minmax_scale(images) -> np.ndarray:
    images = np.asarray(images, dtype=float)
    lo, hi = images.min(), images.max()
    if hi == lo:
        return np.zeros_like(images)
    return (images - lo) / (hi - lo)


_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Read an IDX container (the MNIST file format), gzip-compressed or not."""
    import gzip

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise ShapeError(f"{path}: not an IDX file")
    ndim = raw[3]
    dims = np.frombuffer(raw, dtype=">u4", count=ndim, offset=4).astype(int)
    data = np.frombuffer(raw, dtype=_IDX_DTYPES[raw[2]], offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise ShapeError(f"{path}: payload size {data.size} != header dims {tuple(dims)}")
    return data.reshape(tuple(dims))


def write_idx(path, array) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + np.array(array.shape, dtype=">u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + array.tobytes())


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise ShapeError("IDX images must be (N, H, W) with N matching labels")
    return Dataset(minmax_scale(images), labels.astype(int))


def load_csv(path) -> Dataset:
    """One image per row: label first, then square-image pixels in row-major order."""
    rows = np.loadtxt(path, delimiter=",", ndmin=2)
    labels, pixels = rows[:, 0].astype(int), rows[:, 1:]
    side = math.isqrt(pixels.shape[1])
    if side * side != pixels.shape[1]:
        raise ShapeError(f"{path}: {pixels.shape[1]} pixels per row is not a square image")
    return Dataset(minmax_scale(pixels.reshape(-1, side, side)), labels)


def synthetic_bars(n_samples: int, size: int = 4, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Linearly separable two-class set: class 0 lights the left half, class 1 the right."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n_samples) % 2
    images = np.zeros((n_samples, size, size))
    half = size // 2
    images[labels == 0, :, :half] = 1.0
    images[labels == 1, :, half:] = 1.0
    images += rng.uniform(-noise, noise, size=images.shape)
    return Dataset(minmax_scale(np.clip(images, 0.0, 1.0)), labels)


def load_dataset(source: str) -> Dataset:
    """``synthetic:bars:<n>[:<size>[:<seed>]]``, ``<images.idx>|<labels.idx>`` or a CSV path."""
    if source.startswith("synthetic:"):
        parts = source.split(":")
        if len(parts) < 3 or parts[1] != "bars":
            raise ArgumentError(f"unknown synthetic dataset {source!r}")
        n = int(parts[2])
        size = int(parts[3]) if len(parts) > 3 else 4
        seed = int(parts[4]) if len(parts) > 4 else 0
        return synthetic_bars(n, size=size, seed=seed)
    if "|" in source:
        images, labels = source.split("|", 1)
        return load_idx(images, labels)
    return load_csv(source)
