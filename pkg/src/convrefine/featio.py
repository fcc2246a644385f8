"""Reading activation dumps and turning them into per-class mean features.

Dumps are produced by whatever framework trained the network; this module
only consumes them.  Two little-endian binary formats are involved:

    tensor file  "ATNS" u16 version=1 | u16 rank(2|4) | rank*u32 dims | float32 payload
    labels file  "ATLB" u16 version=1 | u32 N | N*u32 class indices

A manifest ties them together, one line per layer plus one labels line::

    layer <name> <tensor-path>
    labels <path>

Paths are resolved relative to the manifest file.  Rank-4 dumps (N,C,H,W)
are average-pooled over the spatial axes on load; rank-2 dumps (N,C) are
taken as already pooled.  All statistics run in float64 regardless of the
float32 storage.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netir import NetworkIR


class TensorFormatError(ValueError):
    """Corrupt or unsupported binary dump."""


class ManifestError(ValueError):
    """Bad manifest or inconsistent set of dumps."""


TENSOR_MAGIC = b"ATNS"
LABELS_MAGIC = b"ATLB"
FORMAT_VERSION = 1


@dataclass(frozen=True, eq=False)
class ActivationSet:
    """Pooled features for one layer: rows are images, columns hidden units."""

    layer_name: str
    features: np.ndarray  # (N, h) float64
    labels: np.ndarray  # (N,) int64 in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError(f"layer {self.layer_name}: features must be rank 2")
        if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
            raise ValueError(f"layer {self.layer_name}: labels do not match feature rows")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(
                f"layer {self.layer_name}: class index out of range 0..{self.num_classes - 1}"
            )
        if not np.all(np.isfinite(feats)):
            raise ValueError(f"layer {self.layer_name}: non-finite feature values")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True, eq=False)
class ClassMeans:
    """Row m is the mean feature vector of the images labelled m."""

    layer_name: str
    means: np.ndarray  # (M, h) float64


def _read_exact(buf: bytes, offset: int, n: int, path, what: str) -> bytes:
    if offset + n > len(buf):
        raise TensorFormatError(f"{path}: truncated {what}")
    return buf[offset : offset + n]


def read_tensor_file(path) -> np.ndarray:
    """Load an ATNS tensor as float64, checking shape and finiteness."""
    path = Path(path)
    buf = path.read_bytes()
    if _read_exact(buf, 0, 4, path, "header") != TENSOR_MAGIC:
        raise TensorFormatError(f"{path}: bad magic, not an ATNS tensor file")
    version, rank = struct.unpack("<HH", _read_exact(buf, 4, 4, path, "header"))
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if rank not in (2, 4):
        raise TensorFormatError(f"{path}: rank must be 2 or 4, got {rank}")
    dims = struct.unpack(f"<{rank}I", _read_exact(buf, 8, 4 * rank, path, "dims"))
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"{path}: zero-sized dimension in {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    payload_off = 8 + 4 * rank
    expected = count * 4
    if len(buf) - payload_off < expected:
        raise TensorFormatError(
            f"{path}: truncated payload, expected {expected} bytes for dims {dims},"
            f" got {len(buf) - payload_off}"
        )
    if len(buf) - payload_off > expected:
        raise TensorFormatError(f"{path}: trailing data after payload")
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=payload_off)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise TensorFormatError(f"{path}: non-finite value at flat index {int(bad[0])}")
    return values.astype(np.float64).reshape(dims)


def write_tensor_file(path, tensor) -> None:
    tensor = np.asarray(tensor)
    if tensor.ndim not in (2, 4):
        raise ValueError(f"tensor rank must be 2 or 4, got {tensor.ndim}")
    if not np.all(np.isfinite(tensor)):
        raise ValueError("refusing to write non-finite values")
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<HH", FORMAT_VERSION, tensor.ndim))
        fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def read_labels_file(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    if _read_exact(buf, 0, 4, path, "header") != LABELS_MAGIC:
        raise TensorFormatError(f"{path}: bad magic, not an ATLB labels file")
    (version,) = struct.unpack("<H", _read_exact(buf, 4, 2, path, "header"))
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    (n,) = struct.unpack("<I", _read_exact(buf, 6, 4, path, "header"))
    if len(buf) - 10 < 4 * n:
        raise TensorFormatError(f"{path}: truncated payload, expected {n} labels")
    if len(buf) - 10 > 4 * n:
        raise TensorFormatError(f"{path}: trailing data after payload")
    return np.frombuffer(buf, dtype="<u4", count=n, offset=10).astype(np.int64)


def write_labels_file(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 1 or (labels.size and labels.min() < 0):
        raise ValueError("labels must be a 1-D array of non-negative integers")
    with open(path, "wb") as fh:
        fh.write(LABELS_MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, labels.size))
        fh.write(np.ascontiguousarray(labels, dtype="<u4").tobytes())


def spatial_average_pool(tensor: np.ndarray) -> np.ndarray:
    """Average the responses of each hidden unit over the spatial grid."""
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim != 4:
        raise ValueError(f"expected a rank-4 (N,C,H,W) tensor, got rank {tensor.ndim}")
    return tensor.mean(axis=(2, 3))


def class_means(activations: ActivationSet) -> ClassMeans:
    """Mean pooled feature vector per class.

    Every class 0..M-1 must be represented; an empty class is an error
    because its mean (and every correlation involving it) is undefined.
    """
    feats = activations.features
    labels = activations.labels
    m = activations.num_classes
    means = np.empty((m, feats.shape[1]), dtype=np.float64)
    for cls in range(m):
        rows = feats[labels == cls]
        if rows.shape[0] == 0:
            raise ValueError(f"layer {activations.layer_name}: class {cls} has no images")
        means[cls] = rows.mean(axis=0)
    return ClassMeans(layer_name=activations.layer_name, means=means)


def load_manifest(path, ir: NetworkIR | None = None) -> dict[str, ActivationSet]:
    """Resolve a manifest into one ActivationSet per listed layer.

    All layers must share the labels file's image count.  When an IR is
    given, each layer name must exist in it and the feature width must match
    the block's out_channels.
    """
    path = Path(path)
    layer_paths: list[tuple[str, Path]] = []
    labels_path = None
    for line_no, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if tokens[0] == "layer":
            if len(tokens) != 3:
                raise ManifestError(f"{path}:{line_no}: expected 'layer <name> <path>'")
            if any(name == tokens[1] for name, _ in layer_paths):
                raise ManifestError(f"{path}:{line_no}: duplicate layer {tokens[1]!r}")
            layer_paths.append((tokens[1], path.parent / tokens[2]))
        elif tokens[0] == "labels":
            if len(tokens) != 2:
                raise ManifestError(f"{path}:{line_no}: expected 'labels <path>'")
            if labels_path is not None:
                raise ManifestError(f"{path}:{line_no}: duplicate labels line")
            labels_path = path.parent / tokens[1]
        else:
            raise ManifestError(f"{path}:{line_no}: unknown directive {tokens[0]!r}")
    if not layer_paths:
        raise ManifestError(f"{path}: manifest lists no layers")
    if labels_path is None:
        raise ManifestError(f"{path}: manifest has no labels line")

    labels = read_labels_file(labels_path)
    if labels.size == 0:
        raise ManifestError(f"{labels_path}: labels file is empty")
    num_classes = int(labels.max()) + 1

    sets: dict[str, ActivationSet] = {}
    for name, tensor_path in layer_paths:
        tensor = read_tensor_file(tensor_path)
        if tensor.ndim == 4:
            tensor = spatial_average_pool(tensor)
        if tensor.shape[0] != labels.shape[0]:
            raise ManifestError(
                f"layer {name}: {tensor.shape[0]} images in {tensor_path}"
                f" but {labels.shape[0]} labels in {labels_path}"
            )
        if ir is not None:
            try:
                block = ir.block(name)
            except KeyError:
                raise ManifestError(f"layer {name}: no such block in the IR") from None
            if tensor.shape[1] != block.out_channels:
                raise ManifestError(
                    f"layer {name}: {tensor.shape[1]} hidden units in dump,"
                    f" block declares {block.out_channels}"
                )
        sets[name] = ActivationSet(
            layer_name=name, features=tensor, labels=labels, num_classes=num_classes
        )
    return sets
