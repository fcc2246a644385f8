"""Standalone evaluation and synthesis utilities.

precision@k scores external prediction dumps: scores come from an ATNS
rank-2 tensor, ground truth from an "ATMH" multi-hot file (magic, u16
version, u32 N, u32 M, then N*M bytes in {0,1}).

synth_activations fabricates activation dumps whose per-layer class-mean
correlation matrices hit requested targets, which lets the whole
analyze/plan pipeline be exercised end to end without training anything.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .featio import (
    FORMAT_VERSION,
    ActivationSet,
    TensorFormatError,
    write_labels_file,
    write_tensor_file,
)

TRUTH_MAGIC = b"ATMH"


@dataclass(frozen=True, eq=False)
class PredictionDump:
    scores: np.ndarray  # (N, M) float64
    truth: np.ndarray  # (N, M) uint8 in {0,1}

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        truth = np.asarray(self.truth)
        if scores.ndim != 2 or truth.shape != scores.shape:
            raise ValueError(f"scores {scores.shape} and truth {truth.shape} must match, rank 2")
        if not np.isin(truth, (0, 1)).all():
            raise ValueError("truth entries must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "truth", truth.astype(np.uint8))


def precision_at_k(dump: PredictionDump, k: int) -> float:
    """True positives over all predictions, with per-image top lists.

    An image with p positive labels contributes its top min(p, k) scored
    classes as predictions; k only caps the list.  Score ties break toward
    the lower class index.  Images without positive labels are skipped with
    a warning.
    """
    n, m = dump.scores.shape
    if not 1 <= k <= m:
        raise ValueError(f"k must be in 1..{m}, got {k}")
    tp = 0
    fp = 0
    for i in range(n):
        p = int(dump.truth[i].sum())
        if p == 0:
            warnings.warn(f"image {i} has no positive labels; skipped", stacklevel=2)
            continue
        take = min(p, k)
        top = np.argsort(-dump.scores[i], kind="stable")[:take]
        hits = int(dump.truth[i, top].sum())
        tp += hits
        fp += take - hits
    if tp + fp == 0:
        raise ValueError("no image produced predictions")
    return tp / (tp + fp)


def read_truth_file(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != TRUTH_MAGIC:
        raise TensorFormatError(f"{path}: bad magic, not an ATMH truth file")
    if len(buf) < 14:
        raise TensorFormatError(f"{path}: truncated header")
    version, n, m = struct.unpack("<HII", buf[4:14])
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if len(buf) - 14 != n * m:
        raise TensorFormatError(f"{path}: payload size mismatch for {n}x{m}")
    truth = np.frombuffer(buf, dtype=np.uint8, count=n * m, offset=14).reshape(n, m)
    if not np.isin(truth, (0, 1)).all():
        raise TensorFormatError(f"{path}: truth entries must be 0 or 1")
    return truth.copy()


def write_truth_file(path, truth) -> None:
    truth = np.asarray(truth)
    if truth.ndim != 2 or not np.isin(truth, (0, 1)).all():
        raise ValueError("truth must be a rank-2 array of 0/1")
    with open(path, "wb") as fh:
        fh.write(TRUTH_MAGIC)
        fh.write(struct.pack("<HII", FORMAT_VERSION, truth.shape[0], truth.shape[1]))
        fh.write(np.ascontiguousarray(truth, dtype=np.uint8).tobytes())


@dataclass(frozen=True, eq=False)
class SynthLayer:
    name: str
    width: int  # hidden units, must exceed num_classes
    target: np.ndarray  # (M, M) target correlation matrix


@dataclass(frozen=True, eq=False)
class SynthProfile:
    num_classes: int
    images_per_class: int
    layers: tuple[SynthLayer, ...]
    noise: float = 0.05


def uniform_target(num_classes: int, rho: float) -> np.ndarray:
    """Unit-diagonal matrix with constant off-diagonal correlation rho."""
    t = np.full((num_classes, num_classes), float(rho))
    np.fill_diagonal(t, 1.0)
    return t


def _check_target(layer: SynthLayer, m: int) -> np.ndarray:
    t = np.asarray(layer.target, dtype=np.float64)
    if t.shape != (m, m):
        raise ValueError(f"layer {layer.name}: target must be {m}x{m}")
    if not np.allclose(t, t.T, atol=1e-12):
        raise ValueError(f"layer {layer.name}: target must be symmetric")
    if not np.allclose(np.diag(t), 1.0, atol=1e-12):
        raise ValueError(f"layer {layer.name}: target diagonal must be 1")
    if np.abs(t).max() > 1.0 + 1e-12:
        raise ValueError(f"layer {layer.name}: target entries must lie in [-1, 1]")
    return t


def synth_activations(profile: SynthProfile, seed: int):
    """Deterministic dumps whose class-mean correlations match the targets.

    Per layer, class means are built as G = sqrt(T) @ Q where the rows of Q
    are orthonormal and orthogonal to the all-ones vector, so the means are
    exactly zero-centered across hidden units and their Pearson matrix is
    the target T up to float rounding.  Per-image noise is re-centered
    within each class, leaving the class means (and thus every correlation)
    untouched.  Returns (activation sets by layer, labels).
    """
    m = profile.num_classes
    if m < 2:
        raise ValueError("need at least 2 classes")
    if profile.images_per_class < 1:
        raise ValueError("need at least 1 image per class")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(m), profile.images_per_class)
    n = labels.size

    sets: dict[str, ActivationSet] = {}
    for layer in profile.layers:
        if layer.width < m + 1:
            raise ValueError(
                f"layer {layer.name}: width {layer.width} too small for"
                f" {m} classes, need at least {m + 1}"
            )
        target = _check_target(layer, m)
        evals, evecs = np.linalg.eigh(target)
        if evals.min() < -1e-8:
            raise ValueError(
                f"layer {layer.name}: target correlation matrix is not positive"
                f" semidefinite (min eigenvalue {evals.min():.3g})"
            )
        root = evecs @ np.diag(np.sqrt(np.clip(evals, 0.0, None)))
        basis = np.column_stack(
            [np.ones(layer.width), rng.standard_normal((layer.width, m))]
        )
        q, _ = np.linalg.qr(basis)
        means = root @ q[:, 1 : m + 1].T  # (M, width), rows zero-mean
        feats = means[labels]
        if profile.noise > 0:
            eps = rng.standard_normal((n, layer.width))
            for cls in range(m):
                sel = labels == cls
                eps[sel] -= eps[sel].mean(axis=0)
            feats = feats + profile.noise * eps
        sets[layer.name] = ActivationSet(
            layer_name=layer.name, features=feats, labels=labels, num_classes=m
        )
    return sets, labels


def write_activation_dumps(
    dest_dir, sets, labels, spatial: tuple[int, int] | None = (2, 2), seed: int = 0
) -> Path:
    """Write ATNS/ATLB dumps plus a manifest; returns the manifest path.

    With ``spatial`` set, each pooled value is inflated to an HxW grid with
    zero-mean jitter so that average pooling recovers it; otherwise rank-2
    tensors are written as-is.
    """
    dest = Path(dest_dir)
    dest.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for name in sorted(sets):
        feats = sets[name].features
        if spatial is not None:
            h, w = spatial
            tiled = np.repeat(feats[:, :, None, None], h * w, axis=2).reshape(
                feats.shape[0], feats.shape[1], h, w
            )
            jitter = rng.standard_normal(tiled.shape) * 0.01
            jitter -= jitter.mean(axis=(2, 3), keepdims=True)
            tensor = tiled + jitter
        else:
            tensor = feats
        fname = f"{name}.atns"
        write_tensor_file(dest / fname, tensor)
        lines.append(f"layer {name} {fname}")
    write_labels_file(dest / "labels.atlb", labels)
    lines.append("labels labels.atlb")
    manifest = dest / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_profile(path) -> SynthProfile:
    """Parse the JSON profile the CLI synth command takes.

    Schema: {"num_classes": M, "images_per_class": n, "noise": optional,
    "layers": [{"name": ..., "width": ..., "rho": r | "matrix": [[...]]}]}.
    """
    with open(path) as fh:
        raw = json.load(fh)
    m = int(raw["num_classes"])
    layers = []
    for entry in raw["layers"]:
        if "matrix" in entry:
            target = np.asarray(entry["matrix"], dtype=np.float64)
        else:
            target = uniform_target(m, float(entry["rho"]))
        layers.append(SynthLayer(name=entry["name"], width=int(entry["width"]), target=target))
    return SynthProfile(
        num_classes=m,
        images_per_class=int(raw["images_per_class"]),
        layers=tuple(layers),
        noise=float(raw.get("noise", 0.05)),
    )
