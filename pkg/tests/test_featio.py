import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convrefine.featio import (
    ActivationSet,
    ManifestError,
    TensorFormatError,
    class_means,
    load_manifest,
    read_labels_file,
    read_tensor_file,
    spatial_average_pool,
    write_labels_file,
    write_tensor_file,
)
from convrefine.netir import parse_network


def test_tensor_header_layout_is_pinned(tmp_path):
    # magic, u16 version, u16 rank, rank*u32 dims, float32 payload, all LE
    path = tmp_path / "t.atns"
    payload = np.arange(6, dtype="<f4")
    path.write_bytes(b"ATNS" + struct.pack("<HH2I", 1, 2, 2, 3) + payload.tobytes())
    t = read_tensor_file(path)
    assert t.shape == (2, 3)
    assert t.dtype == np.float64
    np.testing.assert_array_equal(t, payload.reshape(2, 3))


def test_tensor_rank4(tmp_path):
    path = tmp_path / "t.atns"
    payload = np.arange(8, dtype="<f4")
    path.write_bytes(b"ATNS" + struct.pack("<HH4I", 1, 4, 1, 2, 2, 2) + payload.tobytes())
    t = read_tensor_file(path)
    assert t.shape == (1, 2, 2, 2)


def test_tensor_errors(tmp_path):
    path = tmp_path / "t.atns"
    path.write_bytes(b"NOPE" + struct.pack("<HH2I", 1, 2, 2, 3) + b"\0" * 24)
    with pytest.raises(TensorFormatError, match="bad magic"):
        read_tensor_file(path)

    path.write_bytes(b"ATNS" + struct.pack("<HH2I", 1, 2, 2, 3) + b"\0" * 20)
    with pytest.raises(TensorFormatError, match="truncated payload"):
        read_tensor_file(path)

    path.write_bytes(b"ATNS" + struct.pack("<HH2I", 1, 2, 2, 3) + b"\0" * 28)
    with pytest.raises(TensorFormatError, match="trailing data"):
        read_tensor_file(path)

    path.write_bytes(b"ATNS" + struct.pack("<HH3I", 1, 3, 2, 3, 1) + b"\0" * 24)
    with pytest.raises(TensorFormatError, match="rank must be 2 or 4"):
        read_tensor_file(path)

    path.write_bytes(b"ATNS" + struct.pack("<HH2I", 9, 2, 2, 3) + b"\0" * 24)
    with pytest.raises(TensorFormatError, match="version"):
        read_tensor_file(path)

    bad = np.array([[1.0, np.inf, 2.0]], dtype="<f4")
    path.write_bytes(b"ATNS" + struct.pack("<HH2I", 1, 2, 1, 3) + bad.tobytes())
    with pytest.raises(TensorFormatError, match="non-finite value at flat index 1"):
        read_tensor_file(path)


def test_tensor_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(2, 3), (4, 1), (1, 2, 2, 2), (3, 5, 2, 4)]:
        t = rng.standard_normal(shape).astype(np.float32)
        path = tmp_path / "rt.atns"
        write_tensor_file(path, t)
        np.testing.assert_array_equal(read_tensor_file(path), t.astype(np.float64))


def test_labels_roundtrip(tmp_path):
    path = tmp_path / "l.atlb"
    write_labels_file(path, np.array([0, 2, 1, 2]))
    np.testing.assert_array_equal(read_labels_file(path), [0, 2, 1, 2])
    with pytest.raises(TensorFormatError, match="bad magic"):
        path.write_bytes(b"XXXX" + struct.pack("<HI", 1, 0))
        read_labels_file(path)


def test_pool_hand_example():
    t = np.array([[[[1.0, 2.0], [3.0, 5.0]]]])
    np.testing.assert_allclose(spatial_average_pool(t), [[2.75]])


def test_pool_identity_and_constant():
    t = np.arange(6, dtype=np.float64).reshape(2, 3, 1, 1)
    np.testing.assert_array_equal(spatial_average_pool(t), t[:, :, 0, 0])
    const = np.full((2, 3, 4, 5), 7.25)
    np.testing.assert_array_equal(spatial_average_pool(const), np.full((2, 3), 7.25))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
@settings(max_examples=60)
def test_pool_preserves_means(n, c, h, w, seed):
    t = np.random.default_rng(seed).standard_normal((n, c, h, w))
    pooled = spatial_average_pool(t)
    assert pooled.shape == (n, c)
    np.testing.assert_allclose(pooled.sum(), t.sum() / (h * w), rtol=1e-12)


def test_class_means_hand_example():
    a = ActivationSet(
        layer_name="l",
        features=np.array([[0.0, 2.0], [2.0, 0.0]]),
        labels=np.array([0, 0]),
        num_classes=1,
    )
    np.testing.assert_array_equal(class_means(a).means, [[1.0, 1.0]])


def test_class_means_single_image_per_class():
    feats = np.array([[1.0, 2.0], [3.0, 4.0]])
    a = ActivationSet(layer_name="l", features=feats, labels=np.array([0, 1]), num_classes=2)
    np.testing.assert_array_equal(class_means(a).means, feats)


def test_class_means_missing_class():
    a = ActivationSet(
        layer_name="l",
        features=np.zeros((2, 3)),
        labels=np.array([0, 0]),
        num_classes=2,
    )
    with pytest.raises(ValueError, match="class 1 has no images"):
        class_means(a)


def test_class_means_permutation_invariant():
    rng = np.random.default_rng(3)
    feats = rng.standard_normal((12, 5))
    labels = rng.integers(0, 3, size=12)
    labels[:3] = [0, 1, 2]  # every class present
    a = ActivationSet(layer_name="l", features=feats, labels=labels, num_classes=3)
    perm = rng.permutation(12)
    b = ActivationSet(layer_name="l", features=feats[perm], labels=labels[perm], num_classes=3)
    np.testing.assert_allclose(class_means(a).means, class_means(b).means, atol=1e-12)


def _write_dumps(tmp_path, feats_by_name, labels):
    lines = []
    for name, feats in feats_by_name.items():
        write_tensor_file(tmp_path / f"{name}.atns", feats)
        lines.append(f"layer {name} {name}.atns")
    write_labels_file(tmp_path / "labels.atlb", labels)
    lines.append("labels labels.atlb")
    manifest = tmp_path / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def test_manifest_two_layers(tmp_path):
    rng = np.random.default_rng(5)
    manifest = _write_dumps(
        tmp_path,
        {"a": rng.standard_normal((4, 8)), "b": rng.standard_normal((4, 6, 2, 2))},
        np.array([0, 1, 0, 1]),
    )
    sets = load_manifest(manifest)
    assert sorted(sets) == ["a", "b"]
    assert sets["a"].features.shape == (4, 8)
    assert sets["b"].features.shape == (4, 6)  # pooled from rank 4
    assert sets["a"].num_classes == 2


def test_manifest_count_mismatch(tmp_path):
    manifest = _write_dumps(
        tmp_path, {"a": np.zeros((4, 3))}, np.array([0, 1, 0, 1, 1])
    )
    with pytest.raises(ManifestError, match="4 images .* 5 labels"):
        load_manifest(manifest)


def test_manifest_cross_checks_against_ir(tmp_path):
    ir = parse_network(
        "block a in=3 out=8 k=3x3 group=1 stage=0\n"
        "block b in=8 out=6 k=3x3 group=1 stage=1 prev=a\n"
    )
    manifest = _write_dumps(
        tmp_path,
        {"a": np.zeros((2, 8)), "ghost": np.zeros((2, 6))},
        np.array([0, 1]),
    )
    with pytest.raises(ManifestError, match="no such block"):
        load_manifest(manifest, ir)

    manifest = _write_dumps(
        tmp_path, {"a": np.zeros((2, 8)), "b": np.zeros((2, 5))}, np.array([0, 1])
    )
    with pytest.raises(ManifestError, match="block declares 6"):
        load_manifest(manifest, ir)


def test_manifest_structural_errors(tmp_path):
    empty = tmp_path / "m.txt"
    empty.write_text("labels l.atlb\n")
    with pytest.raises(ManifestError, match="lists no layers"):
        load_manifest(empty)
    empty.write_text("# nothing\n")
    with pytest.raises(ManifestError, match="lists no layers"):
        load_manifest(empty)
    nolabels = tmp_path / "m2.txt"
    write_tensor_file(tmp_path / "a.atns", np.zeros((1, 2)))
    nolabels.write_text("layer a a.atns\n")
    with pytest.raises(ManifestError, match="no labels line"):
        load_manifest(nolabels)
    dup = tmp_path / "m3.txt"
    dup.write_text("layer a a.atns\nlayer a a.atns\nlabels l.atlb\n")
    with pytest.raises(ManifestError, match="duplicate layer"):
        load_manifest(dup)
