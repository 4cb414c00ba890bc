import json
import os
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmal.ingest import (
    CIFAR_RECORD,
    DatasetBundle,
    FormatError,
    Partition,
    load_cifar10,
    load_mnist,
    read_bundle,
    read_cifar10,
    read_idx,
    read_idx_header,
    read_tensor,
    to_features,
    write_bundle,
    write_cifar10,
    write_idx,
    write_tensor,
)

DATA_DIR = os.environ.get("MMAL_DATA_DIR")


def toy_bundle(n=3, k=10):
    rng = np.random.default_rng(0)
    part = Partition(
        modalities=[rng.integers(0, 256, (n, 4, 4, 3), dtype=np.uint8),
                    rng.integers(0, 256, (n, 5, 5, 1), dtype=np.uint8)],
        labels=np.arange(n) % k,
        presence=np.array([3, 1, 2][:n] + [3] * max(0, n - 3), dtype=np.uint8),
        aux={"factors": rng.integers(0, 10, (n, 2, 5), dtype=np.uint8)},
    )
    man = {"dataset_kind": "external", "n_modalities": 2, "n_classes": k, "seed": 0}
    return DatasetBundle(manifest=man, partitions={"train": part, "test": part.subset([0])})


# ----------------------------------------------------------------------- IDX

def test_idx_roundtrip_header(tmp_path):
    imgs = np.arange(2 * 28 * 28, dtype=np.uint8).reshape(2, 28, 28)
    write_idx(tmp_path / "x", imgs)
    raw = (tmp_path / "x").read_bytes()
    assert raw[:4] == bytes([0, 0, 8, 3])
    assert struct.unpack(">3I", raw[4:16]) == (2, 28, 28)
    magic, dims = read_idx_header(tmp_path / "x")
    assert magic == 0x00000803 and dims == (2, 28, 28)
    np.testing.assert_array_equal(read_idx(tmp_path / "x"), imgs)


def test_idx_label_magic(tmp_path):
    write_idx(tmp_path / "y", np.array([5, 0, 4], dtype=np.uint8))
    magic, dims = read_idx_header(tmp_path / "y")
    assert magic == 0x00000801 and dims == (3,)


def test_idx_truncated_payload(tmp_path):
    write_idx(tmp_path / "x", np.zeros((4, 3, 3), np.uint8))
    raw = (tmp_path / "x").read_bytes()
    (tmp_path / "x").write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="truncated payload"):
        read_idx(tmp_path / "x")


def test_idx_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"\x01\x02\x08\x03" + b"\0" * 16)
    with pytest.raises(FormatError, match="magic"):
        read_idx(tmp_path / "x")


@settings(max_examples=60)
@given(st.integers(0, 16 + 2 * 9 - 1))
def test_idx_random_truncation_never_crashes(cut):
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "x"
        write_idx(p, np.ones((2, 3, 3), np.uint8))
        p.write_bytes(p.read_bytes()[:cut])
        with pytest.raises(FormatError):
            read_idx(p)


@pytest.mark.skipif(not DATA_DIR or not Path(DATA_DIR, "mnist").is_dir(), reason="MNIST reference files not present")
def test_mnist_reference_headers():
    d = Path(DATA_DIR) / "mnist"
    magic, dims = read_idx_header(d / "train-images-idx3-ubyte")
    assert magic == 0x00000803 and dims == (60000, 28, 28)
    assert read_idx_header(d / "train-labels-idx1-ubyte")[0] == 0x00000801
    imgs, labels = load_mnist(d, "train")
    assert imgs.shape == (60000, 28, 28) and len(labels) == 60000


# --------------------------------------------------------------------- CIFAR

def test_cifar_record_layout(tmp_path):
    img = np.zeros((1, 32, 32, 3), np.uint8)
    img[0, :, :, 0] = 10
    img[0, :, :, 1] = 20
    img[0, :, :, 2] = 30
    write_cifar10(tmp_path / "b.bin", img, np.array([7]))
    raw = (tmp_path / "b.bin").read_bytes()
    assert len(raw) == CIFAR_RECORD == 3073
    # channel-major planes after the label byte
    assert raw[0] == 7 and raw[1] == 10 and raw[1 + 1024] == 20 and raw[1 + 2048] == 30
    x, y = read_cifar10(tmp_path / "b.bin")
    np.testing.assert_array_equal(x, img)
    assert y.tolist() == [7]


def test_cifar_empty_and_errors(tmp_path):
    (tmp_path / "e.bin").write_bytes(b"")
    x, y = read_cifar10(tmp_path / "e.bin")
    assert x.shape == (0, 32, 32, 3) and len(y) == 0
    (tmp_path / "odd.bin").write_bytes(b"\0" * 3000)
    with pytest.raises(FormatError, match="multiple"):
        read_cifar10(tmp_path / "odd.bin")
    (tmp_path / "lab.bin").write_bytes(bytes([12]) + b"\0" * 3072)
    with pytest.raises(FormatError, match="label"):
        read_cifar10(tmp_path / "lab.bin")


def test_cifar_concatenates_batches(tmp_path):
    rng = np.random.default_rng(1)
    for i in range(2):
        write_cifar10(tmp_path / f"b{i}.bin", rng.integers(0, 256, (3, 32, 32, 3), dtype=np.uint8),
                      np.array([0, 1, 2]) + i)
    x, y = read_cifar10([tmp_path / "b0.bin", tmp_path / "b1.bin"])
    assert x.shape == (6, 32, 32, 3) and y.tolist() == [0, 1, 2, 1, 2, 3]


@pytest.mark.skipif(not DATA_DIR or not Path(DATA_DIR, "cifar-10-batches-bin").is_dir(),
                    reason="CIFAR-10 reference files not present")
def test_cifar_reference_files():
    d = Path(DATA_DIR) / "cifar-10-batches-bin"
    x, y = read_cifar10(d / "data_batch_1.bin")
    assert len(x) == 10000
    _, y = load_cifar10(d, "train")
    counts = np.bincount(y, minlength=10)
    assert np.all(np.abs(counts - 5000) <= 100)


# -------------------------------------------------------------------- tensors

@settings(max_examples=40)
@given(st.sampled_from([np.uint8, np.int32, np.float32, np.float64, np.uint16, np.int64]),
       st.lists(st.integers(0, 4), min_size=0, max_size=3))
def test_tensor_roundtrip(dtype, shape):
    import tempfile

    arr = (np.arange(int(np.prod(shape, dtype=np.int64))) * 3).astype(dtype).reshape(shape)
    with tempfile.TemporaryDirectory() as d:
        write_tensor(Path(d) / "t.bin", arr)
        back = read_tensor(Path(d) / "t.bin")
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_tensor_header_bytes(tmp_path):
    write_tensor(tmp_path / "t.bin", np.zeros((2, 3), np.uint8))
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw[:8] == b"MMALTNSR"
    assert struct.unpack("<II2Q", raw[8:32]) == (1, 2, 2, 3)
    assert len(raw) == 32 + 6


def test_tensor_errors(tmp_path):
    (tmp_path / "a.bin").write_bytes(b"NOTMAGIC" + b"\0" * 8)
    with pytest.raises(FormatError, match="magic"):
        read_tensor(tmp_path / "a.bin")
    write_tensor(tmp_path / "b.bin", np.zeros((4,), np.float32))
    (tmp_path / "b.bin").write_bytes((tmp_path / "b.bin").read_bytes()[:-1])
    with pytest.raises(FormatError, match="payload"):
        read_tensor(tmp_path / "b.bin")


@settings(max_examples=50)
@given(st.data())
def test_tensor_random_truncation(data):
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / "t.bin"
        write_tensor(p, np.ones((3, 5), np.int32))
        raw = p.read_bytes()
        cut = data.draw(st.integers(0, len(raw) - 1))
        p.write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            read_tensor(p)


# -------------------------------------------------------------------- bundles

def test_bundle_roundtrip_bitwise(tmp_path):
    b = toy_bundle()
    write_bundle(b, tmp_path / "b")
    back = read_bundle(tmp_path / "b")
    for name in ("train", "test"):
        p, q = b[name], back[name]
        for x, y in zip(p.modalities, q.modalities):
            assert x.tobytes() == y.tobytes() and x.shape == y.shape
        np.testing.assert_array_equal(p.labels, q.labels)
        np.testing.assert_array_equal(p.presence, q.presence)
        np.testing.assert_array_equal(p.aux["factors"], q.aux["factors"])
    man = json.loads((tmp_path / "b" / "manifest.json").read_text(encoding="utf-8"))
    assert man["partition_sizes"] == {"train": 3, "test": 1}
    assert sorted(os.listdir(tmp_path / "b" / "train")) == ["factors.bin", "labels.bin", "m0.bin", "m1.bin",
                                                           "presence.bin"]


def test_presence_bits(tmp_path):
    back = read_bundle(write_bundle(toy_bundle(), tmp_path / "b"))
    part = back["train"]
    assert part.presence[0] == 0b11
    assert part.present(0)[0] and part.present(1)[0]
    assert part.present(0).tolist() == [True, True, False]
    assert part.present(1).tolist() == [True, False, True]


def test_label_out_of_range_rejected(tmp_path):
    write_bundle(toy_bundle(), tmp_path / "b")
    write_tensor(tmp_path / "b" / "train" / "labels.bin", np.array([0, 12, 1], np.uint8))
    with pytest.raises(FormatError, match="label"):
        read_bundle(tmp_path / "b")


def test_empty_presence_rejected():
    b = toy_bundle()
    b["train"].presence[1] = 0
    with pytest.raises(FormatError, match="presence"):
        write_bundle(b, "/nonexistent/never-written")


def test_partial_read(tmp_path):
    write_bundle(toy_bundle(), tmp_path / "b")
    back = read_bundle(tmp_path / "b", partitions=["test"])
    assert list(back.partitions) == ["test"]


def test_to_features_scaling():
    imgs = np.full((2, 8, 8, 3), 255, np.uint8)
    f = to_features(imgs, 4)
    assert f.shape == (2, 4 * 4 * 3) and f.dtype == np.float32
    assert np.allclose(f, 1.0)
    assert to_features(imgs, None).shape == (2, 192)
