"""Readers for MNIST IDX / CIFAR-10 binary files and the on-disk bundle format.

Bundle layout::

    <dir>/manifest.json
    <dir>/<partition>/m<k>.bin        one tensor per modality, uint8 N x H x W x C
    <dir>/<partition>/labels.bin      uint8 (or int32 when n_classes > 256), shape N
    <dir>/<partition>/presence.bin    uint8, shape N; bit k set <=> modality k present
    <dir>/<partition>/<aux>.bin       generator side data (factors, source indices)

Every ``.bin`` file uses the same little-endian raw tensor header: the 8 magic
bytes ``MMALTNSR``, a uint32 dtype code, a uint32 ndim, ndim uint64 extents,
then the contiguous C-order payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """A file does not match the format it claims to be."""


DATASET_KINDS = ("missing", "share", "unique", "synergy", "external")

# ---------------------------------------------------------------------- MNIST IDX

IDX_DTYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def read_idx_header(path) -> tuple[int, tuple[int, ...]]:
    with open(path, "rb") as f:
        head = f.read(4)
        if len(head) < 4:
            raise FormatError(f"{path}: truncated header")
        magic = struct.unpack(">I", head)[0]
        if magic >> 16 != 0 or (magic >> 8) & 0xFF not in IDX_DTYPES or magic & 0xFF == 0:
            raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
        ndim = magic & 0xFF
        raw = f.read(4 * ndim)
        if len(raw) < 4 * ndim:
            raise FormatError(f"{path}: truncated header")
        return magic, struct.unpack(f">{ndim}I", raw)


def read_idx(path) -> np.ndarray:
    """Read an IDX file (MNIST images ``0x00000803`` or labels ``0x00000801``)."""
    magic, dims = read_idx_header(path)
    dtype = IDX_DTYPES[(magic >> 8) & 0xFF]
    offset = 4 + 4 * len(dims)
    count = int(np.prod(dims, dtype=np.int64))
    data = Path(path).read_bytes()[offset:]
    need = count * dtype.itemsize
    if len(data) < need:
        raise FormatError(f"{path}: truncated payload ({len(data)} of {need} bytes)")
    if len(data) > need:
        raise FormatError(f"{path}: {len(data) - need} trailing bytes after payload")
    return np.frombuffer(data, dtype=dtype, count=count).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    code = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}.get(arr.dtype)
    if code is None:
        raise ValueError("write_idx supports uint8/int8 payloads only")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", (code << 8) | arr.ndim))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr).tobytes())


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_mnist(directory, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    img_name, lbl_name = MNIST_FILES[split]
    d = Path(directory)
    images = read_idx(d / img_name)
    labels = read_idx(d / lbl_name)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise FormatError(f"{d}: inconsistent MNIST {split} files")
    return images, labels


# --------------------------------------------------------------------- CIFAR-10

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST = ("test_batch.bin",)


def read_cifar10(paths) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate CIFAR-10 binary batches into (N x 32 x 32 x 3 images, N labels)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise FormatError(f"{p}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = rec[:, 0]
        if lab.size and lab.max() >= 10:
            raise FormatError(f"{p}: label byte {int(lab.max())} >= 10")
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
        labels.append(lab)
    if not images:
        return np.zeros((0, 32, 32, 3), np.uint8), np.zeros(0, np.uint8)
    return np.ascontiguousarray(np.concatenate(images)), np.concatenate(labels)


def write_cifar10(path, images: np.ndarray, labels: np.ndarray) -> None:
    rec = np.empty((len(images), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = np.asarray(images, dtype=np.uint8).transpose(0, 3, 1, 2).reshape(len(images), -1)
    Path(path).write_bytes(rec.tobytes())


def load_cifar10(directory, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    names = CIFAR_TRAIN if split == "train" else CIFAR_TEST
    return read_cifar10([Path(directory) / n for n in names])


# --------------------------------------------------------------- tensor container

TENSOR_MAGIC = b"MMALTNSR"
DTYPE_CODES = {
    1: np.dtype("<u1"),
    2: np.dtype("<i4"),
    3: np.dtype("<f4"),
    4: np.dtype("<f8"),
    5: np.dtype("<u2"),
    6: np.dtype("<i8"),
}
CODE_FOR = {v: k for k, v in DTYPE_CODES.items()}


def write_tensor(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<")
    if dt not in CODE_FOR:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    header = TENSOR_MAGIC + struct.pack("<II", CODE_FOR[dt], arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != TENSOR_MAGIC:
        raise FormatError(f"{path}: magic mismatch")
    code, ndim = struct.unpack_from("<II", raw, 8)
    if code not in DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if len(raw) < 16 + 8 * ndim:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 16)
    dt = DTYPE_CODES[code]
    start = 16 + 8 * ndim
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(raw) - start != need:
        raise FormatError(f"{path}: payload has {len(raw) - start} bytes, dims {dims} need {need}")
    return np.frombuffer(raw, dtype=dt, offset=start).reshape(dims).astype(dt.newbyteorder("="))


# ------------------------------------------------------------------------ bundles

@dataclass
class Partition:
    modalities: list[np.ndarray]   # per modality, N x H x W x C uint8
    labels: np.ndarray             # N
    presence: np.ndarray           # N uint8 bit masks
    aux: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def present(self, m: int) -> np.ndarray:
        return (self.presence >> m) & 1 == 1

    def subset(self, idx) -> "Partition":
        idx = np.asarray(idx)
        return Partition(
            modalities=[x[idx] for x in self.modalities],
            labels=self.labels[idx],
            presence=self.presence[idx],
            aux={k: v[idx] for k, v in self.aux.items()},
        )


@dataclass
class DatasetBundle:
    manifest: dict
    partitions: dict[str, Partition]

    @property
    def n_classes(self) -> int:
        return int(self.manifest["n_classes"])

    @property
    def n_modalities(self) -> int:
        return int(self.manifest["n_modalities"])

    @property
    def kind(self) -> str:
        return self.manifest["dataset_kind"]

    def __getitem__(self, name: str) -> Partition:
        return self.partitions[name]


def validate_bundle(bundle: DatasetBundle) -> None:
    man = bundle.manifest
    kind = man.get("dataset_kind")
    if kind not in DATASET_KINDS:
        raise FormatError(f"unknown dataset_kind {kind!r}")
    k = int(man["n_classes"])
    if k < 2:
        raise FormatError("n_classes must be >= 2")
    M = int(man["n_modalities"])
    full = (1 << M) - 1
    for name, part in bundle.partitions.items():
        if len(part.modalities) != M:
            raise FormatError(f"{name}: {len(part.modalities)} modality tensors, manifest says {M}")
        n = len(part.labels)
        for m, x in enumerate(part.modalities):
            if len(x) != n:
                raise FormatError(f"{name}/m{m}: {len(x)} samples, labels have {n}")
        if n and (part.labels.min() < 0 or part.labels.max() >= k):
            raise FormatError(f"{name}: label {int(part.labels.max())} outside [0, {k})")
        if len(part.presence) != n:
            raise FormatError(f"{name}: presence length mismatch")
        if n and (np.any(part.presence.astype(np.int64) > full) or np.any(part.presence == 0)):
            raise FormatError(f"{name}: presence mask must have >= 1 of {M} modality bits set")
    sizes = man.get("partition_sizes")
    if sizes is not None:
        for name, part in bundle.partitions.items():
            if int(sizes.get(name, -1)) != len(part):
                raise FormatError(f"{name}: manifest size {sizes.get(name)} != {len(part)}")


def write_bundle(bundle: DatasetBundle, directory) -> Path:
    validate_bundle(bundle)
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    man = dict(bundle.manifest)
    man["partition_sizes"] = {k: len(v) for k, v in bundle.partitions.items()}
    man["files"] = {}
    for name, part in bundle.partitions.items():
        pdir = d / name
        pdir.mkdir(exist_ok=True)
        files = []
        for m, x in enumerate(part.modalities):
            write_tensor(pdir / f"m{m}.bin", x)
            files.append(f"m{m}.bin")
        label_dtype = np.uint8 if int(man["n_classes"]) <= 256 else np.int32
        write_tensor(pdir / "labels.bin", part.labels.astype(label_dtype))
        write_tensor(pdir / "presence.bin", part.presence.astype(np.uint8))
        files += ["labels.bin", "presence.bin"]
        for key in sorted(part.aux):
            write_tensor(pdir / f"{key}.bin", part.aux[key])
            files.append(f"{key}.bin")
        man["files"][name] = files
    text = json.dumps(man, indent=2, sort_keys=True) + "\n"
    (d / "manifest.json").write_text(text, encoding="utf-8")
    bundle.manifest = man
    return d


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: {e}") from e


def read_bundle(directory, partitions: list[str] | None = None) -> DatasetBundle:
    d = Path(directory)
    man = read_manifest(d)
    M = int(man["n_modalities"])
    parts = {}
    for name, files in man["files"].items():
        if partitions is not None and name not in partitions:
            continue
        pdir = d / name
        mods = [read_tensor(pdir / f"m{m}.bin") for m in range(M)]
        aux = {}
        for f in files:
            stem = f[:-4]
            if stem.startswith("m") and stem[1:].isdigit() or stem in ("labels", "presence"):
                continue
            aux[stem] = read_tensor(pdir / f)
        parts[name] = Partition(
            modalities=mods,
            labels=read_tensor(pdir / "labels.bin").astype(np.int64),
            presence=read_tensor(pdir / "presence.bin"),
            aux=aux,
        )
    bundle = DatasetBundle(manifest=man, partitions=parts)
    if partitions is None:
        validate_bundle(bundle)
    else:
        validate_bundle(DatasetBundle(manifest={**man, "partition_sizes": None}, partitions=parts))
    return bundle


def to_features(images: np.ndarray, side: int | None) -> np.ndarray:
    """uint8 N x H x W x C images -> float32 N x (side*side*C) scaled to [0, 1]."""
    from .quintfeatures import downscale

    x = images if side is None else downscale(images, side)
    x = np.asarray(x, dtype=np.float32) / 255.0
    return x.reshape(len(x), -1)
