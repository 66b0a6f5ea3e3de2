"""Dataset ingestion, labeled/unlabeled splitting, ZCA whitening and batch streams.

Images are kept as float32 numpy arrays shaped (count, height, width, channels)
with values in [0, 1]. Networks convert to channels-first tensors at their
boundary (see :func:`to_tensor`).
"""
from __future__ import annotations

import gzip
import hashlib
import json
import logging
import os
import struct
import tarfile
import urllib.request
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

log = logging.getLogger(__name__)

DATASET_NAMES = ("mnist", "svhn", "cifar10", "synthetic-moons", "synthetic-gaussians")


class DatasetError(Exception):
    """Raised when a dataset file is missing, malformed or inconsistent."""


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    image_shape: tuple[int, int, int]
    num_classes: int
    # (train, validation, test); validation may be 0
    split_sizes: tuple[int, int, int]

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise DatasetError(f"unknown dataset {self.name!r}")
        if self.num_classes < 2:
            raise DatasetError("num_classes must be >= 2")

    @property
    def is_synthetic(self) -> bool:
        return self.name.startswith("synthetic-")

    @property
    def flat_dim(self) -> int:
        h, w, c = self.image_shape
        return h * w * c


def dataset_spec(name: str, split_sizes=None, reserve_validation: bool = False,
                 num_classes: Optional[int] = None, rasterize: bool = False) -> DatasetSpec:
    """Canonical spec for ``name``; ``split_sizes`` overrides the published counts."""
    if name == "mnist":
        spec = DatasetSpec(name, (28, 28, 1), 10, (50_000, 10_000, 10_000))
    elif name == "svhn":
        sizes = (68_257, 5_000, 26_032) if reserve_validation else (73_257, 0, 26_032)
        spec = DatasetSpec(name, (32, 32, 3), 10, sizes)
    elif name == "cifar10":
        sizes = (45_000, 5_000, 10_000) if reserve_validation else (50_000, 0, 10_000)
        spec = DatasetSpec(name, (32, 32, 3), 10, sizes)
    elif name in ("synthetic-moons", "synthetic-gaussians"):
        k = 2 if name == "synthetic-moons" else (num_classes or 4)
        shape = (8, 8, 1) if rasterize else (1, 2, 1)
        spec = DatasetSpec(name, shape, k, (0, 0, 0))
    else:
        raise DatasetError(f"unknown dataset {name!r}")
    if split_sizes is not None:
        spec = DatasetSpec(spec.name, spec.image_shape, spec.num_classes, tuple(int(s) for s in split_sizes))
    return spec


@dataclass
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "LabeledBatch":
        return LabeledBatch(self.images[index], self.labels[index])


@dataclass
class LoadedDataset:
    spec: DatasetSpec
    train: LabeledBatch
    test: LabeledBatch
    validation: Optional[LabeledBatch] = None


@dataclass
class SSLSplit:
    labeled: LabeledBatch
    unlabeled: np.ndarray
    test: LabeledBatch
    labeled_indices: np.ndarray
    unlabeled_indices: np.ndarray
    validation: Optional[LabeledBatch] = None
    num_classes: int = 10


# ---------------------------------------------------------------------------
# Binary formats


def _open_maybe_gz(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (MNIST); gzip-compressed files are detected automatically."""
    path = Path(path)
    try:
        with _open_maybe_gz(path) as fh:
            data = fh.read()
    except OSError as err:
        raise DatasetError(f"cannot read {path}: {err}") from err
    if len(data) < 8:
        raise DatasetError(f"{path}: truncated IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code != 0x08:
        raise DatasetError(f"{path}: bad IDX magic 0x{int.from_bytes(data[:4], 'big'):08x}")
    dims = struct.unpack(f">{ndim}I", data[4:4 + 4 * ndim])
    offset = 4 + 4 * ndim
    expected = int(np.prod(dims))
    if len(data) - offset != expected:
        raise DatasetError(f"{path}: expected {expected} payload bytes, found {len(data) - offset}")
    return np.frombuffer(data, dtype=np.uint8, offset=offset).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Read one CIFAR-10 binary batch: records of 1 label byte + 3072 CHW pixel bytes."""
    path = Path(path)
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as err:
        raise DatasetError(f"cannot read {path}: {err}") from err
    if raw.size == 0 or raw.size % 3073:
        raise DatasetError(f"{path}: size {raw.size} is not a multiple of 3073-byte records")
    records = raw.reshape(-1, 3073)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetError(f"{path}: label byte out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return images, labels


def write_cifar_batch(path, images: np.ndarray, labels: np.ndarray) -> None:
    chw = np.ascontiguousarray(images, dtype=np.uint8).transpose(0, 3, 1, 2).reshape(len(images), -1)
    records = np.concatenate([np.asarray(labels, np.uint8)[:, None], chw], axis=1)
    records.tofile(path)


def read_svhn_mat(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a cropped-digits SVHN .mat file; label 10 is remapped to digit 0."""
    from scipy.io import loadmat

    path = Path(path)
    try:
        mat = loadmat(path)
    except (OSError, ValueError) as err:
        raise DatasetError(f"cannot read {path}: {err}") from err
    if "X" not in mat or "y" not in mat:
        raise DatasetError(f"{path}: missing X/y arrays")
    x = mat["X"]
    if x.ndim != 4 or x.shape[:3] != (32, 32, 3):
        raise DatasetError(f"{path}: expected 32x32x3xN array, got {x.shape}")
    images = np.ascontiguousarray(x.transpose(3, 0, 1, 2))
    labels = mat["y"].reshape(-1).astype(np.int64)
    labels[labels == 10] = 0
    if len(labels) != len(images):
        raise DatasetError(f"{path}: {len(images)} images but {len(labels)} labels")
    return images, labels


# ---------------------------------------------------------------------------
# Manifest, checksums and (opt-in) download


def load_manifest(path=None) -> dict:
    if path is None:
        text = resources.files("ganssl").joinpath("data_manifest.json").read_text()
    else:
        text = Path(path).read_text()
    return json.loads(text)


def _md5(path: Path) -> str:
    digest = hashlib.md5()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def verify_checksums(name: str, data_dir, manifest=None, strict: bool = False) -> list[str]:
    """Compare files present under data_dir against manifest md5s.

    Returns mismatching file names. Mismatches warn and continue unless ``strict``.
    """
    manifest = manifest or load_manifest()
    bad = []
    for entry in manifest.get(name, {}).get("files", []):
        path = Path(data_dir) / entry["filename"]
        if not path.exists() or not entry.get("md5"):
            continue
        if _md5(path) != entry["md5"]:
            bad.append(entry["filename"])
    if bad:
        msg = f"{name}: checksum mismatch for {', '.join(bad)}"
        if strict:
            raise DatasetError(msg)
        warnings.warn(msg)
    return bad


def download_dataset(name: str, data_dir, manifest=None) -> list[Path]:
    """Fetch the canonical files for ``name`` listed in the manifest."""
    manifest = manifest or load_manifest()
    if name not in manifest:
        raise DatasetError(f"no download entry for {name!r}")
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    fetched = []
    for entry in manifest[name]["files"]:
        target = data_dir / entry["filename"]
        if not target.exists():
            log.info("downloading %s", entry["url"])
            with urllib.request.urlopen(entry["url"]) as resp, open(target, "wb") as out:
                out.write(resp.read())
        fetched.append(target)
        if target.name.endswith(".tar.gz"):
            with tarfile.open(target) as tar:
                tar.extractall(data_dir)
    verify_checksums(name, data_dir, manifest)
    return fetched


# ---------------------------------------------------------------------------
# Loaders


def _find(data_dir: Path, candidates) -> Path:
    for cand in candidates:
        path = data_dir / cand
        if path.exists():
            return path
    raise DatasetError(f"missing dataset file {candidates[0]} under {data_dir}")


def _to_unit(images: np.ndarray) -> np.ndarray:
    return images.astype(np.float32) / np.float32(255.0)


def _load_mnist(data_dir: Path):
    def pair(prefix):
        img = _find(data_dir, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images-idx3-ubyte.gz",
                               f"{prefix}-images.idx3-ubyte"])
        lab = _find(data_dir, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels-idx1-ubyte.gz",
                               f"{prefix}-labels.idx1-ubyte"])
        images, labels = read_idx(img), read_idx(lab)
        if images.ndim != 3 or images.shape[1:] != (28, 28):
            raise DatasetError(f"{img}: expected N x 28 x 28 images, got {images.shape}")
        if len(images) != len(labels):
            raise DatasetError(f"{img}: {len(images)} images but {len(labels)} labels in {lab}")
        return images[..., None], labels.astype(np.int64)

    return pair("train"), pair("t10k")


def _load_cifar10(data_dir: Path):
    if (data_dir / "cifar-10-batches-bin").is_dir():
        data_dir = data_dir / "cifar-10-batches-bin"
    parts = [read_cifar_batch(_find(data_dir, [f"data_batch_{i}.bin"])) for i in range(1, 6)]
    train = (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))
    return train, read_cifar_batch(_find(data_dir, ["test_batch.bin"]))


def _load_svhn(data_dir: Path):
    return (read_svhn_mat(_find(data_dir, ["train_32x32.mat"])),
            read_svhn_mat(_find(data_dir, ["test_32x32.mat"])))


def load_dataset(spec: DatasetSpec, data_dir, strict_checksums: bool = False) -> LoadedDataset:
    """Load a benchmark dataset from its published binary files under ``data_dir``.

    The last ``split_sizes[1]`` training records form the validation set, so the
    order of every split is the on-disk order.
    """
    if spec.is_synthetic:
        raise DatasetError("synthetic datasets are produced by make_synthetic")
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DatasetError(f"data directory {data_dir} does not exist")
    (tr_x, tr_y), (te_x, te_y) = {
        "mnist": _load_mnist, "cifar10": _load_cifar10, "svhn": _load_svhn,
    }[spec.name](data_dir)
    verify_checksums(spec.name, data_dir, strict=strict_checksums)

    n_train, n_val, n_test = spec.split_sizes
    if len(tr_x) != n_train + n_val:
        raise DatasetError(f"{spec.name}: found {len(tr_x)} training records, expected {n_train + n_val}")
    if len(te_x) != n_test:
        raise DatasetError(f"{spec.name}: found {len(te_x)} test records, expected {n_test}")
    for labels in (tr_y, te_y):
        if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
            raise DatasetError(f"{spec.name}: label outside 0..{spec.num_classes - 1}")

    train = LabeledBatch(_to_unit(tr_x[:n_train]), tr_y[:n_train])
    validation = LabeledBatch(_to_unit(tr_x[n_train:]), tr_y[n_train:]) if n_val else None
    return LoadedDataset(spec, train, LabeledBatch(_to_unit(te_x), te_y), validation)


# ---------------------------------------------------------------------------
# Synthetic data


def make_synthetic(name: str, n_per_class: int, noise: float, seed: int,
                   num_classes: int = 4, rasterize: bool = False) -> LabeledBatch:
    """Toy 2-D datasets mapped into the unit square.

    ``moons`` is the two interleaved half circles; ``gaussians`` places one
    isotropic Gaussian per class on a circle of radius 0.3 around (0.5, 0.5).
    ``noise`` is the per-coordinate standard deviation in unit-square units.
    Points are stored as 1x2 images, or as 8x8 rasterized bumps when ``rasterize``.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    name = name.removeprefix("synthetic-")
    rng = np.random.default_rng(seed)
    if name == "moons":
        t = rng.uniform(0.0, np.pi, size=(2, n_per_class))
        upper = np.stack([np.cos(t[0]), np.sin(t[0])], 1)
        lower = np.stack([1.0 - np.cos(t[1]), 0.5 - np.sin(t[1])], 1)
        # the two moons span x in [-1, 2], y in [-0.5, 1]
        points = (np.concatenate([upper, lower]) + [1.0, 1.0]) / 3.5 + [0.07, 0.2]
        k = 2
    elif name in ("gaussians", "gaussians-ring"):
        k = num_classes
        angles = 2 * np.pi * np.arange(k) / k
        centers = 0.5 + 0.3 * np.stack([np.cos(angles), np.sin(angles)], 1)
        points = np.repeat(centers, n_per_class, axis=0)
    else:
        raise ValueError(f"unknown synthetic dataset {name!r}")
    labels = np.repeat(np.arange(k), n_per_class)
    points = points + noise * rng.standard_normal(points.shape)
    points = np.clip(points, 0.0, 1.0)
    if rasterize:
        grid = (np.arange(8) + 0.5) / 8
        gx, gy = np.meshgrid(grid, grid, indexing="xy")
        d2 = (points[:, 0, None, None] - gx) ** 2 + (points[:, 1, None, None] - gy) ** 2
        images = np.exp(-d2 / (2 * 0.1 ** 2))[..., None]
    else:
        images = points.reshape(-1, 1, 2, 1)
    return LabeledBatch(images.astype(np.float32), labels)


# ---------------------------------------------------------------------------
# Labeled subset selection


def _class_quota(n: int, k: int) -> np.ndarray:
    if n < k:
        raise ValueError(f"cannot stratify {n} labels over {k} classes")
    quota = np.full(k, n // k)
    quota[: n % k] += 1
    return quota


def _make_split(train: LabeledBatch, chosen, num_classes, test=None, validation=None) -> SSLSplit:
    chosen = np.asarray(chosen, dtype=np.int64)
    mask = np.ones(len(train), dtype=bool)
    mask[chosen] = False
    rest = np.flatnonzero(mask)
    empty = LabeledBatch(train.images[:0], train.labels[:0])
    return SSLSplit(
        labeled=train.subset(chosen),
        unlabeled=train.images[rest],
        test=test if test is not None else empty,
        labeled_indices=chosen,
        unlabeled_indices=rest,
        validation=validation,
        num_classes=num_classes,
    )


def _num_classes(train: LabeledBatch, num_classes) -> int:
    return int(num_classes if num_classes is not None else train.labels.max() + 1)


def stratified_select(train: LabeledBatch, n: int, seed: int, num_classes: Optional[int] = None,
                      test=None, validation=None) -> SSLSplit:
    """Random labeled subset with equal per-class counts.

    When ``n`` is not divisible by the class count the extra examples go to the
    lowest class indices.
    """
    k = _num_classes(train, num_classes)
    if n > len(train):
        raise ValueError(f"requested {n} labels from {len(train)} examples")
    quota = _class_quota(n, k)
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in range(k):
        members = np.flatnonzero(train.labels == cls)
        if len(members) < quota[cls]:
            raise ValueError(f"class {cls} has {len(members)} examples, needs {quota[cls]}")
        chosen.append(rng.permutation(members)[: quota[cls]])
    return _make_split(train, np.concatenate(chosen), k, test, validation)


def representative_select(train: LabeledBatch, n: int, seed: int, num_classes: Optional[int] = None,
                          test=None, validation=None) -> SSLSplit:
    """Per class, take the examples closest to the class centroid.

    Images are flattened, centred and scaled to unit norm before measuring
    distances. The result is deterministic; ``seed`` is accepted for interface
    parity with :func:`stratified_select` and does not affect the choice.
    """
    del seed
    k = _num_classes(train, num_classes)
    if n > len(train):
        raise ValueError(f"requested {n} labels from {len(train)} examples")
    quota = _class_quota(n, k)
    flat = train.images.reshape(len(train), -1).astype(np.float64)
    flat = flat - flat.mean(axis=1, keepdims=True)
    flat /= np.linalg.norm(flat, axis=1, keepdims=True) + 1e-12
    chosen = []
    for cls in range(k):
        members = np.flatnonzero(train.labels == cls)
        if len(members) < quota[cls]:
            raise ValueError(f"class {cls} has {len(members)} examples, needs {quota[cls]}")
        centroid = flat[members].mean(axis=0)
        dist = np.linalg.norm(flat[members] - centroid, axis=1)
        chosen.append(members[np.argsort(dist, kind="stable")[: quota[cls]]])
    return _make_split(train, np.concatenate(chosen), k, test, validation)


# ---------------------------------------------------------------------------
# ZCA whitening


@dataclass
class ZCAWhitener:
    mean: np.ndarray
    matrix: np.ndarray
    epsilon: float
    image_shape: tuple = field(default=())

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def zca_fit(images: np.ndarray, epsilon: float = 1e-2) -> ZCAWhitener:
    """Fit W = E diag(1/sqrt(lambda + eps)) E^T on the (1/N) data covariance."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if len(images) < 2:
        raise ValueError("ZCA needs at least two images")
    flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    mean = flat.mean(axis=0)
    centred = flat - mean
    cov = centred.T @ centred / len(flat)
    eigval, eigvec = np.linalg.eigh(cov)
    eigval = np.clip(eigval, 0.0, None)
    matrix = (eigvec * (1.0 / np.sqrt(eigval + epsilon))) @ eigvec.T
    matrix = 0.5 * (matrix + matrix.T)
    return ZCAWhitener(mean, matrix, float(epsilon), tuple(np.shape(images)[1:]))


def zca_apply(whitener: ZCAWhitener, images: np.ndarray) -> np.ndarray:
    """Whitened copy of ``images`` (same shape); the input array is not modified."""
    flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    if flat.shape[1] != whitener.dim:
        raise ValueError(f"image dimension {flat.shape[1]} does not match whitener dimension {whitener.dim}")
    out = (flat - whitener.mean) @ whitener.matrix.T
    return out.reshape(np.shape(images)).astype(np.float32)


# ---------------------------------------------------------------------------
# Batch streams


class BatchStream:
    """One epoch of (labeled batch, unlabeled batch) pairs.

    The unlabeled pool is shuffled without replacement and the short final batch
    is dropped; labeled examples are drawn with replacement at every step. The
    shuffle is keyed by (seed, epoch).
    """

    def __init__(self, split: SSLSplit, batch_size: int, seed: int, epoch: int):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.split = split
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = epoch

    def __len__(self):
        return len(self.split.unlabeled) // self.batch_size

    def __iter__(self) -> Iterator[tuple[LabeledBatch, np.ndarray]]:
        rng = np.random.default_rng([self.seed, self.epoch])
        order = rng.permutation(len(self.split.unlabeled))
        n_lab = len(self.split.labeled)
        bs = self.batch_size
        for step in range(len(self)):
            lab_idx = rng.integers(0, n_lab, size=bs)
            yield self.split.labeled.subset(lab_idx), self.split.unlabeled[order[step * bs:(step + 1) * bs]]


def batch_stream(split: SSLSplit, batch_size: int, seed: int, epoch: int) -> BatchStream:
    return BatchStream(split, batch_size, seed, epoch)


def to_tensor(images: np.ndarray, dtype=None):
    """(N, H, W, C) numpy array -> (N, C, H, W) torch tensor."""
    import torch

    t = torch.from_numpy(np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2)))
    return t.to(dtype or torch.get_default_dtype())


def default_data_dir(explicit=None) -> Optional[str]:
    return explicit or os.environ.get("GANSSL_DATA_DIR")
