"""Benchmark dataset ingestion, ZCA whitening, and class-balanced sampling.

Datasets are read from their published binary layouts:

* MNIST / FashionMNIST: IDX files (big-endian magic 0x00000803 for images,
  0x00000801 for labels), optionally gzip-compressed.
* CIFAR10: ``data_batch_*.bin`` / ``test_batch.bin`` records of
  1 label byte + 3072 pixel bytes.
* CIFAR100: ``train.bin`` / ``test.bin`` records of 2 label bytes
  (coarse, fine) + 3072 pixel bytes; the fine label is used.
* SVHN: ``train_32x32.mat`` / ``test_32x32.mat`` MATLAB containers.

Pixel values are scaled to [0, 1] on load.  Whitening is an affine map fit on
flattened images via an eigendecomposition of the covariance with an epsilon
added to the eigenvalues; it is fit on the train split only and applied to
both splits.
"""

import glob
import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataLoadError, UsageError
from .rng import generator

KNOWN_DATASETS = ("mnist", "fashion_mnist", "cifar10", "cifar100", "svhn", "blobs")

# Published (height, width, channels) and class counts, used for budget
# arithmetic that must not require the data files to be present.
DATASET_SHAPES: dict[str, tuple[tuple[int, int, int], int]] = {
    "mnist": ((28, 28, 1), 10),
    "fashion_mnist": ((28, 28, 1), 10),
    "cifar10": ((32, 32, 3), 10),
    "cifar100": ((32, 32, 3), 100),
    "svhn": ((32, 32, 3), 10),
    "blobs": ((8, 8, 1), 10),
}

_IDX_IMAGE_MAGIC = 0x00000803
_IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class ImageDataset:
    """A labeled image collection with shape [count, height, width, channels]."""

    images: torch.Tensor
    labels: torch.Tensor
    class_count: int
    split_tag: str

    def __post_init__(self):
        if self.images.ndim != 4:
            raise UsageError(f"images must be [n, h, w, c], got shape {tuple(self.images.shape)}")
        if self.labels.ndim != 1 or len(self.labels) != len(self.images):
            raise UsageError("labels must be a vector aligned with images")
        if not torch.isfinite(self.images).all():
            raise UsageError("images contain NaN or Inf")
        if len(self.labels) > 0:
            lo, hi = int(self.labels.min()), int(self.labels.max())
            if lo < 0 or hi >= self.class_count:
                raise UsageError(
                    f"labels outside [0, {self.class_count}): found range [{lo}, {hi}]"
                )
        if self.split_tag == "train":
            present = set(self.labels.tolist())
            missing = [c for c in range(self.class_count) if c not in present]
            if missing:
                raise UsageError(f"train split is missing classes {missing}")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def __len__(self) -> int:
        return len(self.images)

    def indices_for_class(self, label: int) -> list[int]:
        return torch.nonzero(self.labels == label, as_tuple=False).flatten().tolist()


@dataclass(frozen=True)
class ZCAStats:
    """Whitening statistics over flattened images of dimension ``dim``."""

    mean: torch.Tensor
    whitening_matrix: torch.Tensor
    epsilon: float

    def __post_init__(self):
        w = self.whitening_matrix
        if w.ndim != 2 or w.shape[0] != w.shape[1] or self.mean.numel() != w.shape[0]:
            raise UsageError("whitening_matrix must be square and match the mean length")
        asym = (w - w.T).abs().max().item()
        scale = max(w.abs().max().item(), 1e-12)
        if asym / scale > 1e-5:
            raise UsageError("whitening_matrix is not symmetric")

    @property
    def dim(self) -> int:
        return self.mean.numel()


def _open_maybe_gzip(path: str):
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _find_file(root: str, names: list[str]) -> str:
    for name in names:
        for candidate in (name, name + ".gz"):
            path = os.path.join(root, candidate)
            if os.path.exists(path):
                return path
    raise DataLoadError(f"no file among {names} under {root!r}")


def _read_idx(path: str, expected_magic: int) -> np.ndarray:
    try:
        with _open_maybe_gzip(path) as fh:
            header = fh.read(4)
            if len(header) < 4:
                raise DataLoadError(f"{path}: truncated IDX header")
            (magic,) = struct.unpack(">I", header)
            if magic != expected_magic:
                raise DataLoadError(f"{path}: bad IDX magic 0x{magic:08x}")
            ndim = magic & 0xFF
            dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
            payload = fh.read()
    except OSError as exc:
        raise DataLoadError(f"{path}: {exc}") from exc
    count = int(np.prod(dims))
    if len(payload) < count:
        raise DataLoadError(f"{path}: expected {count} bytes, found {len(payload)}")
    return np.frombuffer(payload[:count], dtype=np.uint8).reshape(dims).copy()


def _load_idx_pair(root: str, split: str, prefix_map: dict[str, str]) -> tuple[np.ndarray, np.ndarray]:
    prefix = prefix_map[split]
    images = _read_idx(_find_file(root, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images.idx3-ubyte"]),
                       _IDX_IMAGE_MAGIC)
    labels = _read_idx(_find_file(root, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels.idx1-ubyte"]),
                       _IDX_LABEL_MAGIC)
    if len(images) != len(labels):
        raise DataLoadError(f"{root}: image/label counts differ ({len(images)} vs {len(labels)})")
    return images[..., None], labels


def _load_cifar_records(paths: list[str], label_bytes: int, label_offset: int) -> tuple[np.ndarray, np.ndarray]:
    record = label_bytes + 3072
    images, labels = [], []
    for path in paths:
        try:
            raw = np.fromfile(path, dtype=np.uint8)
        except OSError as exc:
            raise DataLoadError(f"{path}: {exc}") from exc
        if raw.size == 0 or raw.size % record != 0:
            raise DataLoadError(f"{path}: size {raw.size} is not a multiple of {record}-byte records")
        raw = raw.reshape(-1, record)
        labels.append(raw[:, label_offset].astype(np.int64))
        pix = raw[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        images.append(pix)
    return np.concatenate(images), np.concatenate(labels)


def _load_cifar10(root: str, split: str) -> tuple[np.ndarray, np.ndarray]:
    for base in (os.path.join(root, "cifar-10-batches-bin"), root):
        if split == "train":
            paths = sorted(glob.glob(os.path.join(base, "data_batch_*.bin")))
        else:
            paths = [p for p in [os.path.join(base, "test_batch.bin")] if os.path.exists(p)]
        if paths:
            return _load_cifar_records(paths, label_bytes=1, label_offset=0)
    raise DataLoadError(f"no CIFAR10 batch files under {root!r}")


def _load_cifar100(root: str, split: str) -> tuple[np.ndarray, np.ndarray]:
    name = "train.bin" if split == "train" else "test.bin"
    for base in (os.path.join(root, "cifar-100-binary"), root):
        path = os.path.join(base, name)
        if os.path.exists(path):
            return _load_cifar_records([path], label_bytes=2, label_offset=1)
    raise DataLoadError(f"no CIFAR100 {name} under {root!r}")


def _load_svhn(root: str, split: str) -> tuple[np.ndarray, np.ndarray]:
    from scipy.io import loadmat

    path = os.path.join(root, f"{split}_32x32.mat")
    if not os.path.exists(path):
        raise DataLoadError(f"missing SVHN file {path!r}")
    try:
        mat = loadmat(path)
    except Exception as exc:
        raise DataLoadError(f"{path}: {exc}") from exc
    images = np.transpose(mat["X"], (3, 0, 1, 2))
    labels = mat["y"].astype(np.int64).flatten()
    labels[labels == 10] = 0
    return images, labels


def load_dataset(name: str, root: str, split: str) -> ImageDataset:
    """Load a named dataset split with pixels scaled to [0, 1]."""
    if split not in ("train", "test"):
        raise UsageError(f"split must be 'train' or 'test', got {split!r}")
    name = name.lower()
    if name == "mnist" or name == "fashion_mnist":
        prefix_map = {"train": "train", "test": "t10k"}
        images, labels = _load_idx_pair(root, split, prefix_map)
        class_count = 10
    elif name == "cifar10":
        images, labels = _load_cifar10(root, split)
        class_count = 10
    elif name == "cifar100":
        images, labels = _load_cifar100(root, split)
        class_count = 100
    elif name == "svhn":
        images, labels = _load_svhn(root, split)
        class_count = 10
    elif name == "blobs":
        return make_blob_dataset(split=split)
    else:
        raise UsageError(f"unknown dataset {name!r}; expected one of {KNOWN_DATASETS}")
    tensor = torch.from_numpy(np.ascontiguousarray(images)).to(torch.float32) / 255.0
    return ImageDataset(tensor, torch.from_numpy(np.ascontiguousarray(labels)).long(),
                        class_count, split)


def make_blob_dataset(
    split: str = "train",
    class_count: int = 10,
    side: int = 8,
    channels: int = 1,
    per_class: int = 100,
    noise: float = 0.9,
    seed: int = 0,
) -> ImageDataset:
    """Synthetic Gaussian-blob classification data for desk-scale runs.

    Each class has a fixed random mean pattern; samples add i.i.d. noise.
    The class patterns depend only on ``seed`` so train and test splits are
    drawn from the same distribution.
    """
    gen = generator("blobs", seed, "centers")
    centers = torch.randn(class_count, side, side, channels, generator=gen)
    gen_split = generator("blobs", seed, split)
    images, labels = [], []
    for c in range(class_count):
        noise_block = torch.randn(per_class, side, side, channels, generator=gen_split)
        images.append(centers[c] + noise * noise_block)
        labels.extend([c] * per_class)
    flat = torch.cat(images)
    flat = (flat - flat.min()) / (flat.max() - flat.min())  # into [0, 1] like real pixels
    return ImageDataset(flat, torch.tensor(labels, dtype=torch.long), class_count, split)


def fit_zca(data: ImageDataset, epsilon: float = 0.1) -> ZCAStats:
    """Fit whitening statistics on the flattened images of ``data``.

    Covariance eigenvalues are regularized by ``epsilon``, so rank-deficient
    inputs (even all-identical images) still produce finite statistics.
    """
    if epsilon <= 0:
        raise UsageError(f"epsilon must be positive, got {epsilon}")
    if len(data) < 2:
        raise UsageError("need at least 2 samples to fit whitening statistics")
    out_dtype = data.images.dtype
    flat = data.images.reshape(len(data), -1).to(torch.float64)
    mean = flat.mean(dim=0)
    centered = flat - mean
    cov = centered.T @ centered / (len(data) - 1)
    eigvals, eigvecs = torch.linalg.eigh(cov)
    eigvals = eigvals.clamp(min=0.0) + epsilon
    whitening = eigvecs @ torch.diag(eigvals.rsqrt()) @ eigvecs.T
    whitening = 0.5 * (whitening + whitening.T)
    return ZCAStats(mean.to(out_dtype), whitening.to(out_dtype), float(epsilon))


def apply_zca(stats: ZCAStats, images: torch.Tensor) -> torch.Tensor:
    """Whiten a batch (or a single image), preserving the input shape."""
    single = images.ndim == 3
    batch = images[None] if single else images
    if batch[0].numel() != stats.dim:
        raise UsageError(
            f"image dimension {batch[0].numel()} does not match statistics dimension {stats.dim}"
        )
    flat = batch.reshape(len(batch), -1)
    out = (flat - stats.mean.to(flat.dtype)) @ stats.whitening_matrix.to(flat.dtype)
    out = out.reshape(batch.shape)
    return out[0] if single else out


def apply_zca_inverse(stats: ZCAStats, images: torch.Tensor) -> torch.Tensor:
    """Undo :func:`apply_zca` (used when exporting images for viewing)."""
    single = images.ndim == 3
    batch = images[None] if single else images
    if batch[0].numel() != stats.dim:
        raise UsageError(
            f"image dimension {batch[0].numel()} does not match statistics dimension {stats.dim}"
        )
    inverse = torch.linalg.inv(stats.whitening_matrix.to(torch.float64))
    flat = batch.reshape(len(batch), -1).to(torch.float64)
    out = flat @ inverse + stats.mean.to(torch.float64)
    return (out.reshape(batch.shape)[0] if single else out.reshape(batch.shape)).to(images.dtype)


def whiten_dataset(data: ImageDataset, stats: ZCAStats) -> ImageDataset:
    return ImageDataset(apply_zca(stats, data.images), data.labels, data.class_count, data.split_tag)


def sample_class_balanced(data: ImageDataset, per_class: int, seed: int) -> list[int]:
    """Pick ``per_class`` indices from every class, class-major, deterministically."""
    if per_class < 1:
        raise UsageError(f"per_class must be >= 1, got {per_class}")
    picked: list[int] = []
    for c in range(data.class_count):
        pool = data.indices_for_class(c)
        if len(pool) < per_class:
            raise UsageError(
                f"class {c} has only {len(pool)} samples, needs {per_class}"
            )
        gen = generator("class_balance", seed, c)
        order = torch.randperm(len(pool), generator=gen)[:per_class]
        picked.extend(pool[i] for i in order.tolist())
    return picked


def zca_identity(dim: int, dtype=torch.float32) -> ZCAStats:
    """Statistics whose transform is the identity (used for unwhitened runs)."""
    return ZCAStats(torch.zeros(dim, dtype=dtype), torch.eye(dim, dtype=dtype), epsilon=1.0)
