"""Datasets: IDX files, seeded synthetic blobs, normalization, augmentation, batching."""

import gzip
import logging
import zlib
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np

from .errors import DataFormatError
from .types import Augmentation, Dataset, SynthSpec

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# IDX type byte -> big-endian numpy dtype
IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

_SPLIT_STREAMS = {"train": 1, "test": 2}


# ============================================================
# IDX
# ============================================================

def read_idx(path: PathLike) -> np.ndarray:
    """Parse an IDX file (gzip-compressed files are detected by their magic bytes)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except EOFError:
            raise DataFormatError(str(path), len(raw), "truncated gzip stream") from None
        except (OSError, zlib.error) as e:
            raise DataFormatError(str(path), 0, f"corrupt gzip stream ({e})") from None
    if len(raw) < 4:
        raise DataFormatError(str(path), len(raw), "file shorter than the 4-byte magic")
    if raw[0] != 0 or raw[1] != 0:
        raise DataFormatError(str(path), 0, f"bad magic {raw[:4].hex()}")
    code, ndim = raw[2], raw[3]
    if code not in IDX_DTYPES:
        raise DataFormatError(str(path), 2, f"unknown element type 0x{code:02x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataFormatError(str(path), len(raw), f"header needs {ndim} dimensions")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=">u4", count=ndim, offset=4))
    dtype = IDX_DTYPES[code]
    expected = header_end + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) < expected:
        raise DataFormatError(str(path), len(raw), f"truncated: {dims} needs {expected} bytes")
    count = int(np.prod(dims, dtype=np.int64))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=header_end).reshape(dims)
    logger.debug(f"Read {path.name}: dtype {dtype}, shape {dims}")
    return data.astype(dtype.newbyteorder("="))


def load_idx(images_path: PathLike, labels_path: PathLike, num_classes: Optional[int] = None,
             split: str = "train") -> Dataset:
    """Images scaled to [0, 1] when stored as bytes; N x H x W files gain a channel axis."""
    images = read_idx(images_path)
    raw_labels = read_idx(labels_path)
    labels = raw_labels.astype(np.int64).reshape(-1)
    if images.dtype == np.uint8:
        images = images.astype(np.float64) / 255.0
    else:
        images = images.astype(np.float64)
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise DataFormatError(str(images_path), 3, f"expected 3 or 4 dimensions, got {images.ndim}")
    if len(images) != len(labels):
        raise DataFormatError(str(labels_path), 4, f"{len(labels)} labels for {len(images)} images")
    classes = num_classes if num_classes is not None else int(labels.max()) + 1 if len(labels) else 1
    bad = np.flatnonzero((labels < 0) | (labels >= classes))
    if len(bad):
        # offset into the (decompressed) label file
        offset = 4 + 4 * raw_labels.ndim + int(bad[0]) * raw_labels.dtype.itemsize
        raise DataFormatError(str(labels_path), offset,
                              f"label {labels[bad[0]]} outside [0, {classes}) at index {bad[0]}")
    return Dataset(images=images, labels=labels, num_classes=classes, split=split)


def find_idx_files(idx_dir: PathLike, split: str) -> Tuple[Path, Path]:
    """Standard MNIST-style names: train-images-idx3-ubyte[.gz], t10k-labels-idx1-ubyte[.gz]."""
    prefix = "train" if split == "train" else "t10k"
    root = Path(idx_dir)
    found = []
    for kind, rank in (("images", 3), ("labels", 1)):
        base = root / f"{prefix}-{kind}-idx{rank}-ubyte"
        candidates = [base, base.with_name(base.name + ".gz")]
        path = next((p for p in candidates if p.exists()), None)
        if path is None:
            raise DataFormatError(str(base), 0, "file not found")
        found.append(path)
    return found[0], found[1]


# ============================================================
# Normalization
# ============================================================

def channel_stats(dataset: Dataset) -> Tuple[List[float], List[float]]:
    mean = dataset.images.mean(axis=(0, 2, 3))
    std = dataset.images.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    return mean.tolist(), std.tolist()


def normalize(dataset: Dataset, mean: Optional[List[float]] = None,
              std: Optional[List[float]] = None) -> Dataset:
    """Per-channel standardization; stats default to the dataset's own (use the train split's for test)."""
    if mean is None or std is None:
        mean, std = channel_stats(dataset)
    m = np.asarray(mean)[None, :, None, None]
    s = np.asarray(std)[None, :, None, None]
    return Dataset(images=(dataset.images - m) / s, labels=dataset.labels, num_classes=dataset.num_classes,
                   split=dataset.split, mean=list(mean), std=list(std))


# ============================================================
# Synthetic blobs
# ============================================================

def _prototypes(spec: SynthSpec, seed: int) -> np.ndarray:
    """One zero-mean, unit-RMS image per class, each a sum of Gaussian blobs."""
    rng = np.random.default_rng(seed)
    grid = np.arange(spec.hw, dtype=np.float64)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    protos = np.zeros((spec.num_classes, spec.channels, spec.hw, spec.hw))
    for k in range(spec.num_classes):
        for _ in range(spec.blobs_per_class):
            cy, cx = rng.uniform(0, spec.hw, size=2)
            width = rng.uniform(0.1, 0.3) * spec.hw
            amplitude = rng.normal(0.0, 1.0, size=spec.channels)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
            protos[k] += amplitude[:, None, None] * blob[None]
        protos[k] -= protos[k].mean()
        protos[k] /= np.sqrt((protos[k] ** 2).mean()) + 1e-12
    return protos


def synth_dataset(spec: SynthSpec, seed: int, split: str = "train") -> Dataset:
    """
    Class prototypes scaled by `separation` plus unit Gaussian pixel noise.

    Prototypes depend only on the seed, so train and test share them; the
    per-sample noise comes from a split-specific stream.
    """
    if split not in _SPLIT_STREAMS:
        raise ValueError(f"split must be one of {sorted(_SPLIT_STREAMS)}, got '{split}'")
    protos = _prototypes(spec, seed)
    size = spec.train_size if split == "train" else spec.test_size
    rng = np.random.default_rng([seed, _SPLIT_STREAMS[split]])
    labels = rng.permutation(np.arange(size) % spec.num_classes).astype(np.int64)
    noise = rng.normal(0.0, 1.0, size=(size, spec.channels, spec.hw, spec.hw))
    images = spec.separation * protos[labels] + noise
    return Dataset(images=images, labels=labels, num_classes=spec.num_classes, split=split)


# ============================================================
# Augmentation and batching
# ============================================================

def flip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1].copy()


def horizontal_flip(images: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    out = images.copy()
    chosen = rng.random(len(images)) < p
    out[chosen] = out[chosen][..., ::-1]
    return out


def pad_crop(images: np.ndarray, rng: np.random.Generator, pad: int) -> np.ndarray:
    """Zero-pad by `pad` then crop a random window of the original size per sample."""
    if pad == 0:
        return images.copy()
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


def augment(images: np.ndarray, rng: np.random.Generator, augmentation: Augmentation) -> np.ndarray:
    if augmentation.pad_crop:
        images = pad_crop(images, rng, augmentation.pad)
    if augmentation.horizontal_flip:
        images = horizontal_flip(images, rng)
    return images


def iterate_batches(dataset: Dataset, batch_size: int,
                    rng: Optional[np.random.Generator] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Sequential batches, shuffled when a generator is given; the last batch may be short."""
    order = rng.permutation(len(dataset)) if rng is not None else np.arange(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def random_batches(dataset: Dataset, batch_size: int, seed: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Endless seeded stream of random batches (the scoring batch source)."""
    rng = np.random.default_rng(seed)
    size = min(batch_size, len(dataset))
    while True:
        idx = rng.choice(len(dataset), size=size, replace=False)
        yield dataset.images[idx], dataset.labels[idx]
