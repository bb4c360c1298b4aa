"""Dataset containers, IDX (MNIST / Fashion-MNIST) ingestion, synthetic data and i.i.d. splits."""
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from flsim.errors import ConfigError, FormatError
from flsim.seeding import Purpose, stream

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Flattened examples `x` (n, features) with integer labels `y` (n,)."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.ndim != 1 or len(self.x) != len(self.y):
            raise FormatError(f"inconsistent dataset arrays: x{self.x.shape}, y{self.y.shape}")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dims(self) -> int:
        return self.x.shape[1]

    def subset(self, indices) -> "Dataset":
        return Dataset(self.x[indices], self.y[indices], self.num_classes)


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as handle:
            return handle.read()
    except (EOFError, gzip.BadGzipFile) as exc:
        raise FormatError(f"{path}: unreadable IDX file ({exc})") from exc


def load_mnist_idx(images_path: PathLike, labels_path: PathLike) -> Dataset:
    """
    Load an IDX image/label file pair (MNIST or Fashion-MNIST layout).

    Files may be raw or gzip-compressed. Nothing is returned unless both files
    parse completely.

    Args:
        images_path: IDX3 file, magic 0x00000803, big-endian count/rows/cols header
        labels_path: IDX1 file, magic 0x00000801, big-endian count header

    Returns:
        Dataset: pixels scaled to [0, 1] (float32, one row per image), labels 0..9
    """
    raw = _read_bytes(images_path)
    if len(raw) < 16:
        raise FormatError(f"{images_path}: header truncated ({len(raw)} bytes)")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise FormatError(f"{images_path}: expected {expected} bytes, found {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows * cols)

    raw_labels = _read_bytes(labels_path)
    if len(raw_labels) < 8:
        raise FormatError(f"{labels_path}: header truncated ({len(raw_labels)} bytes)")
    magic, label_count = struct.unpack(">II", raw_labels[:8])
    if magic != LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")
    if len(raw_labels) != 8 + label_count:
        raise FormatError(f"{labels_path}: expected {8 + label_count} bytes, found {len(raw_labels)}")
    if label_count != count:
        raise FormatError(f"{count} images but {label_count} labels")
    labels = np.frombuffer(raw_labels, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise FormatError(f"{labels_path}: label {labels.max()} outside 0..9")

    logger.info(f"Loaded {count} examples of {rows}x{cols} from {images_path}")
    return Dataset(pixels.astype(np.float32) / np.float32(255.0), labels, 10)


def write_mnist_idx(images: np.ndarray, labels: np.ndarray, images_path: PathLike, labels_path: PathLike) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX file pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(images_path, "wb") as handle:
        handle.write(struct.pack(">IIII", IMAGES_MAGIC, count, rows, cols))
        handle.write(images.tobytes())
    with open(labels_path, "wb") as handle:
        handle.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        handle.write(labels.tobytes())


def gen_synthetic(classes: int, dims: int, n: int, seed: int, margin: float = 4.0, noise: float = 1.0) -> Dataset:
    """
    Generate Gaussian class clusters.

    Class centres are placed at pairwise distance `margin` (orthonormal directions
    when dims >= classes), examples are centre + N(0, noise^2 I). Labels cycle
    through the classes before shuffling, so class counts differ by at most one.

    Args:
        classes (int): number of classes
        dims (int): feature dimension
        n (int): number of examples, at least `classes`
        seed (int): experiment seed
        margin (float): distance between class centres
        noise (float): per-coordinate standard deviation

    Returns:
        Dataset
    """
    if n < classes:
        raise ConfigError(f"synthetic dataset needs n >= classes, got n={n}, classes={classes}")
    rng = stream(seed, Purpose.DATA)
    if dims >= classes:
        basis, _ = np.linalg.qr(rng.standard_normal((dims, classes)))
        centres = basis.T * (margin / np.sqrt(2.0))
    else:
        directions = rng.standard_normal((classes, dims))
        centres = directions / np.linalg.norm(directions, axis=1, keepdims=True) * (margin / 2.0)
    labels = rng.permutation(np.arange(n) % classes)
    x = centres[labels] + noise * rng.standard_normal((n, dims))
    return Dataset(x, labels.astype(np.int64), classes)


def split_iid(dataset: Dataset, n_clients: int, seed: int) -> List[Dataset]:
    """Shuffle and partition into `n_clients` shards whose sizes differ by at most one."""
    if n_clients < 1 or len(dataset) < n_clients:
        raise ConfigError(f"cannot split {len(dataset)} examples across {n_clients} clients")
    order = stream(seed, Purpose.SPLIT).permutation(len(dataset))
    shards = [dataset.subset(part) for part in np.array_split(order, n_clients)]
    if any(len(shard) == 0 for shard in shards):
        raise ConfigError("empty client shard")
    return shards


def take(dataset: Dataset, count: int, seed: int, purpose: Purpose = Purpose.SUBSAMPLE) -> Dataset:
    """Deterministic random subset of `count` examples (the whole set if smaller)."""
    if count >= len(dataset):
        return dataset
    return dataset.subset(np.sort(stream(seed, purpose, count).choice(len(dataset), size=count, replace=False)))


def train_test_split(dataset: Dataset, n_test: int) -> Tuple[Dataset, Dataset]:
    """Split the last `n_test` rows off as a test set."""
    cut = len(dataset) - n_test
    return dataset.subset(slice(0, cut)), dataset.subset(slice(cut, None))
