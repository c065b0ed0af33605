"""Dataset container and the synthetic, CSV and IDX sources it is built from."""

from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path

import numpy as np
from sklearn.datasets import make_blobs, make_circles, make_moons
from sklearn.preprocessing import minmax_scale

from lab.exceptions import DatasetFormatError
from lib.numeric import make_rng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
_BIG_U32 = np.dtype(">u4")


class SyntheticKind(StrEnum):
    TWO_MOONS = "two_moons"
    BLOBS = "blobs"
    CIRCLES = "circles"


@dataclass(frozen=True)
class Dataset:
    """Features in ``[0, 1]`` with integer labels below ``num_classes``.

    Ingestion always yields at least one example; subsets and splits may be
    empty, and consumers reject those.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.intp)
        if features.ndim != 2 or labels.ndim != 1 or features.shape[0] != labels.shape[0]:
            raise DatasetFormatError(
                f"features {features.shape} and labels {labels.shape} do not line up"
            )
        if not np.all(np.isfinite(features)):
            raise DatasetFormatError("features contain NaN or infinite values")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetFormatError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "Dataset":
        return Dataset(self.features[index], self.labels[index], self.num_classes, self.name)

    def split(self, test_fraction: float, seed) -> tuple["Dataset", "Dataset"]:
        """Shuffle with ``seed`` and hold out ``round(test_fraction * n)`` examples."""
        order = make_rng(seed).permutation(self.n)
        held_out = int(round(test_fraction * self.n))
        return self.subset(np.sort(order[held_out:])), self.subset(np.sort(order[:held_out]))


def _interleave(labels: np.ndarray) -> np.ndarray:
    first, second = np.flatnonzero(labels == 0), np.flatnonzero(labels == 1)
    common = min(first.size, second.size)
    paired = np.column_stack([first[:common], second[:common]]).ravel()
    return np.concatenate([paired, first[common:], second[common:]])


def _unit_box(features: np.ndarray) -> np.ndarray:
    return np.clip(minmax_scale(features), 0.0, 1.0)


def make_synthetic(
    kind: SyntheticKind | str, n: int, noise: float = 0.1, seed: int = 0
) -> Dataset:
    """Two-class 2-D toy data scaled into the unit square; classes alternate row by row."""
    kind = SyntheticKind(kind)
    if n < 2:
        raise ValueError("a synthetic dataset needs at least two examples")
    if noise < 0:
        raise ValueError("noise must be non-negative")
    match kind:
        case SyntheticKind.TWO_MOONS:
            features, labels = make_moons(n, shuffle=False, noise=noise, random_state=seed)
        case SyntheticKind.BLOBS:
            features, labels = make_blobs(
                n,
                centers=[(-2.0, -2.0), (2.0, 2.0)],
                cluster_std=noise,
                shuffle=False,
                random_state=seed,
            )
        case SyntheticKind.CIRCLES:
            features, labels = make_circles(
                n, shuffle=False, noise=noise, random_state=seed, factor=0.5
            )
    order = _interleave(labels)
    return Dataset(_unit_box(features[order]), labels[order], 2, name=str(kind))


def _read_header(blob: bytes, fields: int, what: str) -> list[int]:
    if len(blob) < 4 * fields:
        raise DatasetFormatError(f"{what} file is truncated inside its header")
    return [int(v) for v in np.frombuffer(blob, dtype=_BIG_U32, count=fields)]


def load_idx(images_path, labels_path) -> Dataset:
    """Big-endian IDX ubyte images and labels; pixels scaled by 1/255 and flattened row-major."""
    images = Path(images_path).read_bytes()
    labels = Path(labels_path).read_bytes()
    magic, count, rows, cols = _read_header(images, 4, "images")
    if magic != IMAGES_MAGIC:
        raise DatasetFormatError(f"images magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")
    label_magic, label_count = _read_header(labels, 2, "labels")
    if label_magic != LABELS_MAGIC:
        raise DatasetFormatError(
            f"labels magic {label_magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )
    if count != label_count:
        raise DatasetFormatError(f"{count} images but {label_count} labels")
    if count == 0:
        raise DatasetFormatError("IDX files hold no examples")
    pixels = count * rows * cols
    if len(images) < 16 + pixels or len(labels) < 8 + count:
        raise DatasetFormatError("IDX payload is truncated")
    features = np.frombuffer(images, dtype=np.uint8, count=pixels, offset=16)
    targets = np.frombuffer(labels, dtype=np.uint8, count=count, offset=8).astype(np.intp)
    return Dataset(
        features.reshape(count, rows * cols) / 255.0,
        targets,
        int(targets.max()) + 1,
        name=Path(images_path).stem,
    )


def load_csv(path) -> Dataset:
    """Comma-separated rows; the last column is the integer label, ``#`` starts a comment."""
    try:
        table = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
    except ValueError as e:
        raise DatasetFormatError(f"{path}: {e}") from e
    if table.shape[0] == 0 or table.shape[1] < 2:
        raise DatasetFormatError(f"{path}: need at least one row with a feature and a label")
    labels = table[:, -1]
    if not np.all(labels == np.round(labels)) or labels.min() < 0:
        raise DatasetFormatError(f"{path}: labels must be non-negative integers")
    labels = labels.astype(np.intp)
    return Dataset(_unit_box(table[:, :-1]), labels, int(labels.max()) + 1, name=Path(path).stem)
