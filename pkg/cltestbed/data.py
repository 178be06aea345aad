"""
Task streams for class-incremental experiments.

A stream splits N = T*C classes into T tasks of C classes each, in ascending
contiguous order (classes 0..C-1 form task 0). Streams come either from a
seeded Gaussian-blob generator or from IDX image/label files.
"""

import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import DataFormatError, ShapeMismatchError

logger = logging.getLogger(__name__)

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803

_SPLIT_CODES = {"train": 0, "test": 1}


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class SampleSet:
    """Column-wise sample storage: ``features`` is n x d, ``labels`` has length n."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ShapeMismatchError(f"Features must be 2-D, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ShapeMismatchError(
                f"Got {labels.shape[0] if labels.ndim else 1} labels for {features.shape[0]} feature rows"
            )
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def samples(self) -> Iterator[Sample]:
        for x, y in zip(self.features, self.labels):
            yield Sample(features=x, label=int(y))

    def select(self, mask_or_index: np.ndarray) -> "SampleSet":
        return SampleSet(self.features[mask_or_index], self.labels[mask_or_index])

    def with_classes(self, class_ids: Sequence[int]) -> "SampleSet":
        return self.select(np.isin(self.labels, np.asarray(list(class_ids), dtype=np.int64)))

    @staticmethod
    def concat(parts: Sequence["SampleSet"]) -> "SampleSet":
        if not parts:
            raise ValueError("Cannot concatenate an empty list of sample sets")
        return SampleSet(
            np.concatenate([p.features for p in parts], axis=0),
            np.concatenate([p.labels for p in parts], axis=0),
        )


@dataclass(frozen=True)
class Task:
    task_id: int
    class_ids: Tuple[int, ...]
    train: SampleSet
    test: SampleSet

    def __post_init__(self):
        allowed = set(self.class_ids)
        for split_name, split in (("train", self.train), ("test", self.test)):
            if len(split) == 0:
                raise DataFormatError(f"Task {self.task_id} has an empty {split_name} split")
            stray = set(np.unique(split.labels).tolist()) - allowed
            if stray:
                raise DataFormatError(f"Task {self.task_id} {split_name} split has foreign labels {sorted(stray)}")


@dataclass(frozen=True)
class BlobSpec:
    """
    Closed-form data-generating density: one isotropic Gaussian per class.

    Args:
        centers: N x d class means
        scale: Standard deviation, scalar or one per class
        samples_per_class_train: Training samples drawn per class
        samples_per_class_test: Test samples drawn per class
        seed: Non-negative 64-bit seed
    """

    centers: np.ndarray
    scale: Union[float, np.ndarray]
    samples_per_class_train: int
    samples_per_class_test: int
    seed: int

    def __post_init__(self):
        centers = np.array(self.centers, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[0] == 0:
            raise DataFormatError(f"Centers must be a non-empty N x d array, got shape {centers.shape}")
        scales = np.broadcast_to(np.asarray(self.scale, dtype=np.float64), (centers.shape[0],)).copy()
        if np.any(scales <= 0) or not np.all(np.isfinite(scales)):
            raise DataFormatError(f"Scale must be positive and finite, got {self.scale}")
        if self.samples_per_class_train <= 0 or self.samples_per_class_test <= 0:
            raise DataFormatError(
                "Per-class sample counts must be positive, got "
                f"train={self.samples_per_class_train} test={self.samples_per_class_test}"
            )
        if not 0 <= int(self.seed) < 2**64:
            raise DataFormatError(f"Seed must be a non-negative 64-bit integer, got {self.seed}")
        centers.setflags(write=False)
        scales.setflags(write=False)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "scale", scales)

    @property
    def num_classes(self) -> int:
        return int(self.centers.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.centers.shape[1])

    def class_rng(self, class_id: int, split: str) -> np.random.Generator:
        """Counter-based generator for one (class, split) cell; independent of draw order."""
        key = np.random.SeedSequence([int(self.seed), int(class_id), _SPLIT_CODES[split]])
        return np.random.Generator(np.random.Philox(key))


@dataclass(frozen=True)
class TaskStream:
    tasks: Tuple[Task, ...]
    num_tasks: int
    classes_per_task: int
    feature_dim: int
    seed: int
    source: Optional[BlobSpec] = field(default=None, compare=False)

    def __post_init__(self):
        if self.num_tasks <= 0 or self.classes_per_task <= 0 or self.feature_dim <= 0:
            raise DataFormatError(
                f"Invalid layout T={self.num_tasks}, C={self.classes_per_task}, d={self.feature_dim}"
            )
        if len(self.tasks) != self.num_tasks:
            raise DataFormatError(f"Stream declares {self.num_tasks} tasks but holds {len(self.tasks)}")
        seen = set()
        for t, task in enumerate(self.tasks):
            expected = tuple(range(t * self.classes_per_task, (t + 1) * self.classes_per_task))
            if task.task_id != t or tuple(task.class_ids) != expected:
                raise DataFormatError(f"Task {t} must hold classes {list(expected)}, got {list(task.class_ids)}")
            if seen & set(task.class_ids):
                raise DataFormatError(f"Task {t} reuses classes {sorted(seen & set(task.class_ids))}")
            seen |= set(task.class_ids)
            for split in (task.train, task.test):
                if split.feature_dim != self.feature_dim:
                    raise ShapeMismatchError(
                        f"Task {t} has feature dim {split.feature_dim}, stream declares {self.feature_dim}"
                    )

    @property
    def num_classes(self) -> int:
        return self.num_tasks * self.classes_per_task

    @property
    def layout(self) -> Tuple[int, int]:
        return self.num_tasks, self.classes_per_task

    @cached_property
    def test_set(self) -> SampleSet:
        return SampleSet.concat([task.test for task in self.tasks])

    @cached_property
    def train_set(self) -> SampleSet:
        return SampleSet.concat([task.train for task in self.tasks])

    def prefix(self, num_tasks: int) -> "TaskStream":
        """Stream made of the first ``num_tasks`` tasks (classes keep their ids)."""
        if not 1 <= num_tasks <= self.num_tasks:
            raise ValueError(f"Prefix length must be in [1, {self.num_tasks}], got {num_tasks}")
        if num_tasks == self.num_tasks:
            return self
        return TaskStream(
            tasks=self.tasks[:num_tasks],
            num_tasks=num_tasks,
            classes_per_task=self.classes_per_task,
            feature_dim=self.feature_dim,
            seed=self.seed,
            source=self.source,
        )


def ring_centers(num_classes: int, feature_dim: int, radius: float) -> np.ndarray:
    """
    Place class centers evenly on a circle of the given radius.

    The circle lies in the plane of the first two coordinates; every other
    coordinate is zero, so higher dimensions only add noise. Neighbouring
    classes sit 2 * radius * sin(pi / N) apart.

    Args:
        num_classes: Number of centers N
        feature_dim: Dimension d (>= 1; d == 1 spaces the centers on a segment)
        radius: Norm of every center

    Returns:
        N x d array of centers
    """
    if num_classes <= 0 or feature_dim <= 0:
        raise DataFormatError(f"Need positive N and d, got N={num_classes}, d={feature_dim}")
    if radius <= 0:
        raise DataFormatError(f"Radius must be positive, got {radius}")

    centers = np.zeros((num_classes, feature_dim))
    if feature_dim == 1:
        centers[:, 0] = np.linspace(-radius, radius, num_classes) if num_classes > 1 else radius
        return centers

    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def make_blob_stream(spec: BlobSpec, num_tasks: int, classes_per_task: int) -> TaskStream:
    """
    Draw a deterministic task stream from a blob spec.

    Args:
        spec: Blob density and sample counts
        num_tasks: T
        classes_per_task: C

    Returns:
        TaskStream with T tasks of C classes; identical spec gives identical bytes
    """
    if num_tasks <= 0 or classes_per_task <= 0:
        raise DataFormatError(f"Invalid layout T={num_tasks}, C={classes_per_task}")
    if spec.num_classes != num_tasks * classes_per_task:
        raise DataFormatError(
            f"Blob spec has {spec.num_classes} centers, layout needs {num_tasks * classes_per_task}"
        )

    def draw(class_id: int, split: str, count: int) -> SampleSet:
        rng = spec.class_rng(class_id, split)
        noise = rng.standard_normal((count, spec.feature_dim))
        return SampleSet(spec.centers[class_id] + spec.scale[class_id] * noise, np.full(count, class_id))

    tasks = []
    for t in range(num_tasks):
        class_ids = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))
        train = SampleSet.concat([draw(k, "train", spec.samples_per_class_train) for k in class_ids])
        test = SampleSet.concat([draw(k, "test", spec.samples_per_class_test) for k in class_ids])
        tasks.append(Task(task_id=t, class_ids=class_ids, train=train, test=test))

    logger.info(
        f"Generated blob stream: T={num_tasks}, C={classes_per_task}, d={spec.feature_dim}, seed={spec.seed}"
    )
    return TaskStream(
        tasks=tuple(tasks),
        num_tasks=num_tasks,
        classes_per_task=classes_per_task,
        feature_dim=spec.feature_dim,
        seed=int(spec.seed),
        source=spec,
    )


def read_idx(path: Union[str, Path], expected_magic: int) -> np.ndarray:
    """
    Parse an IDX file of unsigned bytes.

    Layout (big endian): 4-byte magic, one 32-bit size per dimension, then
    row-major unsigned bytes.

    Args:
        path: IDX file
        expected_magic: 0x00000801 for label vectors, 0x00000803 for image stacks

    Returns:
        uint8 array with the declared dimensions
    """
    with open(path, "rb") as f:
        raw = f.read()

    if len(raw) < 4:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")

    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])

    expected = int(np.prod(dims, dtype=np.int64))
    payload = raw[header_len:]
    if len(payload) < expected:
        raise DataFormatError(f"{path}: truncated payload, {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise DataFormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def _read_idx_pair(images_path, labels_path) -> Tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = read_idx(labels_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"Image/label count mismatch: {images.shape[0]} images, {labels.shape[0]} labels"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return features, labels.astype(np.int64)


def _first_k_per_class(labels: np.ndarray, class_ids: Sequence[int], k: Optional[int]) -> np.ndarray:
    """Indices of the first k occurrences of each class, in file order."""
    keep = np.zeros(labels.shape[0], dtype=bool)
    for c in class_ids:
        hits = np.flatnonzero(labels == c)
        keep[hits if k is None else hits[:k]] = True
    return np.flatnonzero(keep)


def load_idx_stream(
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    num_tasks: int,
    classes_per_task: int,
    subsample_per_class: int,
    test_images_path: Optional[Union[str, Path]] = None,
    test_labels_path: Optional[Union[str, Path]] = None,
    test_per_class: Optional[int] = None,
) -> TaskStream:
    """
    Build a task stream from IDX files (e.g. split MNIST).

    Pixels are rescaled to [0, 1]. Training keeps the first
    ``subsample_per_class`` samples of each class. With a separate test pair
    the test split is taken from it; otherwise it is made of the samples left
    over after the training selection. ``test_per_class`` caps either.

    Args:
        images_path: Training image IDX file
        labels_path: Training label IDX file
        num_tasks: T
        classes_per_task: C
        subsample_per_class: Maximum training samples per class
        test_images_path: Optional test image IDX file
        test_labels_path: Optional test label IDX file
        test_per_class: Optional cap on test samples per class

    Returns:
        TaskStream over classes [0, T*C)
    """
    if subsample_per_class <= 0:
        raise DataFormatError(f"subsample_per_class must be positive, got {subsample_per_class}")
    if (test_images_path is None) != (test_labels_path is None):
        raise DataFormatError("Test images and test labels must be given together")

    num_classes = num_tasks * classes_per_task
    features, labels = _read_idx_pair(images_path, labels_path)
    _check_label_range(labels, num_classes, labels_path)

    if test_images_path is not None:
        test_features, test_labels = _read_idx_pair(test_images_path, test_labels_path)
        _check_label_range(test_labels, num_classes, test_labels_path)
        if test_features.shape[1] != features.shape[1]:
            raise DataFormatError(
                f"Test images have {test_features.shape[1]} pixels, training images {features.shape[1]}"
            )
    else:
        test_features, test_labels = None, None

    tasks = []
    for t in range(num_tasks):
        class_ids = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))
        train_idx = _first_k_per_class(labels, class_ids, subsample_per_class)
        if test_features is None:
            held_out = np.ones(labels.shape[0], dtype=bool)
            held_out[train_idx] = False
            remaining = np.flatnonzero(held_out)
            picked = _first_k_per_class(labels[remaining], class_ids, test_per_class)
            test = SampleSet(features[remaining[picked]], labels[remaining[picked]])
        else:
            test_idx = _first_k_per_class(test_labels, class_ids, test_per_class)
            test = SampleSet(test_features[test_idx], test_labels[test_idx])
        train = SampleSet(features[train_idx], labels[train_idx])
        tasks.append(Task(task_id=t, class_ids=class_ids, train=train, test=test))

    logger.info(f"Loaded IDX stream from {images_path}: T={num_tasks}, C={classes_per_task}, d={features.shape[1]}")
    return TaskStream(
        tasks=tuple(tasks),
        num_tasks=num_tasks,
        classes_per_task=classes_per_task,
        feature_dim=int(features.shape[1]),
        seed=0,
    )


def _check_label_range(labels: np.ndarray, num_classes: int, path) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataFormatError(f"{path}: label {int(labels.max())} outside [0, {num_classes})")


def class_conditional_subset(stream: TaskStream, class_ids: Sequence[int]) -> SampleSet:
    """
    Test samples whose label is in ``class_ids``, in stream order.

    Args:
        stream: Task stream
        class_ids: Non-empty collection of class indices < N

    Returns:
        SampleSet restricted to the given classes
    """
    ids = list(class_ids)
    if not ids:
        raise ValueError("class_ids must be non-empty")
    unknown = [c for c in ids if not 0 <= int(c) < stream.num_classes]
    if unknown:
        raise ValueError(f"Unknown class ids {unknown} for a stream with {stream.num_classes} classes")
    return stream.test_set.with_classes(ids)


def desk_blob_spec(
    num_classes: int = 10,
    feature_dim: int = 16,
    radius: float = 5.0,
    scale: float = 0.6,
    train_per_class: int = 200,
    test_per_class: int = 50,
    seed: int = 7,
) -> BlobSpec:
    """
    Default desk stream: a planar ring of 10 centers, radius 5, noise scale 0.6, 200/50 samples per class.

    Neighbouring centers sit about 5.2 noise deviations apart, so every class
    is separable from its neighbours while adjacent tasks still share a border.
    """
    return BlobSpec(
        centers=ring_centers(num_classes, feature_dim, radius),
        scale=scale,
        samples_per_class_train=train_per_class,
        samples_per_class_test=test_per_class,
        seed=seed,
    )


def write_idx(path: Union[str, Path], array: np.ndarray) -> Path:
    """Write a uint8 array as IDX (magic 0x0000080N, N = array.ndim)."""
    data = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x00000800 | data.ndim) + struct.pack(f">{data.ndim}I", *data.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + data.tobytes())
    return path


def render_blob_images(samples: SampleSet, side: int = 8) -> np.ndarray:
    """
    Render samples as side x side byte images (features tiled, min-max scaled).

    Used to produce IDX fixtures from blob data.
    """
    flat = samples.features
    cells = side * side
    reps = int(np.ceil(cells / flat.shape[1]))
    tiled = np.tile(flat, (1, reps))[:, :cells]
    lo, hi = tiled.min(), tiled.max()
    scaled = np.zeros_like(tiled) if hi == lo else (tiled - lo) / (hi - lo)
    return np.round(scaled * 255).astype(np.uint8).reshape(-1, side, side)
