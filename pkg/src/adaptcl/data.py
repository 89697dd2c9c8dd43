"""Datasets, file loaders and class-incremental task streams."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ParseError

ORDERINGS = ("alphabetical", "seeded_random", "coarse")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    superclass_map: dict[int, int] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError(f"features {self.features.shape} do not match {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("labels must index into class_names")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def _group_by_angle(means: np.ndarray, group_size: int) -> dict[int, int]:
    """Greedy grouping: seed a group with the lowest unassigned class, add its nearest neighbours."""
    n = len(means)
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    unit = np.divide(means, norms, out=np.zeros_like(means), where=norms > 0)
    sim = unit @ unit.T
    unassigned = list(range(n))
    mapping = {}
    group = 0
    while unassigned:
        seed = unassigned[0]
        rest = sorted(unassigned[1:], key=lambda j: (-sim[seed, j], j))
        members = [seed] + rest[:group_size - 1]
        for m in members:
            mapping[m] = group
            unassigned.remove(m)
        group += 1
    return mapping


def make_synthetic(num_classes: int, dim: int, per_class: int, sep: float,
                   rng: np.random.Generator, group_size: int = 5,
                   group_spread: float | None = None) -> LabeledDataset:
    """Isotropic unit-variance Gaussian classes with means on a sphere of radius ``sep``.

    With ``group_spread`` set, class directions scatter around
    ``ceil(num_classes / group_size)`` shared group directions instead of being
    uniform, which gives the coarse ordering something to group.
    """
    if num_classes < 1 or dim < 1 or per_class < 1 or sep < 0:
        raise ValueError("counts must be positive and sep non-negative")
    if group_spread is None:
        dirs = rng.normal(size=(num_classes, dim))
    else:
        n_groups = math.ceil(num_classes / group_size)
        centers = rng.normal(size=(n_groups, dim))
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        owner = np.arange(num_classes) // group_size
        dirs = centers[owner] + group_spread * rng.normal(size=(num_classes, dim)) / np.sqrt(dim)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = sep * dirs
    x = np.concatenate([means[c] + rng.normal(size=(per_class, dim)) for c in range(num_classes)])
    y = np.repeat(np.arange(num_classes), per_class)
    width = len(str(num_classes - 1))
    names = [f"class_{c:0{width}d}" for c in range(num_classes)]
    return LabeledDataset(x, y, names, _group_by_angle(means, group_size))


def load_csv(path) -> LabeledDataset:
    """Read a header row plus numeric rows whose last column is an integer label."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected a header row") from None
        if len(header) < 2:
            raise ParseError(f"{path}:1: header needs at least one feature and a label column")
        try:
            [float(h) for h in header]
        except ValueError:
            pass
        else:
            raise ParseError(f"{path}:1: header row is numeric; a named header is required")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                feats.append([float(v) for v in row[:-1]])
                label = float(row[-1])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if label != int(label) or label < 0:
                raise ParseError(f"{path}:{lineno}: label {row[-1]!r} is not a non-negative integer")
            labels.append(int(label))
    x = np.array(feats, dtype=np.float64).reshape(len(feats), len(header) - 1)
    y = np.array(labels, dtype=np.int64)
    n_cls = int(y.max()) + 1 if len(y) else 0
    width = len(str(max(n_cls - 1, 0)))
    return LabeledDataset(x, y, [f"class_{c:0{width}d}" for c in range(n_cls)])


def write_csv(ds: LabeledDataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(ds.input_dim)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_superclass_map(path) -> dict[int, int]:
    """Two-column CSV ``class,group`` with a header row."""
    mapping = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                mapping[int(row[0])] = int(row[1])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    return mapping


def _read_idx_header(buf: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise ParseError(f"{path}: truncated header ({len(buf)} bytes, need {need})")
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise ParseError(f"{path}: offset 0: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", buf[4:need])


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] and flattened."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()
    n_img, rows, cols = _read_idx_header(img, images_path, IDX_IMAGES_MAGIC, 3)
    (n_lab,) = _read_idx_header(lab, labels_path, IDX_LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise ParseError(f"image count {n_img} does not match label count {n_lab}")
    size = rows * cols
    body = img[16:]
    if len(body) != n_img * size:
        raise ParseError(f"{images_path}: offset 16: expected {n_img * size} pixel bytes, found {len(body)}")
    if len(lab) - 8 != n_lab:
        raise ParseError(f"{labels_path}: offset 8: expected {n_lab} label bytes, found {len(lab) - 8}")
    x = np.frombuffer(body, dtype=np.uint8).reshape(n_img, size).astype(np.float64) / 255.0
    y = np.frombuffer(lab[8:], dtype=np.uint8).astype(np.int64)
    n_cls = int(y.max()) + 1 if len(y) else 0
    return LabeledDataset(x, y, [str(c) for c in range(n_cls)])


def write_idx(images: np.ndarray, labels, images_path, labels_path) -> None:
    """Write uint8 images of shape [n, rows, cols] and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


@dataclass
class Task:
    classes: list[int]
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.classes)


@dataclass
class TaskStream:
    dataset: LabeledDataset
    tasks: list[Task]
    ordering: str
    classes_per_task: int
    seed: int = 0
    _local: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        local = np.full(self.dataset.num_classes, -1, dtype=np.int64)
        for task in self.tasks:
            for j, c in enumerate(task.classes):
                local[c] = j
        self._local = local

    def __len__(self):
        return len(self.tasks)

    def split(self, task_id: int, which: str) -> tuple[np.ndarray, np.ndarray]:
        """Features and task-local labels (0..classes-1) for one split."""
        idx = getattr(self.tasks[task_id], which)
        return self.dataset.features[idx], self._local[self.dataset.labels[idx]]

    def class_order(self) -> list[int]:
        return [c for t in self.tasks for c in t.classes]


def order_classes(ds: LabeledDataset, ordering: str, seed: int, classes: list[int] | None = None) -> list[int]:
    classes = list(range(ds.num_classes)) if classes is None else list(classes)
    if ordering == "alphabetical":
        return sorted(classes, key=lambda c: (ds.class_names[c], c))
    if ordering == "seeded_random":
        rng = np.random.default_rng(seed)
        return [classes[i] for i in rng.permutation(len(classes))]
    if ordering == "coarse":
        if ds.superclass_map is None:
            raise ConfigurationError("coarse ordering needs a superclass map")
        missing = [c for c in classes if c not in ds.superclass_map]
        if missing:
            raise ConfigurationError(f"classes {missing} have no coarse group")
        return sorted(classes, key=lambda c: (ds.superclass_map[c], c))
    raise ConfigurationError(f"unknown ordering {ordering!r}; expected one of {ORDERINGS}")


def build_stream(ds: LabeledDataset, classes_per_task: int, ordering: str = "alphabetical", seed: int = 0,
                 test_fraction: float = 0.2, val_fraction: float = 0.1,
                 num_classes: int | None = None) -> TaskStream:
    """Split ``ds`` into tasks of ``classes_per_task`` classes each.

    Each class is split independently: ``test_fraction`` of its samples go to
    test, then ``val_fraction`` of the remaining training samples to
    validation.  A trailing remainder of classes forms a final smaller task.
    """
    if classes_per_task < 1:
        raise ConfigurationError("classes_per_task must be positive")
    counts = ds.class_counts()
    present = [c for c in range(ds.num_classes) if counts[c] > 0]
    order = order_classes(ds, ordering, seed, present)
    if num_classes is not None:
        order = order[:num_classes]
    rng = np.random.default_rng(seed)
    by_class = {c: np.flatnonzero(ds.labels == c) for c in sorted(order)}
    parts = {}
    for c in sorted(order):
        idx = by_class[c][rng.permutation(len(by_class[c]))]
        n_test = int(round(len(idx) * test_fraction))
        test, rest = idx[:n_test], idx[n_test:]
        n_val = int(round(len(rest) * val_fraction))
        parts[c] = (np.sort(rest[n_val:]), np.sort(rest[:n_val]), np.sort(test))
    tasks = []
    for start in range(0, len(order), classes_per_task):
        cls = order[start:start + classes_per_task]
        tasks.append(Task(cls, *(np.concatenate([parts[c][i] for c in cls]) for i in range(3))))
    return TaskStream(ds, tasks, ordering, classes_per_task, seed)
