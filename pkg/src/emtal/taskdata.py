"""Multi-task data: unified label space, synthetic Gaussian tasks, CSV ingestion, batching."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .linalg import Rng


@dataclass(frozen=True)
class UnifiedLabelSpace:
    class_counts: tuple[int, ...]

    def __post_init__(self):
        if not self.class_counts:
            raise ConfigError("label space needs at least one task")
        if any(int(c) < 1 for c in self.class_counts):
            raise ConfigError(f"every task needs >= 1 class, got {list(self.class_counts)}")

    @property
    def n_tasks(self) -> int:
        return len(self.class_counts)

    @property
    def offsets(self) -> list[int]:
        return [int(v) for v in np.concatenate([[0], np.cumsum(self.class_counts)[:-1]])]

    @property
    def n_class(self) -> int:
        return int(sum(self.class_counts))

    def to_global(self, task: int, local: int) -> int:
        if not 0 <= task < self.n_tasks:
            raise DataError(f"task {task} outside [0, {self.n_tasks})")
        if not 0 <= local < self.class_counts[task]:
            raise DataError(f"label {local} out of range for task {task} with {self.class_counts[task]} classes")
        return self.offsets[task] + local

    def to_local(self, global_id: int) -> tuple[int, int]:
        if not 0 <= global_id < self.n_class:
            raise DataError(f"global class {global_id} outside [0, {self.n_class})")
        offsets = self.offsets
        task = int(np.searchsorted(offsets, global_id, side="right")) - 1
        return task, global_id - offsets[task]

    def task_of(self, global_ids: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.offsets, global_ids, side="right") - 1


def build_label_space(class_counts) -> UnifiedLabelSpace:
    return UnifiedLabelSpace(tuple(int(c) for c in class_counts))


@dataclass
class TaskDataset:
    features: np.ndarray  # N x d_in
    labels: np.ndarray  # global class ids
    task_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "TaskDataset":
        return TaskDataset(self.features[idx], self.labels[idx], self.task_ids[idx])

    def task(self, t: int) -> "TaskDataset":
        return self.subset(self.task_ids == t)

    @staticmethod
    def concat(parts: list["TaskDataset"]) -> "TaskDataset":
        return TaskDataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.task_ids for p in parts]),
        )


@dataclass
class TaskSpec:
    classes: int
    train_per_class: int
    test_per_class: int
    noise: float


@dataclass
class SyntheticSpec:
    tasks: list[TaskSpec]
    d_in: int = 32
    mean_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.tasks = [t if isinstance(t, TaskSpec) else TaskSpec(**t) for t in self.tasks]
        for i, t in enumerate(self.tasks):
            if not t.noise > 0:
                raise ConfigError(f"data.tasks[{i}].noise must be > 0")
            if min(t.classes, t.train_per_class, t.test_per_class) < 1:
                raise ConfigError(f"data.tasks[{i}]: counts must be >= 1")
        if self.d_in < 1 or not self.mean_scale > 0:
            raise ConfigError("data.d_in must be >= 1 and data.mean_scale > 0")

    @property
    def label_space(self) -> UnifiedLabelSpace:
        return build_label_space([t.classes for t in self.tasks])


def default_spec(seed: int = 0, d_in: int = 32) -> SyntheticSpec:
    """Four tasks of increasing difficulty, class counts [8, 8, 6, 6]."""
    tasks = [
        TaskSpec(8, 30, 30, 0.3),
        TaskSpec(8, 30, 30, 0.6),
        TaskSpec(6, 30, 30, 1.0),
        TaskSpec(6, 30, 30, 1.5),
    ]
    return SyntheticSpec(tasks, d_in=d_in, mean_scale=3.0, seed=seed)


def class_means(spec: SyntheticSpec) -> list[np.ndarray]:
    """Per-task C_t x d_in class means; coordinates ~ N(0, mean_scale^2 / d_in)."""
    rng = Rng(spec.seed, "data/means")
    std = spec.mean_scale / np.sqrt(spec.d_in)
    return [rng.normal((t.classes, spec.d_in), std) for t in spec.tasks]


def generate_synthetic(spec: SyntheticSpec, dtype=np.float32) -> tuple[TaskDataset, TaskDataset]:
    """Gaussian class blobs around seeded means with task-specific isotropic noise.

    Train and test come from separate random substreams, so they are disjoint draws.
    """
    space = spec.label_space
    means = class_means(spec)
    out = []
    for split in ("train", "test"):
        rng = Rng(spec.seed, f"data/{split}")
        parts = []
        for t, (ts, mu) in enumerate(zip(spec.tasks, means)):
            n = ts.train_per_class if split == "train" else ts.test_per_class
            local = np.repeat(np.arange(ts.classes), n)
            x = mu[local] + rng.normal((local.size, spec.d_in), ts.noise)
            parts.append(
                TaskDataset(x.astype(dtype), local + space.offsets[t], np.full(local.size, t, dtype=np.int64))
            )
        out.append(TaskDataset.concat(parts))
    return out[0], out[1]


def nearest_mean_accuracy(train: TaskDataset, test: TaskDataset, task: int | None = None) -> float:
    """Accuracy of a nearest-class-mean classifier; restricted to one task's classes if given."""
    if task is not None:
        train, test = train.task(task), test.task(task)
    classes = np.unique(train.labels)
    means = np.stack([train.features[train.labels == c].mean(axis=0) for c in classes])
    d = ((test.features[:, None, :] - means[None]) ** 2).sum(-1)
    return float((classes[d.argmin(axis=1)] == test.labels).mean())


def load_csv(path, task_id: int, label_space: UnifiedLabelSpace, dtype=np.float32) -> list[tuple]:
    """Rows of ``d_in`` floats followed by an integer local label, no header.

    Returns ``(features, global_label, task_id)`` tuples.
    """
    samples = []
    width = None
    with open(Path(path), newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise DataError(f"{path}:{lineno}: need at least one feature and a label")
            if width is not None and len(row) != width:
                raise DataError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            width = len(row)
            try:
                feats = np.array([float(v) for v in row[:-1]], dtype=dtype)
                local = int(row[-1])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not 0 <= local < label_space.class_counts[task_id]:
                raise DataError(
                    f"{path}:{lineno}: label {local} out of range for task {task_id} "
                    f"({label_space.class_counts[task_id]} classes)"
                )
            samples.append((feats, label_space.to_global(task_id, local), task_id))
    return samples


def samples_to_dataset(samples: list[tuple], d_in: int, dtype=np.float32) -> TaskDataset:
    if not samples:
        return TaskDataset(np.zeros((0, d_in), dtype), np.zeros(0, np.int64), np.zeros(0, np.int64))
    return TaskDataset(
        np.stack([s[0] for s in samples]).astype(dtype),
        np.array([s[1] for s in samples], dtype=np.int64),
        np.array([s[2] for s in samples], dtype=np.int64),
    )


@dataclass
class Batch:
    x: np.ndarray
    labels: np.ndarray
    task_ids: np.ndarray
    index: np.ndarray


def batch_iter(data: TaskDataset, batch_size: int, seed: int, epoch: int):
    """Mixed-task minibatches over a seeded per-epoch permutation; last batch may be short."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = Rng(seed, f"shuffle/{epoch}").permutation(len(data))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield Batch(data.features[idx], data.labels[idx], data.task_ids[idx], idx)
