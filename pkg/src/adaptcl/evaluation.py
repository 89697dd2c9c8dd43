"""Accuracy matrices, average accuracy, forgetting and the two evaluation protocols.

Task indices in the metric functions are 1-based, matching ``a[t][k]`` =
accuracy on task ``k`` after training through task ``t``.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import StateError, TaskLookupError
from .nn import ContinualModel
from .tensor import no_grad


class AccuracyMatrix:
    """Lower-triangular T x T matrix; entries above the diagonal stay unset (NaN)."""

    def __init__(self, num_tasks: int):
        self.a = np.full((num_tasks, num_tasks), np.nan)

    @property
    def num_tasks(self) -> int:
        return self.a.shape[0]

    def set(self, t: int, k: int, value: float) -> None:
        if not 1 <= k <= t <= self.num_tasks:
            raise IndexError(f"a[{t}][{k}] outside the lower triangle of a {self.num_tasks}-task matrix")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self.a[t - 1, k - 1] = value

    def get(self, t: int, k: int) -> float:
        return float(self.a[t - 1, k - 1])

    def row(self, t: int) -> np.ndarray:
        return self.a[t - 1, :t]

    def row_complete(self, t: int) -> bool:
        return 1 <= t <= self.num_tasks and not np.isnan(self.row(t)).any()

    def completed_rows(self) -> int:
        t = 0
        while t < self.num_tasks and self.row_complete(t + 1):
            t += 1
        return t

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"k{k}" for k in range(1, self.num_tasks + 1)])
            for t in range(1, self.num_tasks + 1):
                cells = ["" if np.isnan(v) else repr(float(v)) for v in self.a[t - 1]]
                w.writerow([t] + cells)

    @classmethod
    def from_csv(cls, path) -> "AccuracyMatrix":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        m = cls(len(rows) - 1)
        for t, row in enumerate(rows[1:], start=1):
            for k, cell in enumerate(row[1:], start=1):
                if cell != "":
                    m.a[t - 1, k - 1] = float(cell)
        return m

    def __eq__(self, other):
        if not isinstance(other, AccuracyMatrix):
            return NotImplemented
        return self.a.shape == other.a.shape and np.array_equal(self.a, other.a, equal_nan=True)

    def tolist(self) -> list[list[float | None]]:
        return [[None if np.isnan(v) else float(v) for v in row] for row in self.a]


def average_accuracy(m: AccuracyMatrix, t: int) -> float:
    """Mean of ``a[t][1..t]``."""
    if not m.row_complete(t):
        raise StateError(f"row {t} of the accuracy matrix is incomplete")
    return float(np.mean(m.row(t)))


def forgetting(m: AccuracyMatrix, t: int, k: int) -> float:
    """``max_{k<=j<=t} a[j][k] - a[t][k]``."""
    col = m.a[k - 1:t, k - 1]
    if np.isnan(col).any():
        raise StateError(f"column {k} is incomplete up to row {t}")
    return float(col.max() - col[-1])


def mean_forgetting(m: AccuracyMatrix, t: int) -> float:
    """Average forgetting over the tasks learned before ``t`` (0 for t = 1)."""
    if t <= 1:
        return 0.0
    return float(np.mean([forgetting(m, t, k) for k in range(1, t)]))


def task_il_from_logits(logits: np.ndarray, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def class_il_from_logits(branch_logits: list[np.ndarray], task_index: int, labels) -> float:
    """Global argmax over the concatenated branch scores; correct iff it hits the true class of ``task_index``."""
    offset = sum(b.shape[1] for b in branch_logits[:task_index])
    scores = np.concatenate(branch_logits, axis=1)
    return float(np.mean(np.argmax(scores, axis=1) == np.asarray(labels) + offset))


def _check_trained(model: ContinualModel, k: int) -> None:
    if not 0 <= k < model.num_tasks:
        raise TaskLookupError(f"task {k} has not been trained ({model.num_tasks} tasks seen)")


def evaluate_task_il(model: ContinualModel, stream, k: int, split: str = "test") -> float:
    """Accuracy on task ``k`` (0-based) using its own branch."""
    _check_trained(model, k)
    x, y = stream.split(k, split)
    with no_grad():
        logits = model(x, k).data
    return task_il_from_logits(logits, y)


def evaluate_class_il(model: ContinualModel, stream, k: int, split: str = "test") -> float:
    """Accuracy on task ``k`` (0-based) when every seen branch competes."""
    _check_trained(model, k)
    x, y = stream.split(k, split)
    with no_grad():
        logits = [t.data for t in model.forward_all(x)]
    return class_il_from_logits(logits, k, y)
