"""Per-task accuracy, the accuracy matrix, and AA / AF."""

from __future__ import annotations

import csv
import math

import numpy as np

from .errors import FormatError
from .model import InitSampler, OptimizerConfig, fit, forward, predict

MODES = ("cil", "til")


def task_accuracy(model, task, mode="cil"):
    """Test accuracy on ``task``; ``til`` restricts predictions to the task's classes."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if not task.test_mask.any():
        raise ValueError(f"task {task.task_id} has an empty test split")
    x = task.propagated(model.prop_depth)[task.test_mask]
    y = task.labels[task.test_mask]
    mask = task.classes if mode == "til" else None
    return float(np.mean(predict(forward(model, x), mask) == y))


def train_on_memory_accuracy(memory, task, opt=None, prop_depth=2, seed=0):
    """Test accuracy on ``task`` of a fresh classifier fit only on ``memory``.

    Memory rows are used as stored (identity structure, no propagation);
    test nodes are propagated over the task graph as usual.
    """
    local = {c: i for i, c in enumerate(task.classes)}
    if set(memory.classes) - set(local):
        raise ValueError("memory holds classes outside the task")
    y_mem = np.array([local[int(c)] for c in memory.labels])
    model = InitSampler(seed).model(memory.features.shape[1], len(local), prop_depth)
    model = fit(model, memory.features, y_mem, opt=opt or OptimizerConfig())
    x = task.propagated(prop_depth)[task.test_mask]
    y = np.array([local[int(c)] for c in task.labels[task.test_mask]])
    if not len(y):
        raise ValueError(f"task {task.task_id} has an empty test split")
    return float(np.mean(predict(forward(model, x)) == y))


class AccuracyMatrix:
    """Lower-triangular ``T x T`` matrix; entry ``(t, j)`` is accuracy on task ``j`` after training task ``t``.

    Unset entries are NaN.
    """

    def __init__(self, num_tasks):
        self.values = np.full((num_tasks, num_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows):
        m = cls(len(rows))
        for t, row in enumerate(rows):
            for j, v in enumerate(row):
                if v is not None and not (isinstance(v, float) and math.isnan(v)):
                    m[t, j] = v
        return m

    @property
    def num_tasks(self):
        return self.values.shape[0]

    def __getitem__(self, idx):
        return self.values[idx]

    def __setitem__(self, idx, value):
        t, j = idx
        if j > t:
            raise IndexError(f"entry ({t}, {j}) is above the diagonal")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self.values[t, j] = value

    def row_complete(self, t):
        return not np.any(np.isnan(self.values[t, :t + 1]))

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            for t in range(self.num_tasks):
                w.writerow([repr(float(v)) if j <= t and not np.isnan(v) else ""
                            for j, v in enumerate(self.values[t])])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as f:
            rows = [r for r in csv.reader(f) if r]
        if not rows:
            raise FormatError(f"{path}: empty matrix")
        n = len(rows)
        m = cls(n)
        for t, row in enumerate(rows):
            if len(row) > n:
                raise FormatError(f"{path}:{t + 1}: {len(row)} cells in a {n}-task matrix")
            for j, cell in enumerate(row):
                cell = cell.strip()
                if not cell:
                    continue
                try:
                    m[t, j] = float(cell)
                except (ValueError, IndexError) as e:
                    raise FormatError(f"{path}:{t + 1}: cell {j + 1}: {e}") from None
        return m


def average_accuracy(matrix):
    """Mean of the final row."""
    t = matrix.num_tasks - 1
    if t < 0 or not matrix.row_complete(t):
        raise ValueError("final row of the accuracy matrix is incomplete")
    return float(np.mean(matrix.values[t, :t + 1]))


def average_forgetting(matrix):
    """Mean of ``M[T, j] - M[j, j]`` over ``j < T``. Negative means forgetting.

    Undefined for a single task; reported as 0.0 (see :func:`forgetting_degenerate`).
    """
    n = matrix.num_tasks
    if n == 0 or not matrix.row_complete(n - 1):
        raise ValueError("final row of the accuracy matrix is incomplete")
    diag = np.diag(matrix.values)
    if np.any(np.isnan(diag)):
        raise ValueError("accuracy matrix diagonal is incomplete")
    if n == 1:
        return 0.0
    return float(np.mean(matrix.values[n - 1, :n - 1] - diag[:n - 1]))


def forgetting_degenerate(matrix):
    return matrix.num_tasks < 2
