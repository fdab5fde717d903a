"""Class-incremental task streams and their on-disk formats.

Graph directory::

    manifest.json   {"num_nodes", "feature_dim", "num_classes"}
    edges.csv       u,v per row (0-indexed, one undirected edge per row)
    features.bin    row-major little-endian float64, num_nodes x feature_dim
    labels.csv      one class id per row

Stream directory::

    stream.json     {"C", "T", "seed", "num_classes", "dropped_classes", "tasks": [...]}
    task_000/       graph directory + masks.csv (node_id,split) + node_ids.csv
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .graph import SparseGraph, induced_subgraph, sgc_features

SPLITS = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class TaskGraph:
    """One task: the subgraph on the nodes of its classes, with split masks."""

    task_id: int
    graph: SparseGraph
    classes: tuple
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    node_ids: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        n = self.graph.num_nodes
        masks = []
        for name in ("train_mask", "val_mask", "test_mask"):
            m = np.asarray(getattr(self, name), dtype=bool)
            if m.shape != (n,):
                raise ValueError(f"{name} must have length {n}")
            m.setflags(write=False)
            object.__setattr__(self, name, m)
            masks.append(m)
        if np.any(np.sum(masks, axis=0) != 1):
            raise ValueError("train/val/test masks must partition the task's nodes")
        if not set(np.unique(self.graph.labels).tolist()) <= set(self.classes):
            raise ValueError("task graph holds labels outside its class set")

    @property
    def labels(self):
        return self.graph.labels

    def propagated(self, k):
        """``S^k X`` of the task graph, computed once per depth."""
        if k not in self._cache:
            out = sgc_features(self.graph, k)
            out.setflags(write=False)
            self._cache[k] = out
        return self._cache[k]

    def train_class_counts(self):
        labels = self.labels[self.train_mask]
        return {c: int(np.sum(labels == c)) for c in self.classes}

    def __eq__(self, other):
        if not isinstance(other, TaskGraph):
            return NotImplemented
        same_ids = (self.node_ids is None and other.node_ids is None) or (
            self.node_ids is not None and other.node_ids is not None
            and np.array_equal(self.node_ids, other.node_ids))
        return (self.task_id == other.task_id and self.classes == other.classes
                and self.graph == other.graph and same_ids
                and all(np.array_equal(getattr(self, m), getattr(other, m))
                        for m in ("train_mask", "val_mask", "test_mask")))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class TaskStream:
    tasks: tuple
    classes_per_task: int
    num_classes: int
    seed: int
    dropped_classes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        seen = set()
        for t in self.tasks:
            if seen & set(t.classes):
                raise ValueError("task class sets must be disjoint")
            seen |= set(t.classes)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, i):
        return self.tasks[i]

    def __eq__(self, other):
        if not isinstance(other, TaskStream):
            return NotImplemented
        return (self.classes_per_task == other.classes_per_task
                and self.num_classes == other.num_classes and self.seed == other.seed
                and tuple(self.dropped_classes) == tuple(other.dropped_classes)
                and len(self.tasks) == len(other.tasks)
                and all(a == b for a, b in zip(self.tasks, other.tasks)))

    __hash__ = None


def split_counts(n):
    """(train, val, test) sizes for a class of ``n`` nodes: floor 20% val/test, rest train."""
    n_val = n_test = int(np.floor(0.2 * n))
    return n - n_val - n_test, n_val, n_test


def build_stream(graph, classes_per_task=2, seed=0):
    """Group classes in ascending id order, ``classes_per_task`` at a time.

    Trailing classes that cannot fill a whole task are dropped. Edges that cross
    task boundaries are discarded.
    """
    if classes_per_task < 1:
        raise ValueError("classes_per_task must be >= 1")
    classes = np.unique(graph.labels).tolist()
    if len(classes) < classes_per_task:
        raise ValueError(
            f"graph has {len(classes)} classes, fewer than classes_per_task={classes_per_task}")
    n_tasks = len(classes) // classes_per_task
    kept = classes[:n_tasks * classes_per_task]
    dropped = tuple(classes[n_tasks * classes_per_task:])
    rng = np.random.default_rng(seed)
    tasks = []
    for t in range(n_tasks):
        group = kept[t * classes_per_task:(t + 1) * classes_per_task]
        nodes = np.flatnonzero(np.isin(graph.labels, group))
        sub = induced_subgraph(graph, nodes)
        split = np.empty(len(nodes), dtype=np.int8)
        for c in group:
            idx = rng.permutation(np.flatnonzero(sub.labels == c))
            n_train, n_val, _ = split_counts(len(idx))
            split[idx[:n_train]] = 0
            split[idx[n_train:n_train + n_val]] = 1
            split[idx[n_train + n_val:]] = 2
        tasks.append(TaskGraph(t, sub, tuple(group), split == 0, split == 1, split == 2,
                               node_ids=nodes))
    num_classes = int(graph.labels.max()) + 1 if graph.num_nodes else 0
    return TaskStream(tuple(tasks), classes_per_task, num_classes, seed, dropped)


# ---------------------------------------------------------------------------
# file formats

def save_graph(graph, path, num_classes=None):
    os.makedirs(path, exist_ok=True)
    if num_classes is None:
        num_classes = int(graph.labels.max()) + 1 if graph.num_nodes else 0
    manifest = {"num_nodes": graph.num_nodes, "feature_dim": graph.feature_dim,
                "num_classes": int(num_classes)}
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    with open(os.path.join(path, "edges.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["u", "v"])
        w.writerows(graph.edges.tolist())
    graph.features.astype("<f8").tofile(os.path.join(path, "features.bin"))
    np.savetxt(os.path.join(path, "labels.csv"), graph.labels, fmt="%d")


def _read_int_rows(path, ncols):
    rows = []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or (lineno == 1 and not row[0].strip().lstrip("-").isdigit()):
                continue
            if len(row) != ncols:
                raise FormatError(f"{path}:{lineno}: expected {ncols} columns, got {len(row)}")
            try:
                rows.append([int(x) for x in row])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer value {row!r}") from None
    return np.asarray(rows, dtype=np.int64).reshape(-1, ncols)


def load_graph(path):
    """Read a graph directory. Directed or duplicated edges are symmetrized."""
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{mpath}: invalid JSON at line {e.lineno}: {e.msg}") from None
    for key in ("num_nodes", "feature_dim", "num_classes"):
        if key not in manifest:
            raise FormatError(f"{mpath}: missing key {key!r}")
    n, fdim, ncls = manifest["num_nodes"], manifest["feature_dim"], manifest["num_classes"]

    fpath = os.path.join(path, "features.bin")
    expected = n * fdim * 8
    actual = os.path.getsize(fpath)
    if actual != expected:
        raise FormatError(
            f"{fpath}: size mismatch, expected {expected} bytes "
            f"({n} x {fdim} float64), found {actual}")
    features = np.fromfile(fpath, dtype="<f8").reshape(n, fdim)

    labels = _read_int_rows(os.path.join(path, "labels.csv"), 1).reshape(-1)
    if labels.shape[0] != n:
        raise FormatError(f"labels.csv: expected {n} rows, got {labels.shape[0]}")
    if n and (labels.min() < 0 or labels.max() >= ncls):
        bad = int(np.flatnonzero((labels < 0) | (labels >= ncls))[0])
        raise FormatError(
            f"labels.csv:{bad + 1}: label {labels[bad]} inconsistent with "
            f"manifest num_classes={ncls}")

    edges = _read_int_rows(os.path.join(path, "edges.csv"), 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise FormatError(f"edges.csv: endpoint outside [0, {n})")
    return SparseGraph.from_edges(n, edges, features, labels)


def save_stream(stream, path):
    os.makedirs(path, exist_ok=True)
    manifest = {
        "C": stream.classes_per_task,
        "T": len(stream),
        "seed": stream.seed,
        "num_classes": stream.num_classes,
        "dropped_classes": list(stream.dropped_classes),
        "tasks": [{"task_id": t.task_id, "classes": list(t.classes),
                   "dir": f"task_{i:03d}"} for i, t in enumerate(stream)],
    }
    for i, task in enumerate(stream):
        tdir = os.path.join(path, f"task_{i:03d}")
        save_graph(task.graph, tdir, num_classes=stream.num_classes)
        with open(os.path.join(tdir, "masks.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["node_id", "split"])
            split = np.where(task.train_mask, 0, np.where(task.val_mask, 1, 2))
            for node, s in enumerate(split):
                w.writerow([node, SPLITS[s]])
        if task.node_ids is not None:
            np.savetxt(os.path.join(tdir, "node_ids.csv"), task.node_ids, fmt="%d")
    with open(os.path.join(path, "stream.json"), "w") as f:
        json.dump(manifest, f, indent=2)


def _read_masks(path, n):
    split = np.full(n, -1, dtype=np.int8)
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if lineno == 1 and row == ["node_id", "split"]:
                continue
            if len(row) != 2 or row[1] not in SPLITS:
                raise FormatError(f"{path}:{lineno}: malformed row {row!r}")
            try:
                node = int(row[0])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer node id {row[0]!r}") from None
            if not 0 <= node < n:
                raise FormatError(f"{path}:{lineno}: node id {node} out of range")
            split[node] = SPLITS.index(row[1])
    if np.any(split < 0):
        raise FormatError(f"{path}: node {int(np.flatnonzero(split < 0)[0])} has no split")
    return split


def load_stream(path):
    spath = os.path.join(path, "stream.json")
    try:
        with open(spath) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{spath}: invalid JSON at line {e.lineno}: {e.msg}") from None
    for key in ("C", "T", "seed", "num_classes", "dropped_classes", "tasks"):
        if key not in manifest:
            raise FormatError(f"{spath}: missing key {key!r}")
    tasks = []
    for entry in manifest["tasks"]:
        tdir = os.path.join(path, entry["dir"])
        g = load_graph(tdir)
        split = _read_masks(os.path.join(tdir, "masks.csv"), g.num_nodes)
        ids_path = os.path.join(tdir, "node_ids.csv")
        node_ids = None
        if os.path.exists(ids_path):
            node_ids = np.loadtxt(ids_path, dtype=np.int64, ndmin=1)
        tasks.append(TaskGraph(entry["task_id"], g, tuple(entry["classes"]),
                               split == 0, split == 1, split == 2, node_ids=node_ids))
    if len(tasks) != manifest["T"]:
        raise FormatError(f"{spath}: T={manifest['T']} but {len(tasks)} tasks listed")
    return TaskStream(tuple(tasks), manifest["C"], manifest["num_classes"],
                      manifest["seed"], tuple(manifest["dropped_classes"]))
