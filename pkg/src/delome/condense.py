"""Per-task memory learning by one-step gradient matching.

A task's memory is a handful of synthetic rows per class with identity
structure: no edges, so the model sees them unpropagated. The rows are
optimized so that, for freshly drawn random models, the parameter gradient
they induce matches the gradient induced by real (propagated) nodes of the
same class.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ClassEmptyError, DivergenceError, FormatError, ShapeError
from .graph import normalize_adjacency, propagate, sample_neighborhood
from .model import InitSampler, Optimizer, grad_theta, softmax

MEMORY_KINDS = ("condensed", "sampled")


@dataclass(frozen=True, eq=False)
class SyntheticMemory:
    """Memory rows for one task. The structure is implicitly the identity."""

    task_id: int
    features: np.ndarray
    labels: np.ndarray
    per_class_budget: dict
    kind: str = "condensed"

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ShapeError(f"{x.shape} features for {y.shape[0]} labels")
        budget = {int(c): int(b) for c, b in self.per_class_budget.items()}
        counts = {int(c): int(n) for c, n in zip(*np.unique(y, return_counts=True))}
        if counts != {c: b for c, b in budget.items() if b}:
            raise ValueError("labels do not match per_class_budget")
        if self.kind not in MEMORY_KINDS:
            raise ValueError(f"unknown memory kind {self.kind!r}")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "per_class_budget", budget)

    @property
    def classes(self):
        return tuple(sorted(self.per_class_budget))

    def __len__(self):
        return self.labels.shape[0]

    def with_features(self, features, kind=None):
        return SyntheticMemory(self.task_id, features, self.labels,
                               self.per_class_budget, kind or self.kind)

    def __eq__(self, other):
        if not isinstance(other, SyntheticMemory):
            return NotImplemented
        # kind is provenance metadata, not content
        return (self.task_id == other.task_id
                and self.per_class_budget == other.per_class_budget
                and np.array_equal(self.labels, other.labels)
                and self.features.tobytes() == other.features.tobytes())

    __hash__ = None


@dataclass(frozen=True)
class CondenseConfig:
    budget_per_class: int = 10
    epochs: int = 200
    learning_rate: float = 1.0
    init_seed: int = 0
    batch_size_per_class: int = 64
    fanout: int = 5
    hops: int = 2
    prop_depth: int = 2
    distance: str = "mean_square"
    optimizer: str = "gd"

    def __post_init__(self):
        if self.budget_per_class < 1:
            raise ValueError("budget_per_class must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size_per_class < 1:
            raise ValueError("batch_size_per_class must be >= 1")
        if self.fanout < 1 or self.hops < 1:
            raise ValueError("fanout and hops must be >= 1")
        if self.distance != "mean_square":
            raise ValueError(f"unsupported distance {self.distance!r}")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError("condensation optimizer must be 'gd' or 'adam'")


def init_memory(task, budget_per_class, seed=0, kind="sampled"):
    """Pick ``min(b, n_c)`` distinct training nodes per class, uniformly, and copy their raw features."""
    rng = np.random.default_rng(seed)
    rows, labels, budget = [], [], {}
    train_labels = task.labels
    for c in task.classes:
        pool = np.flatnonzero(task.train_mask & (train_labels == c))
        if len(pool) == 0:
            raise ClassEmptyError(c)
        b_c = min(budget_per_class, len(pool))
        pick = rng.choice(pool, size=b_c, replace=False)
        rows.append(task.graph.features[pick])
        labels.extend([c] * b_c)
        budget[c] = b_c
    return SyntheticMemory(task.task_id, np.vstack(rows), np.asarray(labels),
                           budget, kind)


def matching_distance(grad_real, grad_synth):
    """Sum over parameter blocks of the mean squared difference."""
    if grad_real.keys() != grad_synth.keys():
        raise ShapeError(f"gradient blocks differ: {sorted(grad_real)} vs {sorted(grad_synth)}")
    total = 0.0
    for k in grad_real:
        a, b = np.asarray(grad_real[k]), np.asarray(grad_synth[k])
        if a.shape != b.shape:
            raise ShapeError(f"block {k!r}: {a.shape} vs {b.shape}")
        total += float(np.mean((a - b) ** 2))
    return total


def _require_linear(model):
    if model.hidden_weight is not None:
        raise ValueError("gradient matching is implemented for the linear SGC head only")


def matching_loss_and_grad(model, grad_real, synth_features, synth_labels):
    """Distance to ``grad_real`` and its gradient w.r.t. the synthetic rows.

    ``grad_real`` is held fixed; only the synthetic side depends on the rows.
    """
    _require_linear(model)
    xs = np.asarray(synth_features, dtype=np.float64)
    ys = np.asarray(synth_labels, dtype=np.int64)
    w, b = model.weight, model.bias
    m = xs.shape[0]
    n_in, n_cls = w.shape

    p = softmax(xs @ w + b)
    r = p.copy()
    r[np.arange(m), ys] -= 1.0
    gs_w = xs.T @ r / m
    gs_b = r.sum(axis=0) / m
    grad_synth = {"weight": gs_w, "bias": gs_b}
    dist = matching_distance(grad_real, grad_synth)

    # d dist / d (synthetic gradient blocks)
    a_w = -2.0 * (grad_real["weight"] - gs_w) / (n_in * n_cls)
    a_b = -2.0 * (grad_real["bias"] - gs_b) / n_cls
    # path through the explicit xs factor of gs_w
    direct = r @ a_w.T / m
    # path through the softmax: dist depends on p via <B, p>
    bmat = (xs @ a_w + a_b) / m
    gz = p * (bmat - np.sum(p * bmat, axis=1, keepdims=True))
    grad = direct + gz @ w.T
    return dist, grad


def grad_matching_wrt_features(model, real_batch, synth_rows):
    """Gradient of the matching distance w.r.t. the synthetic features.

    ``real_batch`` and ``synth_rows`` are ``(features, labels)`` pairs; the
    real features are already propagated, the synthetic ones are raw.
    """
    xr, yr = real_batch
    xs, ys = synth_rows
    g_real = grad_theta(model, xr, yr)
    dist, grad = matching_loss_and_grad(model, g_real, xs, ys)
    if not (np.isfinite(dist) and np.all(np.isfinite(grad))):
        raise DivergenceError("non-finite matching gradient")
    return grad


def _streams(seed):
    a, b = np.random.SeedSequence([int(seed), 0x6d656d]).spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def condense(task, cfg, history=None):
    """Learn a task memory (gradient matching over random initializations).

    Every epoch draws one random model and, class by class, takes one step on
    that class's synthetic rows. ``history`` (if given) receives the mean
    matching distance of each epoch.
    """
    memory = init_memory(task, cfg.budget_per_class, cfg.init_seed)
    if cfg.learning_rate == 0:
        return memory.with_features(memory.features, kind="condensed")
    init_rng, batch_rng = _streams(cfg.init_seed)
    sampler = InitSampler()
    sampler.rng = init_rng

    local = {c: i for i, c in enumerate(task.classes)}
    syn_labels = np.array([local[c] for c in memory.labels])
    xs = memory.features.copy()
    rows = {c: np.flatnonzero(memory.labels == c) for c in task.classes}
    pools = {c: np.flatnonzero(task.train_mask & (task.labels == c)) for c in task.classes}
    optim = {c: Optimizer("sgd" if cfg.optimizer == "gd" else "adam", cfg.learning_rate)
             for c in task.classes}
    feature_dim = task.graph.feature_dim

    for epoch in range(1, cfg.epochs + 1):
        model = sampler.model(feature_dim, len(task.classes), cfg.prop_depth)
        dists = []
        for c in task.classes:
            pool = pools[c]
            seeds = batch_rng.choice(pool, size=min(cfg.batch_size_per_class, len(pool)),
                                     replace=False)
            sub = sample_neighborhood(task.graph, seeds, cfg.fanout, cfg.hops, batch_rng)
            xr = propagate(normalize_adjacency(sub), sub.features, cfg.prop_depth)
            xr = xr[sub.seed_positions]
            yr = np.full(len(seeds), local[c])
            g_real = grad_theta(model, xr, yr)
            idx = rows[c]
            with np.errstate(over="ignore", invalid="ignore"):
                dist, g = matching_loss_and_grad(model, g_real, xs[idx], syn_labels[idx])
            if not (np.isfinite(dist) and np.all(np.isfinite(g))):
                raise DivergenceError("non-finite matching loss", epoch=epoch, class_id=c)
            xs[idx] = optim[c].step({"x": xs[idx]}, {"x": g})["x"]
            dists.append(dist)
        if history is not None:
            history.append(float(np.mean(dists)))
    return memory.with_features(xs, kind="condensed")


def save_memory(memory, path):
    os.makedirs(path, exist_ok=True)
    stem = os.path.join(path, f"memory_{memory.task_id}")
    meta = {
        "task_id": memory.task_id,
        "kind": memory.kind,
        "feature_dim": memory.features.shape[1],
        "per_class_budget": {str(c): b for c, b in memory.per_class_budget.items()},
        "labels": memory.labels.tolist(),
    }
    with open(stem + ".json", "w") as f:
        json.dump(meta, f, indent=2)
    memory.features.astype("<f8").tofile(stem + ".bin")
    return stem + ".json", stem + ".bin"


def load_memory(path, task_id):
    stem = os.path.join(path, f"memory_{task_id}")
    with open(stem + ".json") as f:
        meta = json.load(f)
    labels = np.asarray(meta["labels"], dtype=np.int64)
    fdim = meta["feature_dim"]
    expected = len(labels) * fdim * 8
    actual = os.path.getsize(stem + ".bin")
    if actual != expected:
        raise FormatError(f"{stem}.bin: expected {expected} bytes, found {actual}")
    x = np.fromfile(stem + ".bin", dtype="<f8").reshape(len(labels), fdim)
    budget = {int(c): b for c, b in meta["per_class_budget"].items()}
    return SyntheticMemory(meta["task_id"], x, labels, budget, meta.get("kind", "condensed"))
