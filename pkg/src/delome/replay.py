"""Memory buffer, frequency-based logit calibration, replay losses and the continual driver."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .condense import CondenseConfig, condense, init_memory
from .evaluation import (AccuracyMatrix, average_accuracy, average_forgetting,
                         forgetting_degenerate, task_accuracy)
from .model import (InitSampler, LossTerm, OptimizerConfig, adjusted_cross_entropy,
                    cross_entropy, fit_terms, widen)

log = logging.getLogger(__name__)

STRATEGIES = (
    "delome",                   # condensed memory + debiased loss
    "vanilla_replay",           # condensed memory + plain replay loss
    "sampled_debiased_replay",  # sampled memory + debiased loss
    "sampled_memory_replay",    # sampled memory + plain replay loss
    "finetune",
    "joint",
)
OFFSET_MODES = ("global", "per_term")


@dataclass(frozen=True)
class MemoryBuffer:
    entries: tuple = ()

    @property
    def total_rows(self):
        return sum(len(m) for m in self.entries)

    @property
    def classes(self):
        return tuple(c for m in self.entries for c in m.classes)

    @property
    def task_ids(self):
        return tuple(m.task_id for m in self.entries)

    def __len__(self):
        return len(self.entries)


def buffer_extend(buffer, memory):
    """Append ``memory``; the buffer is append-only."""
    if memory.task_id in buffer.task_ids:
        raise ValueError(f"task {memory.task_id} is already in the buffer")
    return MemoryBuffer(buffer.entries + (memory,))


@dataclass(frozen=True)
class CalibrationOffsets:
    values: np.ndarray
    tau: float
    buffer_offset: float | None


def calibration_offsets(buffer, current_class_counts, tau=1.0, class_count=None):
    """Log-frequency logit offsets over the global class space.

    Every buffered class gets ``tau * log(b / N)`` and current class ``c`` gets
    ``tau * log(n_c / N)``, where ``N`` is the current training-set size plus
    the number of buffered rows and ``b`` the per-class buffer budget (mean
    rows per buffered class). Class ids not covered by either side receive
    the smallest covered offset.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    counts = {int(c): int(n) for c, n in current_class_counts.items()}
    if not counts:
        raise ValueError("no current classes")
    for c, n in counts.items():
        if n <= 0:
            raise ValueError(f"current class {c} has count {n}; its log-frequency is undefined")
    buf_classes = set(buffer.classes)
    if buf_classes & set(counts):
        raise ValueError("buffer and current classes overlap")
    total = sum(counts.values()) + buffer.total_rows
    seen = sorted(buf_classes | set(counts))
    if class_count is None:
        class_count = seen[-1] + 1
    if seen[-1] >= class_count:
        raise ValueError("class_count too small for the referenced classes")

    values = np.full(class_count, np.nan)
    buffer_offset = None
    if buf_classes:
        b = buffer.total_rows / len(buf_classes)
        buffer_offset = tau * np.log(b / total)
        values[sorted(buf_classes)] = buffer_offset
    for c, n in counts.items():
        values[c] = tau * np.log(n / total)
    values[np.isnan(values)] = np.nanmin(values)
    values.setflags(write=False)
    return CalibrationOffsets(values, tau, buffer_offset)


def _offset_vector(offsets):
    return offsets.values if isinstance(offsets, CalibrationOffsets) else np.asarray(offsets)


def debiased_loss(logits_current, labels_current, logits_memory, labels_memory, offsets):
    """Current-task CE with per-class offsets plus one CE per buffer entry.

    Each memory term adds the (single, shared) buffer offset to every class
    column, so it reduces to the plain cross-entropy of that entry.
    """
    vec = _offset_vector(offsets)
    if len(logits_memory) != len(labels_memory):
        raise ValueError("memory logits and labels lists differ in length")
    loss = adjusted_cross_entropy(logits_current, labels_current, vec)
    if len(logits_memory):
        pi_b = offsets.buffer_offset if isinstance(offsets, CalibrationOffsets) else None
        if pi_b is None:
            mem_classes = np.unique(np.concatenate([np.asarray(y) for y in labels_memory]))
            pi_b = float(vec[mem_classes].min())
        for h, y in zip(logits_memory, labels_memory):
            loss += adjusted_cross_entropy(h, y, np.full(np.shape(h)[1], pi_b))
    return loss


def vanilla_replay_loss(logits_current, labels_current, logits_memory, labels_memory, lam=1.0):
    if len(logits_memory) != len(labels_memory):
        raise ValueError("memory logits and labels lists differ in length")
    loss = cross_entropy(logits_current, labels_current)
    for h, y in zip(logits_memory, labels_memory):
        loss += lam * cross_entropy(h, y)
    return loss


@dataclass(frozen=True)
class ReplayConfig:
    strategy: str = "delome"
    tau: float = 1.0
    lam: float = 1.0
    budget_per_class: int = 10
    prop_depth: int = 2
    hidden_dim: int | None = None
    offset_mode: str = "global"
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    condense: CondenseConfig = field(default_factory=CondenseConfig)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.budget_per_class < 1:
            raise ValueError("budget_per_class must be >= 1")
        if self.prop_depth < 0:
            raise ValueError("prop_depth must be >= 0")
        if self.offset_mode not in OFFSET_MODES:
            raise ValueError(f"offset_mode must be one of {OFFSET_MODES}")

    @property
    def memory_kind(self):
        if self.strategy in ("delome", "vanilla_replay"):
            return "condensed"
        if self.strategy.startswith("sampled"):
            return "sampled"
        return None

    @property
    def debiased(self):
        return self.strategy in ("delome", "sampled_debiased_replay")

    def as_dict(self):
        return dataclasses.asdict(self)


def _train_rows(task, k):
    return task.propagated(k)[task.train_mask], task.labels[task.train_mask]


def loss_terms(model, task, buffer, cfg):
    """Training objective of ``cfg.strategy`` on ``task`` as a list of loss terms.

    Debiased strategies either pool current and buffered rows into one
    calibrated term (``offset_mode="global"``) or keep one term per buffer
    entry, each shifted by the shared buffer offset (``"per_term"``), which
    is exactly :func:`debiased_loss`.
    """
    x, y = _train_rows(task, model.prop_depth)
    if cfg.strategy == "finetune" or not len(buffer):
        if cfg.debiased:
            off = calibration_offsets(buffer, task.train_class_counts(), cfg.tau,
                                      model.class_count)
            return [LossTerm(x, y, off.values)]
        return [LossTerm(x, y)]
    if not cfg.debiased:
        return [LossTerm(x, y)] + [LossTerm(m.features, m.labels, scale=cfg.lam)
                                   for m in buffer.entries]
    off = calibration_offsets(buffer, task.train_class_counts(), cfg.tau, model.class_count)
    if cfg.offset_mode == "global":
        xs = np.vstack([x] + [m.features for m in buffer.entries])
        ys = np.concatenate([y] + [m.labels for m in buffer.entries])
        return [LossTerm(xs, ys, off.values)]
    uniform = np.full(model.class_count, off.buffer_offset)
    return [LossTerm(x, y, off.values)] + [LossTerm(m.features, m.labels, uniform)
                                           for m in buffer.entries]


def train_task(model, task, buffer, cfg, history=None):
    """Fit ``model`` on one task under the configured strategy. The buffer is not modified."""
    if max(task.classes) >= model.class_count:
        raise ValueError("model class space does not cover the task's classes; widen first")
    if cfg.strategy == "joint":
        raise ValueError("joint training retrains on all tasks; use run_stream")
    return fit_terms(model, loss_terms(model, task, buffer, cfg), cfg.optimizer, history)


def task_seed(seed, task_id):
    return int(np.random.SeedSequence([int(seed), int(task_id)]).generate_state(1)[0])


def build_memory(task, cfg):
    """Memory for ``task`` per the strategy: condensed, or the equal-budget uniform sample."""
    seed = task_seed(cfg.seed, task.task_id)
    if cfg.memory_kind == "sampled":
        return init_memory(task, cfg.budget_per_class, seed)
    ccfg = dataclasses.replace(cfg.condense, budget_per_class=cfg.budget_per_class,
                               init_seed=seed, prop_depth=cfg.prop_depth)
    return condense(task, ccfg)


@dataclass
class ExperimentResult:
    mode: str
    accuracy_matrix: AccuracyMatrix
    task_seconds: list
    buffer_rows: list
    config: dict

    @property
    def aa(self):
        return average_accuracy(self.accuracy_matrix)

    @property
    def af(self):
        return average_forgetting(self.accuracy_matrix)

    @property
    def af_degenerate(self):
        return forgetting_degenerate(self.accuracy_matrix)


def _joint_model(stream, t, cfg):
    tasks = stream.tasks[:t + 1]
    n_cls = max(max(task.classes) for task in tasks) + 1
    sampler = InitSampler(task_seed(cfg.seed, 10_000 + t))
    model = sampler.model(tasks[0].graph.feature_dim, n_cls, cfg.prop_depth, cfg.hidden_dim)
    rows = [_train_rows(task, cfg.prop_depth) for task in tasks]
    term = LossTerm(np.vstack([r[0] for r in rows]), np.concatenate([r[1] for r in rows]))
    return fit_terms(model, [term], cfg.optimizer)


def run_stream(stream, cfg, on_task_end=None):
    """Train over the whole stream; returns ``{"cil": ExperimentResult, "til": ExperimentResult}``.

    After each task, every task seen so far is evaluated in both modes before
    anything else touches the model. ``on_task_end(t, results)`` is called
    after each task's row is filled.
    """
    if not len(stream):
        raise ValueError("empty task stream")
    n = len(stream)
    snapshot = cfg.as_dict()
    results = {mode: ExperimentResult(mode, AccuracyMatrix(n), [], [], snapshot)
               for mode in ("cil", "til")}
    sampler = InitSampler(cfg.seed)
    model = None
    buffer = MemoryBuffer()

    for t, task in enumerate(stream):
        start = time.perf_counter()
        rows_used = buffer.total_rows
        if cfg.strategy == "joint":
            model = _joint_model(stream, t, cfg)
        else:
            n_cls = max(task.classes) + 1
            if model is None:
                model = sampler.model(task.graph.feature_dim, n_cls, cfg.prop_depth,
                                      cfg.hidden_dim)
            model = widen(model, max(n_cls, model.class_count), sampler)
            model = train_task(model, task, buffer, cfg)

        for j in range(t + 1):
            for mode, res in results.items():
                res.accuracy_matrix[t, j] = task_accuracy(model, stream[j], mode)

        if cfg.memory_kind and t < n - 1:
            buffer = buffer_extend(buffer, build_memory(task, cfg))
        elapsed = time.perf_counter() - start
        for res in results.values():
            res.task_seconds.append(elapsed)
            res.buffer_rows.append(rows_used)
        log.info("task %d/%d done in %.2fs: cil %.3f til %.3f", t + 1, n, elapsed,
                 results["cil"].accuracy_matrix[t, t], results["til"].accuracy_matrix[t, t])
        if on_task_end is not None:
            on_task_end(t, results)
    return results
