"""Continual-learning scores, adapter interference maps and spectral truncation sweeps."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .linalg import as_matrix, svd
from .model import Layer, LinearModel, accuracy, forward


class IncompleteGridError(ValueError):
    pass


@dataclass(frozen=True)
class AccuracyGrid:
    """``a[i, t]``: accuracy on task ``t`` after training stage ``i`` (0-based)."""

    a: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("accuracy grid must be 2-D")
        object.__setattr__(self, "a", a)

    @property
    def n_stages(self) -> int:
        return self.a.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.a.shape[1]

    def missing(self) -> list[tuple[int, int]]:
        return [(int(i), int(t)) for i, t in zip(*np.nonzero(~np.isfinite(self.a)))]


@dataclass(frozen=True)
class TaskMetrics:
    transfer: Optional[float]
    average: float
    last: float


@dataclass(frozen=True)
class MetricReport:
    per_task: tuple[TaskMetrics, ...]
    transfer: Optional[float]
    average: float
    last: float


def compute_metrics(grid: AccuracyGrid) -> MetricReport:
    """Transfer, Average and Last per task plus their unweighted means.

    Transfer_t averages the stages before task t was trained (absent for the
    first task), Average_t averages every stage and Last_t is the final stage.
    """
    missing = grid.missing()
    if missing:
        cells = ", ".join(f"(stage {i + 1}, task {t + 1})" for i, t in missing)
        raise IncompleteGridError(f"accuracy grid is missing cells: {cells}")
    if grid.n_stages < grid.n_tasks:
        raise IncompleteGridError(
            f"grid has {grid.n_stages} stages for {grid.n_tasks} tasks; every task needs a stage")
    a = grid.a
    per_task = []
    for t in range(grid.n_tasks):
        transfer = float(np.mean(a[:t, t])) if t > 0 else None
        per_task.append(TaskMetrics(transfer, float(np.mean(a[:, t])), float(a[-1, t])))
    transfers = [m.transfer for m in per_task if m.transfer is not None]
    return MetricReport(
        tuple(per_task),
        float(np.mean(transfers)) if transfers else None,
        float(np.mean([m.average for m in per_task])),
        float(np.mean([m.last for m in per_task])),
    )


def backward_forgetting(grid: AccuracyGrid) -> float:
    """Mean over t < n of ``a_t^(t) - a_t^(n)`` (derived statistic, not one of the paper's three)."""
    a = grid.a
    n = grid.n_tasks
    if n < 2:
        return 0.0
    return float(np.mean([a[t, t] - a[-1, t] for t in range(n - 1)]))


@dataclass(frozen=True)
class InterferenceGrid:
    """``norms[i, j]``: normalised mean adapter output norm of stage ``i`` on task ``j``'s test data."""

    norms: np.ndarray
    raw: np.ndarray

    @property
    def column_means(self) -> np.ndarray:
        # One value per training stage (the mean over evaluated tasks).
        return self.norms.mean(axis=1)

    def off_diagonal_mean(self, normalized: bool = True) -> float:
        g = self.norms if normalized else self.raw
        mask = ~np.eye(g.shape[0], g.shape[1], dtype=bool)
        return float(g[mask].mean()) if mask.any() else 0.0


def adapter_output_norm(checkpoint, inputs) -> float:
    """Mean per-sample L2 norm of the stage adapters' outputs, averaged over adapted layers."""
    if not checkpoint.adapters:
        return 0.0
    _, acts = forward(checkpoint.model, inputs, return_activations=True)
    per_layer = []
    for i in sorted(checkpoint.adapters):
        out = checkpoint.adapters[i].output(acts[i])
        per_layer.append(float(np.mean(np.linalg.norm(out, axis=1))))
    return float(np.mean(per_layer))


def interference_heatmap(checkpoints: Sequence, stream) -> InterferenceGrid:
    """Adapter output magnitude of every stage on every task, normalised by the grid max.

    Each checkpoint needs ``model`` (merged model after that stage) and
    ``adapters`` (layer index -> trained adapter of that stage).
    """
    n = len(stream)
    if len(checkpoints) < 1:
        raise ValueError("missing checkpoint: need one per training stage")
    for i, ck in enumerate(checkpoints):
        if ck is None:
            raise ValueError(f"missing checkpoint for stage {i + 1}")
    raw = np.zeros((len(checkpoints), n))
    for i, ck in enumerate(checkpoints):
        for j, task in enumerate(stream):
            raw[i, j] = adapter_output_norm(ck, task.test.inputs)
    top = raw.max()
    norms = raw / top if top > 0 else np.zeros_like(raw)
    return InterferenceGrid(norms, raw)


class SpectraRow(NamedTuple):
    k: int
    task: str
    accuracy: float


def spectra_analysis(w, tasks: Sequence, ks: Sequence[int], *, model: Optional[LinearModel] = None,
                     layer: int = 0, heads: Optional[Sequence[tuple[int, int]]] = None) -> list[SpectraRow]:
    """Task accuracy after replacing a weight with its top-``k`` reconstruction.

    Without ``model``, ``w`` is itself a linear classifier (logits ``x w``).
    With ``model``, ``w`` replaces layer ``layer`` of a copy of it. Task heads
    default to consecutive slices in the order given.
    """
    w = as_matrix(w, "w")
    top = min(w.shape)
    for k in ks:
        if not 1 <= k <= top:
            raise ValueError(f"k={k} outside [1, {top}]")
    if heads is None:
        offs = np.cumsum([0] + [t.classes for t in tasks])
        heads = [(int(offs[i]), t.classes) for i, t in enumerate(tasks)]
    res = svd(w)
    rows = []
    for k in ks:
        wk = (res.U[:, :k] * res.S[:k]) @ res.V[:, :k].T
        if model is None:
            m = LinearModel([Layer(wk, np.zeros(wk.shape[1]), "none")])
        else:
            m = model.copy()
            m.layers[layer].weight = wk
        for task, head in zip(tasks, heads):
            rows.append(SpectraRow(int(k), task.name, accuracy(m, task.test, head)))
    return rows
