"""Synthetic task streams and CSV ingestion."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import Batch

TEST_FRACTION = 0.2
DEFAULT_NOISE = 0.3


class CSVFormatError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


@dataclass(frozen=True)
class Task:
    name: str
    train: Batch
    test: Batch
    classes: int

    def __post_init__(self):
        for split in (self.train, self.test):
            if split.labels.max() >= self.classes:
                raise ValueError(f"task {self.name}: label outside [0, {self.classes})")


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[Task, ...]
    master_seed: int = 0

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, i) -> Task:
        return self.tasks[i]

    def __iter__(self):
        return iter(self.tasks)

    @property
    def offsets(self) -> tuple[int, ...]:
        """Start column of each task's slice in a shared classifier head."""
        return tuple(int(x) for x in np.cumsum([0] + [t.classes for t in self.tasks])[:-1])

    @property
    def total_classes(self) -> int:
        return sum(t.classes for t in self.tasks)

    def head(self, i: int) -> tuple[int, int]:
        return self.offsets[i], self.tasks[i].classes

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.master_seed).encode())
        for t in self.tasks:
            h.update(t.name.encode())
            h.update(str(t.classes).encode())
            for split in (t.train, t.test):
                h.update(np.ascontiguousarray(split.inputs, dtype="<f8").tobytes())
                h.update(np.ascontiguousarray(split.labels, dtype="<i8").tobytes())
        return h.hexdigest()


def n_test(n: int) -> int:
    return math.ceil(TEST_FRACTION * n)


def _random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def _sample_task(name, means, samples_per_class, noise, rng) -> Task:
    classes, d = means.shape
    n_te = n_test(samples_per_class)
    xs_tr, ys_tr, xs_te, ys_te = [], [], [], []
    for c in range(classes):
        x = means[c] + noise * rng.standard_normal((samples_per_class, d))
        xs_te.append(x[:n_te])
        xs_tr.append(x[n_te:])
        ys_te.append(np.full(n_te, c))
        ys_tr.append(np.full(samples_per_class - n_te, c))
    x_tr, y_tr = np.vstack(xs_tr), np.concatenate(ys_tr)
    x_te, y_te = np.vstack(xs_te), np.concatenate(ys_te)
    p_tr, p_te = rng.permutation(len(y_tr)), rng.permutation(len(y_te))
    return Task(name, Batch(x_tr[p_tr], y_tr[p_tr]), Batch(x_te[p_te], y_te[p_te]), classes)


def task_subspaces(rng, n_tasks, d_in, subspace_dim, subspace_overlap):
    shared = int(round(subspace_overlap * subspace_dim))
    private = subspace_dim - shared
    needed = shared + n_tasks * private
    if needed > d_in:
        raise ValueError(f"d_in={d_in} cannot host {n_tasks} task subspaces of dimension "
                         f"{subspace_dim} with overlap {subspace_overlap} (needs {needed})")
    q = _random_orthogonal(rng, d_in)
    return [np.hstack([q[:, :shared], q[:, shared + t * private: shared + (t + 1) * private]])
            for t in range(n_tasks)]


def gen_gaussian_tasks(seed: int, n_tasks: int, d_in: int, classes_per_task: int,
                       samples_per_class: int, subspace_overlap: float = 0.0, *,
                       subspace_dim: Optional[int] = None, noise: float = DEFAULT_NOISE,
                       mean_norm: float = 1.0,
                       task_seeds: Optional[Sequence[int]] = None) -> TaskStream:
    """Gaussian class clusters whose means live in per-task subspaces.

    Each task gets a ``subspace_dim``-dimensional subspace (default:
    ``classes_per_task``) of which ``round(overlap * subspace_dim)`` dimensions
    are shared by every task. Class means are mutually orthogonal vectors of
    norm ``mean_norm`` inside the task subspace; samples add isotropic noise.
    Per class, ``ceil(0.2 * samples_per_class)`` samples go to the test split.
    """
    if min(n_tasks, d_in, classes_per_task, samples_per_class) < 1:
        raise ValueError("counts must be positive")
    if not 0.0 <= subspace_overlap <= 1.0:
        raise ValueError("subspace_overlap must lie in [0, 1]")
    k = classes_per_task if subspace_dim is None else subspace_dim
    if k < classes_per_task:
        raise ValueError("subspace_dim must be at least classes_per_task")
    root = np.random.SeedSequence(seed)
    bases = task_subspaces(np.random.default_rng(root), n_tasks, d_in, k, subspace_overlap)
    if task_seeds is None:
        children = root.spawn(n_tasks)
    else:
        if len(task_seeds) != n_tasks:
            raise ValueError("need one task seed per task")
        children = [np.random.SeedSequence(s) for s in task_seeds]
    tasks = []
    for t, (basis, ss) in enumerate(zip(bases, children)):
        rng = np.random.default_rng(ss)
        coeff = _random_orthogonal(rng, k)[:classes_per_task] * mean_norm
        tasks.append(_sample_task(f"task{t + 1}", coeff @ basis.T, samples_per_class, noise, rng))
    return TaskStream(tuple(tasks), seed)


def gen_planted_spectrum_model(seed: int, d: int, general_energy_rank: int,
                               specific_direction_count: int, *, samples_per_class: int = 50,
                               noise: float = 0.1, mean_norm: float = 1.0,
                               general_scale: float = 10.0, specific_scale: float = 0.5):
    """A linear classifier whose weight spectrum separates a general and a specific task.

    Returns ``(W, general, specific)``. ``W`` is ``d x (2g + 2s)``; logits are
    ``x W`` with the general task reading the first ``2g`` columns and the
    specific task the remaining ``2s``. Each planted input direction ``u_j``
    carries two classes with means ``+-mean_norm u_j``. The general directions
    get singular values around ``general_scale``; the specific directions get
    ``specific_scale``, so truncating ``W`` to its top ``g`` components keeps
    the general task intact and erases the specific one.
    """
    g, s = general_energy_rank, specific_direction_count
    if g < 1 or s < 1:
        raise ValueError("need at least one general and one specific direction")
    if g + s > d:
        raise ValueError(f"general_energy_rank + specific_direction_count must not exceed d={d}")
    if specific_scale >= general_scale:
        raise ValueError("specific directions must carry less energy than general ones")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    q = _random_orthogonal(rng, d)
    u_gen, u_spec = q[:, :g], q[:, g:g + s]
    sig_gen = general_scale * np.linspace(1.0, 0.5, g)
    sig_spec = specific_scale * np.linspace(1.0, 0.5, s)
    w_gen = np.hstack([u_gen * sig_gen, -u_gen * sig_gen])
    w_spec = np.hstack([u_spec * sig_spec, -u_spec * sig_spec])
    w = np.hstack([w_gen, w_spec])
    tasks = []
    for name, u in (("general", u_gen), ("specific", u_spec)):
        means = mean_norm * np.vstack([u.T, -u.T])
        tasks.append(_sample_task(name, means, samples_per_class, noise, rng))
    return w, tasks[0], tasks[1]


def write_csv_rows(path, features, labels) -> None:
    """Write one task file: header, float features (17 significant digits), integer label."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(features.shape[1])] + ["label"])
        for row, y in zip(features, labels):
            w.writerow([format(v, ".17g") for v in row] + [int(y)])


def read_csv_rows(path, classes: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Parse a task file into ``(features, labels)``; errors name the file and line."""
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CSVFormatError(path, 1, "empty file")
    width = len(rows[0])
    if width < 2:
        raise CSVFormatError(path, 1, "header needs at least one feature column and a label column")
    if len(rows) == 1:
        raise CSVFormatError(path, 2, "no data rows")
    feats, labels = [], []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise CSVFormatError(path, line, f"expected {width} cells, got {len(row)}")
        try:
            feats.append([float(c) for c in row[:-1]])
        except ValueError as exc:
            raise CSVFormatError(path, line, f"non-numeric feature: {exc}") from None
        try:
            y = int(row[-1])
        except ValueError:
            raise CSVFormatError(path, line, f"label {row[-1]!r} is not an integer") from None
        if y < 0 or (classes is not None and y >= classes):
            raise CSVFormatError(path, line, f"label {y} outside [0, {classes})")
        labels.append(y)
    x = np.array(feats, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        bad = int(np.nonzero(~np.all(np.isfinite(x), axis=1))[0][0]) + 2
        raise CSVFormatError(path, bad, "non-finite feature")
    return x, np.array(labels, dtype=np.int64)


def split_indices(n: int, master_seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 80/20 split: the ``ceil(0.2 n)`` rows with the smallest hash go to test."""
    keys = [hashlib.sha256(f"{master_seed}:{i}".encode()).digest() for i in range(n)]
    order = sorted(range(n), key=keys.__getitem__)
    test = np.sort(np.array(order[:n_test(n)], dtype=np.int64))
    train = np.setdiff1d(np.arange(n), test)
    return train, test


def load_csv_tasks(paths: Sequence, master_seed: int = 0,
                   classes: Optional[Sequence[Optional[int]]] = None) -> TaskStream:
    """One task per CSV file. ``classes`` optionally declares each file's class count."""
    if classes is None:
        classes = [None] * len(paths)
    if len(classes) != len(paths):
        raise ValueError("need one class count per file")
    tasks = []
    for path, declared in zip(paths, classes):
        x, y = read_csv_rows(path, declared)
        n_classes = declared if declared is not None else int(y.max()) + 1
        tr, te = split_indices(len(y), master_seed)
        if tr.size == 0:
            raise CSVFormatError(path, 2, "too few rows for a train/test split")
        tasks.append(Task(Path(path).stem, Batch(x[tr], y[tr]), Batch(x[te], y[te]), n_classes))
    return TaskStream(tuple(tasks), master_seed)
