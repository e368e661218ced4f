"""Sequential training over a task stream with per-task low-rank adapters."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .adapter import (
    ALL_VARIANTS,
    InitVariant,
    KeepLoRAAdapter,
    adapter_grads,
    init_from_gradient,
    sgd_step_B,
)
from .linalg import DEFAULT_DROP_TOL
from .metrics import AccuracyGrid, MetricReport, backward_forgetting, compute_metrics
from .model import Batch, LinearModel, ModelSpec, accuracy, build_model, collect_layer_inputs, forward, loss_and_grads
from .subspace import UnifiedSubspace, append_task_directions, extract_principal, extract_task_directions
from .tasks import TaskStream

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adaptive_decoupled")
PER_LAYER_KEYS = ("epsilon_w", "epsilon_f", "r", "alpha")
SHIFT_PROBE_INPUTS = 100


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    epsilon_w: float = 0.85
    epsilon_f: float = 0.99
    r: int = 8
    alpha: float = 16.0
    lr: float = 1e-3
    batch_size: int = 64
    epochs_per_task: int = 10
    optimizer: str = "sgd"
    variant: InitVariant = InitVariant.keeplora
    seed: int = 0
    feature_sample_size: int = 512
    grad_init_batches: int = 1
    # Rank of vanilla_lora adapters; None matches the trainable-parameter
    # count of a frozen-A adapter of rank r on the same layer.
    vanilla_rank: Optional[int] = None
    lora_init_std: Optional[float] = None
    weight_decay: float = 0.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    drop_tol: float = DEFAULT_DROP_TOL
    layer_overrides: Mapping[int, Mapping[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        try:
            object.__setattr__(self, "variant", InitVariant(self.variant))
        except ValueError:
            raise ConfigError("variant", f"unknown variant {self.variant!r}") from None
        for name in ("epsilon_w", "epsilon_f"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(name, f"must lie in (0, 1), got {v}")
        for name in ("r", "batch_size", "feature_sample_size", "grad_init_batches"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be a positive integer")
        if self.epochs_per_task < 0:
            raise ConfigError("epochs_per_task", "must be >= 0")
        if self.alpha <= 0:
            raise ConfigError("alpha", "must be positive")
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError("optimizer", f"must be one of {OPTIMIZERS}")
        if self.vanilla_rank is not None and self.vanilla_rank < 1:
            raise ConfigError("vanilla_rank", "must be a positive integer")
        for layer, over in self.layer_overrides.items():
            for key in over:
                if key not in PER_LAYER_KEYS:
                    raise ConfigError("layer_overrides", f"layer {layer}: unknown key {key!r}")

    def for_layer(self, i: int, key: str):
        return self.layer_overrides.get(i, {}).get(key, getattr(self, key))

    def with_variant(self, variant) -> "RunConfig":
        return replace(self, variant=InitVariant(variant))

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


@dataclass
class StageCheckpoint:
    """State after one training stage."""

    stage: int
    task_index: int
    model: LinearModel
    adapters: dict[int, KeepLoRAAdapter]
    pre_weights: dict[int, np.ndarray]
    init_subspaces: dict[int, Optional[UnifiedSubspace]]
    subspaces: dict[int, Optional[UnifiedSubspace]]
    shift_deviation: float = 0.0


@dataclass
class RunResult:
    config: RunConfig
    grid: AccuracyGrid
    initial: np.ndarray
    checkpoints: list[StageCheckpoint]
    initial_model: LinearModel
    trained_tasks: tuple[int, ...]
    wall_clock: list[float] = field(default_factory=list)

    @property
    def metrics(self) -> MetricReport:
        return compute_metrics(self.grid)

    @property
    def forgetting(self) -> float:
        return backward_forgetting(self.grid)


class _Optimizer:
    """SGD or AdamW-style updates on the trainable adapter factors."""

    def __init__(self, config: RunConfig):
        self.cfg = config
        self.state: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = {}
        self.t = 0

    def step(self, adapters: Mapping[int, KeepLoRAAdapter], grads: Mapping[int, np.ndarray]):
        self.t += 1
        for i, ad in adapters.items():
            if self.cfg.optimizer == "sgd" and not ad.trainable_A:
                sgd_step_B(ad, grads[i], self.cfg.lr)
                continue
            dA, dB = adapter_grads(ad, grads[i])
            updates = {"B": dB} if dA is None else {"A": dA, "B": dB}
            for name, g in updates.items():
                p = getattr(ad, name)
                setattr(ad, name, p + self._delta(i, name, p, g))

    def _delta(self, i, name, p, g):
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            return -cfg.lr * g
        b1, b2 = cfg.adam_betas
        m, v = self.state.get((i, name), (np.zeros_like(p), np.zeros_like(p)))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        self.state[(i, name)] = (m, v)
        m_hat = m / (1 - b1 ** self.t)
        v_hat = v / (1 - b2 ** self.t)
        return -cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps) + cfg.weight_decay * p)


def evaluate_all(model: LinearModel, stream: TaskStream, threads: int = 1) -> np.ndarray:
    """Test accuracy of ``model`` on every task, each scored on its own head slice."""
    def one(i):
        return accuracy(model, stream[i].test, stream.head(i))

    if threads <= 1:
        return np.array([one(i) for i in range(len(stream))])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.array(list(pool.map(one, range(len(stream)))))


def vanilla_rank_for(config: RunConfig, layer: int, d_in: int, d_out: int) -> int:
    if config.vanilla_rank is not None:
        return config.vanilla_rank
    r = int(config.for_layer(layer, "r"))
    return max(1, int(round(r * d_out / (d_in + d_out))))


def initial_subspaces(model: LinearModel, config: RunConfig) -> dict[int, Optional[UnifiedSubspace]]:
    """Principal subspaces of the base weights, for variants that use them."""
    v = config.variant
    out: dict[int, Optional[UnifiedSubspace]] = {}
    for i in model.adapted_layers:
        if v.uses_principal or v.builds_task_directions:
            eps = float(config.for_layer(i, "epsilon_w"))
            out[i] = UnifiedSubspace(extract_principal(model.layers[i].weight, eps))
        else:
            out[i] = None
    return out


def _batches(order: np.ndarray, size: int):
    for s in range(0, order.size, size):
        yield order[s:s + size]


def task_gradient(model: LinearModel, data: Batch, head, order, config: RunConfig) -> dict[int, np.ndarray]:
    """Mean adapted-layer gradient over the first ``grad_init_batches`` mini-batches."""
    total: dict[int, np.ndarray] = {}
    count = 0
    for idx in _batches(order, config.batch_size):
        _, grads = loss_and_grads(model, data.subset(idx), head)
        for i, g in grads.items():
            total[i] = total[i] + g if i in total else g
        count += 1
        if count == config.grad_init_batches:
            break
    return {i: g / count for i, g in total.items()}


def _shift_probe(model: LinearModel, seed: int, task_index: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, task_index, 2]))
    return rng.standard_normal((SHIFT_PROBE_INPUTS, model.d_in))


def run_continual(config: RunConfig, stream: TaskStream, model_spec: ModelSpec | LinearModel, *,
                  tasks: Optional[Sequence[int]] = None, threads: int = 1) -> RunResult:
    """Train the stream's tasks in order with one adapter per adapted layer per task.

    For every task: gradient at the current weights, adapter init, base shift,
    adapter training, merge, (for subspace variants) feature-direction
    extraction, then evaluation on every task in the stream. ``tasks`` selects
    which stream indices are trained (default: all, in order); the head slices
    and per-task random streams stay those of the full stream, so training a
    task in isolation repeats the exact computation of its sequential stage
    when it comes first.
    """
    if len(stream) == 0:
        raise ValueError("empty task stream")
    if isinstance(model_spec, LinearModel):
        model = model_spec.copy()
    else:
        model = build_model(model_spec, stream[0].train.inputs.shape[1], stream.total_classes)
    initial_model = model.copy()
    order_of_tasks = tuple(range(len(stream))) if tasks is None else tuple(tasks)
    variant = config.variant
    subspaces = initial_subspaces(model, config)
    initial = evaluate_all(model, stream, threads)
    rows, checkpoints, clock = [], [], []

    for stage, k in enumerate(order_of_tasks):
        t0 = time.perf_counter()
        task = stream[k]
        head = stream.head(k)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, k]))
        init_rng = np.random.default_rng(np.random.SeedSequence([config.seed, k, 1]))
        n = len(task.train)
        first_order = rng.permutation(n)

        grads = task_gradient(model, task.train, head, first_order, config)
        probe = _shift_probe(model, config.seed, k)
        before = forward(model, probe)
        pre_weights = {i: model.layers[i].weight.copy() for i in model.adapted_layers}
        init_subspaces = dict(subspaces)
        for i in model.adapted_layers:
            w = model.layers[i].weight
            r = int(config.for_layer(i, "r"))
            if variant.trains_A:
                r = vanilla_rank_for(config, i, *w.shape)
            try:
                adapter = init_from_gradient(
                    grads[i], subspaces[i], r, float(config.for_layer(i, "alpha")), variant,
                    rng=init_rng, init_std=config.lora_init_std, w=w)
            except ArithmeticError as exc:
                raise TrainingError(f"stage {stage + 1} (task {task.name}), layer {i}: {exc}") from exc
            model.attach(i, adapter)
        shift_dev = float(np.max(np.abs(forward(model, probe) - before)))

        opt = _Optimizer(config)
        for epoch in range(config.epochs_per_task):
            order = first_order if epoch == 0 else rng.permutation(n)
            for step, idx in enumerate(_batches(order, config.batch_size)):
                loss, g = loss_and_grads(model, task.train.subset(idx), head)
                if not np.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at stage {stage + 1} (task {task.name}), "
                        f"epoch {epoch + 1}, step {step + 1}")
                opt.step(model.adapters, g)

        adapters = dict(model.adapters)
        model.merge_adapters()

        if variant.builds_task_directions:
            eps_f = None
            for i in model.adapted_layers:
                eps_f = float(config.for_layer(i, "epsilon_f"))
                feats = collect_layer_inputs(model, task.train, i, config.feature_sample_size)
                update = extract_task_directions(feats, subspaces[i], eps_f, config.drop_tol)
                subspaces[i] = append_task_directions(subspaces[i], update, config.drop_tol)

        rows.append(evaluate_all(model, stream, threads))
        checkpoints.append(StageCheckpoint(
            stage + 1, k, model.copy(), adapters, pre_weights, init_subspaces, dict(subspaces), shift_dev))
        clock.append(time.perf_counter() - t0)
        log.info("stage %d (%s): acc=%.4f", stage + 1, task.name, rows[-1][k])

    return RunResult(config, AccuracyGrid(np.vstack(rows)), initial, checkpoints,
                     initial_model, order_of_tasks, clock)


@dataclass(frozen=True)
class LadderRow:
    variant: InitVariant
    transfer: Optional[float]
    average: float
    last: float
    delta_transfer: Optional[float]
    delta_average: float
    delta_last: float
    forgetting: float


def ablation_table(results: Mapping[InitVariant, RunResult],
                   reference: InitVariant = InitVariant.vanilla_lora) -> list[LadderRow]:
    """Transfer/Average/Last per variant with deltas against ``reference``."""
    ref = results[reference].metrics
    rows = []
    for variant in ALL_VARIANTS:
        if variant not in results:
            continue
        res = results[variant]
        m = res.metrics
        dt = None if m.transfer is None or ref.transfer is None else m.transfer - ref.transfer
        rows.append(LadderRow(variant, m.transfer, m.average, m.last, dt,
                              m.average - ref.average, m.last - ref.last, res.forgetting))
    return rows


def run_ablation_ladder(config: RunConfig, stream: TaskStream, model_spec, *,
                        variants: Sequence[InitVariant] = ALL_VARIANTS,
                        threads: int = 1) -> dict[InitVariant, RunResult]:
    """Run every variant on the same stream, model and seeds."""
    return {InitVariant(v): run_continual(config.with_variant(v), stream, model_spec, threads=threads)
            for v in variants}


@dataclass(frozen=True)
class PlasticityRow:
    variant: InitVariant
    task: str
    isolated_acc: float
    sequential_acc: float

    @property
    def drop(self) -> float:
        return self.isolated_acc - self.sequential_acc


def run_plasticity(config: RunConfig, stream: TaskStream, model_spec, *,
                   variants: Sequence[InitVariant] = (InitVariant.keeplora, InitVariant.vanilla_lora),
                   threads: int = 1) -> list[PlasticityRow]:
    """Isolated-vs-sequential accuracy on each task, right after it is learned."""
    rows = []
    for v in variants:
        cfg = config.with_variant(v)
        seq = run_continual(cfg, stream, model_spec, threads=threads)
        for k, task in enumerate(stream):
            iso = run_continual(cfg, stream, model_spec, tasks=[k], threads=threads)
            rows.append(PlasticityRow(InitVariant(v), task.name, float(iso.grid.a[0, k]),
                                      float(seq.grid.a[k, k])))
    return rows
