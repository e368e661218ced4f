"""YAML run configuration: RunConfig keys at the top level plus stream, model and spectra sections."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from .model import ACTIVATIONS, ModelSpec
from .tasks import DEFAULT_NOISE, TaskStream, gen_gaussian_tasks, load_csv_tasks
from .trainer import ConfigError, RunConfig

REQUIRED = ("epsilon_w", "epsilon_f", "r", "alpha", "lr", "batch_size", "epochs_per_task", "variant", "seed")
SECTIONS = ("stream", "model", "spectra")


@dataclass(frozen=True)
class StreamSpec:
    kind: str = "gaussian"
    seed: Optional[int] = None
    n_tasks: int = 5
    d_in: int = 32
    classes_per_task: int = 4
    samples_per_class: int = 50
    subspace_overlap: float = 0.0
    subspace_dim: Optional[int] = None
    noise: float = DEFAULT_NOISE
    mean_norm: float = 1.0
    paths: tuple[str, ...] = ()
    classes: Optional[tuple[int, ...]] = None


@dataclass(frozen=True)
class SpectraSpec:
    # "planted": synthetic classifier; "model": a layer of the configured base model.
    source: str = "planted"
    layer: int = 0
    seed: int = 0
    d: int = 32
    general_energy_rank: int = 4
    specific_direction_count: int = 4
    samples_per_class: int = 50
    noise: float = 0.1
    mean_norm: float = 1.0
    general_scale: float = 10.0
    specific_scale: float = 0.5
    ks: Optional[tuple[int, ...]] = None
    # Acceptance thresholds of the truncation check, in accuracy fractions.
    specific_drop_min: float = 0.20
    general_tolerance: float = 0.02


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig
    stream: StreamSpec
    model: ModelSpec
    spectra: SpectraSpec = field(default_factory=SpectraSpec)
    base_dir: Path = Path(".")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, run=replace(self.run, seed=seed))

    @property
    def stream_seed(self) -> int:
        return self.run.seed if self.stream.seed is None else self.stream.seed

    @property
    def model_spec(self) -> ModelSpec:
        return self.model if self.model.seed is not None else replace(self.model, seed=self.run.seed)

    def build_stream(self) -> TaskStream:
        s = self.stream
        if s.kind == "csv":
            paths = [p if Path(p).is_absolute() else self.base_dir / p for p in s.paths]
            return load_csv_tasks(paths, self.stream_seed, s.classes)
        return gen_gaussian_tasks(self.stream_seed, s.n_tasks, s.d_in, s.classes_per_task,
                                  s.samples_per_class, s.subspace_overlap, subspace_dim=s.subspace_dim,
                                  noise=s.noise, mean_norm=s.mean_norm)

    def echo(self) -> dict[str, Any]:
        """Plain-data view of the resolved configuration (for manifests)."""
        run = {f.name: getattr(self.run, f.name) for f in fields(self.run)}
        run["variant"] = self.run.variant.value
        run["adam_betas"] = list(self.run.adam_betas)
        run["layer_overrides"] = {int(k): dict(v) for k, v in self.run.layer_overrides.items()}
        out = dict(run)
        out["stream"] = _plain(self.stream)
        out["stream"]["seed"] = self.stream_seed
        out["model"] = _plain(self.model_spec)
        out["spectra"] = _plain(self.spectra)
        return out


def _plain(obj) -> dict[str, Any]:
    return {f.name: (list(v) if isinstance(v := getattr(obj, f.name), tuple) else v) for f in fields(obj)}


def _section(cls, raw, name, tuple_fields=()):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(name, "must be a mapping")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
    kw = dict(raw)
    for key in tuple_fields:
        if kw.get(key) is not None:
            if not isinstance(kw[key], (list, tuple)):
                raise ConfigError(f"{name}.{key}", "must be a list")
            kw[key] = tuple(kw[key])
    return cls(**kw)


def _number(raw, key, kind):
    v = raw[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(key, f"expected a number, got {v!r}")
    if kind is int:
        if float(v) != int(v):
            raise ConfigError(key, f"expected an integer, got {v!r}")
        return int(v)
    return float(v)


def parse_config(raw: Any, base_dir: Path = Path(".")) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a mapping")
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(key, "required field is missing")
    run_fields = {f.name: f for f in fields(RunConfig)}
    kw: dict[str, Any] = {}
    for key, value in raw.items():
        if key in SECTIONS:
            continue
        if key not in run_fields:
            raise ConfigError(key, "unknown key")
        if key in ("r", "batch_size", "epochs_per_task", "seed", "feature_sample_size", "grad_init_batches"):
            kw[key] = _number(raw, key, int)
        elif key in ("epsilon_w", "epsilon_f", "alpha", "lr", "weight_decay", "adam_eps", "drop_tol"):
            kw[key] = _number(raw, key, float)
        elif key == "vanilla_rank":
            kw[key] = None if value is None else _number(raw, key, int)
        elif key == "lora_init_std":
            kw[key] = None if value is None else _number(raw, key, float)
        elif key == "adam_betas":
            if not isinstance(value, (list, tuple)) or len(value) != 2:
                raise ConfigError(key, "expected two numbers")
            kw[key] = (float(value[0]), float(value[1]))
        elif key == "layer_overrides":
            if not isinstance(value, dict):
                raise ConfigError(key, "must map layer index to settings")
            kw[key] = {int(k): dict(v) for k, v in value.items()}
        else:
            kw[key] = value
    try:
        run = RunConfig(**kw)
        stream = _section(StreamSpec, raw.get("stream"), "stream", ("paths", "classes"))
        model = _section(ModelSpec, raw.get("model"), "model", ("hidden", "adapted_layers"))
        spectra = _section(SpectraSpec, raw.get("spectra"), "spectra", ("ks",))
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from None
    if stream.kind not in ("gaussian", "csv"):
        raise ConfigError("stream.kind", "must be 'gaussian' or 'csv'")
    if stream.kind == "csv" and not stream.paths:
        raise ConfigError("stream.paths", "csv streams need at least one file")
    if spectra.source not in ("planted", "model"):
        raise ConfigError("spectra.source", "must be 'planted' or 'model'")
    if model.activation not in ACTIVATIONS:
        raise ConfigError("model.activation", f"must be one of {ACTIVATIONS}")
    n_layers = len(model.hidden) + 1
    for i in model.adapted_layers:
        if not 0 <= i < n_layers - 1:
            raise ConfigError("model.adapted_layers", f"layer {i} is not a hidden weight matrix")
    if not 0 < model.spectral_decay <= 1:
        raise ConfigError("model.spectral_decay", "must lie in (0, 1]")
    return ExperimentConfig(run, stream, model, spectra, base_dir)


def load_config(path, seed_override: Optional[int] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"invalid YAML in {path}: {exc}") from None
    cfg = parse_config(raw, path.parent)
    return cfg if seed_override is None else cfg.with_seed(seed_override)
