"""Command-line front end: run, ablation, plasticity, spectra and heatmap experiments."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import atomic_write_bytes, encode, stage_payload
from .config import ExperimentConfig, load_config
from .metrics import compute_metrics, interference_heatmap, spectra_analysis
from .model import build_model
from .tasks import gen_planted_spectrum_model
from .trainer import (
    ConfigError,
    RunResult,
    ablation_table,
    run_ablation_ladder,
    run_continual,
    run_plasticity,
)

log = logging.getLogger("keeplora")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def fmt(v) -> str:
    """CSV cell: floats with 17 significant digits, None as an empty cell."""
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def csv_bytes(header: Sequence[str], rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue().encode("utf-8")


class Outputs:
    """Collects files in memory and writes them (each atomically) only once everything succeeded."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.files: dict[str, bytes] = {}

    def add(self, rel: str, data: bytes) -> str:
        self.files[rel] = data
        return rel

    def add_csv(self, rel, header, rows) -> str:
        return self.add(rel, csv_bytes(header, rows))

    def commit(self, manifest: Optional[dict] = None) -> None:
        for rel, data in self.files.items():
            atomic_write_bytes(self.out_dir / rel, data)
        if manifest is not None:
            manifest["outputs"] = sorted(self.files)
            missing = [p for p in manifest["outputs"] if not (self.out_dir / p).exists()]
            if missing:
                raise RuntimeError(f"manifest references missing files: {missing}")
            atomic_write_bytes(self.out_dir / "manifest.json",
                               (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def grid_rows(result: RunResult, stream):
    for i, k in enumerate(result.trained_tasks):
        for t, task in enumerate(stream):
            yield i + 1, task.name, float(result.grid.a[i, t])


def metrics_rows(result: RunResult, stream):
    rep = compute_metrics(result.grid)
    for task, m in zip(stream, rep.per_task):
        yield task.name, m.transfer, m.average, m.last
    yield "mean", rep.transfer, rep.average, rep.last


def _manifest(cfg: ExperimentConfig, stream, command, threads, **extra) -> dict:
    out = {
        "command": command,
        "version": __version__,
        "config": cfg.echo(),
        "stream_fingerprint": stream.fingerprint(),
        "threads": threads,
    }
    out.update(extra)
    return out


def cmd_run(cfg: ExperimentConfig, out: Outputs, threads: int) -> None:
    stream = cfg.build_stream()
    res = run_continual(cfg.run, stream, cfg.model_spec, threads=threads)
    out.add_csv("grid.csv", ("stage", "task", "accuracy"), grid_rows(res, stream))
    out.add_csv("initial.csv", ("task", "accuracy"),
                ((t.name, float(a)) for t, a in zip(stream, res.initial)))
    out.add_csv("metrics.csv", ("task", "transfer", "average", "last"), metrics_rows(res, stream))
    ckpts = [out.add(f"checkpoints/stage{c.stage:03d}.klra", encode(stage_payload(c, cfg.run)))
             for c in res.checkpoints]
    out.commit(_manifest(cfg, stream, "run", threads, checkpoints=ckpts,
                         wall_clock_per_stage=res.wall_clock,
                         backward_forgetting_derived=res.forgetting))


def cmd_ablation(cfg: ExperimentConfig, out: Outputs, threads: int) -> None:
    stream = cfg.build_stream()
    results = run_ablation_ladder(cfg.run, stream, cfg.model_spec, threads=threads)
    table = ablation_table(results)
    out.add_csv("ablation.csv",
                ("variant", "transfer", "average", "last", "delta_transfer", "delta_average", "delta_last"),
                ((r.variant.value, r.transfer, r.average, r.last, r.delta_transfer, r.delta_average,
                  r.delta_last) for r in table))
    for v, res in results.items():
        out.add_csv(f"grids/{v.value}.csv", ("stage", "task", "accuracy"), grid_rows(res, stream))
    out.commit(_manifest(cfg, stream, "ablation", threads,
                         backward_forgetting_derived={r.variant.value: r.forgetting for r in table},
                         wall_clock_per_stage={v.value: r.wall_clock for v, r in results.items()}))


def cmd_plasticity(cfg: ExperimentConfig, out: Outputs, threads: int) -> None:
    stream = cfg.build_stream()
    rows = run_plasticity(cfg.run, stream, cfg.model_spec, threads=threads)
    out.add_csv("plasticity.csv", ("variant", "task", "isolated_acc", "sequential_acc", "drop"),
                ((r.variant.value, r.task, r.isolated_acc, r.sequential_acc, r.drop) for r in rows))
    out.commit(_manifest(cfg, stream, "plasticity", threads))


def spectra_inputs(cfg: ExperimentConfig):
    """``(w, tasks, heads, model, stream)`` for the configured spectra source."""
    sp = cfg.spectra
    if sp.source == "planted":
        w, general, specific = gen_planted_spectrum_model(
            sp.seed, sp.d, sp.general_energy_rank, sp.specific_direction_count,
            samples_per_class=sp.samples_per_class, noise=sp.noise, mean_norm=sp.mean_norm,
            general_scale=sp.general_scale, specific_scale=sp.specific_scale)
        return w, [general, specific], None, None, None
    stream = cfg.build_stream()
    model = build_model(cfg.model_spec, stream[0].train.inputs.shape[1], stream.total_classes)
    if not 0 <= sp.layer < len(model.layers):
        raise ConfigError("spectra.layer", f"model has {len(model.layers)} layers")
    heads = [stream.head(i) for i in range(len(stream))]
    return model.layers[sp.layer].weight, list(stream), heads, model, stream


def cmd_spectra(cfg: ExperimentConfig, out: Outputs, threads: int) -> None:
    w, tasks, heads, model, stream = spectra_inputs(cfg)
    ks = cfg.spectra.ks or tuple(range(1, min(w.shape) + 1))
    rows = spectra_analysis(w, tasks, ks, model=model, layer=cfg.spectra.layer, heads=heads)
    out.add_csv("spectra.csv", ("k", "task", "accuracy"), rows)
    extra = {} if stream is None else {"stream_fingerprint": stream.fingerprint()}
    out.commit({"command": "spectra", "version": __version__, "config": cfg.echo(), **extra})


def cmd_heatmap(cfg: ExperimentConfig, out: Outputs, threads: int) -> None:
    stream = cfg.build_stream()
    res = run_continual(cfg.run, stream, cfg.model_spec, threads=threads)
    hm = interference_heatmap(res.checkpoints, stream)
    rows = [list(map(float, r)) for r in hm.norms]
    rows.append(list(map(float, hm.column_means)))
    out.add_csv("heatmap.csv", [t.name for t in stream], rows)
    out.commit(_manifest(cfg, stream, "heatmap", threads,
                         off_diagonal_mean=hm.off_diagonal_mean(), max_raw_norm=float(hm.raw.max())))


COMMANDS = {
    "run": cmd_run,
    "ablation": cmd_ablation,
    "plasticity": cmd_plasticity,
    "spectra": cmd_spectra,
    "heatmap": cmd_heatmap,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="keeplora", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=fn.__name__.replace("cmd_", "") + " experiment")
        sp.add_argument("--config", required=True, type=Path, help="YAML run configuration")
        sp.add_argument("--out", type=Path, default=None,
                        help="output directory (default: $KEEPLORA_OUT or ./out)")
        sp.add_argument("--threads", type=int, default=1, help="parallel evaluation workers")
        sp.add_argument("--seed-override", type=int, default=None, help="replace the run seed")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = args.out or Path(os.environ.get("KEEPLORA_OUT", "out"))
    if args.threads < 1:
        print("error: --threads: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed_override)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](cfg, Outputs(out_dir), args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
