"""Config-driven experiment runner.

A config is an INI file with sections ``[experiment]``, ``[data]``,
``[train]``, ``[eval]`` and ``[output]``.  Every run writes

    <directory>/resolved_config.ini
    <directory>/trace.jsonl
    <directory>/summary.json
    <directory>/metrics/*.csv

Relative output directories are resolved under ``$DECSSL_OUTPUT_ROOT`` when
it is set.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import datagen
from .datagen import LocalDataset, TheoryGenConfig
from .evaluation import linear_probe
from .featarc import FeatArcConfig, run_featarc
from .fedsim import (
    TOPOLOGIES,
    FedConfig,
    NumericalDivergence,
    TrainingTrace,
    build_topology,
    run_central,
    run_decentralized,
    run_fedavg,
    run_local,
)
from .spectral import representability

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "DECSSL_OUTPUT_ROOT"
ALGORITHMS = ("fedavg", "gossip", "featarc", "local", "central")
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class DataSection:
    source: str = "theory"
    d: int = 256
    K: int = 5
    majority_count: int = 500
    minority_count: int = 20
    tau_scale: float | None = None
    mu_noise: float | None = None
    csv_path: str | None = None
    partition_scheme: str = "natural"
    partition_parameter: float | None = None
    num_sources: int | None = None
    input_shift: bool = False
    test_fraction: float = 0.2


@dataclass
class TrainSection:
    algorithm: str = "fedavg"
    rounds: int = 50
    local_epochs: int | None = 1
    local_steps: int | None = None
    participation_ratio: float = 1.0
    learning_rate: float = 0.01
    batch_size: int = 64
    objective_flavor: str = "linear-ssl"
    gradient_mode: str = "expected"
    temperature: float = 0.5
    embed_dim: int | None = None
    learn_predictor: bool = False
    weighted_average: bool = False
    max_workers: int = 1
    num_clusters: int = 2
    alignment_weight: float = 1.0
    topology: str | None = None
    edge_probability: float = 0.7


@dataclass
class EvalSection:
    probe: bool = True
    probe_epochs: int = 2000
    probe_lr: float = 1.0
    probe_normalize: bool = False
    metrics: str = "global_loss,principal_angle,representability,probe"


@dataclass
class OutputSection:
    directory: str = "runs/default"
    formats: str = "jsonl,json,csv"


@dataclass
class ExperimentConfig:
    master_seed: int = 0
    data: DataSection = None
    train: TrainSection = None
    eval: EvalSection = None
    output: OutputSection = None

    def __post_init__(self):
        self.data = self.data or DataSection()
        self.train = self.train or TrainSection()
        self.eval = self.eval or EvalSection()
        self.output = self.output or OutputSection()


SECTIONS = {"data": DataSection, "train": TrainSection, "eval": EvalSection, "output": OutputSection}


# -- parsing and validation ----------------------------------------------------


def _convert(text: str, annotation: str, name: str):
    text = text.strip()
    optional = "None" in annotation
    if optional and text.lower() in ("", "none"):
        return None
    base = annotation.replace("| None", "").strip()
    try:
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        if base == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
    except ValueError:
        raise ConfigError(name, f"cannot parse {text!r} as {base}") from None
    return text


def _section_from(parser: configparser.ConfigParser, name: str, cls):
    values = {}
    known = {f.name: f for f in fields(cls)}
    if parser.has_section(name):
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"{name}.{key}", "unknown key")
            values[key] = _convert(raw, str(known[key].type), f"{name}.{key}")
    return cls(**values)


def _new_parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case sensitive (K, d)
    return parser


def parse_config(text: str) -> ExperimentConfig:
    parser = _new_parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc).splitlines()[0]) from None
    for section in parser.sections():
        if section != "experiment" and section not in SECTIONS:
            raise ConfigError(section, "unknown section")
    seed = 0
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key != "master_seed":
                raise ConfigError(f"experiment.{key}", "unknown key")
            seed = _convert(raw, "int", "experiment.master_seed")
    cfg = ExperimentConfig(seed, *(_section_from(parser, name, cls) for name, cls in SECTIONS.items()))
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("file", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)


def validate(cfg: ExperimentConfig) -> None:
    """Check cross-field constraints before any work starts."""
    data, train = cfg.data, cfg.train
    if data.source not in ("theory", "csv"):
        raise ConfigError("data.source", "must be 'theory' or 'csv'")
    if data.source == "csv":
        if not data.csv_path:
            raise ConfigError("data.csv_path", "required when data.source = csv")
        if data.partition_scheme == "natural":
            raise ConfigError("data.partition_scheme", "csv data needs an explicit partition scheme")
    elif data.csv_path:
        raise ConfigError("data.csv_path", "give either theory parameters or a csv path, not both")
    if data.partition_scheme not in ("natural", "dirichlet", "skewness", "feature-cluster"):
        raise ConfigError("data.partition_scheme", f"unknown scheme {data.partition_scheme!r}")
    if data.partition_scheme in ("dirichlet", "skewness") and data.partition_parameter is None:
        raise ConfigError("data.partition_parameter", f"required by the {data.partition_scheme} scheme")
    if not 0 <= data.test_fraction < 1:
        raise ConfigError("data.test_fraction", "must lie in [0, 1)")
    if data.source == "theory":
        try:
            TheoryGenConfig(data.d, data.K, data.majority_count, data.minority_count,
                            data.tau_scale, data.mu_noise, cfg.master_seed)
        except ValueError as exc:
            raise ConfigError("data", str(exc)) from None
    if train.algorithm not in ALGORITHMS:
        raise ConfigError("train.algorithm", f"must be one of {', '.join(ALGORITHMS)}")
    if train.algorithm == "gossip":
        if train.topology is None:
            raise ConfigError("train.topology", "required when train.algorithm = gossip")
        if train.topology not in TOPOLOGIES:
            raise ConfigError("train.topology", f"must be one of {', '.join(TOPOLOGIES)}")
    elif train.topology is not None:
        raise ConfigError("train.topology", "only valid for the gossip algorithm")
    if train.local_steps is not None:
        train.local_epochs = None
    try:
        fed_config(cfg)
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from None


def fed_config(cfg: ExperimentConfig) -> FedConfig:
    t = cfg.train
    common = dict(
        rounds=t.rounds, local_epochs=t.local_epochs, local_steps=t.local_steps,
        participation_ratio=t.participation_ratio, learning_rate=t.learning_rate, batch_size=t.batch_size,
        objective_flavor=t.objective_flavor, gradient_mode=t.gradient_mode, temperature=t.temperature,
        embed_dim=t.embed_dim, learn_predictor=t.learn_predictor, weighted_average=t.weighted_average,
        seed=cfg.master_seed, max_workers=t.max_workers,
    )
    if t.algorithm == "featarc":
        return FeatArcConfig(num_clusters=t.num_clusters, alignment_weight=t.alignment_weight, **common)
    return FedConfig(**common)


def resolved_text(cfg: ExperimentConfig) -> str:
    """INI text with every default materialized; parses back to an equal config."""
    parser = _new_parser()
    parser["experiment"] = {"master_seed": str(cfg.master_seed)}
    for name in SECTIONS:
        section = getattr(cfg, name)
        parser[name] = {f.name: "none" if getattr(section, f.name) is None else str(getattr(section, f.name))
                        for f in fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def output_dir(cfg: ExperimentConfig, override=None) -> Path:
    path = Path(override or cfg.output.directory)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


# -- data ------------------------------------------------------------------


def build_sources(cfg: ExperimentConfig) -> list[LocalDataset]:
    data, seed = cfg.data, cfg.master_seed
    if data.source == "theory":
        sources = datagen.generate_theory_dataset(TheoryGenConfig(
            data.d, data.K, data.majority_count, data.minority_count, data.tau_scale, data.mu_noise, seed))
        if data.partition_scheme == "natural":
            return datagen.apply_input_shift(sources, seed) if data.input_shift else sources
        pooled = datagen.concatenate(sources)
    else:
        pooled = datagen.load_dataset_csv(data.csv_path)
    K = data.num_sources or data.K
    if data.partition_scheme == "dirichlet":
        spec = datagen.partition_dirichlet(pooled.labels, K, data.partition_parameter, seed)
    elif data.partition_scheme == "skewness":
        spec = datagen.partition_skewness(pooled.labels, K, data.partition_parameter, seed)
    elif data.partition_scheme == "feature-cluster":
        spec = datagen.partition_feature_clusters(pooled.samples, K, seed, pooled.labels)
    else:
        raise ConfigError("data.partition_scheme", f"{data.partition_scheme!r} needs theory data")
    sources = spec.apply(pooled.samples, pooled.labels, pooled.num_classes)
    return datagen.apply_input_shift(sources, seed) if data.input_shift else sources


def split_train_test(sources, fraction: float, seed: int):
    """Seeded per-source split; every source keeps at least one training sample."""
    train, test = [], []
    for ds in sources:
        perm = datagen.source_rng(seed, 4, ds.source_id).permutation(len(ds))
        cut = min(int(round(fraction * len(ds))), max(len(ds) - 1, 0))
        test.append(ds.subset(np.sort(perm[:cut])))
        train.append(ds.subset(np.sort(perm[cut:])))
    return train, test


# -- running -----------------------------------------------------------------


def train(cfg: ExperimentConfig, sources):
    """Dispatch to the configured algorithm; returns ``(trace, evaluated models, assignment)``.

    ``assignment[i]`` is the index of the model that serves source ``i``.
    """
    fed = fed_config(cfg)
    algo = cfg.train.algorithm
    K = len(sources)
    if algo == "fedavg":
        trace = run_fedavg(sources, fed)
        return trace, trace.final_models, [0] * K
    if algo == "central":
        trace = run_central(sources, fed)
        return trace, trace.final_models, [0] * K
    if algo == "local":
        trace = run_local(sources, fed)
        return trace, trace.final_models, list(range(K))
    if algo == "gossip":
        topo = build_topology(cfg.train.topology, K, cfg.train.edge_probability, cfg.master_seed)
        trace = run_decentralized(sources, topo, fed)
        return trace, trace.final_models, list(range(K))
    trace, state = run_featarc(sources, fed)
    return trace, state.cluster_models, list(state.assignments)


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if np.isfinite(v) else None
    return value


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


def _write_trace(out: Path, trace: TrainingTrace, seed: int) -> None:
    with open(out / "trace.jsonl", "w") as fh:
        for rec in trace.records:
            fh.write(json.dumps(_jsonable({**rec, "master_seed": seed}), sort_keys=True) + "\n")
    rows = [(r["round"], r.get("mean_local_loss"), r.get("global_loss"), r.get("principal_angle"))
            for r in trace.records]
    _write_csv(out / "metrics" / "rounds.csv", ["round", "mean_local_loss", "global_loss", "principal_angle"], rows)


def execute(cfg: ExperimentConfig, out: Path) -> dict:
    """Run data, training and evaluation; write every artifact; return the summary."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics").mkdir(exist_ok=True)
    (out / "models").mkdir(exist_ok=True)
    (out / "resolved_config.ini").write_text(resolved_text(cfg))
    metrics = {m.strip() for m in cfg.eval.metrics.split(",") if m.strip()}
    sources = build_sources(cfg)
    train_sets, test_sets = split_train_test(sources, cfg.data.test_fraction, cfg.master_seed)
    summary: dict[str, Any] = {
        "master_seed": cfg.master_seed,
        "algorithm": cfg.train.algorithm,
        "num_sources": len(sources),
        "source_sizes": [len(ds) for ds in train_sets],
        "status": "ok",
    }
    try:
        trace, models, assignment = train(cfg, train_sets)
    except NumericalDivergence as exc:
        if exc.trace is not None:
            _write_trace(out, exc.trace, cfg.master_seed)
        summary.update(status="diverged", error=str(exc), rounds_completed=len(exc.trace.records) if exc.trace else 0)
        (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
        raise
    _write_trace(out, trace, cfg.master_seed)
    for i, model in enumerate(models):
        datagen.save_matrix_csv(model.weight, out / "models" / f"model_{i}.csv")
    last = trace.records[-1]
    summary["rounds_completed"] = len(trace.records)
    summary["assignments"] = assignment
    if "global_loss" in metrics:
        summary["final_global_loss"] = last.get("global_loss")
    if "principal_angle" in metrics:
        summary["final_principal_angle"] = last.get("principal_angle")
    if "representability" in metrics and cfg.data.source == "theory":
        K = min(cfg.data.K, models[0].d)
        rep = [[float(v) for v in representability(m, range(K)).values] for m in models]
        summary["representability"] = rep
        _write_csv(out / "metrics" / "representability.csv", ["model", *[f"e{i}" for i in range(K)]],
                   [[i, *r] for i, r in enumerate(rep)])
    if "probe" in metrics and cfg.eval.probe and all(len(t) for t in test_sets):
        results = [linear_probe(models[assignment[i]], train_sets[i], test_sets[i], epochs=cfg.eval.probe_epochs,
                                lr=cfg.eval.probe_lr, seed=cfg.master_seed, normalize=cfg.eval.probe_normalize,
                                num_classes=sources[0].num_classes)
                   for i in range(len(sources))]
        summary["probe"] = [r.to_dict() for r in results]
        summary["probe_mean_accuracy"] = float(np.mean([r.top1_accuracy for r in results]))
        per_class_rows = []
        for i, r in enumerate(results):
            for c, acc in enumerate(r.per_class_accuracy):
                per_class_rows.append([i, c, None if np.isnan(acc) else float(acc)])
        _write_csv(out / "metrics" / "probe_per_class.csv", ["source", "class", "accuracy"], per_class_rows)
    (out / "summary.json").write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    return summary


def run_experiment(config_path, output_override=None) -> int:
    """Exit status: 0 success, 1 config error, 2 numerical divergence."""
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        log.error("config error in %s", exc)
        return EXIT_CONFIG
    out = output_dir(cfg, output_override)
    try:
        execute(cfg, out)
    except ConfigError as exc:
        log.error("config error in %s", exc)
        return EXIT_CONFIG
    except NumericalDivergence as exc:
        log.error("diverged: %s", exc)
        return EXIT_DIVERGED
    log.info("wrote %s", out)
    return EXIT_OK


# -- sweeps ------------------------------------------------------------------


@dataclass
class SweepSpec:
    base: str
    parameter: str
    values: list[str]
    workers: int = 1


def load_sweep(path) -> SweepSpec:
    """``[sweep]`` section with ``base`` (config path), ``parameter``
    (``section.key``), comma-separated ``values`` and optional ``workers``."""
    parser = _new_parser()
    try:
        parser.read_string(Path(path).read_text())
    except (OSError, configparser.Error) as exc:
        raise ConfigError("file", str(exc).splitlines()[0]) from None
    if not parser.has_section("sweep"):
        raise ConfigError("sweep", "missing [sweep] section")
    allowed = {"base", "parameter", "values", "workers"}
    for key in parser["sweep"]:
        if key not in allowed:
            raise ConfigError(f"sweep.{key}", "unknown key")
    for key in ("base", "parameter", "values"):
        if key not in parser["sweep"]:
            raise ConfigError(f"sweep.{key}", "required")
    s = parser["sweep"]
    base = Path(s["base"])
    if not base.is_absolute():
        base = Path(path).parent / base
    values = [v.strip() for v in s["values"].split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep.values", "no values given")
    workers = _convert(s.get("workers", "1"), "int", "sweep.workers")
    return SweepSpec(str(base), s["parameter"].strip(), values, workers)


def sweep_cells(spec: SweepSpec) -> list[tuple[str, str]]:
    """One ``(label, config text)`` pair per value, validated up front."""
    section, _, key = spec.parameter.partition(".")
    if section not in SECTIONS and section != "experiment":
        raise ConfigError("sweep.parameter", f"unknown section {section!r}")
    parser = _new_parser()
    parser.read_string(Path(spec.base).read_text())
    base_dir = parser.get("output", "directory", fallback=OutputSection.directory)
    cells = []
    for i, value in enumerate(spec.values):
        cell = _new_parser()
        cell.read_dict(parser)
        if not cell.has_section(section):
            cell.add_section(section)
        cell[section][key] = value
        if not cell.has_section("output"):
            cell.add_section("output")
        label = f"cell_{i:03d}"
        cell["output"]["directory"] = str(Path(base_dir) / label)
        buf = io.StringIO()
        cell.write(buf)
        parse_config(buf.getvalue())
        cells.append((label, buf.getvalue()))
    return cells


def _run_cell(text: str) -> tuple[int, dict | None]:
    cfg = parse_config(text)
    try:
        return EXIT_OK, execute(cfg, output_dir(cfg))
    except NumericalDivergence:
        return EXIT_DIVERGED, None


def run_sweep(path) -> int:
    try:
        spec = load_sweep(path)
        cells = sweep_cells(spec)
    except ConfigError as exc:
        log.error("config error in %s", exc)
        return EXIT_CONFIG
    texts = [t for _, t in cells]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(_run_cell, texts))
    else:
        results = [_run_cell(t) for t in texts]
    first = parse_config(texts[0])
    root = output_dir(first).parent
    rows = []
    for (label, _), value, (status, summary) in zip(cells, spec.values, results):
        summary = summary or {}
        rows.append([label, spec.parameter, value, "ok" if status == EXIT_OK else "diverged",
                     summary.get("final_global_loss"), summary.get("probe_mean_accuracy")])
    _write_csv(root / "sweep.csv", ["cell", "parameter", "value", "status", "final_global_loss",
                                    "probe_mean_accuracy"], rows)
    return EXIT_DIVERGED if any(s == EXIT_DIVERGED for s, _ in results) else EXIT_OK
