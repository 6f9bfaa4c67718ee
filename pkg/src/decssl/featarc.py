"""Clustered aggregation by feature alignment with alignment-regularized local updates."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datagen import LocalDataset, source_rng
from .fedsim import (
    TAG_EVAL,
    FedConfig,
    NumericalDivergence,
    TrainingTrace,
    _local_job,
    _map,
    _attach,
    _Monitor,
    _num_classes,
    average_models,
    evaluate_loss,
    initial_model,
    sample_participants,
    train_local,
)
from .objectives import LinearEncoder, mean_cosine_distance


@dataclass
class FeatArcConfig(FedConfig):
    num_clusters: int = 2
    alignment_weight: float = 1.0
    pin_assignments: list[int] | None = None

    def __post_init__(self):
        super().__post_init__()
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be at least 1")
        if self.alignment_weight < 0:
            raise ValueError("alignment_weight must be non-negative")


@dataclass
class ClusterState:
    cluster_models: list[LinearEncoder]
    local_models: list[LinearEncoder]
    assignments: list[int]
    round: int = 0
    last_alignment: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        C, K = len(self.cluster_models), len(self.local_models)
        if len(self.assignments) != K:
            raise ValueError("need one assignment per local model")
        if any(not 0 <= a < C for a in self.assignments):
            raise ValueError(f"assignments must lie in [0, {C})")

    @property
    def C(self) -> int:
        return len(self.cluster_models)

    @property
    def K(self) -> int:
        return len(self.local_models)


def alignment_row(cluster_models: Sequence[LinearEncoder], local_model: LinearEncoder,
                  dataset: LocalDataset) -> np.ndarray:
    local = local_model.features(dataset.samples)
    row = np.zeros(len(cluster_models))
    for j, model in enumerate(cluster_models):
        value = mean_cosine_distance(model.features(dataset.samples), local)
        if value is None:
            warnings.warn(f"source {dataset.source_id}: every feature is zero for cluster {j}; alignment set to 0",
                          RuntimeWarning, stacklevel=2)
            value = 0.0
        row[j] = value
    return row


def alignment_matrix(state: ClusterState, sources: Sequence[LocalDataset]) -> np.ndarray:
    """``A[i, j]``: mean cosine distance between cluster-j and local-i features on source i."""
    return np.stack([alignment_row(state.cluster_models, state.local_models[i], ds)
                     for i, ds in enumerate(sources)])


def assign_clusters(A, pin: Sequence[int] | None = None) -> list[int]:
    if pin is not None:
        return [int(p) for p in pin]
    A = np.atleast_2d(np.asarray(A, dtype=float))
    # np.argmin returns the first minimum, i.e. the lowest cluster index on ties
    return [int(i) for i in np.argmin(A, axis=1)]


def local_update_far(model: LinearEncoder, dataset: LocalDataset, steps: int, lr: float, align_weight: float,
                     flavor: str = "linear-ssl", rng: np.random.Generator | None = None,
                     **options) -> LinearEncoder:
    """Local SSL steps from ``model`` regularized toward its frozen features."""
    if align_weight < 0:
        raise ValueError("align_weight must be non-negative")
    if rng is None:
        rng = np.random.default_rng(0)
    return train_local(model, dataset, steps, lr, flavor, rng, anchor=model.copy(),
                       align_weight=align_weight, **options)[0]


def _featarc_round(state: ClusterState, sources: Sequence[LocalDataset], cfg: FeatArcConfig, round_index: int):
    K, C = len(sources), state.C
    if state.K != K:
        raise ValueError(f"state holds {state.K} local models for {K} sources")
    members = sample_participants(K, cfg, round_index)
    rows = {i: alignment_row(state.cluster_models, state.local_models[i], sources[i]) for i in members}
    if cfg.pin_assignments is not None:
        chosen = {i: int(cfg.pin_assignments[i]) for i in members}
    else:
        chosen = {i: assign_clusters(rows[i][None, :])[0] for i in members}

    def job(i):
        start = state.cluster_models[chosen[i]]
        return _local_job(start, sources[i], cfg, round_index, anchor=start, align_weight=cfg.alignment_weight)

    results = dict(zip(members, _map(job, members, cfg.max_workers)))
    local_models = list(state.local_models)
    assignments = list(state.assignments)
    for i in members:
        local_models[i] = results[i][0]
        assignments[i] = chosen[i]
    cluster_models = list(state.cluster_models)
    sizes = [0] * C
    for j in range(C):
        group = [i for i in members if chosen[i] == j]
        sizes[j] = len(group)
        if group:
            cluster_models[j] = average_models([results[i][0] for i in group], [1.0 / len(group)] * len(group))
    A = np.full((K, C), np.nan)
    for i in members:
        A[i] = rows[i]
    new_state = ClusterState(cluster_models, local_models, assignments, round_index + 1, A)
    return new_state, members, [results[i][1] for i in members], sizes


def featarc_round(state: ClusterState, sources: Sequence[LocalDataset], cfg: FeatArcConfig,
                  round_index: int) -> ClusterState:
    """Assign participants by feature alignment, train locally, average within clusters."""
    return _featarc_round(state, sources, cfg, round_index)[0]


def initial_state(sources: Sequence[LocalDataset], cfg: FeatArcConfig,
                  init: LinearEncoder | None = None) -> ClusterState:
    K = len(sources)
    if cfg.num_clusters > K:
        raise ValueError(f"num_clusters={cfg.num_clusters} exceeds the number of sources {K}")
    if cfg.pin_assignments is not None and len(cfg.pin_assignments) != K:
        raise ValueError("pin_assignments needs one entry per source")
    start = init.copy() if init is not None else initial_model(sources[0].dim, cfg, K, _num_classes(sources))
    return ClusterState([start.copy() for _ in range(cfg.num_clusters)], [start.copy() for _ in range(K)], [0] * K)


def _record(monitor: _Monitor, state: ClusterState, sources, cfg: FeatArcConfig, t: int, losses, members) -> dict:
    rec = monitor.record(t, losses, state.cluster_models[0], participants=members)
    if state.C > 1:
        # each source is scored with the cluster model that serves it
        total = sum(len(ds) for ds in sources)
        with np.errstate(over="ignore", invalid="ignore"):
            value = float(sum(
                len(ds) / total * evaluate_loss(state.cluster_models[state.assignments[i]], ds, cfg,
                                                source_rng(cfg.seed, TAG_EVAL, t, i))
                for i, ds in enumerate(sources)
            ))
        if not np.isfinite(value):
            raise NumericalDivergence(-1, "non-finite global loss")
        rec["global_loss"] = value
        rec["cluster_angles"] = [monitor.angle(m) for m in state.cluster_models] if monitor.linear else None
    rec["assignments"] = list(state.assignments)
    rec["mean_alignment"] = [
        None if np.isnan(state.last_alignment[i, 0]) else float(state.last_alignment[i, state.assignments[i]])
        for i in range(state.K)
    ]
    return rec


def run_featarc(sources: Sequence[LocalDataset], cfg: FeatArcConfig, init: LinearEncoder | None = None,
                state: ClusterState | None = None) -> tuple[TrainingTrace, ClusterState]:
    """T FeatARC rounds.

    By default every cluster and local model starts from one seeded
    initialization, so round 0 ties and sends every source to cluster 0.
    Pass ``state`` to start from distinct cluster models instead.
    """
    if state is None:
        state = initial_state(sources, cfg, init)
    elif state.K != len(sources) or state.C != cfg.num_clusters:
        raise ValueError("state does not match the sources or num_clusters")
    monitor = _Monitor(sources, cfg, state.cluster_models[0].m)
    trace = TrainingTrace()
    for t in range(cfg.rounds):
        try:
            state, members, losses, sizes = _featarc_round(state, sources, cfg, t)
            rec = _record(monitor, state, sources, cfg, t, losses, members)
        except NumericalDivergence as exc:
            raise _attach(exc, trace, state.cluster_models)
        rec["cluster_sizes"] = sizes
        trace.records.append(rec)
    trace.final_models = list(state.cluster_models)
    return trace, state
