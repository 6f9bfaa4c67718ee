"""FedAvg and gossip training of linear encoders over decentralized sources.

Random streams are keyed so that no result depends on scheduling:

* participant sampling: ``(seed, 0, round)``
* local update of source ``k``: ``(seed, 1, round, k)``
* model initialization: ``(seed, 2)``
* loss evaluation: ``(seed, 3, round)``

Aggregation always accumulates in ascending source order.
"""

from __future__ import annotations

import json
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import objectives as obj
from .datagen import LocalDataset, concatenate, source_rng
from .evaluation import weight_distance
from .objectives import Gradient, LinearEncoder
from .spectral import empirical_covariance, global_covariance, principal_angle, ssl_minimizer_oracle

FLAVORS = ("linear-ssl", "infonce", "simsiam", "supervised-softmax")
GRADIENT_MODES = ("expected", "stochastic")
TOPOLOGIES = ("star", "cycle", "binary-tree", "random-graph", "complete")

TAG_SAMPLE, TAG_LOCAL, TAG_INIT, TAG_EVAL = 0, 1, 2, 3


class NumericalDivergence(RuntimeError):
    """A local loss or weight became non-finite."""

    def __init__(self, source_id: int, message: str = "non-finite loss"):
        super().__init__(f"source {source_id}: {message}")
        self.source_id = source_id
        self.trace: TrainingTrace | None = None


@dataclass
class FedConfig:
    rounds: int = 50
    local_epochs: int | None = 1
    local_steps: int | None = None
    participation_ratio: float = 1.0
    learning_rate: float = 0.01
    batch_size: int = 64
    objective_flavor: str = "linear-ssl"
    gradient_mode: str = "expected"
    temperature: float = obj.DEFAULT_TEMPERATURE
    embed_dim: int | None = None
    learn_predictor: bool = False
    weighted_average: bool = False
    seed: int = 0
    max_workers: int = 1

    def __post_init__(self):
        if (self.local_epochs is None) == (self.local_steps is None):
            raise ValueError("set exactly one of local_epochs and local_steps")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if (self.local_epochs or 0) < 0 or (self.local_steps or 0) < 0:
            raise ValueError("local budget must be non-negative")
        if not 0 < self.participation_ratio <= 1:
            raise ValueError("participation_ratio must lie in (0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.objective_flavor not in FLAVORS:
            raise ValueError(f"unknown objective_flavor {self.objective_flavor!r}")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"unknown gradient_mode {self.gradient_mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def steps_for(self, n: int) -> int:
        if self.local_steps is not None:
            return self.local_steps
        return math.ceil(n / self.batch_size) * self.local_epochs

    def num_participants(self, K: int) -> int:
        return max(1, math.ceil(self.participation_ratio * K - 1e-12))


@dataclass
class TrainingTrace:
    records: list[dict] = field(default_factory=list)
    final_models: list[LinearEncoder] = field(default_factory=list)
    error: str | None = None

    def comparable(self, keys=("round", "mean_local_loss", "global_loss")) -> list[tuple]:
        """Per-round tuples without wall-clock fields, for equality checks."""
        return [tuple(r.get(k) for k in keys) for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


# -- local training --------------------------------------------------------


def _draw_views(x: np.ndarray, rng: np.random.Generator):
    return x + rng.standard_normal(x.shape), x + rng.standard_normal(x.shape)


def _flavor_step(model: LinearEncoder, dataset: LocalDataset, idx: np.ndarray, flavor: str,
                 gradient_mode: str, temperature: float, covariance, rng):
    """Loss and gradient for one batch; returns the first augmented view when drawn."""
    xb = dataset.samples[idx]
    if flavor == "linear-ssl" and gradient_mode == "expected":
        return obj.linear_ssl_loss_expected(model, covariance), Gradient(obj.linear_ssl_gradient(model, covariance)), None
    if flavor == "supervised-softmax":
        loss, grad = obj.softmax_cross_entropy_batch(model, xb, dataset.labels[idx])
        return loss, grad, None
    view_a, view_b = _draw_views(xb, rng)
    if flavor == "linear-ssl":
        loss, grad = obj.linear_ssl_stochastic_batch(model, view_a, view_b)
    elif flavor == "infonce":
        loss, grad = obj.infonce_batch(model, view_a, view_b, temperature)
    else:
        loss, grad = obj.simsiam_batch(model, view_a, view_b)
    return loss, grad, view_a


def _alignment_step(model: LinearEncoder, anchor: LinearEncoder, xb: np.ndarray, view, rng):
    x_plus = xb + rng.standard_normal(xb.shape) if view is None else view
    z_global = anchor.features(xb)
    keep = (np.linalg.norm(z_global, axis=1) > 0)
    keep &= np.linalg.norm(model.predict(model.features(xb)), axis=1) > 0
    keep &= np.linalg.norm(model.predict(model.features(x_plus)), axis=1) > 0
    if not np.any(keep):
        return 0.0, None
    return obj.alignment_batch(model, xb[keep], x_plus[keep], z_global[keep])


def train_local(model: LinearEncoder, dataset: LocalDataset, steps: int, lr: float, flavor: str,
                rng: np.random.Generator, *, gradient_mode: str = "expected", batch_size: int = 64,
                temperature: float = obj.DEFAULT_TEMPERATURE, learn_predictor: bool = False,
                anchor: LinearEncoder | None = None, align_weight: float = 0.0):
    """Run ``steps`` SGD steps and return ``(model, mean step loss)``.

    With ``anchor`` and a positive ``align_weight`` the feature-alignment
    regularizer toward the frozen anchor model is added to every step.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    model = model.copy()
    n = len(dataset)
    covariance = empirical_covariance(dataset) if flavor == "linear-ssl" and gradient_mode == "expected" else None
    if steps == 0:
        return model, None
    losses = []
    # overflow is checked explicitly and reported as divergence
    with np.errstate(over="ignore", invalid="ignore"):
        order = np.empty(0, dtype=np.int64)
        pos = 0
        for _ in range(steps):
            if pos >= order.size:
                order = rng.permutation(n)
                pos = 0
            idx = order[pos:pos + batch_size]
            pos += batch_size
            loss, grad, view = _flavor_step(model, dataset, idx, flavor, gradient_mode, temperature, covariance, rng)
            if anchor is not None and align_weight > 0:
                reg, reg_grad = _alignment_step(model, anchor, dataset.samples[idx], view, rng)
                loss = loss + align_weight * reg
                if reg_grad is not None:
                    grad += Gradient(align_weight * reg_grad.weight,
                                     None if reg_grad.predictor is None else align_weight * reg_grad.predictor)
            if not np.isfinite(loss):
                raise NumericalDivergence(dataset.source_id)
            losses.append(loss)
            model.weight = model.weight - lr * grad.weight
            if learn_predictor and model.predictor is not None and grad.predictor is not None:
                model.predictor = model.predictor - lr * grad.predictor
            if model.head is not None and grad.head is not None:
                model.head = model.head - lr * grad.head
            if not model.is_finite():
                raise NumericalDivergence(dataset.source_id, "non-finite weights")
    return model, float(np.mean(losses))


def local_update(model: LinearEncoder, dataset: LocalDataset, steps: int, lr: float,
                 flavor: str = "linear-ssl", rng: np.random.Generator | None = None, **options) -> LinearEncoder:
    """``steps`` gradient steps of the chosen objective flavor from ``model``."""
    if rng is None:
        rng = np.random.default_rng(0)
    return train_local(model, dataset, steps, lr, flavor, rng, **options)[0]


def _train_options(cfg: FedConfig) -> dict:
    return dict(gradient_mode=cfg.gradient_mode, batch_size=cfg.batch_size,
                temperature=cfg.temperature, learn_predictor=cfg.learn_predictor)


def evaluate_loss(model: LinearEncoder, dataset: LocalDataset, cfg: FedConfig, rng: np.random.Generator,
                  covariance: np.ndarray | None = None) -> float:
    """Objective value of ``model`` on a whole dataset (expected form for linear SSL)."""
    flavor = cfg.objective_flavor
    if flavor == "linear-ssl":
        cov = empirical_covariance(dataset) if covariance is None else covariance
        return obj.linear_ssl_loss_expected(model, cov)
    if flavor == "supervised-softmax":
        return obj.softmax_cross_entropy_batch(model, dataset.samples, dataset.labels)[0]
    view_a, view_b = _draw_views(dataset.samples, rng)
    if flavor == "infonce":
        return obj.infonce_batch(model, view_a, view_b, cfg.temperature)[0]
    return obj.simsiam_batch(model, view_a, view_b)[0]


# -- aggregation -----------------------------------------------------------


def average_models(models: Sequence[LinearEncoder], weights: Sequence[float]) -> LinearEncoder:
    """``sum_k c_k model_k`` accumulated in the given order, block by block."""
    first = models[0]
    out = LinearEncoder(
        weights[0] * first.weight,
        None if first.predictor is None else weights[0] * first.predictor,
        None if first.head is None else weights[0] * first.head,
    )
    for c, model in zip(weights[1:], models[1:]):
        out.weight = out.weight + c * model.weight
        if out.predictor is not None:
            out.predictor = out.predictor + c * model.predictor
        if out.head is not None:
            out.head = out.head + c * model.head
    return out


def sample_participants(K: int, cfg: FedConfig, round_index: int) -> list[int]:
    count = cfg.num_participants(K)
    if count >= K:
        return list(range(K))
    rng = source_rng(cfg.seed, TAG_SAMPLE, round_index)
    return sorted(int(i) for i in rng.choice(K, size=count, replace=False))


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _local_job(start: LinearEncoder, source: LocalDataset, cfg: FedConfig, round_index: int, **extra):
    rng = source_rng(cfg.seed, TAG_LOCAL, round_index, source.source_id)
    steps = cfg.steps_for(len(source))
    model, loss = train_local(start, source, steps, cfg.learning_rate, cfg.objective_flavor, rng,
                              **_train_options(cfg), **extra)
    if loss is None:
        loss = evaluate_loss(model, source, cfg, rng)
    return model, loss


def _fedavg_round(global_model: LinearEncoder, sources: Sequence[LocalDataset], cfg: FedConfig, round_index: int):
    if not sources:
        raise ValueError("no sources")
    members = sample_participants(len(sources), cfg, round_index)
    results = _map(lambda k: _local_job(global_model, sources[k], cfg, round_index), members, cfg.max_workers)
    models = [r[0] for r in results]
    if cfg.weighted_average:
        total = sum(len(sources[k]) for k in members)
        weights = [len(sources[k]) / total for k in members]
    else:
        weights = [1.0 / len(members)] * len(members)
    return average_models(models, weights), members, [r[1] for r in results]


def fedavg_round(global_model: LinearEncoder, sources: Sequence[LocalDataset], cfg: FedConfig,
                 round_index: int) -> LinearEncoder:
    """One FedAvg round: sampled sources train from the broadcast model, the server averages."""
    return _fedavg_round(global_model, sources, cfg, round_index)[0]


def initial_model(d: int, cfg: FedConfig, num_sources: int, num_classes: int | None = None) -> LinearEncoder:
    """Gaussian weights with variance 1/d, shared by every node."""
    m = cfg.embed_dim or 2 * num_sources
    rng = source_rng(cfg.seed, TAG_INIT)
    weight = rng.standard_normal((m, d)) / np.sqrt(d)
    predictor = np.eye(m) if cfg.objective_flavor == "simsiam" and cfg.learn_predictor else None
    head = None
    if cfg.objective_flavor == "supervised-softmax":
        head = rng.standard_normal((num_classes, m)) / np.sqrt(m)
    return LinearEncoder(weight, predictor, head)


def _attach(exc: NumericalDivergence, trace: TrainingTrace, models) -> NumericalDivergence:
    """Hand the partial trace to the caller along with the divergence."""
    trace.error = str(exc)
    trace.final_models = list(models)
    exc.trace = trace
    return exc


class _Monitor:
    """Per-round metrics shared by every training driver."""

    def __init__(self, sources: Sequence[LocalDataset], cfg: FedConfig, m: int):
        self.sources = sources
        self.cfg = cfg
        self.union = concatenate(sources)
        self.linear = cfg.objective_flavor == "linear-ssl"
        self.covariance = global_covariance(sources) if self.linear else None
        self.oracle = ssl_minimizer_oracle(self.covariance, m) if self.linear else None
        self.started = time.perf_counter()

    def global_loss(self, model: LinearEncoder, round_index: int) -> float:
        rng = source_rng(self.cfg.seed, TAG_EVAL, round_index)
        with np.errstate(over="ignore", invalid="ignore"):
            value = float(evaluate_loss(model, self.union, self.cfg, rng, self.covariance))
        if not np.isfinite(value):
            raise NumericalDivergence(-1, "non-finite global loss")
        return value

    def angle(self, model: LinearEncoder) -> float | None:
        if not self.linear or not np.any(model.weight):
            return None
        return principal_angle(model.weight, self.oracle.weight)

    def record(self, round_index: int, losses, model: LinearEncoder, **extra) -> dict:
        rec = {
            "round": round_index,
            "mean_local_loss": float(np.mean(losses)),
            "global_loss": self.global_loss(model, round_index),
        }
        if self.linear:
            rec["principal_angle"] = self.angle(model)
        rec.update(extra)
        rec["wall_time"] = time.perf_counter() - self.started
        return rec


def _num_classes(sources: Sequence[LocalDataset]) -> int:
    return max(ds.num_classes for ds in sources)


def run_fedavg(sources: Sequence[LocalDataset], cfg: FedConfig,
               init: LinearEncoder | None = None) -> TrainingTrace:
    """T FedAvg rounds from a seeded initialization; one trace record per round."""
    model = init.copy() if init is not None else initial_model(sources[0].dim, cfg, len(sources), _num_classes(sources))
    monitor = _Monitor(sources, cfg, model.m)
    trace = TrainingTrace()
    for t in range(cfg.rounds):
        try:
            model, members, losses = _fedavg_round(model, sources, cfg, t)
            trace.records.append(monitor.record(t, losses, model, participants=members))
        except NumericalDivergence as exc:
            raise _attach(exc, trace, [model])
    trace.final_models = [model]
    return trace


def run_local(sources: Sequence[LocalDataset], cfg: FedConfig, init: LinearEncoder | None = None) -> TrainingTrace:
    """Every source trains alone for T rounds; no communication."""
    start = init.copy() if init is not None else initial_model(sources[0].dim, cfg, len(sources), _num_classes(sources))
    models = [start.copy() for _ in sources]
    monitor = _Monitor(sources, cfg, start.m)
    trace = TrainingTrace()
    for t in range(cfg.rounds):
        try:
            results = _map(lambda k: _local_job(models[k], sources[k], cfg, t), range(len(sources)),
                           cfg.max_workers)
            models = [r[0] for r in results]
            mean_model = average_models(models, [1.0 / len(models)] * len(models))
            trace.records.append(monitor.record(t, [r[1] for r in results], mean_model,
                                                local_losses=[r[1] for r in results]))
        except NumericalDivergence as exc:
            raise _attach(exc, trace, models)
    trace.final_models = models
    return trace


def run_central(sources: Sequence[LocalDataset], cfg: FedConfig, init: LinearEncoder | None = None) -> TrainingTrace:
    """Centralized baseline: FedAvg over the single pooled dataset."""
    pooled = concatenate(sources)
    if init is None:
        init = initial_model(pooled.dim, cfg, len(sources), _num_classes(sources))
    return run_fedavg([pooled], cfg, init)


# -- topologies and gossip -------------------------------------------------


def _connected(adjacency: np.ndarray) -> bool:
    K = adjacency.shape[0]
    seen = {0}
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(adjacency[i]):
            if int(j) not in seen:
                seen.add(int(j))
                queue.append(int(j))
    return len(seen) == K


@dataclass
class Topology:
    kind: str
    adjacency: np.ndarray
    edge_probability: float | None = None

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("adjacency must be square")
        if not np.array_equal(a, a.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(a)):
            raise ValueError("adjacency must have an empty diagonal")
        if not _connected(a):
            raise ValueError(f"{self.kind} topology is not connected")
        self.adjacency = a

    @property
    def K(self) -> int:
        return int(self.adjacency.shape[0])

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def neighbors(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[i])


def build_topology(kind: str, K: int, edge_probability: float = 0.7, seed: int = 0) -> Topology:
    if kind not in TOPOLOGIES:
        raise ValueError(f"unknown topology {kind!r}")
    if K < 2:
        raise ValueError("a topology needs at least two nodes")
    a = np.zeros((K, K), dtype=bool)
    if kind == "star":
        a[0, 1:] = a[1:, 0] = True
    elif kind == "cycle":
        for i in range(K):
            j = (i + 1) % K
            if i != j:
                a[i, j] = a[j, i] = True
    elif kind == "binary-tree":
        for i in range(1, K):
            p = (i - 1) // 2
            a[i, p] = a[p, i] = True
    elif kind == "complete":
        a[:] = True
        np.fill_diagonal(a, False)
    else:
        if not 0 < edge_probability <= 1:
            raise ValueError("edge_probability must lie in (0, 1]")
        rng = source_rng(seed, 0)
        iu = np.triu_indices(K, 1)
        while True:
            a[:] = False
            a[iu] = rng.random(iu[0].size) < edge_probability
            a |= a.T
            if _connected(a):
                break
        return Topology(kind, a, edge_probability)
    return Topology(kind, a)


def metropolis_weights(topology: Topology) -> np.ndarray:
    """Symmetric doubly stochastic mixing: ``1/(1+max(deg_i, deg_j))`` on edges."""
    deg = topology.degrees()
    K = topology.K
    P = np.zeros((K, K))
    for i in range(K):
        for j in topology.neighbors(i):
            P[i, j] = 1.0 / (1.0 + max(deg[i], deg[j]))
        P[i, i] = 1.0 - P[i].sum()
    return P


def mix(models: Sequence[LinearEncoder], P: np.ndarray) -> list[LinearEncoder]:
    out = []
    for i in range(len(models)):
        nbrs = np.flatnonzero(P[i])
        out.append(average_models([models[j] for j in nbrs], [P[i, j] for j in nbrs]))
    return out


def _gossip_round(models, topology, sources, cfg, round_index, P):
    if len(models) != topology.K or len(sources) != topology.K:
        raise ValueError("need one model and one source per node")
    results = _map(lambda k: _local_job(models[k], sources[k], cfg, round_index),
                   range(topology.K), cfg.max_workers)
    return mix([r[0] for r in results], P), [r[1] for r in results]


def gossip_round(models: Sequence[LinearEncoder], topology: Topology, sources: Sequence[LocalDataset],
                 cfg: FedConfig, round_index: int) -> list[LinearEncoder]:
    """Local updates on every node, then one Metropolis mixing step."""
    return _gossip_round(models, topology, sources, cfg, round_index, metropolis_weights(topology))[0]


def pairwise_distances(models: Sequence[LinearEncoder]) -> np.ndarray:
    K = len(models)
    out = np.zeros((K, K))
    for i in range(K):
        for j in range(i + 1, K):
            out[i, j] = out[j, i] = weight_distance(models[i], models[j])
    return out


def run_decentralized(sources: Sequence[LocalDataset], topology: Topology, cfg: FedConfig,
                      initial_models: Sequence[LinearEncoder] | None = None) -> TrainingTrace:
    """T gossip rounds; the trace tracks consensus and per-node diagnostics."""
    if topology.K != len(sources):
        raise ValueError(f"topology has {topology.K} nodes but there are {len(sources)} sources")
    if initial_models is None:
        start = initial_model(sources[0].dim, cfg, len(sources), _num_classes(sources))
        models = [start.copy() for _ in sources]
    else:
        models = [m.copy() for m in initial_models]
    P = metropolis_weights(topology)
    monitor = _Monitor(sources, cfg, models[0].m)
    trace = TrainingTrace()
    uniform = [1.0 / len(models)] * len(models)
    for t in range(cfg.rounds):
        try:
            models, losses = _gossip_round(models, topology, sources, cfg, t, P)
            dist = pairwise_distances(models)
            iu = np.triu_indices(len(models), 1)
            extra = {
                "node_losses": [float(v) for v in losses],
                "mean_pairwise_distance": float(dist[iu].mean()),
                "max_pairwise_distance": float(dist[iu].max()),
            }
            if monitor.linear:
                extra["node_angles"] = [monitor.angle(m) for m in models]
            trace.records.append(monitor.record(t, losses, average_models(models, uniform), **extra))
        except NumericalDivergence as exc:
            raise _attach(exc, trace, models)
    trace.final_models = list(models)
    return trace


def config_dict(cfg) -> dict:
    return asdict(cfg)
