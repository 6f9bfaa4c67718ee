"""Synthetic heterogeneous datasets and non-IID partitioners.

Every randomized routine takes an integer seed.  Per-source streams are
derived from ``(seed, source_id)`` through :class:`numpy.random.SeedSequence`
so results never depend on the order in which sources are processed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

SCHEMES = ("dirichlet", "skewness", "feature-cluster", "manual")


def source_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream keyed by ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


@dataclass
class LocalDataset:
    """Samples (n x d) and integer labels held by one data source."""

    samples: np.ndarray
    labels: np.ndarray
    source_id: int = 0
    num_classes: int | None = None

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.samples.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"samples ({self.samples.shape[0]}) and labels ({self.labels.shape[0]}) differ in length"
            )
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def dim(self) -> int:
        return int(self.samples.shape[1])

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    def histogram(self, num_classes: int | None = None) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes or self.num_classes)

    def subset(self, indices) -> "LocalDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LocalDataset(self.samples[idx], self.labels[idx], self.source_id, self.num_classes)


def concatenate(datasets: Sequence[LocalDataset], source_id: int = 0) -> LocalDataset:
    num_classes = max(ds.num_classes for ds in datasets)
    return LocalDataset(
        np.concatenate([ds.samples for ds in datasets]),
        np.concatenate([ds.labels for ds in datasets]),
        source_id,
        num_classes,
    )


@dataclass
class TheoryGenConfig:
    """Parameters of the skewed two-classes-per-source generator.

    ``tau_scale`` and ``mu_noise`` default to ``d**(1/5)`` and ``d**(-1/5)``.
    """

    d: int
    K: int
    majority_count: int
    minority_count: int = 0
    tau_scale: float | None = None
    mu_noise: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.tau_scale is None:
            self.tau_scale = float(self.d) ** 0.2
        if self.mu_noise is None:
            self.mu_noise = float(self.d) ** -0.2
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.d < 2 * self.K:
            raise ValueError(f"d={self.d} must be at least 2K={2 * self.K}")
        if self.majority_count <= 0:
            raise ValueError("majority_count must be positive")
        if self.minority_count < 0:
            raise ValueError("minority_count must be non-negative")
        if self.tau_scale <= 0:
            raise ValueError("tau_scale must be positive")
        if self.mu_noise < 0:
            raise ValueError("mu_noise must be non-negative")


def generate_theory_dataset(cfg: TheoryGenConfig) -> list[LocalDataset]:
    """Build the K skewed local datasets.

    Source ``k`` holds ``majority_count`` samples of class ``2k`` at
    ``+e_k - sum_i q_i tau e_i`` and of class ``2k+1`` at ``-e_k - ...`` with
    fresh fair coins ``q_i`` (``i != k``), plus ``minority_count`` samples of
    each class ``2i`` (``i != k``) at ``e_i``.  All samples carry additive
    ``mu_noise * N(0, I)``.  Classes ``2i+1`` (``i != k``) are absent.
    """
    d, K = cfg.d, cfg.K
    others_all = np.arange(K)
    out = []
    for k in range(K):
        rng = source_rng(cfg.seed, k)
        others = others_all[others_all != k]
        blocks, labels = [], []
        for label, sign in ((2 * k, 1.0), (2 * k + 1, -1.0)):
            x = np.zeros((cfg.majority_count, d))
            x[:, k] = sign
            q = rng.integers(0, 2, size=(cfg.majority_count, others.size))
            x[:, others] -= q * cfg.tau_scale
            blocks.append(x)
            labels.append(np.full(cfg.majority_count, label))
        for i in others:
            x = np.zeros((cfg.minority_count, d))
            x[:, i] = 1.0
            blocks.append(x)
            labels.append(np.full(cfg.minority_count, 2 * i))
        samples = np.concatenate(blocks)
        noise = rng.standard_normal(samples.shape)
        if cfg.mu_noise:
            samples = samples + cfg.mu_noise * noise
        out.append(LocalDataset(samples, np.concatenate(labels), k, 2 * K))
    return out


@dataclass
class PartitionSpec:
    assignments: list[np.ndarray]
    label_histograms: np.ndarray
    scheme: str = "manual"
    parameter: float | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        self.assignments = [np.asarray(a, dtype=np.int64) for a in self.assignments]
        self.label_histograms = np.asarray(self.label_histograms, dtype=np.int64)

    @property
    def K(self) -> int:
        return len(self.assignments)

    def apply(self, samples: np.ndarray, labels: np.ndarray, num_classes: int | None = None) -> list[LocalDataset]:
        labels = np.asarray(labels)
        num_classes = num_classes or int(labels.max()) + 1
        return [
            LocalDataset(np.asarray(samples)[idx], labels[idx], k, num_classes)
            for k, idx in enumerate(self.assignments)
        ]

    def to_json(self) -> str:
        return json.dumps(
            {
                "scheme": self.scheme,
                "parameter": self.parameter,
                "assignments": [a.tolist() for a in self.assignments],
            }
        )

    @classmethod
    def from_json(cls, text: str, labels=None) -> "PartitionSpec":
        obj = json.loads(text)
        assignments = [np.asarray(a, dtype=np.int64) for a in obj["assignments"]]
        if labels is None:
            hist = np.zeros((len(assignments), 0), dtype=np.int64)
        else:
            hist = _histograms(np.asarray(labels), assignments)
        return cls(assignments, hist, obj["scheme"], obj.get("parameter"))


def _histograms(labels: np.ndarray, assignments, num_classes: int | None = None) -> np.ndarray:
    num_classes = num_classes or (int(labels.max()) + 1 if labels.size else 0)
    return np.stack([np.bincount(labels[a], minlength=num_classes) for a in assignments])


def _finish(labels, buckets, scheme, parameter) -> PartitionSpec:
    assignments = [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]
    return PartitionSpec(assignments, _histograms(labels, assignments), scheme, parameter)


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``; leftovers go to the largest fractional parts."""
    raw = np.asarray(proportions, dtype=float) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps the lowest index first among equal remainders
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_proportions(alpha: float, K: int, rng: np.random.Generator) -> np.ndarray:
    p = rng.dirichlet(np.full(K, float(alpha)))
    if not np.all(np.isfinite(p)) or p.sum() <= 0:
        # tiny alpha underflows every gamma draw; the limit is a one-hot vector
        p = np.zeros(K)
        p[rng.integers(K)] = 1.0
    return p / p.sum()


def partition_dirichlet(labels, K: int, alpha: float, seed: int = 0) -> PartitionSpec:
    """Split each class across K sources with Dirichlet(alpha) proportions."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if K < 1:
        raise ValueError("K must be at least 1")
    labels = np.asarray(labels, dtype=np.int64)
    buckets: list[list[np.ndarray]] = [[] for _ in range(K)]
    for c in np.unique(labels):
        rng = source_rng(seed, int(c))
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        counts = largest_remainder(dirichlet_proportions(alpha, K, rng), idx.size)
        for k, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[k].append(chunk)
    return _finish(labels, [np.concatenate(b) if b else [] for b in buckets], "dirichlet", alpha)


def partition_skewness(labels, K: int, beta: float, seed: int = 0) -> PartitionSpec:
    """Mix a uniform split (fraction beta) with exclusive class ownership.

    Classes are shuffled and each source owns ``floor(N/K)`` of them; the
    ``N mod K`` leftover classes are handed out one per source in order.  With
    fewer classes than sources, each class is shared evenly by the sources
    ``k`` with ``k mod N`` equal to its position.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if K < 1:
        raise ValueError("K must be at least 1")
    labels = np.asarray(labels, dtype=np.int64)
    rng = source_rng(seed, 0)
    classes = np.unique(labels)
    order = rng.permutation(classes)
    N = classes.size
    per = N // K
    owners: dict[int, list[int]] = {}
    for pos, c in enumerate(order):
        if per == 0:
            owners[int(c)] = [k for k in range(K) if k % N == pos]
        elif pos < per * K:
            owners[int(c)] = [pos // per]
        else:
            owners[int(c)] = [pos - per * K]

    buckets: list[list[np.ndarray]] = [[] for _ in range(K)]
    for pos, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        n_uniform = int(round(beta * idx.size))
        # uniform share split evenly per class; the larger chunks rotate
        # across classes so remainders do not pile up on source 0
        for j, chunk in enumerate(np.array_split(idx[:n_uniform], K)):
            buckets[(j + pos) % K].append(chunk)
        skewed = idx[n_uniform:]
        for k, chunk in zip(owners[int(c)], np.array_split(skewed, len(owners[int(c)]))):
            buckets[k].append(chunk)
    return _finish(labels, [np.concatenate(b) for b in buckets], "skewness", beta)


def pca_project(features: np.ndarray, n_components: int) -> np.ndarray:
    centered = features - features.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return centered @ vt[:n_components].T


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; ties go to the lowest centroid."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            pick = rng.integers(n)
        else:
            pick = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        centroids[j] = points[pick]
        closest = np.minimum(closest, ((points - centroids[j]) ** 2).sum(axis=1))

    assign = np.full(n, -1)
    for _ in range(max_iter):
        dist = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        for j in range(k):
            if not np.any(new == j):
                # steal the point farthest from its own centroid
                far = int(np.argmax(dist[np.arange(n), new]))
                new[far] = j
        if np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            centroids[j] = points[assign == j].mean(axis=0)
    return assign


def partition_feature_clusters(features, K: int, seed: int = 0, labels=None) -> PartitionSpec:
    """PCA to at most 30 dimensions, then k-means; each cluster becomes a source."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    n = features.shape[0]
    if n == 0:
        raise ValueError("features must be non-empty")
    if K > n:
        raise ValueError(f"K={K} exceeds the number of samples {n}")
    reduced = pca_project(features, min(30, features.shape[1]))
    assign = kmeans(reduced, K, source_rng(seed, 0))
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    return _finish(labels, [np.flatnonzero(assign == j) for j in range(K)], "feature-cluster", K)


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def apply_input_shift(datasets: Sequence[LocalDataset], seed: int = 0) -> list[LocalDataset]:
    """Rotate each source's inputs by its own random orthogonal matrix."""
    dims = {ds.dim for ds in datasets}
    if len(dims) > 1:
        raise ValueError(f"datasets disagree on dimension: {sorted(dims)}")
    out = []
    for ds in datasets:
        q = random_orthogonal(ds.dim, source_rng(seed, ds.source_id))
        out.append(LocalDataset(ds.samples @ q.T, ds.labels.copy(), ds.source_id, ds.num_classes))
    return out


def heterogeneity_emd(spec: PartitionSpec, global_histogram) -> float:
    """Mean earth-mover distance between local and global label distributions.

    Labels are categorical, so the ground distance is 1 between distinct
    classes and the EMD reduces to total variation.
    """
    g = np.asarray(global_histogram, dtype=float)
    if g.sum() <= 0:
        raise ValueError("global histogram is empty")
    g = g / g.sum()
    hist = np.asarray(spec.label_histograms, dtype=float)
    if hist.shape[1] < g.size:
        hist = np.pad(hist, ((0, 0), (0, g.size - hist.shape[1])))
    totals = hist.sum(axis=1)
    if np.any(totals <= 0):
        raise ValueError("every source must hold at least one sample")
    local = hist / totals[:, None]
    return float(np.mean(0.5 * np.abs(local - g).sum(axis=1)))


# -- serialization ---------------------------------------------------------


def save_dataset_csv(ds: LocalDataset, path) -> None:
    """One row per sample: label, then d floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for label, row in zip(ds.labels, ds.samples):
            writer.writerow([int(label), *(repr(float(v)) for v in row)])


def load_dataset_csv(path, source_id: int = 0, num_classes: int | None = None) -> LocalDataset:
    rows = [r for r in csv.reader(open(path, newline="")) if r]
    if not rows:
        raise ValueError(f"{path} holds no samples")
    labels = np.array([int(r[0]) for r in rows])
    samples = np.array([[float(v) for v in r[1:]] for r in rows])
    return LocalDataset(samples, labels, source_id, num_classes)


def save_matrix_csv(matrix: np.ndarray, path) -> None:
    np.savetxt(Path(path), np.atleast_2d(matrix), delimiter=",", fmt="%.17g")


def load_matrix_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(Path(path), delimiter=","))

