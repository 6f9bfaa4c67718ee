"""Linear probing and model-comparison diagnostics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datagen import LocalDataset, source_rng
from .objectives import LinearEncoder, mean_cosine_distance


@dataclass
class ProbeResult:
    top1_accuracy: float
    per_class_accuracy: np.ndarray
    num_train: int
    num_test: int
    epochs_run: int = 0
    converged: bool = False

    def to_dict(self) -> dict:
        return {
            "top1_accuracy": self.top1_accuracy,
            "per_class_accuracy": [None if np.isnan(v) else float(v) for v in self.per_class_accuracy],
            "num_train": self.num_train,
            "num_test": self.num_test,
            "epochs_run": self.epochs_run,
            "stopped_by": "gradient_norm" if self.converged else "epoch_cap",
        }


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def fit_softmax_head(z: np.ndarray, y: np.ndarray, num_classes: int, epochs: int, lr: float,
                     rng: np.random.Generator, grad_tol: float = 1e-6):
    """Full-batch gradient descent on multinomial logistic regression with a bias.

    ``lr`` is relative to the smoothness constant of the loss, so ``lr=1`` is
    a safe step for any feature scale.
    """
    n, m = z.shape
    design = np.hstack([z, np.ones((n, 1))])
    smooth = 0.5 * np.linalg.eigvalsh(design.T @ design / n).max()
    step = lr / max(smooth, 1e-12)
    theta = 0.01 * rng.standard_normal((m + 1, num_classes))
    onehot = np.eye(num_classes)[y]
    for epoch in range(1, epochs + 1):
        grad = design.T @ (_softmax(design @ theta) - onehot) / n
        if np.linalg.norm(grad) <= grad_tol:
            return theta, epoch, True
        theta -= step * grad
    return theta, epochs, False


def _probe_features(encoder: LinearEncoder, x: np.ndarray) -> np.ndarray:
    return encoder.features(x)


def linear_probe(encoder: LinearEncoder, train: LocalDataset, test: LocalDataset, epochs: int = 2000,
                 lr: float = 1.0, seed: int = 0, normalize: bool = False,
                 num_classes: int | None = None) -> ProbeResult:
    """Top-1 accuracy of a softmax head trained on frozen features ``f_w(x)``."""
    if len(train) == 0 or len(test) == 0:
        raise ValueError("linear probing needs non-empty train and test sets")
    if train.dim != test.dim:
        raise ValueError("train and test dimensions differ")
    c = int(num_classes or max(train.num_classes, test.num_classes))
    z_train = _probe_features(encoder, train.samples)
    z_test = _probe_features(encoder, test.samples)
    if normalize:
        mean = z_train.mean(axis=0)
        std = z_train.std(axis=0)
        std[std == 0] = 1.0
        z_train = (z_train - mean) / std
        z_test = (z_test - mean) / std
    theta, run, converged = fit_softmax_head(z_train, train.labels, c, epochs, lr, source_rng(seed, 0))
    logits = np.hstack([z_test, np.ones((len(test), 1))]) @ theta
    pred = np.argmax(logits, axis=1)
    hit = pred == test.labels
    per_class = np.full(c, np.nan)
    for k in range(c):
        mask = test.labels == k
        if np.any(mask):
            per_class[k] = hit[mask].mean()
    return ProbeResult(float(hit.mean()), per_class, len(train), len(test), run, converged)


def probe_featarc_detail(state, train_splits: Sequence[LocalDataset], test_splits: Sequence[LocalDataset],
                         **probe_params) -> list[ProbeResult]:
    """Probe each source with the cluster model it is assigned to."""
    if len(train_splits) != state.K or len(test_splits) != state.K:
        raise ValueError("need one train and one test split per source")
    return [
        linear_probe(state.cluster_models[state.assignments[i]], train_splits[i], test_splits[i], **probe_params)
        for i in range(state.K)
    ]


def probe_featarc(state, train_splits, test_splits, **probe_params) -> float:
    results = probe_featarc_detail(state, train_splits, test_splits, **probe_params)
    return float(np.mean([r.top1_accuracy for r in results]))


def weight_distance(a: LinearEncoder, b: LinearEncoder) -> float:
    """Sum over weight blocks of the Frobenius norm of the difference."""
    total = 0.0
    for name in ("weight", "predictor", "head"):
        x, y = getattr(a, name), getattr(b, name)
        if x is None and y is None:
            continue
        if x is None or y is None or x.shape != y.shape:
            raise ValueError(f"models disagree on the shape of block {name!r}")
        total += float(np.linalg.norm(x - y))
    return total


def feature_alignment_score(a: LinearEncoder, b: LinearEncoder, dataset: LocalDataset) -> float:
    """Mean cosine distance between ``f_a(x)`` and ``f_b(x)``; -1 means identical directions."""
    if a.d != dataset.dim or b.d != dataset.dim:
        raise ValueError("encoder input dimension does not match the dataset")
    value = mean_cosine_distance(a.features(dataset.samples), b.features(dataset.samples))
    if value is None:
        warnings.warn("every sample maps to a zero feature; score set to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return value
