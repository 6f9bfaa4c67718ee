"""Losses for linear encoders, their hand-derived gradients, and the
supervised min-norm margin problem.

Cosine distance throughout is ``D(a, b) = -<a, b> / (|a| |b|)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .datagen import LocalDataset

DEFAULT_TEMPERATURE = 0.5


class InfeasibleOrUnconverged(RuntimeError):
    """The margin problem has no feasible point or the solver ran out of budget."""


@dataclass
class LinearEncoder:
    """Embedding ``f_w(x) = w x`` with optional predictor and classifier head.

    ``predictor`` (m x m) is identity when absent.  ``head`` (c x m) only
    exists for supervised training.
    """

    weight: np.ndarray
    predictor: np.ndarray | None = None
    head: np.ndarray | None = None

    def __post_init__(self):
        self.weight = np.atleast_2d(np.asarray(self.weight, dtype=float))
        m = self.weight.shape[0]
        if self.predictor is not None:
            self.predictor = np.asarray(self.predictor, dtype=float)
            if self.predictor.shape != (m, m):
                raise ValueError(f"predictor must be {m}x{m}, got {self.predictor.shape}")
        if self.head is not None:
            self.head = np.atleast_2d(np.asarray(self.head, dtype=float))
            if self.head.shape[1] != m:
                raise ValueError(f"head must have {m} columns, got {self.head.shape}")

    @property
    def m(self) -> int:
        return int(self.weight.shape[0])

    @property
    def d(self) -> int:
        return int(self.weight.shape[1])

    def features(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.weight.T

    def predict(self, z: np.ndarray) -> np.ndarray:
        return z if self.predictor is None else z @ self.predictor.T

    def blocks(self) -> list[np.ndarray]:
        return [b for b in (self.weight, self.predictor, self.head) if b is not None]

    def copy(self) -> "LinearEncoder":
        return LinearEncoder(
            self.weight.copy(),
            None if self.predictor is None else self.predictor.copy(),
            None if self.head is None else self.head.copy(),
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(b)) for b in self.blocks())


@dataclass
class Gradient:
    """Gradient blocks matching the layout of :class:`LinearEncoder`."""

    weight: np.ndarray
    predictor: np.ndarray | None = None
    head: np.ndarray | None = None

    def __iadd__(self, other: "Gradient") -> "Gradient":
        self.weight = self.weight + other.weight
        if other.predictor is not None:
            self.predictor = other.predictor if self.predictor is None else self.predictor + other.predictor
        if other.head is not None:
            self.head = other.head if self.head is None else self.head + other.head
        return self


def _as_weight(encoder) -> np.ndarray:
    return encoder.weight if isinstance(encoder, LinearEncoder) else np.atleast_2d(np.asarray(encoder, dtype=float))


def _check_square(X: np.ndarray, d: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape != (d, d):
        raise ValueError(f"covariance must be {d}x{d}, got {X.shape}")
    return X


# -- cosine distance -------------------------------------------------------


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("vectors must be non-empty")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance is undefined for zero vectors")
    return float(-(a @ b) / (na * nb))


def mean_cosine_distance(za: np.ndarray, zb: np.ndarray) -> float | None:
    """Mean of ``D`` over row pairs, skipping rows where either side is zero."""
    na = np.linalg.norm(za, axis=1)
    nb = np.linalg.norm(zb, axis=1)
    keep = (na > 0) & (nb > 0)
    if not np.any(keep):
        return None
    cos = np.sum(za[keep] * zb[keep], axis=1) / (na[keep] * nb[keep])
    return float(np.mean(-np.clip(cos, -1.0, 1.0)))


def _cosine_rows(a: np.ndarray, b: np.ndarray):
    """Row-wise cosine similarity and the pieces needed for its gradient."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine distance is undefined for zero vectors")
    ah, bh = a / na, b / nb
    cos = np.sum(ah * bh, axis=1)
    # d cos / d a and d cos / d b, one row per pair
    da = (bh - cos[:, None] * ah) / na
    db = (ah - cos[:, None] * bh) / nb
    return cos, da, db


def _normalize_backward(z: np.ndarray, zn: np.ndarray, grad_zn: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return (grad_zn - zn * np.sum(grad_zn * zn, axis=1, keepdims=True)) / norms


# -- contrastive and predictive losses --------------------------------------


def infonce_loss(anchor, positive, negatives, temperature: float = DEFAULT_TEMPERATURE) -> float:
    """Single-anchor InfoNCE with cosine distance and a max-shifted log-sum-exp."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = [-cosine_distance(anchor, positive) / temperature]
    logits += [-cosine_distance(anchor, neg) / temperature for neg in negatives]
    logits = np.asarray(logits)
    top = logits.max()
    return float(top + np.log(np.exp(logits - top).sum()) - logits[0])


def simsiam_loss(prediction, target) -> float:
    return cosine_distance(prediction, target)


def infonce_batch(encoder: LinearEncoder, view_a: np.ndarray, view_b: np.ndarray,
                  temperature: float = DEFAULT_TEMPERATURE):
    """Batch InfoNCE and its weight gradient.

    Anchor ``i`` is ``f(view_b[i])``, its positive ``f(view_a[i])``, and its
    negatives the positives of every other batch member.
    """
    w = encoder.weight
    za, zb = view_a @ w.T, view_b @ w.T
    na = np.linalg.norm(za, axis=1, keepdims=True)
    nb = np.linalg.norm(zb, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine distance is undefined for zero vectors")
    ah, bh = za / na, zb / nb
    logits = bh @ ah.T / temperature
    top = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - top)
    lse = top[:, 0] + np.log(exp.sum(axis=1))
    n = view_a.shape[0]
    loss = float(np.mean(lse - np.diag(logits)))
    g = exp / exp.sum(axis=1, keepdims=True)
    g[np.arange(n), np.arange(n)] -= 1.0
    g /= n * temperature
    grad_bh = g @ ah
    grad_ah = g.T @ bh
    grad_za = _normalize_backward(za, ah, grad_ah)
    grad_zb = _normalize_backward(zb, bh, grad_bh)
    return loss, Gradient(grad_za.T @ view_a + grad_zb.T @ view_b)


def simsiam_batch(encoder: LinearEncoder, view_a: np.ndarray, view_b: np.ndarray):
    """Symmetrized predictor loss ``(D(p_a, sg z_b) + D(p_b, sg z_a)) / 2``."""
    w = encoder.weight
    za, zb = view_a @ w.T, view_b @ w.T
    pa, pb = encoder.predict(za), encoder.predict(zb)
    cos_ab, d_pa, _ = _cosine_rows(pa, zb)
    cos_ba, d_pb, _ = _cosine_rows(pb, za)
    n = view_a.shape[0]
    loss = float(np.mean(-0.5 * cos_ab - 0.5 * cos_ba))
    g_pa = -0.5 * d_pa / n
    g_pb = -0.5 * d_pb / n
    if encoder.predictor is None:
        g_za, g_zb, g_pred = g_pa, g_pb, None
    else:
        g_za, g_zb = g_pa @ encoder.predictor, g_pb @ encoder.predictor
        g_pred = g_pa.T @ za + g_pb.T @ zb
    return loss, Gradient(g_za.T @ view_a + g_zb.T @ view_b, g_pred)


def alignment_batch(encoder: LinearEncoder, x: np.ndarray, x_plus: np.ndarray, z_global: np.ndarray):
    """Feature-alignment regularizer ``(D(p+, z_g) + D(p, z_g)) / 2`` against frozen ``z_g``."""
    w = encoder.weight
    z_plus, z = x_plus @ w.T, x @ w.T
    p_plus, p = encoder.predict(z_plus), encoder.predict(z)
    cos1, d1, _ = _cosine_rows(p_plus, z_global)
    cos2, d2, _ = _cosine_rows(p, z_global)
    n = x.shape[0]
    loss = float(np.mean(-0.5 * cos1 - 0.5 * cos2))
    g1, g2 = -0.5 * d1 / n, -0.5 * d2 / n
    if encoder.predictor is None:
        gz1, gz2, g_pred = g1, g2, None
    else:
        gz1, gz2 = g1 @ encoder.predictor, g2 @ encoder.predictor
        g_pred = g1.T @ z_plus + g2.T @ z
    return loss, Gradient(gz1.T @ x_plus + gz2.T @ x, g_pred)


def softmax_cross_entropy_batch(encoder: LinearEncoder, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy of the linear head on encoder features."""
    if encoder.head is None:
        raise ValueError("supervised training needs an encoder with a head")
    z = x @ encoder.weight.T
    logits = z @ encoder.head.T
    top = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - top)
    n = x.shape[0]
    lse = top[:, 0] + np.log(exp.sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(n), y]))
    g = exp / exp.sum(axis=1, keepdims=True)
    g[np.arange(n), y] -= 1.0
    g /= n
    return loss, Gradient((g @ encoder.head).T @ x, None, g.T @ z)


# -- linear SSL objective ----------------------------------------------------


def linear_ssl_loss_expected(encoder, covariance) -> float:
    """``-tr(w^T w X) + |w^T w|_F^2 / 2``: exact expectation over Gaussian augmentations."""
    w = _as_weight(encoder)
    X = _check_square(covariance, w.shape[1])
    gram = w @ w.T
    return float(-np.sum((w @ X) * w) + 0.5 * np.sum(gram * gram))


def linear_ssl_gradient(encoder, covariance) -> np.ndarray:
    w = _as_weight(encoder)
    X = _check_square(covariance, w.shape[1])
    return -2.0 * w @ X + 2.0 * (w @ w.T) @ w


def linear_ssl_stochastic_batch(encoder, view_a: np.ndarray, view_b: np.ndarray):
    """Sampled loss on paired views and its weight gradient."""
    w = _as_weight(encoder)
    za, zb = view_a @ w.T, view_b @ w.T
    n = view_a.shape[0]
    gram = w @ w.T
    loss = float(-np.sum(za * zb) / n + 0.5 * np.sum(gram * gram))
    cross = view_a.T @ view_b
    grad = -w @ (cross + cross.T) / n + 2.0 * gram @ w
    return loss, Gradient(grad)


def linear_ssl_loss_stochastic(encoder, batch, rng: np.random.Generator) -> float:
    """Batch mean of ``-(w(x+xi))^T (w(x+xi')) + |w^T w|_F^2 / 2`` with fresh draws."""
    x = np.atleast_2d(np.asarray(batch, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    w = _as_weight(encoder)
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"batch dimension {x.shape[1]} does not match encoder input {w.shape[1]}")
    view_a = x + rng.standard_normal(x.shape)
    view_b = x + rng.standard_normal(x.shape)
    return linear_ssl_stochastic_batch(w, view_a, view_b)[0]


def reconstruction_objective(encoder, covariance) -> float:
    w = _as_weight(encoder)
    X = _check_square(covariance, w.shape[1])
    return float(np.sum((X - w.T @ w) ** 2))


# -- supervised min-norm margin problem ------------------------------------


@dataclass
class MarginSolution:
    w_tilde: np.ndarray
    margin_violation: float
    objective: float
    support_size: int = 0
    duals: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)


def _constraint_index(labels: np.ndarray, num_classes: int):
    rows, others = [], []
    for other in range(num_classes):
        idx = np.flatnonzero(labels != other)
        rows.append(idx)
        others.append(np.full(idx.size, other))
    return np.concatenate(rows), np.concatenate(others)


def margin_problem_solve(dataset: LocalDataset, num_classes: int | None = None, tolerance: float = 1e-8,
                         max_polish: int = 50) -> MarginSolution:
    """Minimize ``sum_i |w_i|^2`` s.t. ``<w_y - w_y', x> >= 1`` for every sample and class ``y' != y``.

    A squared-hinge penalty with a geometric weight schedule locates the
    active constraints; the final point solves the KKT system on that set
    exactly and is re-checked against every constraint.
    """
    x, y = dataset.samples, dataset.labels
    c = int(num_classes or dataset.num_classes)
    n, d = x.shape
    if n == 0:
        raise ValueError("dataset is empty")
    ar = np.arange(n)

    def penalized(v, rho):
        W = v.reshape(c, d)
        S = x @ W.T
        h = np.maximum(0.0, 1.0 - (S[ar, y][:, None] - S))
        h[ar, y] = 0.0
        M = rho * h
        M[ar, y] = -M.sum(axis=1)
        return 0.5 * np.sum(W * W) + 0.5 * rho * np.sum(h * h), (W + M.T @ x).ravel()

    v = np.zeros(c * d)
    for rho in 10.0 ** np.arange(0, 7):
        res = minimize(penalized, v, args=(rho,), jac=True, method="L-BFGS-B",
                       options={"maxiter": 5000, "gtol": 1e-12, "ftol": 1e-16})
        v = res.x
    W = v.reshape(c, d)

    rows, others = _constraint_index(y, c)
    cls = y[rows]
    xr = x[rows]

    def margins(Wm):
        S = x @ Wm.T
        return S[rows, cls] - S[rows, others]

    active = np.flatnonzero(margins(W) < 1.0 + 1e-6)
    for _ in range(max_polish):
        if active.size == 0:
            W_new = np.zeros((c, d))
            alpha = np.zeros(0)
        else:
            xa, ya, pa = xr[active], cls[active], others[active]
            label_term = ((ya[:, None] == ya[None, :]).astype(float) - (ya[:, None] == pa[None, :])
                          - (pa[:, None] == ya[None, :]) + (pa[:, None] == pa[None, :]))
            gram = (xa @ xa.T) * label_term
            alpha = np.linalg.lstsq(gram, np.ones(active.size), rcond=None)[0]
            W_new = np.zeros((c, d))
            np.add.at(W_new, ya, alpha[:, None] * xa)
            np.add.at(W_new, pa, -alpha[:, None] * xa)
        m_new = margins(W_new)
        violation = float(max(0.0, np.max(1.0 - m_new)))
        dual_ok = alpha.size == 0 or alpha.min() >= -1e-9 * max(1.0, np.abs(alpha).max())
        if violation <= tolerance and dual_ok:
            return MarginSolution(W_new, violation, float(np.sum(W_new * W_new)), int(active.size), alpha)
        keep = active if dual_ok else active[alpha >= 0]
        active = np.union1d(keep, np.flatnonzero(m_new < 1.0 - tolerance))
    raise InfeasibleOrUnconverged(
        f"margin constraints still violated by {violation:.3g} after {max_polish} polish steps"
    )


@dataclass
class FactorPair:
    u: np.ndarray
    v: np.ndarray


def min_norm_factorize(w_tilde, m: int, rank_tol: float = 1e-10) -> FactorPair:
    """Balanced two-layer factorization ``w_tilde = v u`` with ``u u^T = v^T v``."""
    w_tilde = np.atleast_2d(np.asarray(w_tilde, dtype=float))
    c, d = w_tilde.shape
    U, s, Vt = np.linalg.svd(w_tilde, full_matrices=False)
    rank = int(np.sum(s > rank_tol * max(s.max(initial=0.0), 1e-300)))
    if m < rank:
        raise ValueError(f"m={m} is below rank {rank}")
    keep = min(m, s.size)
    root = np.sqrt(s[:keep])
    u = np.zeros((m, d))
    v = np.zeros((c, m))
    u[:keep] = root[:, None] * Vt[:keep]
    v[:, :keep] = U[:, :keep] * root
    return FactorPair(u, v)


def feature_correlation(pair: FactorPair, j: int) -> float:
    """``sum_i <u_i, e_j>^2``, the squared mass of feature rows on coordinate ``j``."""
    u = pair.u if isinstance(pair, FactorPair) else np.atleast_2d(pair)
    if not 0 <= j < u.shape[1]:
        raise IndexError(f"direction {j} out of range for d={u.shape[1]}")
    return float(np.sum(u[:, j] ** 2))
