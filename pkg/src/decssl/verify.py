"""Numerical checks of the theory-setting claims against exact oracles."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .datagen import TheoryGenConfig, generate_theory_dataset, random_orthogonal, source_rng
from .fedsim import NumericalDivergence
from .objectives import (
    InfeasibleOrUnconverged,
    feature_correlation,
    linear_ssl_gradient,
    linear_ssl_loss_expected,
    margin_problem_solve,
    min_norm_factorize,
)
from .spectral import (
    empirical_covariance,
    global_covariance,
    principal_angle,
    representability,
    ssl_minimizer_oracle,
    top_eigenpairs,
)


# -- representability across dimensions ------------------------------------


@dataclass
class Theorem1Row:
    d: int
    seed: int
    min_local_nonowned: float
    min_global: float
    local: list[list[float]]
    global_: list[float]


@dataclass
class Theorem1Report:
    rows: list[Theorem1Row]
    medians: dict[int, float]
    local_ok: bool
    global_ok: bool
    trend_ok: bool
    threshold: float
    threshold_from_d: int

    @property
    def passed(self) -> bool:
        return self.local_ok and self.global_ok and self.trend_ok

    def to_dict(self) -> dict:
        out = asdict(self)
        out["medians"] = {str(k): v for k, v in self.medians.items()}
        out["passed"] = self.passed
        return out


def theorem1_instance(d: int, K: int, m: int, seed: int, majority_count: int = 500,
                      minority_count: int = 20, mu_noise: float | None = None) -> Theorem1Row:
    """Oracle representabilities for one generated instance.

    ``local[k]`` holds ``r^k_i`` for ``i = 0..K-1``; the owned entry ``i = k``
    is reported but excluded from the minimum.
    """
    sources = generate_theory_dataset(TheoryGenConfig(d, K, majority_count, minority_count, mu_noise=mu_noise,
                                                      seed=seed))
    dirs = list(range(K))
    local = []
    for k, ds in enumerate(sources):
        w = ssl_minimizer_oracle(empirical_covariance(ds), m)
        local.append([float(v) for v in representability(w, dirs).values])
    w_bar = ssl_minimizer_oracle(global_covariance(sources), m)
    glob = [float(v) for v in representability(w_bar, dirs).values]
    nonowned = [local[k][i] for k in range(K) for i in range(K) if i != k]
    return Theorem1Row(d, seed, min(nonowned) if nonowned else 1.0, min(glob), local, glob)


def verify_theorem1(d_grid: Sequence[int], K: int = 3, m: int | None = None, seeds: Sequence[int] = range(10),
                    majority_count: int = 500, minority_count: int = 20, threshold: float = 0.9,
                    threshold_from_d: int = 512, mu_noise: float | None = None,
                    trend_tol: float = 1e-12) -> Theorem1Report:
    """Local and global oracle representability on the skewed data over a grid of ``d``.

    Thresholds apply for ``d >= threshold_from_d``; the trend check asks the
    median (over seeds) of the minimum non-owned local representability to be
    non-decreasing along the sorted grid, up to ``trend_tol`` of roundoff.
    """
    m = m or 2 * K
    grid = sorted(int(d) for d in d_grid)
    for d in grid:
        if d < 2 * K:
            raise ValueError(f"d={d} is below 2K={2 * K}")
    rows = [theorem1_instance(d, K, m, int(s), majority_count, minority_count, mu_noise)
            for d in grid for s in seeds]
    medians = {d: float(np.median([r.min_local_nonowned for r in rows if r.d == d])) for d in grid}
    gated = [r for r in rows if r.d >= threshold_from_d]
    local_ok = all(r.min_local_nonowned >= threshold for r in gated)
    global_ok = all(r.min_global >= threshold for r in gated)
    seq = [medians[d] for d in grid]
    trend_ok = all(b >= a - trend_tol for a, b in zip(seq, seq[1:]))
    return Theorem1Report(rows, medians, local_ok, global_ok, trend_ok, threshold, threshold_from_d)


# -- supervised feature concentration -----------------------------------------


@dataclass
class Prop1Row:
    seed: int
    source: int
    own: float
    others: list[float]
    ssl_others: list[float]
    margin_violation: float

    @property
    def ratio(self) -> float:
        top = max(self.others) if self.others else 0.0
        return float("inf") if top == 0 else self.own / top


@dataclass
class Prop1Report:
    rows: list[Prop1Row]
    factor: float
    ssl_threshold: float
    ratio_ok: bool
    ssl_ok: bool

    @property
    def passed(self) -> bool:
        return self.ratio_ok and self.ssl_ok

    def to_dict(self) -> dict:
        out = asdict(self)
        for row, d in zip(self.rows, out["rows"]):
            d["ratio"] = row.ratio
        out["passed"] = self.passed
        return out


def prop1_source(dataset, K: int, m: int, tolerance: float = 1e-8):
    """Correlations of the min-norm supervised features with ``e_0..e_{K-1}``."""
    try:
        sol = margin_problem_solve(dataset, 2 * K, tolerance)
    except InfeasibleOrUnconverged as exc:
        raise InfeasibleOrUnconverged(f"source {dataset.source_id}: {exc}") from exc
    pair = min_norm_factorize(sol.w_tilde, m)
    return [feature_correlation(pair, j) for j in range(K)], sol


def verify_prop1(d: int = 512, K: int = 3, seeds: Sequence[int] = range(5), factor: float = 5.0,
                 ssl_threshold: float = 0.9, m: int | None = None, majority_count: int = 500,
                 minority_count: int = 20, tolerance: float = 1e-8, mu_noise: float | None = None) -> Prop1Report:
    """Supervised vs self-supervised local features on the same skewed sources.

    Per source ``k`` the supervised correlation at ``e_k`` must beat every
    ``e_j`` (``j != k``) by ``factor`` while the SSL oracle keeps
    representability above ``ssl_threshold`` at those ``e_j``.
    """
    m = m or 2 * K
    rows = []
    for seed in seeds:
        sources = generate_theory_dataset(TheoryGenConfig(d, K, majority_count, minority_count, mu_noise=mu_noise,
                                                          seed=int(seed)))
        for k, ds in enumerate(sources):
            corr, sol = prop1_source(ds, K, m, tolerance)
            others = [j for j in range(K) if j != k]
            w = ssl_minimizer_oracle(empirical_covariance(ds), m)
            r = representability(w, others).values if others else np.zeros(0)
            rows.append(Prop1Row(int(seed), k, corr[k], [corr[j] for j in others],
                                 [float(v) for v in r], sol.margin_violation))
    ratio_ok = all(row.ratio >= factor for row in rows)
    ssl_ok = all(min(row.ssl_others, default=1.0) >= ssl_threshold for row in rows)
    return Prop1Report(rows, factor, ssl_threshold, ratio_ok, ssl_ok)


# -- gradient descent versus the spectral oracle -----------------------------


def random_psd_instance(d: int, m: int, seed: int, top=(2.0, 4.0), rest=(0.0, 1.0)) -> np.ndarray:
    """``Q diag(lambda) Q^T`` with the top ``m`` eigenvalues spread over ``top``
    and the rest over ``rest``, so the rank-m subspace is well separated."""
    if not 1 <= m <= d:
        raise ValueError(f"m={m} must lie in [1, {d}]")
    rng = source_rng(seed, 0)
    lam = np.concatenate([np.sort(rng.uniform(*top, size=m))[::-1], rng.uniform(*rest, size=d - m)])
    Q = random_orthogonal(d, rng)
    X = (Q * lam) @ Q.T
    return 0.5 * (X + X.T)


@dataclass
class EquivalenceReport:
    d: int
    m: int
    steps: int
    step_size: float
    seed: int
    angle: float
    objective: float
    oracle_objective: float
    relative_gap: float
    gradient_norm: float
    angle_tol: float
    gap_tol: float
    objective_curve: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.angle <= self.angle_tol and self.relative_gap <= self.gap_tol

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("objective_curve")
        out["passed"] = self.passed
        return out


def gradient_descent(X: np.ndarray, w0: np.ndarray, steps: int, step_size: float,
                     record_every: int = 0) -> tuple[np.ndarray, list[float]]:
    """Plain descent on the expected linear SSL loss."""
    w = np.array(w0, dtype=float)
    curve = []
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(steps):
            w = w - step_size * linear_ssl_gradient(w, X)
            if not np.all(np.isfinite(w)):
                raise NumericalDivergence(-1, f"weights became non-finite at step {t + 1}")
            if record_every and (t + 1) % record_every == 0:
                curve.append(linear_ssl_loss_expected(w, X))
    return w, curve


def verify_equivalence(d: int = 32, m: int = 4, steps: int = 3000, step_size: float | None = None,
                       seed: int = 0, covariance: np.ndarray | None = None, angle_tol: float = 1e-2,
                       gap_tol: float = 1e-6, init_scale: float = 1e-2) -> EquivalenceReport:
    """Train ``w`` by expected-gradient descent and compare with the Eckart-Young minimizer.

    ``step_size`` defaults to ``0.1 / lambda_max``.  Without ``covariance`` a
    random well-separated PSD instance is drawn from ``seed``.
    """
    X = random_psd_instance(d, m, seed) if covariance is None else np.asarray(covariance, dtype=float)
    d = X.shape[0]
    oracle = ssl_minimizer_oracle(X, m)
    lam_max = max(float(top_eigenpairs(X, 1).eigenvalues[0]), 1e-12)
    gamma = 0.1 / lam_max if step_size is None else float(step_size)
    rng = source_rng(seed, 1)
    w0 = init_scale * rng.standard_normal((m, d)) / np.sqrt(d)
    w, curve = gradient_descent(X, w0, steps, gamma, record_every=max(1, steps // 100))
    obj = linear_ssl_loss_expected(w, X)
    best = linear_ssl_loss_expected(oracle, X)
    gap = (obj - best) / max(abs(best), 1e-300)
    angle = principal_angle(w, oracle.weight) if np.any(w) else float(np.pi / 2)
    grad = float(np.linalg.norm(linear_ssl_gradient(w, X)))
    return EquivalenceReport(d, m, steps, gamma, seed, angle, obj, best, float(gap), grad,
                             angle_tol, gap_tol, curve)

