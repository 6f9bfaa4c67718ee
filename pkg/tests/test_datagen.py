from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decssl.datagen import (
    LocalDataset,
    PartitionSpec,
    TheoryGenConfig,
    apply_input_shift,
    concatenate,
    generate_theory_dataset,
    heterogeneity_emd,
    largest_remainder,
    load_dataset_csv,
    partition_dirichlet,
    partition_feature_clusters,
    partition_skewness,
    random_orthogonal,
    save_dataset_csv,
    source_rng,
)

from oracles import theory_histograms


def _labels(num_classes, per_class):
    return np.repeat(np.arange(num_classes), per_class)


class TestTheoryGenerator:
    def test_single_source_noise_free_anchors(self):
        (ds,) = generate_theory_dataset(TheoryGenConfig(d=4, K=1, majority_count=2, minority_count=0, mu_noise=0))
        e0 = np.eye(4)[0]
        assert np.array_equal(ds.samples[ds.labels == 0], np.stack([e0, e0]))
        assert np.array_equal(ds.samples[ds.labels == 1], np.stack([-e0, -e0]))
        assert ds.num_classes == 2

    def test_default_scales(self):
        cfg = TheoryGenConfig(d=100000, K=1, majority_count=1)
        assert cfg.tau_scale == pytest.approx(10.0)
        assert cfg.mu_noise == pytest.approx(0.1)

    def test_histograms_match_enumeration(self):
        sources = generate_theory_dataset(TheoryGenConfig(d=16, K=2, majority_count=50, minority_count=5, seed=7))
        expected = theory_histograms(2, 50, 5)
        for ds, hist in zip(sources, expected):
            counts = {int(c): int(n) for c, n in enumerate(ds.histogram()) if n}
            assert counts == hist
        assert counts == {2: 50, 3: 50, 0: 5}

    def test_noise_free_geometry(self):
        tau = 2.0
        sources = generate_theory_dataset(TheoryGenConfig(d=8, K=3, majority_count=40, minority_count=3,
                                                          tau_scale=tau, mu_noise=0, seed=1))
        for k, ds in enumerate(sources):
            for x, y in zip(ds.samples, ds.labels):
                if y in (2 * k, 2 * k + 1):
                    assert x[k] == (1.0 if y == 2 * k else -1.0)
                    others = [i for i in range(3) if i != k]
                    assert set(np.unique(x[others])) <= {0.0, -tau}
                    assert not np.any(x[3:])
                else:
                    assert y % 2 == 0 and y != 2 * k
                    assert np.array_equal(x, np.eye(8)[y // 2])

    def test_coins_are_fair(self):
        (ds, _) = generate_theory_dataset(TheoryGenConfig(d=8, K=2, majority_count=4000, mu_noise=0, tau_scale=1.0))
        frac = np.mean(ds.samples[:, 1] != 0)
        assert abs(frac - 0.5) < 0.03

    def test_seeded_and_source_order_independent(self):
        cfg = TheoryGenConfig(d=12, K=3, majority_count=10, minority_count=2, seed=5)
        a = generate_theory_dataset(cfg)
        b = generate_theory_dataset(TheoryGenConfig(d=12, K=3, majority_count=10, minority_count=2, seed=5))
        for x, y in zip(a, b):
            assert np.array_equal(x.samples, y.samples)
        c = generate_theory_dataset(TheoryGenConfig(d=12, K=3, majority_count=10, minority_count=2, seed=6))
        assert not np.array_equal(a[0].samples, c[0].samples)

    @pytest.mark.parametrize("kwargs", [
        dict(d=3, K=2, majority_count=1),
        dict(d=8, K=0, majority_count=1),
        dict(d=8, K=2, majority_count=0),
        dict(d=8, K=2, majority_count=1, minority_count=-1),
        dict(d=8, K=2, majority_count=1, mu_noise=-0.1),
    ])
    def test_rejects_bad_config(self, kwargs):
        with pytest.raises(ValueError):
            TheoryGenConfig(**kwargs)


class TestLocalDataset:
    def test_validation(self):
        with pytest.raises(ValueError):
            LocalDataset(np.zeros((3, 2)), [0, 1])
        with pytest.raises(ValueError):
            LocalDataset(np.zeros((2, 2)), [0, 3], num_classes=2)

    def test_concatenate_and_subset(self):
        a = LocalDataset(np.ones((2, 3)), [0, 1])
        b = LocalDataset(np.zeros((1, 3)), [2])
        cat = concatenate([a, b])
        assert len(cat) == 3 and cat.num_classes == 3
        sub = cat.subset([2])
        assert sub.labels.tolist() == [2] and sub.num_classes == 3

    def test_csv_round_trip(self, tmp_path):
        ds = generate_theory_dataset(TheoryGenConfig(d=6, K=2, majority_count=3, minority_count=1, seed=2))[1]
        path = tmp_path / "ds.csv"
        save_dataset_csv(ds, path)
        back = load_dataset_csv(path, num_classes=ds.num_classes)
        assert np.array_equal(back.samples, ds.samples)
        assert np.array_equal(back.labels, ds.labels)


class TestDirichlet:
    def test_single_source_takes_all(self):
        labels = _labels(4, 7)
        spec = partition_dirichlet(labels, 1, 0.3, seed=1)
        assert np.array_equal(spec.assignments[0], np.arange(labels.size))

    def test_large_alpha_near_uniform(self):
        spec = partition_dirichlet(_labels(10, 1000), 5, 1e6, seed=0)
        frac = spec.label_histograms / spec.label_histograms.sum(axis=0, keepdims=True)
        assert np.all(np.abs(frac - 0.2) <= 0.02)

    def test_small_alpha_concentrates(self):
        # each class lands almost entirely on one source, so a source holds
        # about N/K = 2 classes on average
        top_share, held = [], []
        for seed in range(20):
            spec = partition_dirichlet(_labels(10, 500), 5, 0.01, seed=seed)
            top_share.extend(spec.label_histograms.max(axis=0) / 500.0)
            held.extend((spec.label_histograms >= 50).sum(axis=1))
        assert np.mean(top_share) >= 0.95
        assert np.mean(held) == pytest.approx(2.0, abs=0.25)

    def test_rejects_bad_alpha(self):
        with pytest.raises(ValueError):
            partition_dirichlet(_labels(2, 3), 2, 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.floats(0.005, 50), st.integers(0, 10_000), st.integers(1, 5))
    def test_is_a_partition(self, K, alpha, seed, classes):
        labels = _labels(classes, 13)
        spec = partition_dirichlet(labels, K, alpha, seed)
        every = np.sort(np.concatenate(spec.assignments))
        assert np.array_equal(every, np.arange(labels.size))
        assert spec.label_histograms.sum() == labels.size


class TestSkewness:
    def test_beta_zero_exclusive(self):
        labels = _labels(10, 100)
        spec = partition_skewness(labels, 5, 0.0, seed=0)
        owned = spec.label_histograms > 0
        assert np.all(owned.sum(axis=1) == 2)
        assert np.all(owned.sum(axis=0) == 1)

    def test_beta_one_near_uniform(self):
        spec = partition_skewness(_labels(10, 1000), 5, 1.0, seed=0)
        assert np.all(spec.label_histograms.sum(axis=1) == 2000)
        # the uniform share of every class is split evenly
        assert np.all(spec.label_histograms == 200)

    def test_half_split_counts(self):
        # 4 classes x 100, K=2: each class keeps 50 with its owner, and the
        # 200-sample uniform pool contributes about 25 per class to each source
        owned_counts, other_counts = [], []
        for seed in range(200):
            spec = partition_skewness(_labels(4, 100), 2, 0.5, seed=seed)
            for row in spec.label_histograms:
                owned = row >= 50
                owned_counts.extend(row[owned])
                other_counts.extend(row[~owned])
        assert np.mean(owned_counts) == pytest.approx(75, abs=1.0)
        assert np.mean(other_counts) == pytest.approx(25, abs=1.0)

    def test_fewer_classes_than_sources(self):
        spec = partition_skewness(_labels(2, 30), 4, 0.0, seed=1)
        assert all(len(a) > 0 for a in spec.assignments)
        assert np.all((spec.label_histograms > 0).sum(axis=1) == 1)

    def test_emd_decreases_with_beta(self):
        labels = _labels(10, 100)
        g = np.bincount(labels)
        values = [heterogeneity_emd(partition_skewness(labels, 5, b, seed=4), g) for b in np.linspace(0, 1, 6)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_rejects_bad_beta(self):
        with pytest.raises(ValueError):
            partition_skewness(_labels(2, 3), 2, 1.5)


class TestFeatureClusters:
    def test_single_cluster(self):
        x = np.random.default_rng(0).standard_normal((20, 3))
        spec = partition_feature_clusters(x, 1)
        assert np.array_equal(spec.assignments[0], np.arange(20))

    def test_separated_blobs(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((40, 5)) + 20
        b = rng.standard_normal((30, 5)) - 20
        spec = partition_feature_clusters(np.vstack([a, b]), 2, seed=3)
        groups = sorted(spec.assignments, key=len)
        assert set(groups[0]) == set(range(40, 70))
        assert set(groups[1]) == set(range(40))

    def test_rotation_invariant(self):
        rng = np.random.default_rng(2)
        x = np.vstack([rng.standard_normal((25, 4)) + 6 * np.eye(4)[i] for i in range(3)])
        q = random_orthogonal(4, rng)
        p1 = partition_feature_clusters(x, 3, seed=0)
        p2 = partition_feature_clusters(x @ q.T, 3, seed=0)
        key = lambda spec: sorted(tuple(a) for a in spec.assignments)
        assert key(p1) == key(p2)

    def test_rejects_too_many_clusters(self):
        with pytest.raises(ValueError):
            partition_feature_clusters(np.zeros((2, 2)), 3)


class TestInputShift:
    def _sources(self):
        return generate_theory_dataset(TheoryGenConfig(d=10, K=2, majority_count=5, minority_count=1, seed=0))

    def test_preserves_norms_and_is_deterministic(self):
        src = self._sources()
        a = apply_input_shift(src, seed=3)
        b = apply_input_shift(src, seed=3)
        for x, y, z in zip(src, a, b):
            assert np.array_equal(y.samples, z.samples)
            assert np.allclose(np.linalg.norm(x.samples, axis=1), np.linalg.norm(y.samples, axis=1), atol=1e-9)

    def test_sources_get_distinct_rotations(self):
        q0 = random_orthogonal(10, source_rng(3, 0))
        q1 = random_orthogonal(10, source_rng(3, 1))
        assert np.linalg.norm(q0 - q1) > 0
        assert np.allclose(q0 @ q0.T, np.eye(10))


class TestHeterogeneity:
    def test_identical_sources_zero(self):
        spec = PartitionSpec([np.array([0, 1]), np.array([2, 3])], np.array([[1, 1], [1, 1]]), "manual", None)
        assert heterogeneity_emd(spec, [2, 2]) == 0.0

    def test_disjoint_sources(self):
        spec = PartitionSpec([np.array([0]), np.array([1])], np.array([[1, 0], [0, 1]]), "manual", None)
        assert heterogeneity_emd(spec, [1, 1]) == pytest.approx(0.5)

    def test_rejects_empty_source(self):
        spec = PartitionSpec([np.array([0]), np.array([], dtype=int)], np.array([[1, 0], [0, 0]]), "manual", None)
        with pytest.raises(ValueError):
            heterogeneity_emd(spec, [1, 0])


class TestPartitionSpec:
    def test_json_round_trip(self):
        labels = _labels(3, 4)
        spec = partition_dirichlet(labels, 2, 1.0, seed=0)
        back = PartitionSpec.from_json(spec.to_json(), labels)
        assert back.scheme == "dirichlet"
        for a, b in zip(spec.assignments, back.assignments):
            assert np.array_equal(a, b)
        assert np.array_equal(back.label_histograms, spec.label_histograms)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.integers(0, 500))
def test_largest_remainder_sums(props, total):
    p = np.asarray(props)
    p = p / p.sum() if p.sum() > 0 else np.full(p.size, 1 / p.size)
    counts = largest_remainder(p, total)
    assert counts.sum() == total
    assert np.all(np.abs(counts - p * total) < 1 + 1e-9)
