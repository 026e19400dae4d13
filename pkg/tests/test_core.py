import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from coppkit.core import (ActionKindError, BanditDataset, Deterministic, GaussianLinear, Kind,
                          LoggedSample, PredictionSet, SizeError, SplitSpec, TabularRule, policy_from_dict,
                          policy_prob, policy_sample, split_dataset)
from coppkit.envs import toy_policy


def _toy_data(n=10, seed=0):
    rng = np.random.default_rng(seed)
    return BanditDataset(rng.normal(size=(n, 2)), rng.integers(0, 4, n), rng.normal(size=n), Kind(4))


class TestDataset:
    def test_immutable(self):
        data = _toy_data()
        with pytest.raises(ValueError):
            data.X[0, 0] = 1.0
        with pytest.raises(Exception):
            data.A = np.zeros(10)

    def test_rejects_bad_action(self):
        with pytest.raises(ActionKindError):
            BanditDataset(np.zeros((2, 1)), np.array([0, 4]), np.zeros(2), Kind(4))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            BanditDataset(np.zeros((0, 1)), np.zeros(0), np.zeros(0))

    def test_samples_round_trip(self):
        data = _toy_data()
        back = BanditDataset.from_samples(data.samples, Kind(4))
        assert back.identical(data)
        assert isinstance(data.samples[0], LoggedSample)
        assert data.d == 2 and len(data) == 10

    def test_kind_parse(self):
        assert Kind.parse(str(Kind(4))) == Kind(4)
        assert Kind.parse("continuous") == Kind(None)
        with pytest.raises(ValueError):
            Kind.parse("ordinal")


class TestSplit:
    def test_sizes_and_disjoint(self):
        data = BanditDataset(np.arange(10.0), np.zeros(10), np.arange(10.0))
        train, cal = split_dataset(data, SplitSpec(6, 4, 1))
        assert len(train) == 6 and len(cal) == 4
        assert not set(train.Y) & set(cal.Y)
        assert set(train.Y) | set(cal.Y) == set(range(10))

    def test_deterministic(self):
        data = _toy_data(50)
        a = split_dataset(data, SplitSpec(30, 20, 7))
        b = split_dataset(data, SplitSpec(30, 20, 7))
        assert a[0].identical(b[0]) and a[1].identical(b[1])

    def test_too_large(self):
        with pytest.raises(SizeError):
            split_dataset(_toy_data(), SplitSpec(6, 5, 1))

    @given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2 ** 63 - 1))
    @settings(max_examples=50, deadline=None)
    def test_partition_property(self, m, n, seed):
        size = m + n + 3
        data = BanditDataset(np.arange(size, dtype=float), np.zeros(size), np.arange(size, dtype=float))
        train, cal = split_dataset(data, SplitSpec(m, n, seed))
        ids = np.concatenate([train.Y, cal.Y])
        assert ids.size == np.unique(ids).size == m + n


class TestPolicies:
    def test_toy_policy_prob(self):
        p = toy_policy(0.3)
        assert policy_prob(p, [0.5], 0) == pytest.approx(0.1)
        for a in (1, 2, 3):
            assert policy_prob(p, [0.5], a) == pytest.approx(0.3)

    def test_toy_regions(self):
        p = toy_policy(0.1)
        favoured = [np.argmax(p.probs(np.array([[x]]))[0]) for x in (0.5, 1.0, 1.5, 2.5, 3.0, 3.5, -4.0)]
        assert favoured == [0, 0, 1, 2, 2, 3, 3]

    def test_gaussian_density(self):
        p = GaussianLinear(0.25, 0.0, 1.0)
        assert policy_prob(p, [0.0], 0.0) == pytest.approx(0.39894, abs=1e-5)

    def test_deterministic(self):
        p = Deterministic.always(2, 4)
        assert policy_prob(p, [1.0], 2) == 1.0
        assert policy_prob(p, [1.0], 0) == 0.0
        rng = np.random.default_rng(0)
        assert all(policy_sample(p, [x], rng) == 2 for x in np.linspace(-3, 3, 20))

    def test_kind_mismatch(self):
        with pytest.raises(ActionKindError):
            policy_prob(toy_policy(0.2), [0.0], 1.5)
        with pytest.raises(ActionKindError):
            GaussianLinear(1.0).probs(np.zeros((1, 1)))

    def test_gaussian_std_positive(self):
        with pytest.raises(ValueError):
            GaussianLinear(1.0, 0.0, 0.0)

    def test_eps_one_third_frequencies(self):
        # 1 - 3 eps = 0: the favoured action is never drawn, the others are uniform
        p = toy_policy(1.0 / 3.0)
        rng = np.random.default_rng(3)
        X = np.full((100_000, 1), 0.5)
        counts = np.bincount(p.sample(X, rng), minlength=4) / X.shape[0]
        assert counts[0] == 0.0
        np.testing.assert_allclose(counts[1:], 1.0 / 3.0, atol=0.01)

    def test_gaussian_sample_mean(self):
        p = GaussianLinear(0.25, 0.0, 1.0)
        a = p.sample(np.full((100_000, 1), 4.0), np.random.default_rng(1))
        assert abs(a.mean() - 1.0) < 0.02

    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        X = rng.normal(scale=3, size=(1000, 1))
        for eps in (0.0, 0.05, 0.2, 1.0 / 3.0):
            np.testing.assert_allclose(toy_policy(eps).probs(X).sum(axis=1), 1.0, atol=1e-9)

    def test_chi_square(self):
        p = toy_policy(0.2)
        for x in (0.5, 1.5, 2.5, 3.5):
            X = np.full((100_000, 1), x)
            counts = np.bincount(p.sample(X, np.random.default_rng(int(x * 10))), minlength=4)
            assert chisquare(counts, p.probs(X[:1])[0] * X.shape[0]).pvalue > 0.001

    def test_sample_deterministic(self):
        p = toy_policy(0.2)
        X = np.linspace(-5, 5, 200)[:, None]
        a = p.sample(X, np.random.default_rng(9))
        b = p.sample(X, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_tabular_validation(self):
        with pytest.raises(ValueError):
            TabularRule((1.0,), ((0.5, 0.6), (0.5, 0.5)))
        with pytest.raises(ValueError):
            TabularRule((1.0,), ((1.0, 0.0),))

    def test_from_dict(self):
        p = policy_from_dict({"kind": "toy_eps", "eps": 0.1})
        np.testing.assert_allclose(p.probs(np.array([[0.0]])), [[0.7, 0.1, 0.1, 0.1]])
        g = policy_from_dict(GaussianLinear(0.25, 1.0, 2.0).to_dict())
        assert (g.coef, g.shift, g.std) == (0.25, 1.0, 2.0)
        t = policy_from_dict(toy_policy(0.2).to_dict())
        np.testing.assert_array_equal(t.probs(np.array([[2.5]])), toy_policy(0.2).probs(np.array([[2.5]])))
        with pytest.raises(ValueError):
            policy_from_dict({"kind": "mystery"})


class TestPredictionSet:
    def test_grid_contains(self):
        s = PredictionSet.from_grid(np.arange(5.0), np.array([False, True, True, False, False]))
        assert s.contains(1.4) and s.contains(2.5) and not s.contains(3.6)
        assert s.length() == 2.0

    def test_unbounded_covers(self):
        s = PredictionSet.from_grid(np.arange(5.0), np.ones(5, bool), unbounded=True)
        assert s.contains(1e9)

    def test_labels(self):
        s = PredictionSet.from_labels([2, 0])
        assert s.labels == (0, 2)
        assert s.contains(2) and not s.contains(1)
        assert s.length() == 2

    def test_interval(self):
        s = PredictionSet.interval(-1.0, 2.0)
        assert s.contains(0.0) and not s.contains(2.5)
        assert s.length() == 3.0
