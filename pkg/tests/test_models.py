import numpy as np
import pytest

from coppkit import models, nn
from coppkit.core import BanditDataset, Kind
from coppkit.envs import ToyContinuous, ToyDiscrete, gen_synthetic
from coppkit.nn import MlpSpec, TrainOpts

OPTS = TrainOpts(epochs=300, batch_size=64, patience=20, seed=0)


@pytest.fixture(scope="module")
def toy_train():
    env = ToyDiscrete()
    return gen_synthetic(env, env.behavior_policy(0.3), 3000, np.random.default_rng(11))


@pytest.fixture(scope="module")
def noise_data():
    rng = np.random.default_rng(5)
    n = 4000
    return BanditDataset(rng.uniform(-2, 2, size=(n, 1)), np.zeros(n), rng.normal(size=n))


@pytest.fixture(scope="module")
def noise_pair(noise_data):
    return models.fit_quantile_pair(noise_data, 0.05, 0.95, MlpSpec(1, (32,), 1, seed=1), OPTS)


class TestQuantilePair:
    def test_gaussian_quantiles(self, noise_pair):
        lo, hi = noise_pair.predict(np.linspace(-2, 2, 200)[:, None])
        assert abs(lo.mean() + 1.645) < 0.15
        assert abs(hi.mean() - 1.645) < 0.15

    def test_beats_constant_baseline(self, noise_data, noise_pair):
        X, y = noise_data.X[-400:], noise_data.Y[-400:]
        lo, hi = noise_pair.predict(X)
        for beta, q in ((0.05, lo), (0.95, hi)):
            # the beta quantile minimises the loss at level 1 - beta (ledgered convention)
            fitted = nn.pinball_loss(q, y, 1 - beta).mean()
            const = nn.pinball_loss(np.full_like(y, np.mean(y)), y, 1 - beta).mean()
            assert fitted <= const

    def test_constant_outcome(self):
        n = 300
        X = np.random.default_rng(0).normal(size=(n, 1))
        data = BanditDataset(X, np.zeros(n), np.full(n, 3.5))
        q = models.fit_quantile_pair(data, 0.05, 0.95, MlpSpec(1, (8,), 1), OPTS)
        lo, hi = q.predict(X)
        np.testing.assert_allclose(lo, 3.5, atol=0.01)
        np.testing.assert_allclose(hi, 3.5, atol=0.01)

    def test_equal_weights_identical(self, noise_data):
        sub = noise_data.subset(np.arange(300))
        opts = TrainOpts(epochs=15, seed=2)
        a = models.fit_quantile_pair(sub, 0.1, 0.9, MlpSpec(1, (8,), 1, seed=3), opts)
        b = models.fit_quantile_pair(sub, 0.1, 0.9, MlpSpec(1, (8,), 1, seed=3), opts,
                                     sample_weights=np.full(300, 2.5))
        np.testing.assert_array_equal(a.lo_net.params, b.lo_net.params)
        np.testing.assert_array_equal(a.hi_net.params, b.hi_net.params)

    def test_no_crossing(self, noise_pair):
        # force crossing by swapping the networks; clamping must repair it
        swapped = models.QuantilePair(noise_pair.hi_net, noise_pair.lo_net, noise_pair.x_scaler,
                                      noise_pair.y_scaler, 0.05, 0.95)
        lo, hi = swapped.predict(np.random.default_rng(1).normal(size=(1000, 1)) * 5)
        assert np.all(lo <= hi)

    def test_validation(self, noise_data):
        with pytest.raises(ValueError):
            models.fit_quantile_pair(noise_data, 0.9, 0.1, MlpSpec(1), OPTS)
        with pytest.raises(ValueError):
            models.fit_quantile_pair(noise_data, 0.1, 0.9, MlpSpec(1), OPTS,
                                     sample_weights=np.zeros(len(noise_data)))

    def test_serialise(self, noise_pair):
        back = models.load_model(noise_pair.to_bytes())
        X = np.linspace(-3, 3, 11)[:, None]
        for a, b in zip(noise_pair.predict(X), back.predict(X)):
            np.testing.assert_array_equal(a, b)


@pytest.fixture(scope="module")
def p_hat(toy_train):
    return models.fit_gaussian_conditional(toy_train, MlpSpec(1, (32,), 1, seed=2), OPTS)


class TestGaussianConditional:
    def test_recovers_mean(self, p_hat):
        mu, _ = p_hat.mean_std(np.array([[1.0]]), np.array([1]))
        assert abs(mu[0] - 2.0) < 0.2

    def test_unimodal(self, p_hat):
        X = np.linspace(-5, 5, 50)[:, None]
        A = np.arange(50) % 4
        mu, sd = p_hat.mean_std(X, A)
        assert np.all(p_hat.logpdf(X, A, mu) >= p_hat.logpdf(X, A, mu + 3 * sd))

    def test_sigma_floor(self, p_hat):
        rng = np.random.default_rng(0)
        X = rng.normal(scale=20, size=(10_000, 1))
        _, sd = p_hat.mean_std(X, rng.integers(0, 4, 10_000))
        assert np.all(sd >= 1e-3)

    def test_beats_global_gaussian(self, p_hat):
        env = ToyDiscrete()
        val = gen_synthetic(env, env.behavior_policy(0.3), 2000, np.random.default_rng(99))
        nll = -p_hat.logpdf(val.X, val.A, val.Y).mean()
        mu, sd = val.Y.mean(), val.Y.std()
        glob = np.mean(0.5 * ((val.Y - mu) / sd) ** 2 + np.log(sd) + 0.5 * np.log(2 * np.pi))
        assert nll < glob

    def test_constant_cell(self):
        n = 400
        data = BanditDataset(np.full((n, 1), 0.7), np.zeros(n, dtype=int), np.full(n, -1.25), Kind(1))
        p = models.fit_gaussian_conditional(data, MlpSpec(1, (8,), 1), TrainOpts(epochs=800, patience=800,
                                                                                   lr=1e-2))
        mu, sd = p.mean_std(np.array([[0.7]]), np.array([0]))
        assert abs(mu[0] + 1.25) < 0.01
        assert sd[0] < 2e-3

    def test_all_actions(self, p_hat):
        X = np.linspace(-1, 1, 5)[:, None]
        mu_all, sd_all = p_hat.mean_std_all(X)
        for a in range(4):
            mu, sd = p_hat.mean_std(X, np.full(5, a))
            np.testing.assert_allclose(mu_all[:, a], mu)
            np.testing.assert_allclose(sd_all[:, a], sd)

    def test_serialise(self, p_hat):
        back = models.load_model(p_hat.to_bytes())
        X = np.linspace(-3, 3, 7)[:, None]
        A = np.arange(7) % 4
        np.testing.assert_array_equal(back.logpdf(X, A, X[:, 0]), p_hat.logpdf(X, A, X[:, 0]))

    def test_needs_continuous_outcome(self):
        data = BanditDataset(np.zeros((4, 1)), np.zeros(4, dtype=int), np.array([0, 1, 0, 1]), Kind(1), Kind(2))
        with pytest.raises(TypeError):
            models.fit_gaussian_conditional(data, MlpSpec(1), OPTS)


class TestBehaviourPolicy:
    def test_toy_rule(self, toy_train):
        pi_hat = models.fit_behavior_policy(toy_train, MlpSpec(1, (16, 16), 1, seed=0), OPTS)
        X = np.random.default_rng(1).normal(scale=3, size=(1000, 1))
        true = ToyDiscrete().behavior_policy(0.3).probs(X)
        P = pi_hat.probs(X)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
        assert np.abs(P - true).mean() < 0.05
        back = models.load_model(pi_hat.to_bytes())
        np.testing.assert_array_equal(back.probs(X), P)

    def test_single_action(self):
        n = 200
        data = BanditDataset(np.random.default_rng(0).normal(size=(n, 1)), np.zeros(n, dtype=int),
                             np.zeros(n), Kind(1))
        pi_hat = models.fit_behavior_policy(data, MlpSpec(1, (4,), 1), TrainOpts(epochs=5))
        np.testing.assert_array_equal(pi_hat.probs(np.linspace(-3, 3, 9)[:, None]), 1.0)

    def test_continuous_slope(self):
        env = ToyContinuous()
        data = gen_synthetic(env, env.behavior_policy(0.0), 3000, np.random.default_rng(4))
        pi_hat = models.fit_behavior_policy(data, MlpSpec(1, (16, 16), 1, seed=1), OPTS)
        X = np.linspace(-4, 4, 81)[:, None]
        slope = np.polyfit(X[:, 0], pi_hat.mean(X), 1)[0]
        assert abs(slope - 0.25) < 0.05
        assert pi_hat.std > 0
        back = models.load_model(pi_hat.to_bytes())
        np.testing.assert_array_equal(back.prob(X, X[:, 0]), pi_hat.prob(X, X[:, 0]))


class TestCategorical:
    def test_probs_and_round_trip(self):
        rng = np.random.default_rng(0)
        n = 1500
        X = rng.normal(size=(n, 1))
        A = rng.integers(0, 2, n)
        Y = ((X[:, 0] > 0) ^ (A == 1)).astype(int)
        data = BanditDataset(X, A, Y, Kind(2), Kind(2))
        cat = models.fit_categorical_conditional(data, MlpSpec(1, (16,), 1), OPTS)
        P = cat.probs_all(np.array([[2.0], [-2.0]]))
        assert P.shape == (2, 2, 2)
        np.testing.assert_allclose(P.sum(axis=2), 1.0, atol=1e-9)
        assert P[0, 0, 1] > 0.9 and P[0, 1, 0] > 0.9 and P[1, 0, 0] > 0.9
        back = models.load_model(cat.to_bytes())
        np.testing.assert_array_equal(back.probs_all(X[:5]), cat.probs_all(X[:5]))
