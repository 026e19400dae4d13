import numpy as np
import pytest

from coppkit import nn
from coppkit.nn import MLP, CheckpointError, MlpSpec, TrainingError, TrainOpts


class TestPinball:
    def test_zero_residual(self):
        assert nn.pinball_loss(1.3, 1.3, 0.3) == 0.0

    def test_over_prediction(self):
        assert nn.pinball_loss(2.0, 0.0, 0.9) == pytest.approx(1.8)

    def test_under_prediction(self):
        assert nn.pinball_loss(0.0, 2.0, 0.9) == pytest.approx(0.2)

    @pytest.mark.parametrize("beta", [0.0, 1.0, -0.1, 1.5])
    def test_domain(self, beta):
        with pytest.raises(ValueError):
            nn.pinball_loss(0.0, 1.0, beta)
        with pytest.raises(ValueError):
            nn.make_pinball(beta)

    def test_vectorised_matches_training_loss(self):
        rng = np.random.default_rng(0)
        pred, y = rng.normal(size=50), rng.normal(size=50)
        val, _ = nn.make_pinball(0.3)(pred[:, None], y, np.ones(50))
        assert val == pytest.approx(nn.pinball_loss(pred, y, 0.3).mean())


def _random_net(spec, rng):
    # biases start at exactly 0, which puts dead rows on a ReLU kink
    net = MLP(spec)
    net.set_params(rng.normal(scale=0.7, size=net.params.size))
    return net


class TestGradCheck:
    def test_gaussian_nll(self):
        rng = np.random.default_rng(1)
        for trial in range(20):
            net = _random_net(MlpSpec(3, (5, 4), 2, seed=trial), rng)
            X = rng.normal(size=(6, 3))
            y = rng.normal(size=6)
            assert nn.grad_check(net, nn.make_gaussian_nll(1e-3), (X, y)) <= 1e-4

    def test_pinball_away_from_kink(self):
        rng = np.random.default_rng(2)
        step = 1e-5
        loss = nn.make_pinball(0.9)
        for trial in range(20):
            net = _random_net(MlpSpec(2, (6,), 1, seed=100 + trial), rng)
            X = rng.normal(size=(5, 2))
            out = net(X)[:, 0]
            # keep every residual well clear of the kink
            y = out + rng.choice([-1, 1], 5) * rng.uniform(0.5, 2.0, 5)
            assert np.all(np.abs(out - y) > 10 * step)
            assert nn.grad_check(net, loss, (X, y), step) <= 1e-4

    def test_cross_entropy(self):
        rng = np.random.default_rng(3)
        for trial in range(20):
            net = _random_net(MlpSpec(2, (5,), 4, seed=200 + trial), rng)
            X = rng.normal(size=(7, 2))
            y = rng.integers(0, 4, 7)
            assert nn.grad_check(net, nn.cross_entropy, (X, y)) <= 1e-4

    def test_weighted_squared(self):
        rng = np.random.default_rng(4)
        net = _random_net(MlpSpec(2, (4,), 1, seed=5), rng)
        X, y, w = rng.normal(size=(8, 2)), rng.normal(size=8), rng.uniform(0.1, 2, 8)
        assert nn.grad_check(net, nn.squared_loss, (X, y, w)) <= 1e-4

    def test_linear_squared_exact(self):
        rng = np.random.default_rng(5)
        net = MLP(MlpSpec(3, (), 1, seed=0))
        X, y = rng.normal(size=(10, 3)), rng.normal(size=10)
        assert nn.grad_check(net, nn.squared_loss, (X, y)) <= 1e-6


class TestMlp:
    def test_init_deterministic(self):
        a = MLP(MlpSpec(3, (8, 8), 2, seed=4))
        b = MLP(MlpSpec(3, (8, 8), 2, seed=4))
        np.testing.assert_array_equal(a.params, b.params)

    def test_views_share_memory(self):
        net = MLP(MlpSpec(2, (3,), 1))
        net.params[:] = 0.0
        assert np.all(net.weights[0] == 0.0)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            MlpSpec(0, (4,), 1)
        with pytest.raises(ValueError):
            MlpSpec(1, (4,), 1, activation="tanh")
        with pytest.raises(ValueError):
            TrainOpts(lr=0.0)
        with pytest.raises(ValueError):
            TrainOpts(epochs=0)


class TestTrain:
    def test_fits_linear(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(400, 1))
        y = 2.0 * X[:, 0] - 1.0
        net = MLP(MlpSpec(1, (), 1, seed=0))
        nn.train(net, nn.squared_loss, X, y, TrainOpts(lr=0.05, epochs=300, patience=50))
        np.testing.assert_allclose(net(np.array([[0.0], [1.0]]))[:, 0], [-1.0, 1.0], atol=1e-2)

    def test_bit_reproducible(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(200, 2))
        y = np.sin(X[:, 0]) + 0.1 * rng.normal(size=200)
        nets = []
        for _ in range(2):
            net = MLP(MlpSpec(2, (8,), 1, seed=3))
            nn.train(net, nn.squared_loss, X, y, TrainOpts(epochs=20, seed=9))
            nets.append(net.params)
        np.testing.assert_array_equal(nets[0], nets[1])

    def test_divergence_raises(self):
        X = np.ones((20, 1))
        y = np.full(20, np.nan)
        with pytest.raises(TrainingError) as info:
            nn.train(MLP(MlpSpec(1, (2,), 1)), nn.squared_loss, X, y, TrainOpts(epochs=2))
        assert "epoch" in info.value.diagnostics


class TestCheckpoint:
    def test_round_trip(self):
        nets = [MLP(MlpSpec(2, (3,), 1, seed=1)), MLP(MlpSpec(2, (4, 2), 2, seed=2))]
        blob = nn.pack({"type": "demo"}, nets)
        assert blob.startswith(b"COPPKIT-MODEL-1")
        meta, back = nn.unpack(blob)
        assert meta["type"] == "demo"
        for a, b in zip(nets, back):
            np.testing.assert_array_equal(a.params, b.params)
            assert a.spec == b.spec

    def test_rejects_garbage(self):
        with pytest.raises(CheckpointError):
            nn.unpack(b"not a model")
        blob = nn.pack({}, [MLP(MlpSpec(1, (2,), 1))])
        with pytest.raises(CheckpointError):
            nn.unpack(blob[:-8])
