"""Fitted estimators: outcome densities, conditional quantiles, behaviour policies.

Inputs and targets are standardised with training statistics before fitting;
a zero spread falls back to unit scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtri

from . import nn
from .core import BanditDataset, Kind, PolicySpec, _as_2d
from .nn import MLP, MlpSpec, TrainOpts, TrainingError

SIGMA_FLOOR = 1e-3


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, Z) -> "Scaler":
        Z = np.asarray(Z, dtype=float)
        sd = Z.std(axis=0)
        return cls(Z.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def __call__(self, Z):
        return (np.asarray(Z, dtype=float) - self.mean) / self.scale

    def to_json(self):
        return {"mean": np.atleast_1d(self.mean).tolist(), "scale": np.atleast_1d(self.scale).tolist()}

    @classmethod
    def from_json(cls, d, scalar=False):
        mean, scale = np.asarray(d["mean"], dtype=float), np.asarray(d["scale"], dtype=float)
        if scalar:
            return cls(mean[0], scale[0])
        return cls(mean, scale)


def _scalar_scaler(y) -> Scaler:
    y = np.asarray(y, dtype=float)
    sd = float(y.std())
    return Scaler(float(y.mean()), sd if sd > 0 else 1.0)


def _check_weights(w, n):
    if w is None:
        return None
    w = np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise ValueError(f"sample_weights must have shape ({n},)")
    if np.any(w < 0) or not np.all(np.isfinite(w)) or not np.any(w > 0):
        raise ValueError("sample_weights must be finite, nonnegative and not all zero")
    # rescaling leaves the argmin unchanged; equal weights become exactly 1
    return w / w.max()


class _Featurizer:
    """Maps ``(x, a)`` to network input: scaled x plus one-hot or scaled action."""

    def __init__(self, x_scaler: Scaler, action_kind: Kind, a_scaler: Optional[Scaler] = None):
        self.x_scaler = x_scaler
        self.action_kind = action_kind
        self.a_scaler = a_scaler

    @classmethod
    def fit(cls, data: BanditDataset) -> "_Featurizer":
        a_scaler = None if data.action_kind.discrete else _scalar_scaler(data.A)
        return cls(Scaler.fit(data.X), data.action_kind, a_scaler)

    @property
    def width(self) -> int:
        k = self.action_kind.size if self.action_kind.discrete else 1
        return self.x_scaler.mean.size + k

    def __call__(self, X, A) -> np.ndarray:
        Xs = self.x_scaler(_as_2d(X))
        A = np.asarray(A)
        if self.action_kind.discrete:
            onehot = np.zeros((Xs.shape[0], self.action_kind.size))
            onehot[np.arange(Xs.shape[0]), A.astype(np.int64)] = 1.0
            return np.hstack([Xs, onehot])
        return np.hstack([Xs, self.a_scaler(A.astype(float))[:, None]])

    def to_json(self):
        d = {"x": self.x_scaler.to_json(), "action_kind": str(self.action_kind)}
        if self.a_scaler is not None:
            d["a"] = self.a_scaler.to_json()
        return d

    @classmethod
    def from_json(cls, d):
        a = Scaler.from_json(d["a"], scalar=True) if "a" in d else None
        return cls(Scaler.from_json(d["x"]), Kind.parse(d["action_kind"]), a)


# --------------------------------------------------------------------------- outcome density


@dataclass(eq=False)
class GaussianConditional:
    """``P(y | x, a) = N(mu(x, a), sigma(x, a)^2)`` from one two-headed network.

    ``sigma = s_y * softplus(raw) + floor`` so it never drops below the floor.
    """

    net: MLP
    features: _Featurizer
    y_scaler: Scaler
    floor: float = SIGMA_FLOOR
    diagnostics: dict = field(default_factory=dict)

    @property
    def action_kind(self) -> Kind:
        return self.features.action_kind

    def mean_std(self, X, A):
        out = self.net(self.features(X, A))
        mu = self.y_scaler.mean + self.y_scaler.scale * out[:, 0]
        sigma = self.y_scaler.scale * nn.softplus(out[:, 1]) + self.floor
        return mu, sigma

    def mean_std_all(self, X):
        """Means and stds for every discrete action, each of shape ``(N, K)``."""
        if not self.action_kind.discrete:
            raise TypeError("mean_std_all needs a discrete action space")
        X = _as_2d(X)
        K = self.action_kind.size
        Xr = np.repeat(X, K, axis=0)
        Ar = np.tile(np.arange(K), X.shape[0])
        mu, sigma = self.mean_std(Xr, Ar)
        return mu.reshape(-1, K), sigma.reshape(-1, K)

    def logpdf(self, X, A, y):
        mu, sigma = self.mean_std(X, A)
        z = (np.asarray(y, dtype=float) - mu) / sigma
        return -0.5 * z * z - np.log(sigma) - 0.5 * np.log(2 * np.pi)

    def pdf(self, X, A, y):
        return np.exp(self.logpdf(X, A, y))

    def sample(self, X, A, rng: np.random.Generator):
        mu, sigma = self.mean_std(X, A)
        return mu + sigma * rng.standard_normal(mu.shape)

    def to_bytes(self) -> bytes:
        meta = {"type": "gaussian_conditional", "features": self.features.to_json(),
                "y": self.y_scaler.to_json(), "floor": self.floor}
        return nn.pack(meta, [self.net])

    @classmethod
    def _from_meta(cls, meta, nets):
        return cls(nets[0], _Featurizer.from_json(meta["features"]),
                   Scaler.from_json(meta["y"], scalar=True), meta["floor"])


def _gaussian_nll_global(y):
    sd = max(float(np.std(y)), SIGMA_FLOOR)
    z = (y - np.mean(y)) / sd
    return float(np.mean(0.5 * z * z + np.log(sd) + 0.5 * np.log(2 * np.pi)))


def fit_gaussian_conditional(train: BanditDataset, spec: MlpSpec, opts: TrainOpts,
                             floor: float = SIGMA_FLOOR) -> GaussianConditional:
    """Fit mean and scale networks by maximum likelihood."""
    if train.outcome_kind.discrete:
        raise TypeError("fit_gaussian_conditional needs continuous outcomes")
    feats = _Featurizer.fit(train)
    ys = _scalar_scaler(train.Y)
    net = MLP(spec.with_io(feats.width, 2))
    res = nn.train(net, nn.make_gaussian_nll(floor / ys.scale), feats(train.X, train.A),
                   ys(train.Y), opts)
    model = GaussianConditional(net, feats, ys, floor)
    model.diagnostics = {"epochs": res.epochs_run, "best_epoch": res.best_epoch}
    return model


# --------------------------------------------------------------------------- quantiles


@dataclass(eq=False)
class QuantilePair:
    """Lower and upper conditional quantiles of ``y`` given ``x``."""

    lo_net: MLP
    hi_net: MLP
    x_scaler: Scaler
    y_scaler: Scaler
    alpha_lo: float
    alpha_hi: float
    diagnostics: dict = field(default_factory=dict)

    def predict(self, X):
        Xs = self.x_scaler(_as_2d(X))
        lo = self.y_scaler.mean + self.y_scaler.scale * self.lo_net(Xs)[:, 0]
        hi = self.y_scaler.mean + self.y_scaler.scale * self.hi_net(Xs)[:, 0]
        return lo, np.maximum(hi, lo)

    def to_bytes(self) -> bytes:
        meta = {"type": "quantile_pair", "x": self.x_scaler.to_json(), "y": self.y_scaler.to_json(),
                "alpha_lo": self.alpha_lo, "alpha_hi": self.alpha_hi}
        return nn.pack(meta, [self.lo_net, self.hi_net])

    @classmethod
    def _from_meta(cls, meta, nets):
        return cls(nets[0], nets[1], Scaler.from_json(meta["x"]),
                   Scaler.from_json(meta["y"], scalar=True), meta["alpha_lo"], meta["alpha_hi"])


def fit_quantile_pair(train: BanditDataset, alpha_lo: float, alpha_hi: float, spec: MlpSpec,
                      opts: TrainOpts, sample_weights=None) -> QuantilePair:
    """Two quantile networks of ``y`` on ``x`` trained with the (weighted) pinball loss.

    :func:`coppkit.nn.pinball_loss` charges ``beta`` per unit of
    over-prediction, so its minimiser is the ``1 - beta`` quantile; the
    ``alpha`` quantile is therefore fitted with level ``1 - alpha``.
    """
    if not 0.0 < alpha_lo < alpha_hi < 1.0:
        raise ValueError("need 0 < alpha_lo < alpha_hi < 1")
    w = _check_weights(sample_weights, len(train))
    xs = Scaler.fit(train.X)
    ys = _scalar_scaler(train.Y)
    X, y = xs(train.X), ys(train.Y)
    nets, diag = [], {}
    for tag, beta in (("lo", alpha_lo), ("hi", alpha_hi)):
        net = MLP(spec.with_io(X.shape[1], 1))
        if np.ptp(train.Y) == 0:
            # every quantile equals the constant; subgradient noise would only blur it
            net.set_params(np.zeros_like(net.params))
            nets.append(net)
            diag[tag] = {"epochs": 0, "val_loss": 0.0}
            continue
        res = nn.train(net, nn.make_pinball(1.0 - beta), X, y, opts, w)
        nets.append(net)
        diag[tag] = {"epochs": res.epochs_run, "val_loss": res.val_loss}
    return QuantilePair(nets[0], nets[1], xs, ys, alpha_lo, alpha_hi, diag)


# --------------------------------------------------------------------------- behaviour policy


@dataclass(eq=False)
class SoftmaxPolicyModel(PolicySpec):
    """Classifier ``x -> softmax(logits)`` over ``K`` actions."""

    net: MLP
    x_scaler: Scaler
    n_actions: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def action_kind(self) -> Kind:
        return Kind(self.n_actions)

    def probs(self, X) -> np.ndarray:
        return nn.softmax(self.net(self.x_scaler(_as_2d(X))))

    def to_bytes(self) -> bytes:
        meta = {"type": "softmax_policy", "x": self.x_scaler.to_json(), "n_actions": self.n_actions}
        return nn.pack(meta, [self.net])

    @classmethod
    def _from_meta(cls, meta, nets):
        return cls(nets[0], Scaler.from_json(meta["x"]), int(meta["n_actions"]))


@dataclass(eq=False)
class GaussianPolicyModel(PolicySpec):
    """Regression of the action on ``x`` with a single residual std."""

    net: MLP
    x_scaler: Scaler
    a_scaler: Scaler
    std: float
    diagnostics: dict = field(default_factory=dict)

    def mean(self, X) -> np.ndarray:
        return self.a_scaler.mean + self.a_scaler.scale * self.net(self.x_scaler(_as_2d(X)))[:, 0]

    def prob(self, X, a) -> np.ndarray:
        z = (np.asarray(a, dtype=float) - self.mean(X)) / self.std
        return np.exp(-0.5 * z * z) / (self.std * np.sqrt(2 * np.pi))

    def sample_uniform(self, X, U) -> np.ndarray:
        return self.mean(X)[:, None] + self.std * ndtri(U)

    def to_bytes(self) -> bytes:
        meta = {"type": "gaussian_policy", "x": self.x_scaler.to_json(),
                "a": self.a_scaler.to_json(), "std": self.std}
        return nn.pack(meta, [self.net])

    @classmethod
    def _from_meta(cls, meta, nets):
        return cls(nets[0], Scaler.from_json(meta["x"]), Scaler.from_json(meta["a"], scalar=True),
                   float(meta["std"]))


def fit_behavior_policy(train: BanditDataset, spec: MlpSpec, opts: TrainOpts):
    """Softmax classifier for discrete actions, Gaussian regression for continuous ones."""
    xs = Scaler.fit(train.X)
    X = xs(train.X)
    if train.action_kind.discrete:
        K = train.action_kind.size
        net = MLP(spec.with_io(X.shape[1], K))
        res = nn.train(net, nn.cross_entropy, X, train.A, opts)
        return SoftmaxPolicyModel(net, xs, K, {"epochs": res.epochs_run, "val_loss": res.val_loss})
    a_s = _scalar_scaler(train.A)
    net = MLP(spec.with_io(X.shape[1], 1))
    res = nn.train(net, nn.squared_loss, X, a_s(train.A), opts)
    resid = train.A - (a_s.mean + a_s.scale * net(X)[:, 0])
    std = float(np.sqrt(np.mean(resid ** 2)))
    if not np.isfinite(std):
        raise TrainingError("non-finite residual std", {"epochs": res.epochs_run})
    std = max(std, SIGMA_FLOOR)
    return GaussianPolicyModel(net, xs, a_s, std, {"epochs": res.epochs_run, "val_loss": res.val_loss})


# --------------------------------------------------------------------------- discrete outcomes


@dataclass(eq=False)
class CategoricalConditional:
    """``P(y | x, a)`` over ``L`` labels from a softmax network on ``(x, a)``."""

    net: MLP
    features: _Featurizer
    n_labels: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def action_kind(self) -> Kind:
        return self.features.action_kind

    def probs(self, X, A) -> np.ndarray:
        return nn.softmax(self.net(self.features(X, A)))

    def probs_all(self, X) -> np.ndarray:
        """Shape ``(N, K, L)`` table of label probabilities for every action."""
        X = _as_2d(X)
        K = self.action_kind.size
        P = self.probs(np.repeat(X, K, axis=0), np.tile(np.arange(K), X.shape[0]))
        return P.reshape(X.shape[0], K, self.n_labels)

    def to_bytes(self) -> bytes:
        meta = {"type": "categorical_conditional", "features": self.features.to_json(),
                "n_labels": self.n_labels}
        return nn.pack(meta, [self.net])

    @classmethod
    def _from_meta(cls, meta, nets):
        return cls(nets[0], _Featurizer.from_json(meta["features"]), int(meta["n_labels"]))


def fit_categorical_conditional(train: BanditDataset, spec: MlpSpec, opts: TrainOpts) -> CategoricalConditional:
    if not train.outcome_kind.discrete:
        raise TypeError("fit_categorical_conditional needs discrete outcomes")
    feats = _Featurizer.fit(train)
    L = train.outcome_kind.size
    net = MLP(spec.with_io(feats.width, L))
    res = nn.train(net, nn.cross_entropy, feats(train.X, train.A), train.Y, opts)
    return CategoricalConditional(net, feats, L, {"epochs": res.epochs_run, "val_loss": res.val_loss})


_LOADERS = {
    "gaussian_conditional": GaussianConditional,
    "quantile_pair": QuantilePair,
    "softmax_policy": SoftmaxPolicyModel,
    "gaussian_policy": GaussianPolicyModel,
    "categorical_conditional": CategoricalConditional,
}


def load_model(blob: bytes):
    """Rebuild any fitted model from :meth:`to_bytes` output."""
    meta, nets = nn.unpack(blob)
    kind = meta.get("type")
    if kind not in _LOADERS:
        raise nn.CheckpointError(f"unknown model type {kind!r}")
    return _LOADERS[kind]._from_meta(meta, nets)
