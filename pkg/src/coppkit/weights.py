"""Likelihood-ratio weights between outcome laws under target and behaviour policies.

A :class:`WeightFn` is evaluated on a batch: ``X`` of shape ``(N, d)`` and ``Y``
of shape ``(N,)`` or ``(N, G)`` (G candidate outcomes per row).
"""

from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels, nn
from .core import BanditDataset, PolicySpec, _as_2d
from .models import (CategoricalConditional, GaussianConditional, Scaler,
                     _LOADERS, _scalar_scaler)
from .nn import MLP, MlpSpec, TrainOpts

DENOM_FLOOR = 1e-12
EXACT_FLOOR = 1e-300


class IngestionError(ValueError):
    """Training targets could not be formed; ``indices`` lists the bad samples."""

    def __init__(self, message: str, indices=()):
        super().__init__(message)
        self.indices = list(indices)


@dataclass(eq=False)
class WeightFn:
    """Nonnegative weight ``w(x, y)`` with its provenance.

    ``evaluator`` receives ``X (N, d)`` and ``Y (N, G)`` and returns
    ``(weights (N, G), floor_hits)``. ``floor_hits`` accumulates how many
    evaluations had their denominator floored.
    """

    evaluator: Callable
    provenance: str
    floor_hits: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __call__(self, X, Y) -> np.ndarray:
        X = _as_2d(X)
        Y = np.asarray(Y)
        flat = Y.ndim == 1
        Y2 = Y[:, None] if flat else Y
        if Y2.shape[0] != X.shape[0]:
            raise ValueError("X and Y disagree on the number of rows")
        w, hits = self.evaluator(X, Y2)
        if hits:
            with self._lock:
                self.floor_hits += int(hits)
        if not np.all(np.isfinite(w)):
            raise FloatingPointError(f"non-finite weight from {self.provenance} estimator")
        return w[:, 0] if flat else w

    def scaled(self, c: float) -> "WeightFn":
        if not c > 0:
            raise ValueError("scale must be positive")
        inner = self.evaluator
        return WeightFn(lambda X, Y: (c * inner(X, Y)[0], 0), f"{self.provenance}*{c:g}")


def unit_weight() -> WeightFn:
    return WeightFn(lambda X, Y: (np.ones(Y.shape), 0), "unit")


def from_callable(fn: Callable, provenance: str = "custom") -> WeightFn:
    """Wrap ``fn(X, Y) -> weights`` (same shapes as :class:`WeightFn`)."""
    return WeightFn(lambda X, Y: (np.asarray(fn(X, Y), dtype=float), 0), provenance)


def _ratio(num, den, floor):
    hits = int(np.count_nonzero(den < floor))
    # equal mixtures give 1 even where both underflow
    return np.where(num == den, 1.0, num / np.maximum(den, floor)), hits


# --------------------------------------------------------------------------- exact


def exact_weight(env, pi_star: PolicySpec, pi_b: PolicySpec) -> WeightFn:
    """Ground-truth ratio of the two outcome mixtures, evaluated in log space.

    Rows whose behaviour density underflows ``1e-300`` are counted as floor
    hits; the log-space ratio itself stays exact.
    """
    log_floor = np.log(EXACT_FLOOR)

    def evaluate(X, Y):
        ln = env.log_outcome_density(X, Y, pi_star)
        ld = env.log_outcome_density(X, Y, pi_b)
        hits = int(np.count_nonzero(ld < log_floor))
        return np.exp(ln - ld), hits

    return WeightFn(evaluate, "exact")


def weight_from_density(density: Callable, pi_star: PolicySpec, pi_b: PolicySpec,
                        actions, provenance: str = "density") -> WeightFn:
    """Weights from any conditional density ``density(X, a_value, Y)`` over a finite action set.

    ``actions`` lists the action values; policies are queried by index.
    """
    actions = list(actions)

    def evaluate(X, Y):
        Ps = pi_star.probs(X)
        Pb = pi_b.probs(X)
        num = np.zeros(Y.shape)
        den = np.zeros(Y.shape)
        for k, a in enumerate(actions):
            d = density(X, a, Y)
            num += Ps[:, k:k + 1] * d
            den += Pb[:, k:k + 1] * d
        return _ratio(num, den, DENOM_FLOOR)

    return WeightFn(evaluate, provenance)


# --------------------------------------------------------------------------- plug-in estimators


def _mixture(p_hat, X, Y, coef):
    """``sum_a coef[:, a] * p_hat(Y | X, a)`` over discrete actions, shape of ``Y``."""
    if isinstance(p_hat, CategoricalConditional):
        table = p_hat.probs_all(X)  # (N, K, L)
        mix = np.einsum("nk,nkl->nl", coef, table)
        return np.take_along_axis(mix, Y.astype(np.int64), axis=1)
    mu, sigma = p_hat.mean_std_all(X)
    return kernels.gaussian_mixture_pdf(np.ascontiguousarray(Y, dtype=float), mu, sigma,
                                        np.ascontiguousarray(coef))


def exact_sum_weight(p_hat, pi_b_hat: PolicySpec, pi_star: PolicySpec) -> WeightFn:
    """Plug-in ratio summed over all actions; needs a finite action space."""
    if not (pi_star.action_kind.discrete and pi_b_hat.action_kind.discrete):
        raise TypeError("exact_sum_weight needs discrete-action policies")

    def evaluate(X, Y):
        num = _mixture(p_hat, X, Y, pi_star.probs(X))
        den = _mixture(p_hat, X, Y, pi_b_hat.probs(X))
        return _ratio(num, den, DENOM_FLOOR)

    return WeightFn(evaluate, "exact_sum")


def mc_weight(p_hat, pi_b_hat: PolicySpec, pi_star: PolicySpec, h: int = 500,
              rng: Optional[np.random.Generator] = None) -> WeightFn:
    """Monte Carlo ratio with ``h`` action draws per policy.

    One vector of ``h`` uniforms is drawn at construction and pushed through
    each policy's inverse CDF at every ``x``, so evaluation is deterministic
    and independent of batching, and equal policies give weight 1 exactly.
    """
    if h < 1:
        raise ValueError("h must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    u = rng.random(h)
    u = np.clip(u, 1e-16, 1.0 - 1e-16)

    def draws(policy, X):
        return policy.sample_uniform(X, np.broadcast_to(u, (X.shape[0], h)))

    def evaluate(X, Y):
        if pi_star.action_kind.discrete:
            K = pi_star.action_kind.size

            def counts(policy):
                A = draws(policy, X)
                C = np.zeros((X.shape[0], K))
                for k in range(K):
                    C[:, k] = np.count_nonzero(A == k, axis=1)
                return C / h

            num = _mixture(p_hat, X, Y, counts(pi_star))
            den = _mixture(p_hat, X, Y, counts(pi_b_hat))
        else:
            num = _continuous_mc(p_hat, X, Y, draws(pi_star, X))
            den = _continuous_mc(p_hat, X, Y, draws(pi_b_hat, X))
        if not (np.all(np.isfinite(num)) and np.all(np.isfinite(den))):
            raise FloatingPointError("non-finite density in Monte Carlo weight")
        return _ratio(num, den, DENOM_FLOOR)

    return WeightFn(evaluate, f"monte_carlo({h})")


def _continuous_mc(p_hat: GaussianConditional, X, Y, A):
    N, h = A.shape
    mu, sigma = p_hat.mean_std(np.repeat(X, h, axis=0), A.ravel())
    coef = np.full((N, h), 1.0 / h)
    return kernels.gaussian_mixture_pdf(np.ascontiguousarray(Y, dtype=float),
                                        mu.reshape(N, h), sigma.reshape(N, h), coef)


# --------------------------------------------------------------------------- direct regression


@dataclass(eq=False)
class DirectWeightModel:
    """Network ``f(x, y)`` regressed on policy ratios, clamped at zero."""

    net: MLP
    x_scaler: Scaler
    y_scaler: Scaler
    t_scaler: Scaler
    n_labels: Optional[int] = None
    diagnostics: dict = field(default_factory=dict)

    def inputs(self, X, Y):
        Xs = self.x_scaler(_as_2d(X))
        if self.n_labels is not None:
            onehot = np.zeros((Xs.shape[0], self.n_labels))
            onehot[np.arange(Xs.shape[0]), np.asarray(Y, dtype=np.int64)] = 1.0
            return np.hstack([Xs, onehot])
        return np.hstack([Xs, self.y_scaler(np.asarray(Y, dtype=float))[:, None]])

    def predict(self, X, Y):
        out = self.net(self.inputs(X, Y))[:, 0]
        return np.maximum(self.t_scaler.mean + self.t_scaler.scale * out, 0.0)

    def weight_fn(self) -> WeightFn:
        def evaluate(X, Y):
            N, G = Y.shape
            f = self.predict(np.repeat(X, G, axis=0), Y.ravel())
            return f.reshape(N, G), 0

        return WeightFn(evaluate, "regression")

    def to_bytes(self) -> bytes:
        meta = {"type": "direct_weight", "x": self.x_scaler.to_json(), "y": self.y_scaler.to_json(),
                "t": self.t_scaler.to_json(), "n_labels": self.n_labels}
        return nn.pack(meta, [self.net])

    @classmethod
    def _from_meta(cls, meta, nets):
        return cls(nets[0], Scaler.from_json(meta["x"]), Scaler.from_json(meta["y"], scalar=True),
                   Scaler.from_json(meta["t"], scalar=True), meta["n_labels"])


_LOADERS["direct_weight"] = DirectWeightModel


def fit_direct_weight_model(train: BanditDataset, pi_star: PolicySpec, pi_b_hat: PolicySpec,
                            spec: MlpSpec, opts: TrainOpts) -> DirectWeightModel:
    pb = pi_b_hat.prob(train.X, train.A)
    ps = pi_star.prob(train.X, train.A)
    with np.errstate(divide="ignore", invalid="ignore"):
        target = ps / pb
    bad = np.flatnonzero(~np.isfinite(target) | (pb <= 0))
    if bad.size:
        shown = ", ".join(map(str, bad[:20]))
        raise IngestionError(f"behaviour probability is zero or target ratio non-finite at samples {shown}",
                             bad)
    xs = Scaler.fit(train.X)
    n_labels = train.outcome_kind.size
    ys = Scaler(0.0, 1.0) if n_labels is not None else _scalar_scaler(train.Y)
    ts = _scalar_scaler(target)
    model = DirectWeightModel(None, xs, ys, ts, n_labels)
    inputs = model.inputs(train.X, train.Y)
    model.net = MLP(spec.with_io(inputs.shape[1], 1))
    if np.ptp(target) == 0:
        # constant ratio: the conditional mean is that constant
        model.net.params[:] = 0.0
        model.diagnostics = {"epochs": 0, "val_loss": 0.0}
        return model
    res = nn.train(model.net, nn.squared_loss, inputs, ts(target), opts)
    model.diagnostics = {"epochs": res.epochs_run, "val_loss": res.val_loss}
    return model


def fit_direct_weight(train: BanditDataset, pi_star: PolicySpec, pi_b_hat: PolicySpec,
                      spec: MlpSpec, opts: TrainOpts) -> WeightFn:
    """Regress ``pi*(A|X) / pi_b(A|X)`` on ``(X, Y)``; the conditional mean is the weight."""
    return fit_direct_weight_model(train, pi_star, pi_b_hat, spec, opts).weight_fn()


# --------------------------------------------------------------------------- discrepancy


@dataclass(frozen=True)
class DeltaWEstimate:
    value: float
    se: float
    n: int


def estimate_delta_w(w_hat: WeightFn, w_true: WeightFn, sample: BanditDataset) -> DeltaWEstimate:
    """Half the mean absolute gap after rescaling ``w_hat`` to the sample mean of ``w_true``.

    ``w_true`` has mean 1 in expectation, so this is the unit-mean convention
    without charging ``w_hat`` for the sampling error of the mean.
    """
    if len(sample) == 0:
        raise ValueError("sample must be nonempty")
    wh = w_hat(sample.X, sample.Y)
    wt = w_true(sample.X, sample.Y)
    mean = wh.mean()
    if not mean > 0:
        raise FloatingPointError("estimated weights have zero mean on the sample")
    d = 0.5 * np.abs(wh * (wt.mean() / mean) - wt)
    n = d.size
    se = float(d.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return DeltaWEstimate(float(d.mean()), se, n)


def warn_floor_hits(fn: WeightFn, where: str = "") -> None:
    if fn.floor_hits:
        warnings.warn(f"{fn.provenance} weights floored {fn.floor_hits} times{where}", RuntimeWarning,
                      stacklevel=2)
