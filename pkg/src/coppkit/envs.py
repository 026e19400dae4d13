"""Synthetic bandit environments with closed-form densities, plus CSV ingestion."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp, ndtr

from .core import (CONTINUOUS, ActionKindError, BanditDataset, ClassifierEpsilon, Deterministic,
                   GaussianLinear, Kind, PolicySpec, TabularRule, _as_2d)
from .nn import softmax

LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)


class NumericError(ArithmeticError):
    """An iterative numerical routine failed to converge."""


class IngestionError(ValueError):
    """A data file row could not be parsed."""


class SchemaError(ValueError):
    """Data does not match the declared structure."""


def _log_phi(z):
    return -0.5 * z * z - LOG_SQRT_2PI


def toy_policy(eps: float) -> TabularRule:
    """Region rule on ``|x|`` with cut points 1, 2, 3.

    Region ``r`` favours action index ``r`` with probability ``1 - 3 eps``;
    each other action gets ``eps``.
    """
    if not 0.0 <= eps <= 1.0 / 3.0 + 1e-12:
        raise ValueError(f"eps must lie in [0, 1/3], got {eps}")
    eps = min(eps, 1.0 / 3.0)
    table = np.full((4, 4), eps)
    np.fill_diagonal(table, 1.0 - 3.0 * eps)
    return TabularRule((1.0, 2.0, 3.0), tuple(map(tuple, table)))


class SyntheticEnv:
    """Common interface: covariate sampler, outcome sampler and exact densities."""

    name = "synthetic"
    action_kind: Kind = CONTINUOUS
    outcome_kind: Kind = CONTINUOUS
    d = 1

    def sample_x(self, n, rng):
        raise NotImplementedError

    def sample_y(self, X, A, rng):
        raise NotImplementedError

    def log_density(self, X, A, Y):
        """``log P(y | x, a)`` with ``A`` of shape ``(N,)`` and ``Y`` of shape ``(N,)`` or ``(N, G)``."""
        raise NotImplementedError

    def density(self, X, A, Y):
        return np.exp(self.log_density(X, A, Y))

    def log_outcome_density(self, X, Y, policy: PolicySpec):
        """``log P^pi(y | x)`` for ``Y`` of shape ``(N, G)``."""
        raise NotImplementedError

    def outcome_cdf(self, X, Y, policy: PolicySpec):
        raise NotImplementedError

    def outcome_scale(self, X, policy: PolicySpec):
        """Rough (centre, spread) per row used to bracket quantile searches."""
        raise NotImplementedError


@dataclass(frozen=True)
class ToyDiscrete(SyntheticEnv):
    """``X ~ N(0, 9)``, four actions with values 1..4, ``Y | x, a ~ N(a x, 1)``."""

    x_std: float = 3.0
    action_values: tuple = (1.0, 2.0, 3.0, 4.0)
    noise_std: float = 1.0
    name = "toy-discrete"

    @property
    def action_kind(self) -> Kind:
        return Kind(len(self.action_values))

    def behavior_policy(self, eps: float = 0.3):
        return toy_policy(eps)

    def target_policy(self, eps: float):
        return toy_policy(eps)

    def sample_x(self, n, rng):
        return self.x_std * rng.standard_normal((n, 1))

    def means(self, X):
        return _as_2d(X)[:, :1] * np.asarray(self.action_values)[None, :]

    def sample_y(self, X, A, rng):
        mu = self.means(X)[np.arange(len(A)), np.asarray(A, dtype=np.int64)]
        return mu + self.noise_std * rng.standard_normal(len(A))

    def log_density(self, X, A, Y):
        mu = self.means(X)[np.arange(_as_2d(X).shape[0]), np.asarray(A, dtype=np.int64)]
        Y = np.asarray(Y, dtype=float)
        mu = mu if Y.ndim == 1 else mu[:, None]
        return _log_phi((Y - mu) / self.noise_std) - np.log(self.noise_std)

    def log_outcome_density(self, X, Y, policy):
        P = policy.probs(X)
        mu = self.means(X)
        Y = np.asarray(Y, dtype=float)
        lp = _log_phi((Y[:, :, None] - mu[:, None, :]) / self.noise_std) - np.log(self.noise_std)
        return logsumexp(lp, b=np.broadcast_to(P[:, None, :], lp.shape), axis=2)

    def outcome_cdf(self, X, Y, policy):
        P = policy.probs(X)
        mu = self.means(X)
        Y = np.asarray(Y, dtype=float)
        return np.einsum("ngk,nk->ng", ndtr((Y[:, :, None] - mu[:, None, :]) / self.noise_std), P)

    def outcome_scale(self, X, policy):
        mu = self.means(X)
        return mu.mean(axis=1), np.abs(mu).max(axis=1) + self.noise_std


@dataclass(frozen=True)
class ToyContinuous(SyntheticEnv):
    """``X ~ N(0, 4)``, ``A | x ~ N(x/4, 1)`` under behaviour, ``Y | x, a ~ N(a + x, 1)``."""

    x_std: float = 2.0
    noise_std: float = 1.0
    name = "toy-continuous"

    def behavior_policy(self, eps: float = 0.0):
        return GaussianLinear(0.25, eps, 1.0)

    def target_policy(self, eps: float):
        return GaussianLinear(0.25, eps, 1.0)

    def sample_x(self, n, rng):
        return self.x_std * rng.standard_normal((n, 1))

    def sample_y(self, X, A, rng):
        return np.asarray(A, dtype=float) + _as_2d(X)[:, 0] + self.noise_std * rng.standard_normal(len(A))

    def log_density(self, X, A, Y):
        mu = np.asarray(A, dtype=float) + _as_2d(X)[:, 0]
        Y = np.asarray(Y, dtype=float)
        mu = mu if Y.ndim == 1 else mu[:, None]
        return _log_phi((Y - mu) / self.noise_std) - np.log(self.noise_std)

    def _marginal(self, X, policy):
        x = _as_2d(X)[:, 0]
        if isinstance(policy, GaussianLinear):
            if policy.feature != 0:
                raise TypeError("closed form needs the policy mean to depend on x[0]")
            return x + policy.mean(X), np.sqrt(self.noise_std ** 2 + policy.std ** 2)
        if isinstance(policy, Deterministic) and policy.n_actions is None:
            return x + policy.actions(X).astype(float), np.full(x.shape, self.noise_std)
        raise TypeError(f"no closed-form outcome law for {type(policy).__name__}")

    def log_outcome_density(self, X, Y, policy):
        m, s = self._marginal(X, policy)
        s = np.broadcast_to(s, m.shape)[:, None]
        return _log_phi((np.asarray(Y, dtype=float) - m[:, None]) / s) - np.log(s)

    def outcome_cdf(self, X, Y, policy):
        m, s = self._marginal(X, policy)
        s = np.broadcast_to(s, m.shape)[:, None]
        return ndtr((np.asarray(Y, dtype=float) - m[:, None]) / s)

    def outcome_scale(self, X, policy):
        m, s = self._marginal(X, policy)
        return m, np.broadcast_to(s, m.shape)


@dataclass(frozen=True)
class SyntheticClassification(SyntheticEnv):
    """Multinomial-logit labels on Gaussian features, posed as a bandit.

    ``label | x ~ softmax(x @ W + b)``; the bandit outcome is
    ``Y = 1(A == label)`` so ``P(Y = 1 | x, a) = P(label = a | x)``.
    """

    W: tuple = ((2.0, 0.0, -2.0), (0.0, 2.0, -1.0))
    b: tuple = (0.0, 0.0, 0.0)
    name = "synthetic-classification"
    outcome_kind = Kind(2)

    @property
    def d(self) -> int:
        return len(self.W)

    @property
    def n_classes(self) -> int:
        return len(self.b)

    @property
    def action_kind(self) -> Kind:
        return Kind(self.n_classes)

    def label_probs(self, X):
        return softmax(_as_2d(X) @ np.asarray(self.W) + np.asarray(self.b))

    def classifier_policy(self, eps: float) -> ClassifierEpsilon:
        """Puts ``eps`` on the Bayes-optimal label, the rest spread evenly."""
        return ClassifierEpsilon(self.label_probs, self.n_classes, eps)

    def sample_x(self, n, rng):
        return rng.standard_normal((n, self.d))

    def sample_labels(self, X, rng):
        P = self.label_probs(X)
        cdf = np.cumsum(P, axis=1)
        u = rng.random(P.shape[0])
        return np.minimum((u[:, None] > cdf).sum(axis=1), self.n_classes - 1)

    def sample_classification(self, n, rng) -> "ClassificationBandit":
        X = self.sample_x(n, rng)
        return ClassificationBandit(X, self.sample_labels(X, rng), self.n_classes)

    def sample_y(self, X, A, rng):
        p1 = self.label_probs(X)[np.arange(len(A)), np.asarray(A, dtype=np.int64)]
        return (rng.random(len(A)) < p1).astype(np.int64)

    def log_density(self, X, A, Y):
        p1 = self.label_probs(X)[np.arange(_as_2d(X).shape[0]), np.asarray(A, dtype=np.int64)]
        Y = np.asarray(Y)
        p1 = p1 if Y.ndim == 1 else p1[:, None]
        with np.errstate(divide="ignore"):
            return np.log(np.where(Y == 1, p1, 1.0 - p1))

    def outcome_probs(self, X, policy):
        """``P^pi(Y = y | x)`` as an ``(N, 2)`` table."""
        p1 = np.sum(policy.probs(X) * self.label_probs(X), axis=1)
        return np.column_stack([1.0 - p1, p1])

    def log_outcome_density(self, X, Y, policy):
        P = self.outcome_probs(X, policy)
        with np.errstate(divide="ignore"):
            return np.log(np.take_along_axis(P, np.asarray(Y, dtype=np.int64), axis=1))


@dataclass(frozen=True)
class CounterexampleEnv:
    """``Y | x, a ~ N(sqrt(K x^2 + a), K x^2 - a)`` for ``x >= 1`` and ``|a| < K``.

    ``E[Y^2 | x, a] = 2 K x^2`` whatever ``a`` is, so tilting the density by
    ``y^2 / (2 K x^2)`` changes it without changing any policy weight.
    """

    K: float = 1.0

    def density(self, X, a, Y):
        x = _as_2d(X)[:, :1]
        Y = np.asarray(Y, dtype=float)
        var = self.K * x * x - a
        mean = np.sqrt(self.K * x * x + a)
        if Y.ndim == 1:
            var, mean = var[:, 0], mean[:, 0]
        return np.exp(-0.5 * (Y - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)

    def tilted_density(self, X, a, Y):
        x = _as_2d(X)[:, :1]
        Y = np.asarray(Y, dtype=float)
        t = Y * Y / (2 * self.K * x * x) if Y.ndim == 2 else Y * Y / (2 * self.K * x[:, 0] ** 2)
        return t * self.density(X, a, Y)


# --------------------------------------------------------------------------- generation


def gen_synthetic(env: SyntheticEnv, pi_b: PolicySpec, n_obs: int, rng: np.random.Generator) -> BanditDataset:
    """I.i.d. draws ``X``, then ``A | X ~ pi_b``, then ``Y | X, A`` from the environment."""
    if pi_b.action_kind != env.action_kind:
        raise ActionKindError(f"policy acts on {pi_b.action_kind}, environment on {env.action_kind}")
    X = env.sample_x(n_obs, rng)
    A = pi_b.sample(X, rng)
    Y = env.sample_y(X, A, rng)
    return BanditDataset(X, A, Y, env.action_kind, env.outcome_kind)


def env_density(env: SyntheticEnv, x, a, y) -> float:
    """Exact ``P(y | x, a)`` at one point."""
    X = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    return float(env.density(X, np.asarray([a]), np.asarray([y], dtype=float))[0])


def _bisect_quantile(env, policy, X, beta, tol=1e-10, max_iter=400):
    centre, spread = env.outcome_scale(X, policy)
    lo = (centre - 10.0 * spread - 10.0)[:, None]
    hi = (centre + 10.0 * spread + 10.0)[:, None]
    for _ in range(60):
        flo = env.outcome_cdf(X, lo, policy)[:, 0]
        fhi = env.outcome_cdf(X, hi, policy)[:, 0]
        bad_lo, bad_hi = flo > beta, fhi < beta
        if not (bad_lo.any() or bad_hi.any()):
            break
        width = (hi - lo)[:, 0]
        lo[bad_lo, 0] -= width[bad_lo]
        hi[bad_hi, 0] += width[bad_hi]
    else:
        raise NumericError("could not bracket the quantile")
    est = 0.5 * (lo + hi)
    done = np.zeros(est.shape, dtype=bool)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f = env.outcome_cdf(X, mid, policy)
        stuck = (mid <= lo) | (mid >= hi)
        newly = ~done & ((np.abs(f - beta) <= tol) | stuck)
        est = np.where(newly, mid, est)
        done |= newly
        if done.all():
            break
        below = f < beta
        lo = np.where(~done & below, mid, lo)
        hi = np.where(~done & ~below, mid, hi)
    else:
        raise NumericError("bisection did not converge")
    resid = np.abs(env.outcome_cdf(X, est, policy) - beta)[:, 0]
    if np.any(resid > tol):
        raise NumericError(f"bisection residual {resid.max():.3g} above {tol:g}")
    mid = est
    return mid[:, 0], resid


def oracle_intervals(env: SyntheticEnv, pi_star: PolicySpec, X, alpha: float,
                     return_residual: bool = False):
    """Central ``1 - alpha`` interval of ``P^{pi*}(y | x)`` for every row of ``X``."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    X = _as_2d(X)
    lo, r1 = _bisect_quantile(env, pi_star, X, alpha / 2)
    hi, r2 = _bisect_quantile(env, pi_star, X, 1 - alpha / 2)
    if return_residual:
        return lo, hi, np.maximum(r1, r2)
    return lo, hi


def oracle_interval(env: SyntheticEnv, pi_star: PolicySpec, x, alpha: float) -> tuple[float, float]:
    lo, hi = oracle_intervals(env, pi_star, np.atleast_1d(np.asarray(x, dtype=float))[None, :], alpha)
    return float(lo[0]), float(hi[0])


def make_env(name: str) -> SyntheticEnv:
    if name == "toy-discrete":
        return ToyDiscrete()
    if name == "toy-continuous":
        return ToyContinuous()
    if name == "synthetic-classification":
        return SyntheticClassification()
    raise ValueError(f"unknown environment {name!r}")


# --------------------------------------------------------------------------- files


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_dataset_csv(path, data: BanditDataset) -> None:
    """Header ``x0..x{d-1},a,y``; floats written in shortest round-trip form."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(data.d)] + ["a", "y"])
        A, Y = data.A.tolist(), data.Y.tolist()
        for i in range(len(data)):
            w.writerow([_fmt(v) for v in data.X[i]] + [_fmt(A[i]), _fmt(Y[i])])


def _read_rows(path, tail: list[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        d = len(header) - len(tail)
        expected = [f"x{j}" for j in range(d)] + tail
        if d < 1 or header != expected:
            raise SchemaError(f"{path}: header must be x0..x{{d-1}},{','.join(tail)}; got {','.join(header)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: non-numeric field") from None
            if not all(np.isfinite(rows[-1])):
                raise IngestionError(f"{path}:{lineno}: non-finite value")
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    return np.asarray(rows), d


def read_dataset_csv(path, action_kind: Kind = CONTINUOUS, outcome_kind: Kind = CONTINUOUS) -> BanditDataset:
    M, d = _read_rows(path, ["a", "y"])
    try:
        return BanditDataset(M[:, :d], M[:, d], M[:, d + 1], action_kind, outcome_kind)
    except ActionKindError as exc:
        raise SchemaError(f"{path}: {exc}") from None


@dataclass(frozen=True, eq=False)
class ClassificationBandit:
    """Features with true labels; :func:`to_bandit` turns it into logged bandit data."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise SchemaError(f"labels must lie in 0..{self.n_classes - 1}")


def load_classification_csv(path, n_classes: Optional[int] = None) -> ClassificationBandit:
    """Read ``x0..x{d-1},label`` rows; labels must be integers ``0..K-1``."""
    M, d = _read_rows(path, ["label"])
    labels = M[:, d]
    bad = np.flatnonzero((labels != np.round(labels)) | (labels < 0))
    if bad.size:
        raise IngestionError(f"{path}:{bad[0] + 2}: label must be a nonnegative integer")
    labels = labels.astype(np.int64)
    K = int(labels.max()) + 1 if n_classes is None else int(n_classes)
    if labels.max() >= K:
        raise SchemaError(f"{path}: found label {labels.max()} but only {K} classes declared")
    return ClassificationBandit(M[:, :d], labels, K)


def write_classification_csv(path, cb: ClassificationBandit) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(cb.features.shape[1])] + ["label"])
        for x, lab in zip(cb.features, cb.labels.tolist()):
            w.writerow([_fmt(v) for v in x] + [str(lab)])


def to_bandit(cb: ClassificationBandit, policy: PolicySpec, rng: np.random.Generator) -> BanditDataset:
    """Guess ``A ~ pi(. | x)`` per row and log ``Y = 1(A == label)``."""
    if policy.action_kind != Kind(cb.n_classes):
        raise SchemaError(f"policy acts on {policy.action_kind}, data has {cb.n_classes} classes")
    A = policy.sample(cb.features, rng)
    Y = (A == cb.labels).astype(np.int64)
    return BanditDataset(cb.features, A, Y, Kind(cb.n_classes), Kind(2))


__all__ = [
    "ToyDiscrete", "ToyContinuous", "SyntheticClassification", "CounterexampleEnv",
    "ClassificationBandit", "gen_synthetic", "env_density", "oracle_interval", "oracle_intervals",
    "toy_policy", "make_env", "write_dataset_csv", "read_dataset_csv", "load_classification_csv",
    "write_classification_csv", "to_bandit", "NumericError", "IngestionError", "SchemaError",
]
