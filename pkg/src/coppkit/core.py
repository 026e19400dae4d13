"""Shared domain types: logged samples, datasets, policies and prediction sets."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import ndtri
from scipy.stats import norm


class SizeError(ValueError):
    """Requested split does not fit in the dataset."""


class ActionKindError(TypeError):
    """Action does not match the kind a policy or dataset expects."""


class LoggedSample(NamedTuple):
    x: np.ndarray
    a: float
    y: float


@dataclass(frozen=True)
class Kind:
    """Discrete space with ``size`` elements, or a continuous one (``size=None``)."""

    size: Optional[int] = None

    @property
    def discrete(self) -> bool:
        return self.size is not None

    def __str__(self) -> str:
        return f"discrete({self.size})" if self.discrete else "continuous"

    @classmethod
    def parse(cls, text: str) -> "Kind":
        if text == "continuous":
            return cls(None)
        if text.startswith("discrete(") and text.endswith(")"):
            return cls(int(text[len("discrete("):-1]))
        raise ValueError(f"unknown kind {text!r}")


CONTINUOUS = Kind(None)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class BanditDataset:
    """Immutable collection of logged ``(x, a, y)`` triples stored column-wise.

    ``X`` has shape ``(n, d)``; discrete actions and labels are zero-based
    integer indices.
    """

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    action_kind: Kind = CONTINUOUS
    outcome_kind: Kind = CONTINUOUS

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
            raise ValueError("X must be a nonempty (n, d) array")
        n = X.shape[0]
        A = np.asarray(self.A)
        Y = np.asarray(self.Y)
        if A.shape != (n,) or Y.shape != (n,):
            raise ValueError(f"A and Y must have shape ({n},), got {A.shape} and {Y.shape}")
        A = _check_kind(A, self.action_kind, "action")
        Y = _check_kind(Y, self.outcome_kind, "outcome")
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "Y", _frozen(Y))

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def __iter__(self) -> Iterator[LoggedSample]:
        for i in range(len(self)):
            yield LoggedSample(self.X[i], self.A[i].item(), self.Y[i].item())

    @property
    def samples(self) -> list[LoggedSample]:
        return list(self)

    def subset(self, idx) -> "BanditDataset":
        idx = np.asarray(idx)
        return BanditDataset(self.X[idx], self.A[idx], self.Y[idx],
                             self.action_kind, self.outcome_kind)

    def where_action(self, a) -> "BanditDataset":
        return self.subset(np.flatnonzero(self.A == a))

    def where_outcome(self, y) -> "BanditDataset":
        return self.subset(np.flatnonzero(self.Y == y))

    @classmethod
    def from_samples(cls, samples: Sequence[LoggedSample], action_kind=CONTINUOUS,
                     outcome_kind=CONTINUOUS) -> "BanditDataset":
        if not samples:
            raise ValueError("dataset must be nonempty")
        X = np.array([np.atleast_1d(np.asarray(s.x, dtype=float)) for s in samples])
        A = np.array([s.a for s in samples])
        Y = np.array([s.y for s in samples])
        return cls(X, A, Y, action_kind, outcome_kind)

    def identical(self, other: "BanditDataset") -> bool:
        return (self.action_kind == other.action_kind
                and self.outcome_kind == other.outcome_kind
                and np.array_equal(self.X, other.X)
                and np.array_equal(self.A, other.A)
                and np.array_equal(self.Y, other.Y))


def _check_kind(values: np.ndarray, kind: Kind, what: str) -> np.ndarray:
    if not kind.discrete:
        return values.astype(float)
    if values.dtype.kind == "f":
        if not np.all(np.isfinite(values)) or np.any(values != np.round(values)):
            raise ActionKindError(f"discrete {what} values must be integers")
    values = values.astype(np.int64)
    if values.size and (values.min() < 0 or values.max() >= kind.size):
        raise ActionKindError(f"{what} index outside 0..{kind.size - 1}")
    return values


@dataclass(frozen=True)
class SplitSpec:
    m: int
    n: int
    seed: int

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise SizeError("m and n must both be at least 1")


def split_dataset(data: BanditDataset, spec: SplitSpec) -> tuple[BanditDataset, BanditDataset]:
    """Disjoint train/calibration subsets of sizes ``m`` and ``n``.

    The permutation depends only on ``spec.seed``.
    """
    if spec.m + spec.n > len(data):
        raise SizeError(f"m + n = {spec.m + spec.n} exceeds dataset size {len(data)}")
    perm = np.random.default_rng(spec.seed).permutation(len(data))
    return data.subset(np.sort(perm[:spec.m])), data.subset(np.sort(perm[spec.m:spec.m + spec.n]))


# --------------------------------------------------------------------------- policies


def _as_2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        return X.reshape(1, 1)
    if X.ndim == 1:
        return X[:, None]
    return X


class PolicySpec:
    """Action distribution ``pi(a | x)``.

    Subclasses implement :meth:`prob` and :meth:`sample_uniform`; discrete
    policies also implement :meth:`probs`. Sampling goes through
    :meth:`sample_uniform` so two policies can share uniform draws.
    """

    action_kind: Kind = CONTINUOUS

    def probs(self, X) -> np.ndarray:
        raise ActionKindError(f"{type(self).__name__} has continuous actions")

    def prob(self, X, a) -> np.ndarray:
        X = _as_2d(X)
        a = np.broadcast_to(np.asarray(a), (X.shape[0],))
        if self.action_kind.discrete:
            a = _discrete_actions(a, self.action_kind)
            return self.probs(X)[np.arange(X.shape[0]), a]
        raise NotImplementedError

    def sample_uniform(self, X, U) -> np.ndarray:
        """Inverse-CDF sampling: ``U`` has shape ``(n, h)`` of uniforms in (0, 1)."""
        P = self.probs(X)
        cdf = np.cumsum(P, axis=1)[:, :-1]
        # index of the first cdf entry above u; the last action takes the remainder
        out = np.zeros(U.shape, dtype=np.int64)
        for k in range(cdf.shape[1]):
            out += cdf[:, k:k + 1] <= U
        return out

    def sample(self, X, rng: np.random.Generator) -> np.ndarray:
        X = _as_2d(X)
        return self.sample_uniform(X, rng.random((X.shape[0], 1)))[:, 0]

    def to_dict(self) -> dict:
        raise NotImplementedError(f"{type(self).__name__} is not serializable")


def _discrete_actions(a: np.ndarray, kind: Kind) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        if np.any(a != np.round(a)):
            raise ActionKindError("discrete policy queried with a non-integer action")
    a = a.astype(np.int64)
    if np.any((a < 0) | (a >= kind.size)):
        raise ActionKindError(f"action outside 0..{kind.size - 1}")
    return a


@dataclass(frozen=True, eq=False)
class TabularRule(PolicySpec):
    """Probability table over ``K`` actions indexed by the region of ``|x[feature]|``.

    Region ``r`` is the first with ``|x| <= thresholds[r]``; the last row of
    ``table`` covers everything beyond the final threshold.
    """

    thresholds: tuple
    table: tuple
    feature: int = 0

    def __post_init__(self):
        table = np.asarray(self.table, dtype=float)
        if table.ndim != 2 or table.shape[0] != len(self.thresholds) + 1:
            raise ValueError("table needs one row per region (len(thresholds) + 1)")
        if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("each table row must be a probability vector")
        if list(self.thresholds) != sorted(self.thresholds):
            raise ValueError("thresholds must be ascending")
        object.__setattr__(self, "table", tuple(map(tuple, table)))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))

    @property
    def action_kind(self) -> Kind:
        return Kind(len(self.table[0]))

    def region(self, X) -> np.ndarray:
        r = np.abs(_as_2d(X)[:, self.feature])
        return np.searchsorted(np.asarray(self.thresholds), r, side="left")

    def probs(self, X) -> np.ndarray:
        return np.asarray(self.table)[self.region(X)]

    def to_dict(self) -> dict:
        return {"kind": "tabular", "thresholds": list(self.thresholds),
                "table": [list(r) for r in self.table], "feature": self.feature}


@dataclass(frozen=True, eq=False)
class GaussianLinear(PolicySpec):
    """Continuous actions ``a ~ N(coef * x[feature] + shift, std^2)``."""

    coef: float
    shift: float = 0.0
    std: float = 1.0
    feature: int = 0

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("std must be positive")

    def mean(self, X) -> np.ndarray:
        return self.coef * _as_2d(X)[:, self.feature] + self.shift

    def prob(self, X, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        return norm.pdf(a, loc=self.mean(X), scale=self.std)

    def sample_uniform(self, X, U) -> np.ndarray:
        return self.mean(X)[:, None] + self.std * ndtri(U)

    def to_dict(self) -> dict:
        return {"kind": "gaussian_linear", "coef": self.coef, "shift": self.shift,
                "std": self.std, "feature": self.feature}


@dataclass(frozen=True, eq=False)
class Deterministic(PolicySpec):
    """Point mass at ``rule(X)``; ``n_actions=None`` means continuous actions."""

    rule: Callable[[np.ndarray], np.ndarray]
    n_actions: Optional[int] = None
    constant: Optional[float] = field(default=None, compare=False)

    @classmethod
    def always(cls, action, n_actions: Optional[int] = None) -> "Deterministic":
        return cls(lambda X: np.full(_as_2d(X).shape[0], action), n_actions, action)

    @property
    def action_kind(self) -> Kind:
        return Kind(self.n_actions)

    def actions(self, X) -> np.ndarray:
        return np.asarray(self.rule(_as_2d(X)))

    def probs(self, X) -> np.ndarray:
        if self.n_actions is None:
            return super().probs(X)
        act = self.actions(X).astype(np.int64)
        P = np.zeros((act.shape[0], self.n_actions))
        P[np.arange(act.shape[0]), act] = 1.0
        return P

    def prob(self, X, a) -> np.ndarray:
        if self.n_actions is not None:
            return super().prob(X, a)
        return (np.asarray(a, dtype=float) == self.actions(X)).astype(float)

    def sample_uniform(self, X, U) -> np.ndarray:
        return np.broadcast_to(self.actions(X)[:, None], U.shape).copy()

    def to_dict(self) -> dict:
        if self.constant is None:
            return super().to_dict()
        return {"kind": "deterministic", "action": self.constant, "n_actions": self.n_actions}


@dataclass(frozen=True, eq=False)
class ClassifierEpsilon(PolicySpec):
    """Favours the classifier's top class with probability ``eps``.

    The remaining mass is spread uniformly over the other ``K - 1`` actions.
    """

    classifier: Callable[[np.ndarray], np.ndarray]
    n_actions: int
    eps: float

    def __post_init__(self):
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")

    @property
    def action_kind(self) -> Kind:
        return Kind(self.n_actions)

    def probs(self, X) -> np.ndarray:
        X = _as_2d(X)
        K = self.n_actions
        if K == 1:
            return np.ones((X.shape[0], 1))
        favored = np.argmax(self.classifier(X), axis=1)
        P = np.full((X.shape[0], K), (1.0 - self.eps) / (K - 1))
        P[np.arange(X.shape[0]), favored] = self.eps
        return P


def policy_from_dict(spec: dict) -> PolicySpec:
    kind = spec.get("kind")
    if kind == "tabular":
        return TabularRule(tuple(spec["thresholds"]), tuple(map(tuple, spec["table"])),
                           int(spec.get("feature", 0)))
    if kind == "gaussian_linear":
        return GaussianLinear(float(spec["coef"]), float(spec.get("shift", 0.0)),
                              float(spec.get("std", 1.0)), int(spec.get("feature", 0)))
    if kind == "deterministic":
        n = spec.get("n_actions")
        return Deterministic.always(spec["action"], None if n is None else int(n))
    if kind == "toy_eps":
        from .envs import toy_policy
        return toy_policy(float(spec["eps"]))
    raise ValueError(f"unknown policy kind {kind!r}")


def policy_prob(p: PolicySpec, x, a) -> float:
    """``pi(a | x)`` at a single covariate vector (a density for continuous actions)."""
    if p.action_kind.discrete:
        a_arr = np.asarray(a)
        if a_arr.dtype.kind == "f" and a_arr != np.round(a_arr):
            raise ActionKindError("discrete policy queried with a non-integer action")
    return float(p.prob(np.atleast_1d(np.asarray(x, dtype=float))[None, :], np.asarray([a]))[0])


def policy_sample(p: PolicySpec, x, rng: np.random.Generator):
    """Draw one action for covariate vector ``x``."""
    a = p.sample(np.atleast_1d(np.asarray(x, dtype=float))[None, :], rng)[0]
    return int(a) if p.action_kind.discrete else float(a)


# --------------------------------------------------------------------------- prediction sets


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """Accepted grid points, a label set, or a plain ``[lo, hi]`` interval.

    ``kind`` is one of ``"interval_grid"``, ``"label_set"`` or ``"interval"``.
    """

    kind: str
    points: np.ndarray = field(default_factory=lambda: np.empty(0))
    spacing: float = 0.0
    labels: tuple = ()
    lo: float = np.nan
    hi: float = np.nan
    unbounded: bool = False

    def __post_init__(self):
        if self.kind == "interval_grid":
            pts = np.asarray(self.points, dtype=float)
            if pts.size > 1 and np.any(np.diff(pts) <= 0):
                raise ValueError("grid points must be strictly ascending")
            object.__setattr__(self, "points", _frozen(pts))
        elif self.kind == "label_set":
            labels = tuple(int(v) for v in self.labels)
            if len(set(labels)) != len(labels):
                raise ValueError("label set has duplicates")
            object.__setattr__(self, "labels", tuple(sorted(labels)))
        elif self.kind != "interval":
            raise ValueError(f"unknown prediction set kind {self.kind!r}")

    @classmethod
    def from_grid(cls, grid: np.ndarray, mask: np.ndarray, unbounded: bool = False) -> "PredictionSet":
        spacing = float(grid[1] - grid[0]) if grid.size > 1 else 0.0
        return cls("interval_grid", points=grid[mask], spacing=spacing, unbounded=unbounded)

    @classmethod
    def from_labels(cls, labels, unbounded: bool = False) -> "PredictionSet":
        return cls("label_set", labels=tuple(labels), unbounded=unbounded)

    @classmethod
    def interval(cls, lo: float, hi: float) -> "PredictionSet":
        return cls("interval", lo=float(lo), hi=float(hi))

    def contains(self, y) -> bool:
        if self.unbounded:
            return True
        if self.kind == "interval_grid":
            if self.points.size == 0:
                return False
            return bool(np.min(np.abs(self.points - y)) <= self.spacing / 2)
        if self.kind == "label_set":
            return int(y) in self.labels
        return bool(self.lo <= y <= self.hi)

    def length(self) -> float:
        """Grid measure (count x spacing), interval width, or label count."""
        if self.kind == "interval_grid":
            return self.points.size * self.spacing
        if self.kind == "label_set":
            return float(len(self.labels))
        return float(self.hi - self.lo)

    def hull_length(self) -> float:
        if self.kind == "interval_grid":
            if self.points.size == 0:
                return 0.0
            return float(self.points[-1] - self.points[0]) + self.spacing
        return self.length()

    @property
    def bounds(self) -> tuple[float, float]:
        if self.kind == "interval_grid":
            if self.points.size == 0:
                return (np.nan, np.nan)
            return (float(self.points[0]), float(self.points[-1]))
        if self.kind == "interval":
            return (self.lo, self.hi)
        raise TypeError("label sets have no bounds")
