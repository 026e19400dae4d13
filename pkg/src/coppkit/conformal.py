"""Weighted split-conformal prediction sets.

Every operation has a batched form working on ``N`` test rows at once; the
single-point functions wrap it and return a :class:`PredictionSet`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from . import kernels
from .core import PredictionSet, _as_2d
from .weights import WeightFn, unit_weight

NEAR_TIE_RTOL = 1e-12


class DegenerateWeightsError(FloatingPointError):
    """Calibration and test weights are all zero."""


class CalibrationRecord(NamedTuple):
    score: float
    x: np.ndarray
    y: float


@dataclass(frozen=True, eq=False)
class ScoreFn:
    """Nonconformity score ``s(x, y)``; larger means ``y`` fits ``x`` worse.

    ``evaluator`` maps ``X (N, d)`` and ``Y (N, G)`` to scores ``(N, G)``.
    """

    evaluator: Callable
    kind: str

    def __call__(self, X, Y) -> np.ndarray:
        X = _as_2d(X)
        Y = np.asarray(Y)
        flat = Y.ndim == 1
        S = self.evaluator(X, Y[:, None] if flat else Y)
        return S[:, 0] if flat else S


def cqr_score(q, x, y) -> float:
    """``max(q_lo(x) - y, y - q_hi(x))`` at a single point."""
    lo, hi = q.predict(np.atleast_1d(np.asarray(x, dtype=float))[None, :])
    return float(max(lo[0] - y, y - hi[0]))


def cqr_score_fn(q) -> ScoreFn:
    def evaluate(X, Y):
        lo, hi = q.predict(X)
        return np.maximum(lo[:, None] - Y, Y - hi[:, None])

    return ScoreFn(evaluate, "cqr")


def discrete_cumprob_score(pyx, y) -> float:
    """Total probability of labels at least as likely as ``y`` (ties count)."""
    pyx = np.asarray(pyx, dtype=float)
    if abs(pyx.sum() - 1.0) > 1e-6:
        raise ValueError("probability vector must sum to 1")
    return float(np.sum(pyx[pyx >= pyx[int(y)]]))


def discrete_cumprob_score_fn(pyx_fn: Callable) -> ScoreFn:
    """Score from ``pyx_fn(X) -> (N, L)`` label probabilities under the behaviour policy."""

    def evaluate(X, Y):
        P = pyx_fn(X)
        py = np.take_along_axis(P, np.asarray(Y, dtype=np.int64), axis=1)
        return np.einsum("nl,ngl->ng", P, (P[:, None, :] >= py[:, :, None]).astype(float))

    return ScoreFn(evaluate, "discrete_cumprob")


# --------------------------------------------------------------------------- calibration


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    """Column-wise calibration records: covariates, outcomes and their scores."""

    X: np.ndarray
    Y: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "X", _as_2d(self.X))
        object.__setattr__(self, "Y", np.asarray(self.Y))
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=float))
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("calibration scores must be finite")

    def __len__(self) -> int:
        return self.scores.size

    @classmethod
    def from_data(cls, data, score: ScoreFn) -> "CalibrationSet":
        return cls(data.X, data.Y, score(data.X, data.Y))

    @classmethod
    def from_records(cls, records: Sequence[CalibrationRecord]) -> "CalibrationSet":
        if not records:
            raise ValueError("need at least one calibration record")
        X = np.array([np.atleast_1d(np.asarray(r.x, dtype=float)) for r in records])
        return cls(X, np.array([r.y for r in records]), np.array([r.score for r in records]))

    def subset(self, idx) -> "CalibrationSet":
        return CalibrationSet(self.X[idx], self.Y[idx], self.scores[idx])

    def records(self) -> list[CalibrationRecord]:
        return [CalibrationRecord(float(s), x, y) for s, x, y in zip(self.scores, self.X, self.Y.tolist())]


class WeightedScores:
    """Calibration scores merged into atoms with cumulative weight.

    Calibration weights do not depend on the test point, so they are
    evaluated once; each quantile query only adds the test weight.
    """

    def __init__(self, scores, cal_weights):
        scores = np.asarray(scores, dtype=float)
        w = np.asarray(cal_weights, dtype=float)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("calibration weights must be finite and nonnegative")
        atoms, inv = np.unique(scores, return_inverse=True)
        self.atoms = np.ascontiguousarray(atoms)
        self.cum = np.ascontiguousarray(np.cumsum(np.bincount(inv.ravel(), weights=w, minlength=atoms.size)))
        self.total = float(self.cum[-1]) if self.cum.size else 0.0

    def quantile(self, test_w, level: float) -> np.ndarray:
        if not 0.0 < level < 1.0 + 1e-15:
            raise ValueError("level must lie in (0, 1]")
        test_w = np.asarray(test_w, dtype=float)
        if np.any(self.total + test_w <= 0):
            raise DegenerateWeightsError("all calibration and test weights are zero")
        flat = np.ascontiguousarray(test_w.ravel())
        return kernels.weighted_quantile_sorted(self.atoms, self.cum, self.total, flat, level,
                                                NEAR_TIE_RTOL).reshape(test_w.shape)


def weighted_quantile(records, w_hat: WeightFn, x, y, level: float) -> float:
    """Quantile at ``level`` of the weighted calibration scores plus an atom at +inf.

    ``records`` is a :class:`CalibrationSet` or a list of :class:`CalibrationRecord`.
    """
    cal = records if isinstance(records, CalibrationSet) else CalibrationSet.from_records(records)
    if len(cal) == 0:
        raise ValueError("need at least one calibration record")
    ws = WeightedScores(cal.scores, w_hat(cal.X, cal.Y))
    wt = w_hat(np.atleast_1d(np.asarray(x, dtype=float))[None, :], np.asarray([y]))
    return float(ws.quantile(wt, level)[0])


# --------------------------------------------------------------------------- batched sets


@dataclass(frozen=True)
class GridSpec:
    """Equally spaced candidate outcomes on ``[lo, hi]``."""

    lo: float
    hi: float
    count: int = 100

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("grid needs at least 2 points")
        if not self.lo < self.hi:
            raise ValueError("grid needs lo < hi")

    @classmethod
    def from_calibration(cls, y, count: int = 100, margin: float = 0.25) -> "GridSpec":
        """Calibration outcome range widened by ``margin`` times its span on each side."""
        y = np.asarray(y, dtype=float)
        lo, hi = float(y.min()), float(y.max())
        span = hi - lo
        if span == 0:
            span = 1.0
        return cls(lo - margin * span, hi + margin * span, count)

    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.count)

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.count - 1)


@dataclass(frozen=True, eq=False)
class GridSets:
    """``N`` grid prediction sets as a boolean acceptance mask."""

    grid: np.ndarray
    mask: np.ndarray
    unbounded: np.ndarray

    @property
    def spacing(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def __len__(self) -> int:
        return self.mask.shape[0]

    def contains(self, y) -> np.ndarray:
        """Truth within half a spacing of an accepted point, or an unbounded set."""
        y = np.asarray(y, dtype=float)
        near = np.abs(self.grid[None, :] - y[:, None]) <= self.spacing / 2
        return self.unbounded | np.any(near & self.mask, axis=1)

    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1) * self.spacing

    def hull_lengths(self) -> np.ndarray:
        any_ = self.mask.any(axis=1)
        first = np.argmax(self.mask, axis=1)
        last = self.mask.shape[1] - 1 - np.argmax(self.mask[:, ::-1], axis=1)
        return np.where(any_, (self.grid[last] - self.grid[first]) + self.spacing, 0.0)

    def __getitem__(self, i) -> PredictionSet:
        return PredictionSet.from_grid(self.grid, self.mask[i], bool(self.unbounded[i]))

    def to_sets(self) -> list[PredictionSet]:
        return [self[i] for i in range(len(self))]


@dataclass(frozen=True, eq=False)
class LabelSets:
    """``N`` label sets as a boolean mask over labels ``0..L-1``."""

    mask: np.ndarray
    unbounded: np.ndarray

    def __len__(self) -> int:
        return self.mask.shape[0]

    def contains(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.int64)
        return self.unbounded | self.mask[np.arange(len(self)), y]

    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(float)

    hull_lengths = lengths

    def __getitem__(self, i) -> PredictionSet:
        return PredictionSet.from_labels(np.flatnonzero(self.mask[i]), bool(self.unbounded[i]))

    def to_sets(self) -> list[PredictionSet]:
        return [self[i] for i in range(len(self))]


@dataclass(frozen=True, eq=False)
class IntervalSets:
    """``N`` closed intervals ``[lo, hi]``."""

    lo: np.ndarray
    hi: np.ndarray

    def __len__(self) -> int:
        return self.lo.size

    @property
    def unbounded(self) -> np.ndarray:
        return np.isinf(self.lo) | np.isinf(self.hi)

    def contains(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return (self.lo <= y) & (y <= self.hi)

    def lengths(self) -> np.ndarray:
        return self.hi - self.lo

    hull_lengths = lengths

    def __getitem__(self, i) -> PredictionSet:
        return PredictionSet.interval(self.lo[i], self.hi[i])

    def to_sets(self) -> list[PredictionSet]:
        return [self[i] for i in range(len(self))]


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def copp_eta(X, Ycand, w_hat: WeightFn, cal: CalibrationSet, alpha: float,
             cal_weights: Optional[np.ndarray] = None) -> np.ndarray:
    """``eta(x, y)`` for every row of ``X`` and candidate in ``Ycand (N, G)``."""
    _check_alpha(alpha)
    if len(cal) == 0:
        raise ValueError("need at least one calibration record")
    cw = w_hat(cal.X, cal.Y) if cal_weights is None else cal_weights
    ws = WeightedScores(cal.scores, cw)
    return ws.quantile(w_hat(X, Ycand), 1.0 - alpha)


def copp_mask(X, Ycand, score: ScoreFn, w_hat: WeightFn, cal: CalibrationSet, alpha: float,
              cal_weights: Optional[np.ndarray] = None):
    """Acceptance mask ``score <= eta`` plus the per-row unbounded flag."""
    X = _as_2d(X)
    eta = copp_eta(X, Ycand, w_hat, cal, alpha, cal_weights)
    mask = score(X, Ycand) <= eta
    unbounded = np.isinf(eta).any(axis=1) & mask.all(axis=1)
    return mask, unbounded


def copp_member(X, y, score: ScoreFn, w_hat: WeightFn, cal: CalibrationSet, alpha: float,
                cal_weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Whether each ``y[i]`` would be in the exact (grid-free) set at ``X[i]``."""
    X = _as_2d(X)
    Y = np.asarray(y)[:, None]
    return (score(X, Y) <= copp_eta(X, Y, w_hat, cal, alpha, cal_weights))[:, 0]


def copp_grid_sets(X, grid: GridSpec, score: ScoreFn, w_hat: WeightFn, cal: CalibrationSet,
                   alpha: float, cal_weights: Optional[np.ndarray] = None, chunk: int = 2000) -> GridSets:
    X = _as_2d(X)
    pts = grid.points()
    cw = w_hat(cal.X, cal.Y) if cal_weights is None else cal_weights
    masks, flags = [], []
    for s in range(0, X.shape[0], chunk):
        Xc = X[s:s + chunk]
        m, u = copp_mask(Xc, np.broadcast_to(pts, (Xc.shape[0], pts.size)), score, w_hat, cal, alpha, cw)
        masks.append(m)
        flags.append(u)
    return GridSets(pts, np.vstack(masks), np.concatenate(flags))


def copp_label_sets(X, n_labels: int, score: ScoreFn, w_hat: WeightFn, cal: CalibrationSet,
                    alpha: float, cal_weights: Optional[np.ndarray] = None) -> LabelSets:
    X = _as_2d(X)
    labels = np.broadcast_to(np.arange(n_labels), (X.shape[0], n_labels))
    mask, unbounded = copp_mask(X, labels, score, w_hat, cal, alpha, cal_weights)
    return LabelSets(mask, unbounded)


def copp_predict_continuous(x_test, grid: GridSpec, score: ScoreFn, w_hat: WeightFn,
                            records, alpha: float) -> PredictionSet:
    """Grid points ``y`` with ``score(x, y) <= eta(x, y)``."""
    cal = records if isinstance(records, CalibrationSet) else CalibrationSet.from_records(records)
    X = np.atleast_1d(np.asarray(x_test, dtype=float))[None, :]
    return copp_grid_sets(X, grid, score, w_hat, cal, alpha)[0]


def copp_predict_discrete(x_test, n_labels: int, score: ScoreFn, w_hat: WeightFn,
                          records, alpha: float) -> PredictionSet:
    """Labels ``y`` with ``score(x, y) <= eta(x, y)``."""
    cal = records if isinstance(records, CalibrationSet) else CalibrationSet.from_records(records)
    X = np.atleast_1d(np.asarray(x_test, dtype=float))[None, :]
    return copp_label_sets(X, n_labels, score, w_hat, cal, alpha)[0]


def standard_cp(x_test, target, score: ScoreFn, records, alpha: float) -> PredictionSet:
    """Unweighted split conformal: ``target`` is a :class:`GridSpec` or a label count."""
    if isinstance(target, GridSpec):
        return copp_predict_continuous(x_test, target, score, unit_weight(), records, alpha)
    return copp_predict_discrete(x_test, int(target), score, unit_weight(), records, alpha)


# --------------------------------------------------------------------------- union and class-balanced


def union_cp_grid_sets(X, grid: GridSpec, per_action: Mapping, alpha: float) -> GridSets:
    """Union over actions of standard-CP sets, each from that action's own score and records.

    ``per_action`` maps an action to ``(ScoreFn, CalibrationSet)``; actions with
    no records are skipped with a warning.
    """
    X = _as_2d(X)
    pts = grid.points()
    mask = np.zeros((X.shape[0], pts.size), dtype=bool)
    unbounded = np.zeros(X.shape[0], dtype=bool)
    for a in sorted(per_action):
        score, cal = per_action[a]
        if len(cal) == 0:
            warnings.warn(f"union CP: no calibration records for action {a}; skipped", RuntimeWarning,
                          stacklevel=2)
            continue
        sets = copp_grid_sets(X, grid, score, unit_weight(), cal, alpha)
        mask |= sets.mask
        unbounded |= sets.unbounded
    return GridSets(pts, mask, unbounded & mask.all(axis=1))


def union_cp(x_test, grid: GridSpec, per_action: Mapping, alpha: float) -> PredictionSet:
    X = np.atleast_1d(np.asarray(x_test, dtype=float))[None, :]
    return union_cp_grid_sets(X, grid, per_action, alpha)[0]


def union_cp_member(X, y, per_action: Mapping, alpha: float) -> np.ndarray:
    X = _as_2d(X)
    hit = np.zeros(X.shape[0], dtype=bool)
    for a in sorted(per_action):
        score, cal = per_action[a]
        if len(cal):
            hit |= copp_member(X, y, score, unit_weight(), cal, alpha)
    return hit


def split_by_label(cal: CalibrationSet, n_labels: int) -> dict:
    Y = np.asarray(cal.Y, dtype=np.int64)
    return {k: cal.subset(np.flatnonzero(Y == k)) for k in range(n_labels)}


def class_balanced_label_sets(X, per_label: Mapping, w_hat: WeightFn, alpha: float,
                              score: ScoreFn) -> LabelSets:
    """Label ``y`` enters when its score is within the quantile of label-``y`` records only.

    A label without records is always included (its quantile is +inf).
    """
    _check_alpha(alpha)
    X = _as_2d(X)
    labels = sorted(per_label)
    L = max(labels) + 1
    mask = np.zeros((X.shape[0], L), dtype=bool)
    any_inf = np.zeros(X.shape[0], dtype=bool)
    for y in labels:
        cal = per_label[y]
        Ycol = np.full((X.shape[0], 1), y)
        if len(cal) == 0:
            warnings.warn(f"class-balanced COPP: no calibration records with label {y}; always included",
                          RuntimeWarning, stacklevel=2)
            mask[:, y] = True
            any_inf[:] = True
            continue
        eta = copp_eta(X, Ycol, w_hat, cal, alpha)[:, 0]
        mask[:, y] = score(X, Ycol)[:, 0] <= eta
        any_inf |= np.isinf(eta)
    return LabelSets(mask, any_inf & mask.all(axis=1))


def class_balanced_copp(x_test, per_label: Mapping, w_hat: WeightFn, alpha: float,
                        score: ScoreFn) -> PredictionSet:
    X = np.atleast_1d(np.asarray(x_test, dtype=float))[None, :]
    return class_balanced_label_sets(X, per_label, w_hat, alpha, score)[0]
