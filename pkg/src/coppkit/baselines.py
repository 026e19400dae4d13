"""Competing interval constructions: weighted importance sampling and outcome-model sampling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .conformal import NEAR_TIE_RTOL, DegenerateWeightsError, IntervalSets
from .core import BanditDataset, PolicySpec, _as_2d

RHO_FLOOR = 1e-12


def _step_quantile(values_sorted, cum, beta):
    """``inf{t : cum(t) / total >= beta}`` over the atoms of a step CDF."""
    t = beta * cum[-1] * (1.0 - NEAR_TIE_RTOL)
    k = np.searchsorted(cum, t, side="left")
    return values_sorted[np.minimum(k, values_sorted.size - 1)]


@dataclass(frozen=True, eq=False)
class WeightedCdf:
    """Right-continuous step CDF with atoms ``values`` and normalised ``weights``."""

    values: np.ndarray
    weights: np.ndarray
    _cum: np.ndarray

    @classmethod
    def from_samples(cls, y, w) -> "WeightedCdf":
        y = np.asarray(y, dtype=float)
        w = np.asarray(w, dtype=float)
        total = w.sum()
        if not total > 0:
            raise DegenerateWeightsError("all importance weights are zero")
        atoms, inv = np.unique(y, return_inverse=True)
        mass = np.bincount(inv.ravel(), weights=w, minlength=atoms.size)
        return cls(atoms, mass / total, np.cumsum(mass))

    def __call__(self, t) -> np.ndarray:
        k = np.searchsorted(self.values, np.asarray(t, dtype=float), side="right")
        cdf = np.concatenate([[0.0], self._cum / self._cum[-1]])
        return cdf[k]

    def quantile(self, beta) -> float:
        if not 0.0 < beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        return float(_step_quantile(self.values, self._cum, beta))


def importance_ratios(data: BanditDataset, pi_star: PolicySpec, pi_b_hat: PolicySpec) -> np.ndarray:
    pb = pi_b_hat.prob(data.X, data.A)
    low = pb < RHO_FLOOR
    if low.any():
        warnings.warn(f"behaviour probability floored at {RHO_FLOOR:g} for {int(low.sum())} samples",
                      RuntimeWarning, stacklevel=3)
    return pi_star.prob(data.X, data.A) / np.maximum(pb, RHO_FLOOR)


def wis_cdf(data: BanditDataset, pi_star: PolicySpec, pi_b_hat: PolicySpec) -> WeightedCdf:
    """Self-normalised importance-weighted CDF of the logged outcomes."""
    return WeightedCdf.from_samples(data.Y, importance_ratios(data, pi_star, pi_b_hat))


def wis_interval(cdf: WeightedCdf, alpha: float) -> tuple[float, float]:
    """``[Q(alpha/2), Q(1 - alpha/2)]``, the same for every test point."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return cdf.quantile(alpha / 2), cdf.quantile(1 - alpha / 2)


def wis_interval_sets(cdf: WeightedCdf, alpha: float, n: int) -> IntervalSets:
    lo, hi = wis_interval(cdf, alpha)
    return IntervalSets(np.full(n, lo), np.full(n, hi))


def sba_interval_sets(X, pi_star: PolicySpec, p_hat, ell: int, alpha: float,
                      rng: np.random.Generator, chunk: int = 500) -> IntervalSets:
    """Per row, draw ``ell`` actions from ``pi_star`` and outcomes from ``p_hat``.

    The interval is the empirical ``[alpha/2, 1 - alpha/2]`` quantile pair of
    the simulated outcomes.
    """
    if ell < 2:
        raise ValueError("ell must be at least 2")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    X = _as_2d(X)
    lo = np.empty(X.shape[0])
    hi = np.empty(X.shape[0])
    cum = np.arange(1, ell + 1, dtype=float)
    for s in range(0, X.shape[0], chunk):
        Xc = X[s:s + chunk]
        n = Xc.shape[0]
        Xr = np.repeat(Xc, ell, axis=0)
        A = pi_star.sample(Xr, rng)
        Ys = np.sort(p_hat.sample(Xr, A, rng).reshape(n, ell), axis=1)
        for beta, out in ((alpha / 2, lo), (1 - alpha / 2, hi)):
            k = np.searchsorted(cum, beta * ell * (1.0 - NEAR_TIE_RTOL), side="left")
            out[s:s + n] = Ys[:, min(k, ell - 1)]
    return IntervalSets(lo, hi)


def sba_interval(x_test, pi_star: PolicySpec, p_hat, ell: int, alpha: float,
                 rng: np.random.Generator) -> tuple[float, float]:
    sets = sba_interval_sets(np.atleast_1d(np.asarray(x_test, dtype=float))[None, :], pi_star, p_hat,
                             ell, alpha, rng)
    return float(sets.lo[0]), float(sets.hi[0])
