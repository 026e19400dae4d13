"""Shared fixtures for the weight and acceptance tests."""

import numpy as np

from coppkit.envs import ToyDiscrete
from coppkit.weights import weight_from_density


class TrueToyModel:
    """The toy environment's own outcome law behind the fitted-model interface."""

    def __init__(self, env=None):
        self.env = env or ToyDiscrete()

    def mean_std_all(self, X):
        mu = self.env.means(X)
        return mu, np.full(mu.shape, self.env.noise_std)

    def mean_std(self, X, A):
        mu = self.env.means(X)[np.arange(len(A)), np.asarray(A, dtype=np.int64)]
        return mu, np.full(mu.shape, self.env.noise_std)


def toy_density(env):
    def density(X, a, Y):
        mu = X[:, :1] * a
        return np.exp(-0.5 * ((Y - mu) / env.noise_std) ** 2) / (np.sqrt(2 * np.pi) * env.noise_std)
    return density


def gamma_perturbation(gamma, phase=0.0):
    """``gamma ** u(x, a, y)`` with ``u`` in ``[-1, 1]``: a bounded smooth density tilt."""
    def factor(X, a, Y):
        u = np.sin(1.7 * X[:, :1] + 2.3 * a + 0.9 * Y + phase)
        return gamma ** u
    return factor


def perturbed_weight(env, pi_star, pi_b, gamma, phase=0.0):
    """Weights from ``P_hat = gamma(x, a, y) * P`` on the toy environment."""
    base = toy_density(env)
    tilt = gamma_perturbation(gamma, phase)
    density = lambda X, a, Y: tilt(X, a, Y) * base(X, a, Y)  # noqa: E731
    return weight_from_density(density, pi_star, pi_b, env.action_values, provenance=f"gamma({gamma:g})")
