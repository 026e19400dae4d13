"""Random small conformal instances, solved by the engine and by the oracle.

Scores and weights are built from +, -, * and max only, so numpy and plain
Python produce the same floats. Coefficients sit on a 1/4 lattice and
covariates on a 1/8 lattice, which makes exact score ties common.
"""

import numpy as np

from coppkit import conformal as cf
from coppkit.weights import from_callable, unit_weight

import oracles

ALPHAS = [0.05, 0.1, 0.2, 0.25, 0.3, 0.4, 0.5, 0.6, 0.75, 0.9]


def _lattice(rng, size, step, span=2.0):
    return np.round(rng.uniform(-span, span, size) / step) * step


def _line_score(rng):
    a, b, c, e = _lattice(rng, 4, 0.25)
    if c * 0 + e < a * 0 + b:
        b, e = e, b

    def vec(X, Y):
        x = X[:, :1]
        return np.maximum(a * x + b - Y, Y - (c * x + e))

    def py(x, y):
        return max(a * x + b - y, y - (c * x + e))

    return cf.ScoreFn(vec, "cqr"), py


def _weight(rng):
    kind = rng.integers(0, 3)
    if kind == 0:
        return unit_weight(), lambda x, y: 1.0
    u, v = _lattice(rng, 2, 0.25)
    if kind == 1:
        return (from_callable(lambda X, Y: 1.0 + (u * X[:, :1] + v * Y) ** 2),
                lambda x, y: 1.0 + (u * x + v * y) ** 2)
    # may be exactly zero at some points
    return (from_callable(lambda X, Y: (u * X[:, :1] + v * Y) ** 2),
            lambda x, y: (u * x + v * y) ** 2)


def _solve(engine, oracle):
    """Both results, or the pair ("degenerate", "degenerate") if every weight is zero."""
    try:
        got = engine()
    except FloatingPointError:
        got = "degenerate"
    try:
        want = oracle()
    except ZeroDivisionError:
        want = "degenerate"
    return got, want


def continuous_copp(rng, unit=False):
    n = int(rng.integers(1, 9))
    G = int(rng.integers(2, 11))
    alpha = float(rng.choice(ALPHAS))
    score, score_py = _line_score(rng)
    w, w_py = (unit_weight(), lambda x, y: 1.0) if unit else _weight(rng)
    X = _lattice(rng, n, 0.125)
    Y = _lattice(rng, n, 0.125, span=3.0)
    cal = cf.CalibrationSet(X[:, None], Y, score(X[:, None], Y))
    grid = cf.GridSpec(-3.0, 3.0, G)
    x = float(_lattice(rng, 1, 0.125)[0])
    pts = [float(p) for p in grid.points()]

    def engine():
        s = cf.copp_predict_continuous([x], grid, score, w, cal, alpha)
        return [float(p) for p in s.points]

    def oracle():
        return oracles.brute_set(pts, score_py, w_py, list(zip(X.tolist(), Y.tolist())), x, alpha)

    return _solve(engine, oracle)


def _dyadic_probs(rng, L):
    # multiples of 1/16 summing to 1, so every partial sum is exact in floats
    cuts = np.sort(rng.integers(0, 17, L - 1))
    return np.diff(np.concatenate([[0], cuts, [16]])) / 16.0


def _label_model(rng, L):
    table = {k: _dyadic_probs(rng, L) for k in range(3)}

    def pyx(X):
        idx = np.mod(np.floor(X[:, 0]).astype(int), 3)
        return np.stack([table[k] for k in idx])

    def pyx_py(x):
        return [float(v) for v in table[int(np.floor(x)) % 3]]

    return pyx, pyx_py


def discrete_copp(rng, unit=False):
    n = int(rng.integers(1, 9))
    L = int(rng.integers(1, 5))
    alpha = float(rng.choice(ALPHAS))
    pyx, pyx_py = _label_model(rng, L)
    score = cf.discrete_cumprob_score_fn(pyx)
    score_py = lambda x, y: oracles.cumprob(pyx_py(x), int(y))  # noqa: E731
    if unit:
        w, w_py = unit_weight(), (lambda x, y: 1.0)
    else:
        u = float(_lattice(rng, 1, 0.25)[0])
        w = from_callable(lambda X, Y: 1.0 + (u * X[:, :1] + Y) ** 2)
        w_py = lambda x, y: 1.0 + (u * x + y) ** 2  # noqa: E731
    X = _lattice(rng, n, 0.5, span=3.0)
    Y = rng.integers(0, L, n)
    cal = cf.CalibrationSet(X[:, None], Y, score(X[:, None], Y))
    x = float(_lattice(rng, 1, 0.5, span=3.0)[0])

    def engine():
        return list(cf.copp_predict_discrete([x], L, score, w, cal, alpha).labels)

    def oracle():
        return oracles.brute_set(list(range(L)), score_py, w_py, list(zip(X.tolist(), Y.tolist())), x, alpha)

    return _solve(engine, oracle)


def standard(rng):
    if rng.random() < 0.5:
        return continuous_copp(rng, unit=True)
    return discrete_copp(rng, unit=True)


def union(rng):
    K = int(rng.integers(1, 4))
    G = int(rng.integers(2, 11))
    alpha = float(rng.choice(ALPHAS))
    grid = cf.GridSpec(-3.0, 3.0, G)
    per_action, per_action_py = {}, []
    for a in range(K):
        score, score_py = _line_score(rng)
        n = int(rng.integers(0, 9))
        X = _lattice(rng, n, 0.125)
        Y = _lattice(rng, n, 0.125, span=3.0)
        cal = cf.CalibrationSet(X.reshape(n, 1), Y, score(X.reshape(n, 1), Y) if n else np.empty(0))
        per_action[a] = (score, cal)
        per_action_py.append((score_py, list(zip(X.tolist(), Y.tolist()))))
    x = float(_lattice(rng, 1, 0.125)[0])
    pts = [float(p) for p in grid.points()]

    def engine():
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return [float(p) for p in cf.union_cp([x], grid, per_action, alpha).points]

    return _solve(engine, lambda: oracles.brute_union(pts, per_action_py, x, alpha))


def class_balanced(rng):
    L = int(rng.integers(1, 5))
    n = int(rng.integers(1, 9))
    alpha = float(rng.choice(ALPHAS))
    pyx, pyx_py = _label_model(rng, L)
    score = cf.discrete_cumprob_score_fn(pyx)
    score_py = lambda x, y: oracles.cumprob(pyx_py(x), int(y))  # noqa: E731
    u = float(_lattice(rng, 1, 0.25)[0])
    w = from_callable(lambda X, Y: 1.0 + (u * X[:, :1] + Y) ** 2)
    w_py = lambda x, y: 1.0 + (u * x + y) ** 2  # noqa: E731
    X = _lattice(rng, n, 0.5, span=3.0)
    Y = rng.integers(0, L, n)
    cal = cf.CalibrationSet(X[:, None], Y, score(X[:, None], Y))
    x = float(_lattice(rng, 1, 0.5, span=3.0)[0])

    def engine():
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            per_label = cf.split_by_label(cal, L)
            return list(cf.class_balanced_copp([x], per_label, w, alpha, score).labels)

    def oracle():
        return oracles.brute_class_balanced(list(range(L)), score_py, w_py,
                                            list(zip(X.tolist(), Y.tolist())), x, alpha)

    return _solve(engine, oracle)


GENERATORS = {"copp": lambda rng: (continuous_copp(rng) if rng.random() < 0.5 else discrete_copp(rng)),
              "standard_cp": standard, "union_cp": union, "class_balanced": class_balanced}


def quantile_case(rng):
    """One random weighted-quantile query: engine value and oracle value."""
    n = int(rng.integers(1, 9))
    scores = _lattice(rng, n, 0.25)
    if rng.random() < 0.5:
        cal_w = rng.integers(0, 4, n).astype(float)
        test_w = float(rng.integers(0, 4))
        level = float(rng.choice([0.05, 0.1, 0.2, 0.25, 0.5, 0.6, 0.75, 0.8, 0.9, 0.95]))
    else:
        cal_w = rng.exponential(size=n)
        test_w = float(rng.exponential())
        level = float(rng.uniform(0.01, 0.99))

    def engine():
        return float(cf.WeightedScores(scores, cal_w).quantile(np.array([test_w]), level)[0])

    return _solve(engine, lambda: oracles.brute_quantile(scores.tolist(), cal_w, test_w, level))
