"""Pure numpy versions of the compiled kernels (same signatures and results)."""

import numpy as np

INV_SQRT_2PI = 0.3989422804014327
_CHUNK = 1 << 21


def weighted_quantile_sorted(atoms, cum, total, test_w, level, rtol):
    """Quantile for each test weight given merged atoms and their cumulative cal mass."""
    atoms = np.asarray(atoms, dtype=float)
    test_w = np.asarray(test_w, dtype=float)
    z = total + test_w
    if np.any(z <= 0.0):
        raise FloatingPointError("degenerate weights: total mass is zero")
    t = level * z * (1.0 - rtol)
    k = np.searchsorted(np.asarray(cum, dtype=float), t, side="left")
    padded = np.append(atoms, np.inf)
    return padded[k]


def gaussian_mixture_pdf(y, mu, sigma, coef):
    """out[i, g] = sum_k coef[i, k] * N(y[i, g]; mu[i, k], sigma[i, k]^2)."""
    y = np.asarray(y, dtype=float)
    N, G = y.shape
    H = mu.shape[1]
    inv = 1.0 / sigma
    scale = coef * INV_SQRT_2PI * inv
    out = np.empty((N, G))
    rows = max(1, _CHUNK // max(1, G * H))
    for s in range(0, N, rows):
        e = min(N, s + rows)
        z = (y[s:e, :, None] - mu[s:e, None, :]) * inv[s:e, None, :]
        out[s:e] = np.einsum("igk,ik->ig", np.exp(-0.5 * z * z), scale[s:e])
    return out
