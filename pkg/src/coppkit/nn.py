"""Small feed-forward networks with hand-written backprop, losses and Adam.

Everything is float64 numpy so results are bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

MAGIC = b"COPPKIT-MODEL-1\n"


class TrainingError(RuntimeError):
    """Training diverged; ``diagnostics`` holds the state at failure."""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed or from an unknown version."""


@dataclass(frozen=True)
class MlpSpec:
    """Layer sizes of a ReLU network; ``seed`` drives weight initialisation."""

    input_dim: int
    hidden_layer_sizes: tuple = (32,)
    output_dim: int = 1
    seed: int = 0
    activation: str = "relu"

    def __post_init__(self):
        sizes = [self.input_dim, self.output_dim, *self.hidden_layer_sizes]
        if any(int(s) < 1 for s in sizes):
            raise ValueError("all layer sizes must be at least 1")
        if self.activation != "relu":
            raise ValueError("only the 'relu' activation is supported")
        object.__setattr__(self, "hidden_layer_sizes", tuple(int(h) for h in self.hidden_layer_sizes))

    def with_io(self, input_dim: int, output_dim: int) -> "MlpSpec":
        return MlpSpec(input_dim, self.hidden_layer_sizes, output_dim, self.seed, self.activation)


@dataclass(frozen=True)
class TrainOpts:
    lr: float = 1e-3
    epochs: int = 500
    batch_size: int = 128
    val_frac: float = 0.1
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epoch budget must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if not 0.0 <= self.val_frac < 1.0:
            raise ValueError("val_frac must lie in [0, 1)")


class MLP:
    """Dense ReLU network ``x -> W_L relu(... relu(W_1 x + b_1)) + b_L``.

    Parameters live in a single flat vector so the optimizer and the
    checkpoint writer can treat them uniformly; ``weights`` and ``biases``
    are views into it.
    """

    def __init__(self, spec: MlpSpec, params: Optional[np.ndarray] = None):
        self.spec = spec
        sizes = [spec.input_dim, *spec.hidden_layer_sizes, spec.output_dim]
        self.shapes = [(sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1)]
        n_params = sum(a * b + b for a, b in self.shapes)
        if params is None:
            params = self._init_params(np.random.default_rng(spec.seed))
        params = np.array(params, dtype=float)
        if params.shape != (n_params,):
            raise ValueError(f"expected {n_params} parameters, got {params.shape}")
        self.params = params
        self._bind()

    def _init_params(self, rng):
        chunks = []
        for fan_in, fan_out in self.shapes:
            chunks.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)

    def _bind(self):
        self.weights, self.biases = [], []
        pos = 0
        for fan_in, fan_out in self.shapes:
            self.weights.append(self.params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out))
            pos += fan_in * fan_out
            self.biases.append(self.params[pos:pos + fan_out])
            pos += fan_out

    def set_params(self, params: np.ndarray) -> None:
        self.params[:] = params

    def copy(self) -> "MLP":
        return MLP(self.spec, self.params.copy())

    def forward(self, X: np.ndarray, keep: bool = False):
        h = X
        cache = [h]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            h = z if i == last else np.maximum(z, 0.0)
            if keep:
                cache.append(h)
        return (h, cache) if keep else h

    __call__ = forward

    def backward(self, cache, d_out: np.ndarray) -> np.ndarray:
        """Flat gradient of ``sum(d_out * output)`` with respect to ``params``."""
        grads = [None] * (2 * len(self.weights))
        delta = d_out
        for i in range(len(self.weights) - 1, -1, -1):
            h_in = cache[i]
            grads[2 * i] = (h_in.T @ delta).ravel()
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (cache[i] > 0)
        return np.concatenate(grads)


# --------------------------------------------------------------------------- losses
#
# Each loss maps (raw network output, target, per-sample weight) to the
# weighted mean loss and its gradient with respect to the raw output.


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def squared_loss(out, y, w):
    r = out[:, 0] - y
    n = out.shape[0]
    return float(np.sum(w * r * r) / n), (2.0 * w * r / n)[:, None]


def pinball_loss(prediction, y, beta):
    """Asymmetric absolute loss for quantile level ``beta`` (elementwise).

    Over-predictions cost ``beta`` per unit, under-predictions ``1 - beta``.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {beta}")
    diff = np.asarray(prediction, dtype=float) - np.asarray(y, dtype=float)
    loss = np.where(diff > 0, beta * diff, (beta - 1.0) * diff)
    return float(loss) if np.ndim(loss) == 0 else loss


def make_pinball(beta: float):
    if not 0.0 < beta < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {beta}")

    def loss(out, y, w):
        diff = out[:, 0] - y
        n = out.shape[0]
        val = np.sum(w * np.where(diff > 0, beta * diff, (beta - 1.0) * diff)) / n
        # prediction >= y takes the beta-side slope
        slope = np.where(diff >= 0, beta, beta - 1.0)
        return float(val), (w * slope / n)[:, None]

    return loss


def make_gaussian_nll(sigma_floor: float = 0.0):
    """Column 0 is the mean, column 1 the pre-softplus scale."""

    def loss(out, y, w):
        mu, raw = out[:, 0], out[:, 1]
        sigma = softplus(raw) + sigma_floor
        z = (y - mu) / sigma
        n = out.shape[0]
        val = np.sum(w * (0.5 * z * z + np.log(sigma))) / n + 0.5 * np.log(2 * np.pi) * np.sum(w) / n
        d_mu = -w * z / sigma / n
        d_sigma = w * (1.0 - z * z) / sigma / n
        return float(val), np.column_stack([d_mu, d_sigma * sigmoid(raw)])

    return loss


def cross_entropy(out, y, w):
    """Softmax cross-entropy with integer targets ``y``."""
    shifted = out - out.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1))
    n = out.shape[0]
    idx = np.asarray(y, dtype=np.int64)
    val = np.sum(w * (logz - shifted[np.arange(n), idx])) / n
    grad = np.exp(shifted - logz[:, None])
    grad[np.arange(n), idx] -= 1.0
    return float(val), grad * (w / n)[:, None]


def softmax(out):
    shifted = out - out.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    epochs_run: int
    best_epoch: int
    val_loss: float
    history: list = field(default_factory=list)


def train(net: MLP, loss: Callable, X: np.ndarray, y: np.ndarray, opts: TrainOpts,
          weights: Optional[np.ndarray] = None) -> TrainResult:
    """Adam on minibatches with early stopping on a held-out split.

    The parameters with the lowest validation loss are restored at the end.
    """
    n = X.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    rng = np.random.default_rng(opts.seed)
    perm = rng.permutation(n)
    n_val = int(round(opts.val_frac * n)) if n >= 10 else 0
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    Xt, yt, wt = X[tr_idx], y[tr_idx], w[tr_idx]
    Xv, yv, wv = X[val_idx], y[val_idx], w[val_idx]

    b1, b2, eps = 0.9, 0.999, 1e-8
    m1 = np.zeros_like(net.params)
    m2 = np.zeros_like(net.params)
    step = 0
    best = np.inf
    best_params = net.params.copy()
    best_epoch = 0
    since_best = 0
    history = []
    n_tr = Xt.shape[0]
    for epoch in range(1, opts.epochs + 1):
        order = rng.permutation(n_tr)
        for s in range(0, n_tr, opts.batch_size):
            bi = order[s:s + opts.batch_size]
            out, cache = net.forward(Xt[bi], keep=True)
            val, d_out = loss(out, yt[bi], wt[bi])
            if not np.isfinite(val):
                raise TrainingError("non-finite training loss",
                                    {"epoch": epoch, "step": step, "loss": val})
            g = net.backward(cache, d_out)
            step += 1
            m1 = b1 * m1 + (1 - b1) * g
            m2 = b2 * m2 + (1 - b2) * g * g
            net.params -= opts.lr * (m1 / (1 - b1 ** step)) / (np.sqrt(m2 / (1 - b2 ** step)) + eps)
        if n_val:
            cur = loss(net.forward(Xv), yv, wv)[0]
        else:
            cur = loss(net.forward(Xt), yt, wt)[0]
        if not np.isfinite(cur):
            raise TrainingError("non-finite validation loss", {"epoch": epoch, "loss": cur})
        history.append(cur)
        if cur < best:
            best, best_epoch, since_best = cur, epoch, 0
            best_params = net.params.copy()
        else:
            since_best += 1
            if since_best >= opts.patience:
                break
    net.set_params(best_params)
    return TrainResult(len(history), best_epoch, float(best), history)


def grad_check(network: MLP, loss: Callable, point, step: float = 1e-5) -> float:
    """Largest relative gap between backprop and central differences.

    ``point`` is ``(X, y)`` or ``(X, y, w)``; the error for each parameter is
    ``|analytic - numeric| / (|numeric| + 1e-8)``.
    """
    X, y, *rest = point
    w = rest[0] if rest else np.ones(np.asarray(X).shape[0])
    out, cache = network.forward(X, keep=True)
    _, d_out = loss(out, y, w)
    analytic = network.backward(cache, d_out)
    base = network.params.copy()
    worst = 0.0
    try:
        for j in range(base.size):
            network.params[j] = base[j] + step
            up = loss(network.forward(X), y, w)[0]
            network.params[j] = base[j] - step
            down = loss(network.forward(X), y, w)[0]
            network.params[j] = base[j]
            numeric = (up - down) / (2 * step)
            worst = max(worst, abs(analytic[j] - numeric) / (abs(numeric) + 1e-8))
    finally:
        network.set_params(base)
    return worst


# --------------------------------------------------------------------------- checkpoints


def pack(meta: dict, nets: list) -> bytes:
    """Serialise metadata plus network parameters as little-endian float64."""
    meta = dict(meta)
    meta["networks"] = [{"input_dim": n.spec.input_dim,
                         "hidden": list(n.spec.hidden_layer_sizes),
                         "output_dim": n.spec.output_dim,
                         "seed": n.spec.seed,
                         "n_params": int(n.params.size)} for n in nets]
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    flat = np.concatenate([n.params for n in nets]) if nets else np.empty(0)
    return MAGIC + struct.pack("<I", len(head)) + head + flat.astype("<f8").tobytes()


def unpack(blob: bytes) -> tuple[dict, list]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not a coppkit model checkpoint (bad header)")
    pos = len(MAGIC)
    if len(blob) < pos + 4:
        raise CheckpointError("truncated checkpoint")
    (size,) = struct.unpack("<I", blob[pos:pos + 4])
    pos += 4
    try:
        meta = json.loads(blob[pos:pos + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    flat = np.frombuffer(blob[pos + size:], dtype="<f8").astype(float)
    nets, off = [], 0
    for info in meta.get("networks", []):
        spec = MlpSpec(info["input_dim"], tuple(info["hidden"]), info["output_dim"], info["seed"])
        k = info["n_params"]
        if off + k > flat.size:
            raise CheckpointError("checkpoint has fewer parameters than declared")
        nets.append(MLP(spec, flat[off:off + k]))
        off += k
    if off != flat.size:
        raise CheckpointError("checkpoint has trailing parameters")
    return meta, nets
