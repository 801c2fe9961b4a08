"""Dense layers with hand-written backward passes, Adam, and a gradient checker.

All arrays are float64 numpy arrays laid out as (batch, features).  Layers
cache what they need during ``forward`` and fill their ``grad_*`` buffers
during ``backward``; gradients are overwritten, not accumulated across calls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, StateError

PROB_EPS = 1e-12


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_out, fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got shape {x.shape}")
    return x


class Linear:
    """Fully connected layer ``y = x W^T + b``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        self.n_in = n_in
        self.n_out = n_out
        if rng is None:
            self.weight = np.zeros((n_out, n_in))
        else:
            self.weight = glorot_uniform(rng, n_in, n_out)
        self.bias = np.zeros(n_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    def forward(self, x):
        x = _as_matrix(x)
        if x.shape[1] != self.n_in:
            raise DimensionError(f"Linear expects {self.n_in} input columns, got {x.shape[1]}")
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, grad_out):
        if self._x is None:
            raise StateError("Linear.backward called before forward")
        grad_out = _as_matrix(grad_out)
        if grad_out.shape != (self._x.shape[0], self.n_out):
            raise DimensionError(
                f"grad_out shape {grad_out.shape} does not match ({self._x.shape[0]}, {self.n_out})"
            )
        np.matmul(grad_out.T, self._x, out=self.grad_weight)
        self.grad_bias[...] = grad_out.sum(axis=0)
        return grad_out @ self.weight

    def parameters(self):
        return [("weight", self.weight, self.grad_weight), ("bias", self.bias, self.grad_bias)]


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._mask = x > 0
        # np.maximum propagates NaN, so a diverging network is not silently zeroed
        return np.maximum(x, 0.0)

    def backward(self, grad_out):
        if self._mask is None:
            raise StateError("ReLU.backward called before forward")
        return np.where(self._mask, grad_out, 0.0)

    def parameters(self):
        return []


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


class BatchNorm:
    """Per-feature batch normalization over the batch axis.

    In ``train`` mode the batch mean and (biased) variance normalize the input
    and the running statistics move toward them with ``momentum``.  Setting
    ``track_running_stats`` to False keeps the running statistics fixed, which
    the gradient checker relies on so repeated forwards have no side effects.
    """

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        if eps <= 0:
            raise ValueError("eps must be positive")
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(num_features)
        self.beta = np.zeros(num_features)
        self.grad_gamma = np.zeros(num_features)
        self.grad_beta = np.zeros(num_features)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.mode = "train"
        self.track_running_stats = True
        self._cache = None

    def forward(self, x):
        x = _as_matrix(x)
        if x.shape[1] != self.num_features:
            raise DimensionError(f"BatchNorm expects {self.num_features} features, got {x.shape[1]}")
        if self.mode == "eval":
            self._cache = None
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            return (x - self.running_mean) * (inv_std * self.gamma) + self.beta
        if x.shape[0] < 2:
            raise DimensionError("BatchNorm in train mode needs a batch of at least 2 rows")
        mean = x.mean(axis=0)
        centered = x - mean
        var = (centered * centered).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = centered * inv_std
        self._cache = (x_hat, inv_std)
        if self.track_running_stats:
            m = self.momentum
            n = x.shape[0]
            self.running_mean = (1.0 - m) * self.running_mean + m * mean
            # unbiased estimate for inference, as is conventional
            self.running_var = (1.0 - m) * self.running_var + m * var * (n / (n - 1))
        return x_hat * self.gamma + self.beta

    def backward(self, grad_out):
        if self.mode != "train":
            raise StateError("BatchNorm.backward requires a train-mode forward")
        if self._cache is None:
            raise StateError("BatchNorm.backward called before forward")
        x_hat, inv_std = self._cache
        grad_out = _as_matrix(grad_out)
        if grad_out.shape != x_hat.shape:
            raise DimensionError(f"grad_out shape {grad_out.shape} does not match {x_hat.shape}")
        self.grad_gamma[...] = (grad_out * x_hat).sum(axis=0)
        self.grad_beta[...] = grad_out.sum(axis=0)
        g = grad_out * self.gamma
        n = x_hat.shape[0]
        return (inv_std / n) * (n * g - g.sum(axis=0) - x_hat * (g * x_hat).sum(axis=0))

    def parameters(self):
        return [("gamma", self.gamma, self.grad_gamma), ("beta", self.beta, self.grad_beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class Embedding:
    """Lookup table mapping categorical ids to dense rows."""

    def __init__(self, vocab_size: int, dim: int = 8, rng: np.random.Generator | None = None):
        if vocab_size < 1 or dim < 1:
            raise ValueError("vocab_size and dim must be positive")
        self.vocab_size = vocab_size
        self.dim = dim
        if rng is None:
            self.table = np.zeros((vocab_size, dim))
        else:
            self.table = glorot_uniform(rng, vocab_size, dim, shape=(vocab_size, dim))
        self.grad = np.zeros_like(self.table)
        self._ids = None

    def forward(self, ids):
        ids = np.asarray(ids)
        if ids.ndim != 1:
            raise DimensionError("embedding ids must be a 1-D vector")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            bad = ids[(ids < 0) | (ids >= self.vocab_size)][0]
            raise IndexError(f"id {bad} out of range for vocabulary of size {self.vocab_size}")
        self._ids = ids.astype(np.intp)
        return self.table[self._ids]

    def backward(self, grad_out):
        if self._ids is None:
            raise StateError("Embedding.backward called before forward")
        grad_out = _as_matrix(grad_out)
        if grad_out.shape != (self._ids.size, self.dim):
            raise DimensionError(f"grad_out shape {grad_out.shape} does not match ({self._ids.size}, {self.dim})")
        self.grad.fill(0.0)
        np.add.at(self.grad, self._ids, grad_out)

    def parameters(self):
        return [("table", self.table, self.grad)]


def sigmoid(x):
    """Logistic function, evaluated without overflow for large ``|x|``."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def softmax_group(logits):
    logits = np.asarray(logits, dtype=np.float64)
    z = np.exp(logits - logits.max())
    return z / z.sum()


def segment_softmax(logits, starts):
    """Softmax applied independently to contiguous segments of a flat vector.

    ``starts`` holds the offset of each segment; segments are assumed non-empty.
    """
    seg_max = np.maximum.reduceat(logits, starts)
    sizes = np.diff(np.append(starts, logits.size))
    z = np.exp(logits - np.repeat(seg_max, sizes))
    return z / np.repeat(np.add.reduceat(z, starts), sizes)


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for Adam."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        """Update ``params`` in place from ``grads`` and return them."""
        if len(params) != len(grads):
            raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(self.m) != len(params):
            raise DimensionError("parameter list changed between Adam steps")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape or p.shape != m.shape:
                raise DimensionError(f"parameter shape {p.shape} vs gradient shape {np.shape(g)}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def adam_step(state: AdamState, params, grads):
    return state.step(params, grads)


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    worst: tuple | None = None  # (param index, flat index, analytic, numeric)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def relative_error(analytic, numeric, floor: float = 1e-4):
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients from
    turning round-off into huge ratios."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(loss_fn, params, grads, h: float = 1e-5, num_coords: int = 64,
              rng: np.random.Generator | None = None, floor: float = 1e-4) -> GradCheckResult:
    """Compare analytic gradients with central differences.

    ``loss_fn()`` must evaluate the loss at the current contents of ``params``
    (which are perturbed in place and restored).  Every parameter array gets at
    least a few probes; the rest of the ``num_coords`` budget is spread at
    random.  All coordinates are checked when there are fewer than the budget.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    sizes = [p.size for p in params]
    total = sum(sizes)
    if total == 0:
        return GradCheckResult(0.0, 0)

    probes: list[tuple[int, int]] = []
    if total <= num_coords:
        probes = [(i, j) for i, s in enumerate(sizes) for j in range(s)]
    else:
        per = max(1, min(4, num_coords // max(len(params), 1)))
        chosen = set()
        for i, s in enumerate(sizes):
            for j in rng.choice(s, size=min(s, per), replace=False):
                chosen.add((i, int(j)))
        offsets = np.cumsum([0] + sizes)
        while len(chosen) < num_coords:
            flat = int(rng.integers(total))
            i = int(np.searchsorted(offsets, flat, side="right") - 1)
            chosen.add((i, flat - int(offsets[i])))
        probes = sorted(chosen)

    worst = None
    max_err = 0.0
    for i, j in probes:
        p = params[i].reshape(-1)
        if not np.shares_memory(p, params[i]):
            raise ValueError("parameters must be contiguous arrays")
        old = p[j]
        p[j] = old + h
        up = loss_fn()
        p[j] = old - h
        down = loss_fn()
        p[j] = old
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericError(f"non-finite loss while probing parameter {i}[{j}]")
        numeric = (up - down) / (2.0 * h)
        analytic = float(np.asarray(grads[i]).reshape(-1)[j])
        err = relative_error(analytic, numeric, floor)
        if worst is None or err > max_err:
            max_err = err
            worst = (i, j, analytic, numeric)
    return GradCheckResult(max_err, len(probes), worst)
