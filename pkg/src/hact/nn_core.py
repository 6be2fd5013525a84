"""Dense float64 building blocks with hand-derived backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Every layer is a
pair of functions: ``*_forward`` returns ``(output, cache)`` and
``*_backward`` consumes the upstream gradient plus that cache.  Parameters live
in flat ``dict[str, ndarray]`` maps and are always updated in place, so a
parent module can expose a child's arrays under prefixed names without copies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

Params = dict[str, np.ndarray]

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class ShapeError(ValueError):
    pass


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def prefixed(prefix: str, params: Mapping[str, np.ndarray]) -> Params:
    return {f"{prefix}.{k}": v for k, v in params.items()}


# --------------------------------------------------------------------------- MLP


@dataclass
class MlpParams:
    """Affine layers with ReLU between them and a linear output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator) -> "MlpParams":
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output dims")
        ws = [glorot_uniform(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
        bs = [np.zeros(b) for b in dims[1:]]
        return cls(ws, bs)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def named(self) -> Params:
        out: Params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out


def mlp_forward(params: MlpParams, x: np.ndarray):
    d_in = params.weights[0].shape[0]
    if x.ndim != 2 or x.shape[1] != d_in:
        raise ShapeError(f"MLP expects input width {d_in}, got shape {x.shape}")
    inputs = []
    pre = []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    return h, (inputs, pre)


def mlp_backward(params: MlpParams, dy: np.ndarray, cache):
    """Return ``(dx, grads)`` where grads uses the ``W{i}``/``b{i}`` names."""
    inputs, pre = cache
    grads: Params = {}
    g = dy
    for i in range(len(params.weights) - 1, -1, -1):
        if i < len(params.weights) - 1:
            g = g * (pre[i] > 0)
        grads[f"W{i}"] = inputs[i].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return g, grads


# -------------------------------------------------------------------------- LSTM


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class LstmParams:
    """Gate blocks are stacked column-wise in the order input, forget, cell, output."""

    w_x: np.ndarray  # d x 4h
    w_h: np.ndarray  # h x 4h
    b: np.ndarray  # 4h

    @classmethod
    def init(cls, d_in: int, hidden: int, rng: np.random.Generator) -> "LstmParams":
        w_x = np.concatenate([glorot_uniform(rng, d_in, hidden) for _ in range(4)], axis=1)
        w_h = np.concatenate([glorot_uniform(rng, hidden, hidden) for _ in range(4)], axis=1)
        return cls(w_x, w_h, np.zeros(4 * hidden))

    @classmethod
    def zeros(cls, d_in: int, hidden: int) -> "LstmParams":
        return cls(np.zeros((d_in, 4 * hidden)), np.zeros((hidden, 4 * hidden)), np.zeros(4 * hidden))

    @property
    def hidden(self) -> int:
        return self.w_h.shape[0]

    def named(self) -> Params:
        return {"w_x": self.w_x, "w_h": self.w_h, "b": self.b}


def lstm_sequence(params: LstmParams, sequence: Sequence[np.ndarray]):
    """Run the cell over ``sequence`` (one N x d array per step), zero initial state.

    Returns the final hidden state and a cache for :func:`lstm_sequence_backward`.
    """
    if len(sequence) == 0:
        raise ValueError("LSTM sequence is empty")
    n, d = sequence[0].shape
    if d != params.w_x.shape[0]:
        raise ShapeError(f"LSTM expects input width {params.w_x.shape[0]}, got {d}")
    hs = params.hidden
    h = np.zeros((n, hs))
    c = np.zeros((n, hs))
    steps = []
    for x in sequence:
        if x.shape != (n, d):
            raise ShapeError(f"LSTM step shape {x.shape} differs from {(n, d)}")
        z = x @ params.w_x + h @ params.w_h + params.b
        i = _sigmoid(z[:, :hs])
        f = _sigmoid(z[:, hs : 2 * hs])
        g = np.tanh(z[:, 2 * hs : 3 * hs])
        o = _sigmoid(z[:, 3 * hs :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        steps.append((x, h, c, i, f, g, o, tc))
        h = o * tc
        c = c_new
    return h, steps


def lstm_sequence_backward(params: LstmParams, dh_final: np.ndarray, cache):
    """Backpropagation through time.  Returns ``(dxs, grads)``."""
    hs = params.hidden
    grads = {k: np.zeros_like(v) for k, v in params.named().items()}
    dxs = [None] * len(cache)
    dh = dh_final
    dc = np.zeros_like(dh_final)
    for t in range(len(cache) - 1, -1, -1):
        x, h_prev, c_prev, i, f, g, o, tc = cache[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dz = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1
        )
        grads["w_x"] += x.T @ dz
        grads["w_h"] += h_prev.T @ dz
        grads["b"] += dz.sum(axis=0)
        dxs[t] = dz @ params.w_x.T
        dh = dz @ params.w_h.T
        dc = dc * f
    return dxs, grads


# ------------------------------------------------------------------ normalization


def graph_norm(x: np.ndarray, node_count) -> np.ndarray:
    """Scale node rows by ``1/sqrt(|V|)`` of their graph.

    ``node_count`` is a scalar for a single graph or a per-row array of the
    owning graph's size for a batched union.
    """
    scale = 1.0 / np.sqrt(np.asarray(node_count, dtype=np.float64))
    if scale.ndim == 0:
        return x * scale
    return x * scale[:, None]


def graph_norm_backward(dy: np.ndarray, node_count) -> np.ndarray:
    return graph_norm(dy, node_count)


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def init(cls, d: int) -> "BatchNormState":
        return cls(np.ones(d), np.zeros(d), np.zeros(d), np.ones(d))

    def named(self) -> Params:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> Params:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def batch_norm(x: np.ndarray, state: BatchNormState, mode: str = "train", update_stats: bool = True):
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs at least 2 rows")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        if update_stats:
            state.running_mean *= BN_MOMENTUM
            state.running_mean += (1 - BN_MOMENTUM) * mean
            state.running_var *= BN_MOMENTUM
            state.running_var += (1 - BN_MOMENTUM) * var
    elif mode == "eval":
        mean = state.running_mean
        var = state.running_var
    else:
        raise ValueError(f"unknown batch norm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    x_hat = (x - mean) * inv_std
    return state.gamma * x_hat + state.beta, (mode, x_hat, inv_std)


def batch_norm_backward(dy: np.ndarray, state: BatchNormState, cache):
    mode, x_hat, inv_std = cache
    grads = {"gamma": (dy * x_hat).sum(axis=0), "beta": dy.sum(axis=0)}
    dx_hat = dy * state.gamma
    if mode == "eval":
        return dx_hat * inv_std, grads
    n = dy.shape[0]
    dx = (inv_std / n) * (n * dx_hat - dx_hat.sum(axis=0) - x_hat * (dx_hat * x_hat).sum(axis=0))
    return dx, grads


# ------------------------------------------------------------------------- loss


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of ``labels`` and its gradient w.r.t. logits."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


# ------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(state: AdamState, params: Params, grads: Mapping[str, np.ndarray]) -> Params:
    """Bias-corrected Adam; updates ``params`` in place and returns it."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# -------------------------------------------------------------------- gradcheck

GRADCHECK_STEP = 1e-5
# Absolute floor for the relative-error denominator.  Central differences on an
# O(1) loss carry up to a few 1e-10 of roundoff at h=1e-5, and parameters that a
# following BatchNorm cancels have a true gradient of exactly zero.  Entries below
# the floor are therefore compared in absolute terms, keeping that noise under 1e-4.
GRADCHECK_FLOOR = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRADCHECK_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(
    loss_fn: Callable[[], float],
    array: np.ndarray,
    h: float = GRADCHECK_STEP,
    indices: Sequence[tuple] | None = None,
) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. entries of ``array`` (perturbed in place)."""
    out = np.zeros_like(array)
    idx_iter = indices if indices is not None else list(np.ndindex(array.shape))
    for idx in idx_iter:
        orig = array[idx]
        array[idx] = orig + h
        fp = loss_fn()
        array[idx] = orig - h
        fm = loss_fn()
        array[idx] = orig
        out[idx] = (fp - fm) / (2 * h)
    return out


def gradcheck(
    loss_fn: Callable[[], float],
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    h: float = GRADCHECK_STEP,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    report: dict | None = None,
) -> float:
    """Worst relative error between ``grads`` and central differences of ``loss_fn``.

    ``loss_fn`` must read the arrays in ``params`` (which are perturbed in
    place and restored).  With ``max_entries`` set, at most that many entries
    of each array are checked, sampled with ``rng``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for name, array in params.items():
        if array.size == 0:
            continue
        all_idx = list(np.ndindex(array.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            idx = [all_idx[i] for i in sorted(pick)]
        else:
            idx = all_idx
        num = numeric_gradient(loss_fn, array, h=h, indices=idx)
        ana = np.asarray(grads[name])
        sel = tuple(np.array(i) for i in zip(*idx))
        err = float(relative_error(ana[sel], num[sel]).max())
        if report is not None:
            report[name] = err
        worst = max(worst, err)
    return worst
