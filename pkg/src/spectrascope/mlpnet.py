"""A small bias-free ReLU MLP with extended (counterfactual-label) gradients.

Layer ``l`` computes ``z^l = W^l h^{l-1}`` with ``h^0 = x``, ``h^l = relu(z^l)``
for hidden layers and softmax on the last. For every example and every
counterfactual label ``c'`` the output error is ``delta^L = p - y_{c'}``
and is backpropagated with ``delta^{l-1} = (W^l^T delta^l) * 1[z^{l-1} > 0]``.

Vectorization is column stacking: the gradient of ``W^l`` (shape
``d_l x d_{l-1}``) is flattened so entry ``(b, a)`` lands at ``a * d_l + b``.
The layer gradient is then exactly ``kron(h^{l-1}, delta^l)`` and its
second-moment approximations are ``kron(H, Delta)``.

Datasets are :class:`ClassArray` inputs ``x[i, c]`` whose label is ``c``.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._parallel import ordered_map
from .blocks import ClassArray, CrossClassArray, WeightScheme, between_class, within_cross_class
from .linop import LinearOperator

__all__ = [
    "MLPParams",
    "ForwardTrace",
    "ExtendedBackTrace",
    "TrainingDivergedError",
    "init_params",
    "forward",
    "extended_backward",
    "extended_gradient",
    "flatten",
    "unflatten",
    "cross_class_gradients",
    "assemble_G",
    "G_operator",
    "loss",
    "loss_gradient",
    "hessian_fd",
    "kfac_layer",
    "kfac_full",
    "cfac_layer",
    "cfac_full",
    "spectral_alignment",
    "weight_class_component",
    "train_sgd",
    "accuracy",
    "layer_features",
    "separation_metrics",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

FD_STEP = 1e-4
FD_MAX_PARAMS = 2000
DENSE_MAX_PARAMS = 4096
G_CHUNK = 64
_MAGIC = b"MLP1"


class TrainingDivergedError(ArithmeticError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"training loss became {value} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class MLPParams:
    weights: list[np.ndarray]
    weight_decay: float = 0.0

    def __post_init__(self):
        self.weights = [np.asarray(W, dtype=np.float64) for W in self.weights]
        if not self.weights:
            raise ValueError("need at least one layer")
        for prev, W in zip(self.weights, self.weights[1:]):
            if W.shape[1] != prev.shape[0]:
                raise ValueError(f"layer shapes {prev.shape} -> {W.shape} do not chain")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def L(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(W.size for W in self.weights)

    def layer_slices(self) -> list[slice]:
        out, start = [], 0
        for W in self.weights:
            out.append(slice(start, start + W.size))
            start += W.size
        return out

    def copy(self) -> "MLPParams":
        return MLPParams([W.copy() for W in self.weights], self.weight_decay)


def init_params(dims: Sequence[int], seed: int = 0, weight_decay: float = 0.0) -> MLPParams:
    """Gaussian fan-in initialization, ``std = sqrt(2 / d_{l-1})``."""
    if len(dims) < 2:
        raise ValueError("dims needs an input and an output size")
    rng = np.random.default_rng(seed)
    weights = [rng.standard_normal((dout, din)) * np.sqrt(2.0 / din) for din, dout in zip(dims, dims[1:])]
    return MLPParams(weights, weight_decay)


@dataclass
class ForwardTrace:
    """``inputs[l-1] = h^{l-1}`` and ``pre[l-1] = z^l`` for layers ``l = 1..L``; rows are examples."""

    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    probs: np.ndarray


@dataclass
class ExtendedBackTrace:
    """``deltas[l-1][n, c']`` is ``delta^l`` for example ``n`` and counterfactual label ``c'``."""

    deltas: list[np.ndarray] = field(default_factory=list)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: MLPParams, x: np.ndarray) -> ForwardTrace:
    """Forward pass on a single example ``(d_0,)`` or a batch ``(n, d_0)``."""
    x = np.asarray(x, dtype=np.float64)
    batch = np.atleast_2d(x)
    if batch.shape[1] != params.dims[0]:
        raise ValueError(f"input dim {batch.shape[1]} != {params.dims[0]}")
    inputs, pre = [], []
    h = batch
    for l, W in enumerate(params.weights):
        inputs.append(h)
        z = h @ W.T
        pre.append(z)
        if l < params.L - 1:
            h = np.maximum(z, 0.0)
    return ForwardTrace(inputs, pre, _softmax(pre[-1]))


def extended_backward(params: MLPParams, trace: ForwardTrace, c_label: int | None = None) -> ExtendedBackTrace:
    """Backpropagated errors for every counterfactual label (or just ``c_label``)."""
    n, C = trace.probs.shape
    labels = np.arange(C) if c_label is None else np.array([c_label])
    delta = trace.probs[:, None, :] - np.eye(C)[labels][None, :, :]  # (n, C', C)
    deltas = [delta]
    for l in range(params.L - 1, 0, -1):
        mask = (trace.pre[l - 1] > 0).astype(np.float64)  # (n, d_{l})
        delta = (delta @ params.weights[l]) * mask[:, None, :]
        deltas.append(delta)
    return ExtendedBackTrace(deltas[::-1])


def extended_gradient(trace: ForwardTrace, back: ExtendedBackTrace, l: int) -> np.ndarray:
    """``g^l = h^{l-1} ⊗ delta^l``, shape ``(n, C', d_{l-1} * d_l)`` (layers are 1-based)."""
    h = trace.inputs[l - 1]
    d = back.deltas[l - 1]
    g = np.einsum("na,nkb->nkab", h, d)
    return g.reshape(h.shape[0], d.shape[1], -1)


def flatten(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Column-stacking vectorization of each layer matrix, concatenated."""
    return np.concatenate([np.asarray(M).T.ravel() for M in mats])


def unflatten(params: MLPParams, vec: np.ndarray) -> list[np.ndarray]:
    return [vec[s].reshape(W.shape[1], W.shape[0]).T for s, W in zip(params.layer_slices(), params.weights)]


def _layers(params: MLPParams, layer: int | None) -> list[int]:
    if layer is None:
        return list(range(1, params.L + 1))
    if not 1 <= layer <= params.L:
        raise ValueError(f"layer must be in 1..{params.L}, got {layer}")
    return [layer]


def _flat_inputs(data: ClassArray) -> tuple[np.ndarray, int, int]:
    N, C, D = data.data.shape
    return data.data.reshape(N * C, D), N, C


def cross_class_gradients(
    params: MLPParams, data: ClassArray, layer: int | None = None
) -> tuple[CrossClassArray, WeightScheme]:
    """Extended gradients ``g[i, c, c']`` with weights ``p_{i,c,c'} / (N C)``."""
    x, N, C = _flat_inputs(data)
    trace = forward(params, x)
    back = extended_backward(params, trace)
    g = np.concatenate([extended_gradient(trace, back, l) for l in _layers(params, layer)], axis=-1)
    probs = trace.probs.reshape(N, C, -1)
    return CrossClassArray(g.reshape(N, C, C, -1)), WeightScheme.from_probs(probs)


def assemble_G(params: MLPParams, data: ClassArray, layer: int | None = None) -> np.ndarray:
    """Dense ``G = sum w g g^T`` for one layer or all layers concatenated."""
    p = sum(params.weights[l - 1].size for l in _layers(params, layer))
    if p > DENSE_MAX_PARAMS:
        raise ValueError(f"{p} parameters exceed the dense limit {DENSE_MAX_PARAMS}; use G_operator")
    arr, weights = cross_class_gradients(params, data, layer)
    flat = arr.data.reshape(-1, p)
    G = (flat * weights.w.reshape(-1)[:, None]).T @ flat
    return (G + G.T) / 2


def G_operator(
    params: MLPParams, data: ClassArray, layer: int | None = None, threads: int | None = None
) -> LinearOperator:
    """Matrix-free ``G``: each matvec streams over examples in fixed chunks.

    Chunk results are summed in chunk order, so the output does not depend
    on the thread count.
    """
    layers = _layers(params, layer)
    x, N, C = _flat_inputs(data)
    n = x.shape[0]
    shapes = [params.weights[l - 1].shape for l in layers]
    sizes = [a * b for a, b in shapes]
    offsets = np.cumsum([0] + sizes)
    chunks = [(s, min(s + G_CHUNK, n)) for s in range(0, n, G_CHUNK)]

    def chunk_product(bounds, v):
        lo, hi = bounds
        trace = forward(params, x[lo:hi])
        back = extended_backward(params, trace)
        w = trace.probs / (N * C)  # (m, C')
        s = np.zeros(w.shape)
        pieces = []
        for k, l in enumerate(layers):
            dl, dprev = shapes[k]
            V = v[offsets[k]:offsets[k + 1]].reshape(dprev, dl)
            h, d = trace.inputs[l - 1], back.deltas[l - 1]
            s += np.einsum("na,ab,nkb->nk", h, V, d)
            pieces.append((h, d))
        ws = w * s
        out = [np.einsum("na,nk,nkb->ab", h, ws, d).ravel() for h, d in pieces]
        return np.concatenate(out)

    def apply(v):
        parts = ordered_map(lambda b: chunk_product(b, v), chunks, threads)
        total = np.zeros(offsets[-1])
        for part in parts:
            total += part
        return total

    return LinearOperator(int(offsets[-1]), apply)


def loss(params: MLPParams, data: ClassArray, weight_decay: float | None = None) -> float:
    """Mean cross-entropy over all examples plus ``(eta/2) sum ||W||^2``."""
    eta = params.weight_decay if weight_decay is None else weight_decay
    x, N, C = _flat_inputs(data)
    labels = np.tile(np.arange(C), N)
    z = forward(params, x).pre[-1]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    ce = float(np.mean(lse - z[np.arange(len(labels)), labels]))
    return ce + 0.5 * eta * sum(float(np.sum(W * W)) for W in params.weights)


def _batch_gradient(params: MLPParams, x: np.ndarray, labels: np.ndarray, eta: float) -> list[np.ndarray]:
    trace = forward(params, x)
    n = x.shape[0]
    grads = [None] * params.L
    delta = trace.probs.copy()
    delta[np.arange(n), labels] -= 1.0
    for l in range(params.L, 0, -1):
        grads[l - 1] = delta.T @ trace.inputs[l - 1] / n + eta * params.weights[l - 1]
        if l > 1:
            delta = (delta @ params.weights[l - 1]) * (trace.pre[l - 2] > 0)
    return grads


def loss_gradient(params: MLPParams, data: ClassArray, weight_decay: float | None = None) -> np.ndarray:
    """Flattened gradient of :func:`loss`."""
    eta = params.weight_decay if weight_decay is None else weight_decay
    x, N, C = _flat_inputs(data)
    return flatten(_batch_gradient(params, x, np.tile(np.arange(C), N), eta))


def hessian_fd(params: MLPParams, data: ClassArray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference Hessian of the data loss (no weight decay), symmetrized."""
    p = params.n_params
    if p > FD_MAX_PARAMS:
        raise ValueError(f"{p} parameters exceed the finite-difference limit {FD_MAX_PARAMS}")
    theta = flatten(params.weights)
    H = np.empty((p, p))

    def grad_at(vec):
        return loss_gradient(MLPParams(unflatten(params, vec)), data, weight_decay=0.0)

    for j in range(p):
        e = np.zeros(p)
        e[j] = step
        H[:, j] = (grad_at(theta + e) - grad_at(theta - e)) / (2 * step)
    return (H + H.T) / 2


# -- Kronecker-factored approximations ---------------------------------------


def _layer_factors(params: MLPParams, data: ClassArray, l: int):
    x, N, C = _flat_inputs(data)
    trace = forward(params, x)
    back = extended_backward(params, trace)
    h = trace.inputs[l - 1].reshape(N, C, -1)
    d = back.deltas[l - 1].reshape(N, C, C, -1)
    w = trace.probs.reshape(N, C, C) / (N * C)
    return h, d, w


def kfac_layer(params: MLPParams, data: ClassArray, l: int) -> np.ndarray:
    """``H^{l-1} ⊗ Delta^l`` with ``H = Ave h h^T`` and ``Delta = sum w delta delta^T``."""
    h, d, w = _layer_factors(params, data, l)
    hf = h.reshape(-1, h.shape[-1])
    H = hf.T @ hf / hf.shape[0]
    df = d.reshape(-1, d.shape[-1])
    Delta = (df * w.reshape(-1)[:, None]).T @ df
    return np.kron((H + H.T) / 2, (Delta + Delta.T) / 2)


def cfac_layer(params: MLPParams, data: ClassArray, l: int) -> np.ndarray:
    """``Ave_c H_c ⊗ Delta_c`` with per-class factors averaging to KFAC's."""
    h, d, w = _layer_factors(params, data, l)
    N, C = h.shape[:2]
    out = 0.0
    for c in range(C):
        Hc = h[:, c].T @ h[:, c] / N
        dc = d[:, c].reshape(-1, d.shape[-1])
        Dc = C * (dc * w[:, c].reshape(-1)[:, None]).T @ dc
        out = out + np.kron((Hc + Hc.T) / 2, (Dc + Dc.T) / 2)
    return out / C


def _full(params: MLPParams, data: ClassArray, per_class: bool) -> np.ndarray:
    x, N, C = _flat_inputs(data)
    trace = forward(params, x)
    back = extended_backward(params, trace)
    w = trace.probs.reshape(N, C, C) / (N * C)
    hs = [t.reshape(N, C, -1) for t in trace.inputs]
    ds = [t.reshape(N, C, C, -1) for t in back.deltas]
    sl = params.layer_slices()
    out = np.zeros((params.n_params, params.n_params))
    groups = [[c] for c in range(C)] if per_class else [list(range(C))]
    for cls in groups:
        scale = C if per_class else 1.0
        for a in range(params.L):
            for b in range(params.L):
                ha, hb = hs[a][:, cls], hs[b][:, cls]
                H = np.einsum("ncx,ncy->xy", ha, hb) / (ha.shape[0] * ha.shape[1])
                Dl = scale * np.einsum("nck,nckx,ncky->xy", w[:, cls], ds[a][:, cls], ds[b][:, cls])
                out[sl[a], sl[b]] += np.kron(H, Dl)
    out /= len(groups)
    return (out + out.T) / 2


def kfac_full(params: MLPParams, data: ClassArray) -> np.ndarray:
    """All-layer ``H ⊙ Delta``: block ``(l, m)`` is ``H^{l-1,m-1} ⊗ Delta^{l,m}``."""
    return _full(params, data, per_class=False)


def cfac_full(params: MLPParams, data: ClassArray) -> np.ndarray:
    """All-layer ``Ave_c H_c ⊙ Delta_c``."""
    return _full(params, data, per_class=True)


def spectral_alignment(specA, specB, k: int, floor: float = 1e-12) -> float:
    """``1 - sum |log a_i - log b_i| / sum |log a_i|`` over the top ``k`` values.

    Values are sorted descending and clipped below at ``floor`` times the
    largest value of each spectrum before taking logs, so numerically zero
    eigenvalues do not produce infinities.
    """
    a = np.sort(np.asarray(specA, dtype=np.float64))[::-1]
    b = np.sort(np.asarray(specB, dtype=np.float64))[::-1]
    if k < 1 or k > min(len(a), len(b)):
        raise ValueError(f"k={k} must be in 1..{min(len(a), len(b))}")
    a, b = a[:k], b[:k]
    la = np.log(np.maximum(a, floor * max(a[0], 1e-300)))
    lb = np.log(np.maximum(b, floor * max(b[0], 1e-300)))
    denom = np.sum(np.abs(la))
    if denom == 0:
        raise ZeroDivisionError("reference log-spectrum is identically zero")
    return float(1.0 - np.sum(np.abs(la - lb)) / denom)


def weight_class_component(params: MLPParams, data: ClassArray, l: int, eta: float) -> np.ndarray:
    """``-(1/eta) Ave_c mean_i(delta^l_{i,c,c}) mean_i(h^{l-1}_{i,c})^T``."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    h, d, _ = _layer_factors(params, data, l)
    C = h.shape[1]
    dmean = d[:, np.arange(C), np.arange(C)].mean(axis=0)  # (C, d_l)
    hmean = h.mean(axis=0)  # (C, d_{l-1})
    return -(dmean.T @ hmean) / (C * eta)


# -- training and diagnostics -------------------------------------------------


def train_sgd(
    params: MLPParams,
    data: ClassArray,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
    epochs: int = 10,
    batch: int = 32,
    seed: int = 0,
    history: list | None = None,
    callback=None,
) -> MLPParams:
    """Minibatch SGD with heavy-ball momentum; deterministic given ``seed``.

    The mean training loss (including weight decay) is logged and appended
    to ``history`` after each epoch; ``callback(epoch, params, loss)`` is
    called at the same point.
    """
    if lr < 0 or not 0 <= momentum < 1 or weight_decay < 0 or epochs < 0 or batch < 1:
        raise ValueError("invalid training hyperparameters")
    out = params.copy()
    out.weight_decay = weight_decay
    x, N, C = _flat_inputs(data)
    labels = np.tile(np.arange(C), N)
    rng = np.random.default_rng(seed)
    velocity = [np.zeros_like(W) for W in out.weights]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(labels))
        # overflow on a diverging run is reported through the loss check below
        with np.errstate(over="ignore", invalid="ignore"):
            for start in range(0, len(order), batch):
                idx = order[start:start + batch]
                grads = _batch_gradient(out, x[idx], labels[idx], weight_decay)
                for W, v, g in zip(out.weights, velocity, grads):
                    v *= momentum
                    v += g
                    W -= lr * v
            value = loss(out, data)
        if not np.isfinite(value):
            raise TrainingDivergedError(epoch, value)
        log.info("epoch %d loss %.6g", epoch, value)
        if history is not None:
            history.append(value)
        if callback is not None:
            callback(epoch, out, value)
    return out


def accuracy(params: MLPParams, data: ClassArray) -> float:
    x, N, C = _flat_inputs(data)
    pred = forward(params, x).pre[-1].argmax(axis=1)
    return float(np.mean(pred == np.tile(np.arange(C), N)))


def layer_features(params: MLPParams, data: ClassArray) -> list[ClassArray]:
    """Per-layer outputs: ``h^l`` for hidden layers and the logits ``z^L``."""
    x, N, C = _flat_inputs(data)
    trace = forward(params, x)
    feats = trace.inputs[1:] + [trace.pre[-1]]
    return [ClassArray(f.reshape(N, C, -1)) for f in feats]


def separation_metrics(features: Sequence[ClassArray]) -> list[dict[str, float]]:
    """Class-mean energy and spread per layer.

    ``trace_class`` and ``trace_within`` are traces of the between-class and
    within-class second moments; ``whisker_ratio`` is ``lambda_2 / lambda_C``
    of the between-class matrix (infinite if ``lambda_C`` vanishes).
    """
    out = []
    for arr in features:
        Hc = between_class(arr)
        vals = np.sort(np.linalg.eigvalsh(Hc))[::-1]
        C = arr.C
        if C < 2 or len(vals) < C:
            ratio = float("nan")
        else:
            lam2, lamC = vals[1], vals[C - 1]
            ratio = float(lam2 / lamC) if lamC > 1e-12 * max(vals[0], 1e-300) else float("inf")
        out.append(
            {
                "trace_class": float(np.trace(Hc)),
                "trace_within": float(np.trace(within_cross_class(arr))),
                "whisker_ratio": ratio,
            }
        )
    return out


def save_checkpoint(path: str | Path, params: MLPParams) -> None:
    """``MLP1``, u64 L, u64 dims[0..L], then each W^l as f64 row-major."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", params.L))
        fh.write(struct.pack(f"<{params.L + 1}Q", *params.dims))
        for W in params.weights:
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> MLPParams:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not an MLP1 checkpoint")
    (L,) = struct.unpack_from("<Q", raw, 4)
    dims = struct.unpack_from(f"<{L + 1}Q", raw, 12)
    offset = 12 + 8 * (L + 1)
    weights = []
    for din, dout in zip(dims, dims[1:]):
        n = din * dout
        chunk = raw[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise ValueError(f"{path}: truncated checkpoint")
        weights.append(np.frombuffer(chunk, dtype="<f8").reshape(dout, din).copy())
        offset += 8 * n
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return MLPParams(weights)
