"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds a fresh node whose ``requires_grad`` flag is the OR of its
parents'. Nodes that do not require gradients keep no parents, so running a
model with frozen weights on a perturbation that requires grad only records
the path through the perturbation.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import DimensionError, DomainError, NumericalError, ValidationError

DTYPE = np.float64
_ROW_BLOCK = 256


def matmul_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` computed in zero-padded blocks of exactly ``_ROW_BLOCK`` rows.

    OpenBLAS picks kernels by problem shape (row tails, a small-matrix path),
    so a row's bits can depend on how many rows share the call. Every BLAS
    call here has the same shape, which makes each output row independent of
    its batch companions; predict() and the attacks rely on that.
    """
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite results are caught by Tensor
        return _blocked_matmul(a, b)


def _blocked_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    pad = (-n) % _ROW_BLOCK
    a = np.ascontiguousarray(a) if not pad else np.concatenate([a, np.zeros((pad, a.shape[1]), dtype=a.dtype)])
    if a.shape[0] == _ROW_BLOCK:
        return (a @ b)[:n]
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for s in range(0, a.shape[0], _ROW_BLOCK):
        np.matmul(a[s:s + _ROW_BLOCK], b, out=out[s:s + _ROW_BLOCK])
    return out[:n]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data.astype(DTYPE, copy=False)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"{op}: tensor extents must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericalError(f"{op}: non-finite value in forward pass")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op
        # leaves own a persistent buffer; interior nodes receive theirs in backward()
        self.grad = np.zeros_like(arr) if self.requires_grad and not self._parents else None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


class Graph:
    """Topologically ordered view of the nodes reachable from a root.

    ``nodes`` lists parents before children; ``parents[i]`` holds the indices
    of node i's parents. Only nodes that require gradients are included.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.root = root
        self.nodes = order
        index = {id(n): i for i, n in enumerate(order)}
        self.parents = [tuple(index[id(p)] for p in n._parents if p.requires_grad) for n in order]

    def backward(self) -> None:
        grads = {id(self.root): np.ones_like(self.root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad += g
                continue
            node.grad = g
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if not np.isfinite(pg).all():
                    raise NumericalError(f"{node.op}: non-finite gradient")
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg

    def zero_grad(self) -> None:
        for node in self.nodes:
            if node.grad is not None:
                node.grad[...] = 0.0


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(leaf) into every leaf that requires grad."""
    if loss.data.size != 1:
        raise ValidationError(f"backward() needs a scalar root, got shape {loss.shape}")
    graph = Graph(loss)
    graph.backward()
    return graph


# ---------------------------------------------------------------- elementwise


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and b.data.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, _reduce_to(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, _reduce_to(g * a.data, b.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clamp")


def sign(a: Tensor) -> Tensor:
    # zero gradient everywhere, sign(0) = 0
    return _node(np.sign(a.data), (a,), lambda g: (np.zeros_like(g),), "sign")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NumericalError in _node
        out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise DomainError("log of a non-positive value")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def silu(a: Tensor) -> Tensor:
    s = expit(a.data)
    out = a.data * s
    return _node(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


_UNARY = {"sign": sign, "exp": exp, "log": log, "silu": silu, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a, b=None, *, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, clamp, sign, exp, log, silu, neg."""
    a = as_tensor(a)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind in _BINARY:
        if b is None:
            raise ValidationError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind == "scale":
        return scale(a, float(b))
    if op_kind == "clamp":
        return clamp(a, -np.inf if lo is None else lo, np.inf if hi is None else hi)
    raise ValidationError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------- shape / reductions


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def sum_all(a: Tensor) -> Tensor:
    src = a.shape
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    src, n = a.shape, a.data.size
    return _node(np.asarray(a.data.mean()), (a,), lambda g: (np.full(src, g / n),), "mean")


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """sum_i w_i a_i for a constant weight array of a's shape."""
    w = np.asarray(weights, dtype=DTYPE)
    if w.shape != a.shape:
        raise DimensionError(f"weighted_sum: weights {w.shape} vs tensor {a.shape}")
    return _node(np.asarray((a.data * w).sum()), (a,), lambda g: (g * w,), "weighted_sum")


# ---------------------------------------------------------------- linear maps


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b with x[B,I], w[I,O], b[O]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: x{x.shape} @ w{w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"affine: bias {b.shape} vs output width {w.shape[1]}")
    out = matmul_rows(x.data, w.data) + b.data

    def back(g):
        gx = matmul_rows(g, w.data.T) if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _node(out, (x, w, b), back, "affine")


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0:
        raise DimensionError(f"conv2d: kernel {kernel} larger than padded input {size + 2 * padding}")
    if span % stride:
        raise DimensionError(f"conv2d: ({size}+2*{padding}-{kernel}) not divisible by stride {stride}")
    return span // stride + 1


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[B,C,H,W] with k[F,C,kh,kw], optional bias[F]."""
    x, k = as_tensor(x), as_tensor(k)
    if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {k.shape}")
    B, C, H, W = x.shape
    F, _, kh, kw = k.shape
    Ho = conv_output_extent(H, kh, stride, padding)
    Wo = conv_output_extent(W, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    kmat = k.data.reshape(F, -1)
    out = matmul_rows(cols, kmat.T)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (F,):
            raise DimensionError(f"conv2d: bias {b.shape} vs {F} filters")
        out = out + b.data
    out = out.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)

    def back(g):
        go = g.transpose(0, 2, 3, 1).reshape(-1, F)
        gx = gk = gb = None
        if x.requires_grad:
            gcols = np.ascontiguousarray(matmul_rows(go, kmat).reshape(B, Ho, Wo, C, kh, kw)
                                         .transpose(4, 5, 0, 3, 1, 2))
            gxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += gcols[i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if k.requires_grad:
            gk = (go.T @ cols).reshape(k.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, k) if b is None else (x, k, b)
    return _node(np.ascontiguousarray(out), parents, back, "conv2d")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[B,C,H,W] + b[C] broadcast over batch and space."""
    if b.shape != (x.shape[1],):
        raise DimensionError(f"channel bias {b.shape} vs {x.shape[1]} channels")
    return _node(x.data + b.data[None, :, None, None], (x, b), lambda g: (g, g.sum(axis=(0, 2, 3))), "channel_bias")


# ---------------------------------------------------------------- losses


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def log_softmax(z: Tensor) -> Tensor:
    out = _log_softmax_np(z.data)
    p = np.exp(out)
    return _node(out, (z,), lambda g: (g - p * g.sum(axis=1, keepdims=True),), "log_softmax")


def validate_soft_labels(labels: np.ndarray, shape: tuple) -> np.ndarray:
    y = np.asarray(labels, dtype=DTYPE)
    if y.shape != shape:
        raise DimensionError(f"labels {y.shape} vs logits {shape}")
    if (y < 0).any() or not np.allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-6):
        raise ValidationError("each soft-label row must be a probability distribution")
    return y


def _reduce(per: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return mean(per)
    if reduction == "sum":
        return sum_all(per)
    if reduction == "none":
        return per
    raise ValidationError(f"unknown reduction {reduction!r}")


def softmax_cross_entropy(logits: Tensor, soft_labels, reduction: str = "mean") -> Tensor:
    """-sum_k y_k log softmax(z)_k, averaged over the batch by default."""
    y = validate_soft_labels(soft_labels, logits.shape)
    lsm = _log_softmax_np(logits.data)
    per = -(y * lsm).sum(axis=1)
    p = np.exp(lsm)
    ysum = y.sum(axis=1, keepdims=True)
    node = _node(per, (logits,), lambda g: ((p * ysum - y) * g[:, None],), "softmax_ce")
    return _reduce(node, reduction)


def kl_divergence(logits_p: Tensor, logits_q: Tensor, reduction: str = "mean") -> Tensor:
    """KL(softmax(p) || softmax(q)) per row; gradients reach both arguments."""
    logits_p, logits_q = as_tensor(logits_p), as_tensor(logits_q)
    if logits_p.shape != logits_q.shape:
        raise DimensionError(f"kl_divergence: {logits_p.shape} vs {logits_q.shape}")
    lp = _log_softmax_np(logits_p.data)
    lq = _log_softmax_np(logits_q.data)
    p, q = np.exp(lp), np.exp(lq)
    per = (p * (lp - lq)).sum(axis=1)

    def back(g):
        gp = p * ((lp - lq) - per[:, None]) * g[:, None] if logits_p.requires_grad else None
        gq = (q - p) * g[:, None] if logits_q.requires_grad else None
        return gp, gq

    node = _node(np.maximum(per, 0.0), (logits_p, logits_q), back, "kl")
    return _reduce(node, reduction)


def kl_from_labels(soft_labels, logits: Tensor, reduction: str = "mean") -> Tensor:
    """KL(y || softmax(z)) for a constant label distribution y (0 log 0 = 0)."""
    y = validate_soft_labels(soft_labels, logits.shape)
    lsm = _log_softmax_np(logits.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0)), 0.0).sum(axis=1)
    per = ent - (y * lsm).sum(axis=1)
    p = np.exp(lsm)
    ysum = y.sum(axis=1, keepdims=True)
    node = _node(per, (logits,), lambda g: ((p * ysum - y) * g[:, None],), "kl_labels")
    return _reduce(node, reduction)


def _check_labels(labels, batch: int, classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (batch,) or not np.issubdtype(y.dtype, np.integer):
        raise ValidationError(f"expected {batch} integer class labels, got {y.shape} {y.dtype}")
    if (y < 0).any() or (y >= classes).any():
        raise ValidationError(f"label out of range [0, {classes})")
    return y


def top_competitor(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Index of max_{i != y} z_i, lowest index on ties."""
    masked = z.copy()
    masked[np.arange(len(y)), y] = -np.inf
    return masked.argmax(axis=1)


def margin_loss(logits: Tensor, labels) -> Tensor:
    """Per-example z_y - max_{i != y} z_i; negative iff argmax misses y."""
    B, K = logits.shape
    if K < 2:
        raise ValidationError("margin loss needs at least two classes")
    y = _check_labels(labels, B, K)
    rows = np.arange(B)
    comp = top_competitor(logits.data, y)
    out = logits.data[rows, y] - logits.data[rows, comp]

    def back(g):
        gz = np.zeros_like(logits.data)
        gz[rows, y] += g
        gz[rows, comp] -= g
        return (gz,)

    return _node(out, (logits,), back, "margin")


def targeted_margin(logits: Tensor, labels, targets) -> Tensor:
    """Per-example z_t - z_y."""
    B, K = logits.shape
    y = _check_labels(labels, B, K)
    t = _check_labels(targets, B, K)
    if (t == y).any():
        raise ValidationError("target class must differ from the true class")
    rows = np.arange(B)
    out = logits.data[rows, t] - logits.data[rows, y]

    def back(g):
        gz = np.zeros_like(logits.data)
        gz[rows, t] += g
        gz[rows, y] -= g
        return (gz,)

    return _node(out, (logits,), back, "targeted_margin")


def log_mean_exp(items: Sequence[Tensor]) -> Tensor:
    """Elementwise log(mean_m exp(x_m)); averages probabilities given log-probs."""
    if not items:
        raise ValidationError("log_mean_exp of an empty list")
    shape = items[0].shape
    if any(t.shape != shape for t in items):
        raise DimensionError("log_mean_exp: operand shapes differ")
    stack = np.stack([t.data for t in items])
    m = stack.max(axis=0)
    out = m + np.log(np.exp(stack - m).mean(axis=0))
    weights = np.exp(stack - out) / len(items)
    return _node(out, tuple(items), lambda g: tuple(g * w for w in weights), "log_mean_exp")


# ---------------------------------------------------------------- oracle


def finite_difference_gradient(f: Callable[[list], float], params: Sequence, h: float = 1e-5) -> list:
    """Central-difference estimate of df/dparams, one coordinate at a time."""
    arrays = [np.array(p.data if isinstance(p, Tensor) else p, dtype=DTYPE) for p in params]
    grads = [np.zeros_like(a) for a in arrays]
    for a, g in zip(arrays, grads):
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(arrays)
            flat[i] = orig - h
            down = f(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grads
