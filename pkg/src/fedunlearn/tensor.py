"""Dense float64 tensors with define-by-run reverse-mode autodiff, plus SGD.

Every operation that touches a tensor requiring gradients records its parents
and a local backward rule on the output.  ``Tensor.backward`` walks that graph
in reverse topological order, visiting each node once.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ContractError("tensor data contains NaN or Inf")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------------

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without an explicit grad needs a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad, dtype=np.float64)
            if seed.shape != self.shape:
                raise ShapeError(f"grad shape {seed.shape} does not match tensor shape {self.shape}")

        order = _topological_order(self)
        pending = {id(self): seed}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), backward)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tsum(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum()), (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _result(np.asarray(x.data.mean()), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), backward)


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward)


def _pair(v, name: str) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ShapeError(f"{name} must be an int or a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: Union[int, Tuple[int, int]] = 0) -> Tensor:
    """Cross-correlation of an N x C x H x W input with an F x C x kh x kw kernel.

    ``padding`` may be a single int or an (pad_h, pad_w) pair; zero padding.
    Output spatial size is floor((H + 2p - kh) / stride) + 1.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = weight.shape
    if c != ck:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {weight.shape}")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    ph, pw = _pair(padding, "padding")
    if ph < 0 or pw < 0:
        raise ShapeError(f"padding must be non-negative, got {padding!r}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}"
        )
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d bias must have shape ({f},), got {bias.shape}")

    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # rows: (n, ho, wo); cols: (c, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(f, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                        j : j + stride * (wo - 1) + 1 : stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(np.ascontiguousarray(out), parents, backward)


def max_pool2d(x: Tensor, kernel: Union[int, Tuple[int, int]] = 2) -> Tensor:
    """Non-overlapping max pooling (stride = kernel); trailing rows/cols are dropped."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects a 4-d input, got {x.shape}")
    kh, kw = _pair(kernel, "kernel")
    n, c, h, w = x.shape
    ho, wo = h // kh, w // kw
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool kernel {kh}x{kw} larger than input {h}x{w}")
    blocks = (
        x.data[:, :, : ho * kh, : wo * kw]
        .reshape(n, c, ho, kh, wo, kw)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, kh * kw)
    )
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * kh, wo * kw)
        gx = np.zeros(x.shape)
        gx[:, :, : ho * kh, : wo * kw] = gb
        return (gx,)

    return _result(out, (x,), backward)


# -- probabilistic heads ------------------------------------------------------


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"softmax expects N x K logits with K >= 2, got {logits.shape}")
    out = _softmax_np(logits.data)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result(out, (logits,), backward)


def cross_entropy(logits: Tensor, labels: ArrayLike) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects N x K logits, got {logits.shape}")
    n, k = logits.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for {n} rows of logits")
    if n and (y.min() < 0 or y.max() >= k):
        raise IndexError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, y]))

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, y] -= 1.0
        return (p * (g / n),)

    return _result(np.asarray(loss), (logits,), backward)


KL_EPS = 1e-12


def kl_divergence(p: Tensor, q: Tensor, eps: float = KL_EPS, tol: float = 1e-6) -> Tensor:
    """Batch mean of sum_k p_k * ln(p_k / q_k), logs clamped at ``eps``.

    Both arguments must hold row-stochastic matrices.  Gradients flow to
    whichever arguments require them.
    """
    if p.shape != q.shape or p.ndim != 2:
        raise ShapeError(f"kl_divergence expects matching N x K inputs, got {p.shape} and {q.shape}")
    for name, t in (("p", p), ("q", q)):
        if t.data.size and (t.data.min() < 0 or np.abs(t.data.sum(axis=1) - 1.0).max() > tol):
            raise ContractError(f"{name} rows must be probability distributions")
    n = p.shape[0]
    lp = np.log(np.maximum(p.data, eps))
    lq = np.log(np.maximum(q.data, eps))
    val = float((p.data * (lp - lq)).sum() / n)

    def backward(g):
        gp = gq = None
        if p.requires_grad:
            gp = (lp - lq + (p.data > eps)) * (g / n)
        if q.requires_grad:
            gq = -np.where(q.data > eps, p.data / np.maximum(q.data, eps), 0.0) * (g / n)
        return gp, gq

    return _result(np.asarray(val), (p, q), backward)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def kl_divergence_logits(logits_p: Tensor, logits_q: Tensor, eps: float = KL_EPS) -> Tensor:
    """``kl_divergence(softmax(logits_p), softmax(logits_q))`` fused with the softmaxes.

    Same forward value as the unfused form.  The backward pass uses the
    softmax Jacobian in closed form, so the gradient is exactly zero whenever
    the two distributions coincide bitwise.  Clamped entries (p_k <= eps)
    contribute no gradient.
    """
    if logits_p.shape != logits_q.shape or logits_p.ndim != 2:
        raise ShapeError(f"kl_divergence_logits expects matching N x K logits, "
                         f"got {logits_p.shape} and {logits_q.shape}")
    n = logits_p.shape[0]
    log_eps = np.log(eps)
    lp = np.maximum(_log_softmax_np(logits_p.data), log_eps)
    lq = np.maximum(_log_softmax_np(logits_q.data), log_eps)
    p = _softmax_np(logits_p.data)
    d = lp - lq
    val = float((p * d).sum() / n)

    def backward(g):
        gp = gq = None
        if logits_p.requires_grad:
            gp = p * (d - (p * d).sum(axis=1, keepdims=True)) * (g / n)
        if logits_q.requires_grad:
            gq = (_softmax_np(logits_q.data) - p) * (g / n)
        return gp, gq

    return _result(np.asarray(val), (logits_p, logits_q), backward)


def binary_cross_entropy_with_logits(logits: Tensor, targets: ArrayLike) -> Tensor:
    z = logits.data.reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if t.shape != z.shape:
        raise ShapeError(f"{t.shape[0]} targets for {z.shape[0]} logits")
    n = z.size
    loss = float(np.mean(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))))

    def backward(g):
        return (((_stable_sigmoid(z) - t) * (g / n)).reshape(logits.shape),)

    return _result(np.asarray(loss), (logits,), backward)


# -- optimisation -------------------------------------------------------------


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractError(f"weight_decay must be >= 0, got {self.weight_decay}")


class SGD:
    """p <- p - lr * (g + wd * p), with an optional heavy-ball momentum buffer.

    Gradients are cleared after each step.
    """

    def __init__(self, params: Union[Mapping[str, Tensor], Iterable[Tensor]], config: SgdConfig):
        if isinstance(params, Mapping):
            self.params = list(params.values())
        else:
            self.params = list(params)
        self.config = config
        self._velocity: list = [None] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        cfg = self.config
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"parameter {i} (shape {p.shape}) has no gradient")
        for i, p in enumerate(self.params):
            g = p.grad
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            if cfg.momentum:
                v = self._velocity[i]
                v = g.copy() if v is None else cfg.momentum * v + g
                self._velocity[i] = v
                g = v
            new = p.data - cfg.learning_rate * g
            if not np.isfinite(new).all():
                raise ContractError("SGD step produced non-finite parameters; lower the learning rate")
            p.data = new
            p.grad = None
