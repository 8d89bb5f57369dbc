"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive needed by the lab's losses is implemented here: basic
arithmetic, matmul, stride-1 conv2d, 2x2 max pooling, the usual pointwise
nonlinearities, softmax/cross-entropy and an anisotropic TV norm. First-order
gradients only; no broadcasting beyond bias-add over the batch dimension.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

_node_counter = itertools.count()


class TensorError(ValueError):
    pass


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise TensorError(f"non-finite output of {op}")


class Tensor:
    """A node in the computation DAG.

    Leaves are created directly; interior nodes are created by primitives and
    carry a backward closure. Creation order doubles as topological order, so
    backward() walks nodes newest-to-oldest exactly once.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "leaf")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._order = next(_node_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return  # frozen leaf reached through a grad-requiring sibling
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    _check_finite(out.data, op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad with d(loss)/d(node) for every reachable grad node.

    Intermediate tensors keep their gradients too; the leakage oracle reads
    them off the pre-activation of the SpAB layer.
    """
    if loss.data.shape != ():
        raise TensorError("backward requires a scalar loss")
    visited: set[int] = set()
    nodes: list[Tensor] = []

    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in visited:
            continue
        visited.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)

    loss._accumulate(np.ones(()))
    for t in sorted(nodes, key=lambda n: n._order, reverse=True):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise TensorError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")

    def bwd(g):
        a._accumulate(g)
        b._accumulate(g)

    return _wrap(a.data + b.data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")

    def bwd(g):
        a._accumulate(g)
        b._accumulate(-g)

    return _wrap(a.data - b.data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")

    def bwd(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _wrap(a.data * b.data, (a, b), bwd, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        a._accumulate(g * c)

    return _wrap(a.data * c, (a,), bwd, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bwd(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _wrap(a.data @ b.data, (a, b), bwd, "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Bias add over the batch dimension: (B,N)+(N,) or (B,C,H,W)+(C,)."""
    if x.data.ndim == 2 and b.shape == (x.shape[1],):
        bdata = b.data

        def bwd(g):
            x._accumulate(g)
            b._accumulate(g.sum(axis=0))

        return _wrap(x.data + bdata, (x, b), bwd, "add_bias")
    if x.data.ndim == 4 and b.shape == (x.shape[1],):

        def bwd(g):
            x._accumulate(g)
            b._accumulate(g.sum(axis=(0, 2, 3)))

        return _wrap(x.data + b.data[None, :, None, None], (x, b), bwd, "add_bias")
    raise TensorError(f"add_bias: shapes {x.shape} + {b.shape}")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is 0

    def bwd(g):
        x._accumulate(g * mask)

    return _wrap(np.where(mask, x.data, 0.0), (x,), bwd, "relu")


def _expit(v: np.ndarray) -> np.ndarray:
    # overflow-safe logistic
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _expit(x.data)

    def bwd(g):
        x._accumulate(g * y * (1.0 - y))

    return _wrap(y, (x,), bwd, "sigmoid")


def log(x: Tensor) -> Tensor:
    def bwd(g):
        x._accumulate(g / x.data)

    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _wrap(y, (x,), bwd, "log")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)

    def bwd(g):
        x._accumulate(g * y)

    return _wrap(y, (x,), bwd, "exp")


def softplus(x: Tensor) -> Tensor:
    # log(1 + e^x), computed stably for large |x|
    y = np.logaddexp(0.0, x.data)
    s = _expit(np.asarray(x.data, dtype=np.float64))

    def bwd(g):
        x._accumulate(g * s)

    return _wrap(y, (x,), bwd, "softplus")


def absolute(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)  # subgradient at 0 is 0

    def bwd(g):
        x._accumulate(g * sgn)

    return _wrap(np.abs(x.data), (x,), bwd, "abs")


def square(x: Tensor) -> Tensor:
    def bwd(g):
        x._accumulate(g * 2.0 * x.data)

    return _wrap(x.data * x.data, (x,), bwd, "square")


def tsum(x: Tensor) -> Tensor:
    def bwd(g):
        x._accumulate(np.full(x.shape, float(g)))

    return _wrap(x.data.sum(), (x,), bwd, "sum")


def tmean(x: Tensor) -> Tensor:
    n = x.data.size

    def bwd(g):
        x._accumulate(np.full(x.shape, float(g) / n))

    return _wrap(x.data.mean(), (x,), bwd, "mean")


def l2_norm(x: Tensor) -> Tensor:
    nrm = float(np.sqrt((x.data**2).sum()))

    def bwd(g):
        if nrm > 0.0:
            x._accumulate(float(g) * x.data / nrm)

    return _wrap(nrm, (x,), bwd, "l2_norm")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape

    def bwd(g):
        x._accumulate(g.reshape(old))

    return _wrap(x.data.reshape(shape), (x,), bwd, "reshape")


def flatten(x: Tensor) -> Tensor:
    """(B, ...) -> (B, prod(...))."""
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate (B,Ca,H,W) and (B,Cb,H,W) along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4 or a.shape[0] != b.shape[0] \
            or a.shape[2:] != b.shape[2:]:
        raise TensorError(f"concat_channels: shapes {a.shape}, {b.shape}")
    ca = a.shape[1]

    def bwd(g):
        a._accumulate(g[:, :ca])
        b._accumulate(g[:, ca:])

    return _wrap(np.concatenate([a.data, b.data], axis=1), (a, b), bwd, "concat")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of (B,C,H,W)."""
    if x.data.ndim != 4:
        raise TensorError("upsample2x expects (B,C,H,W)")
    y = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        B, C, H2, W2 = g.shape
        x._accumulate(g.reshape(B, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5)))

    return _wrap(y, (x,), bwd, "upsample2x")


def maxpool2x2(x: Tensor) -> Tensor:
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise TensorError(f"maxpool2x2: bad shape {x.shape}")
    B, C, H, W = x.shape
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros((B, C, H // 2, W // 2, 4))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        x._accumulate(gw.reshape(B, C, H, W))

    return _wrap(y, (x,), bwd, "maxpool2x2")


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    B, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = H + 2 * pad - k + 1, W + 2 * pad - k + 1
    cols = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    # (B, C, Ho, Wo, k, k) -> (B, Ho, Wo, C*k*k)
    return cols.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho, Wo, C * k * k)


def _col2im(cols: np.ndarray, xshape, k: int, pad: int) -> np.ndarray:
    B, C, H, W = xshape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho, Wo = Hp - k + 1, Wp - k + 1
    out = np.zeros((B, C, Hp, Wp))
    cols = cols.reshape(B, Ho, Wo, C, k, k)
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + Ho, dj:dj + Wo] += cols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return out[:, :, pad:pad + H, pad:pad + W] if pad else out


def conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-channel convolution: (B,C,H,W) * (O,C,k,k) -> (B,O,Ho,Wo)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1] \
            or w.shape[2] != w.shape[3]:
        raise TensorError(f"conv2d: shapes {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    cols = _im2col(x.data, k, padding)  # (B, Ho, Wo, C*k*k)
    Ho, Wo = cols.shape[1], cols.shape[2]
    y = cols.reshape(-1, C * k * k) @ w.data.reshape(O, -1).T
    y = y.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)  # (B*Ho*Wo, O)
        w._accumulate((gm.T @ cols.reshape(-1, C * k * k)).reshape(O, C, k, k))
        gcols = (gm @ w.data.reshape(O, -1)).reshape(B, Ho, Wo, C * k * k)
        x._accumulate(_col2im(gcols, x.shape, k, padding))

    return _wrap(y, (x, w), bwd, "conv2d")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        x._accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _wrap(s, (x,), bwd, "softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (B,C) logits against integer labels."""
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,):
        raise TensorError(f"cross_entropy: labels shape {labels.shape} for batch {B}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1)) + logits.data.max(axis=1)
    loss = (lse - logits.data[np.arange(B), labels]).mean()
    probs = np.exp(logits.data - lse[:, None])

    def bwd(g):
        gl = probs.copy()
        gl[np.arange(B), labels] -= 1.0
        logits._accumulate(float(g) * gl / B)

    return _wrap(loss, (logits,), bwd, "cross_entropy")


def tv_norm(image: Tensor) -> Tensor:
    """Anisotropic total variation of a (C,H,W) image."""
    if image.data.ndim != 3:
        raise TensorError("tv_norm expects (C,H,W)")
    d = image.data
    dv = d[:, 1:, :] - d[:, :-1, :]
    dh = d[:, :, 1:] - d[:, :, :-1]
    val = np.abs(dv).sum() + np.abs(dh).sum()

    def bwd(g):
        gi = np.zeros_like(d)
        sv, sh = np.sign(dv), np.sign(dh)
        gi[:, 1:, :] += sv
        gi[:, :-1, :] -= sv
        gi[:, :, 1:] += sh
        gi[:, :, :-1] -= sh
        image._accumulate(float(g) * gi)

    return _wrap(val, (image,), bwd, "tv_norm")


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences at `point`."""
    if step <= 0:
        raise TensorError("step must be positive")
    point = np.asarray(point, dtype=np.float64)
    x = Tensor(point, requires_grad=True)
    loss = f(x)
    backward(loss)
    auto = x.grad if x.grad is not None else np.zeros_like(point)

    worst = 0.0
    flat = point.ravel()
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = step
        lo = f(Tensor((flat - e).reshape(point.shape))).item()
        hi = f(Tensor((flat + e).reshape(point.shape))).item()
        fd = (hi - lo) / (2 * step)
        err = abs(auto.ravel()[i] - fd) / (abs(fd) + 1e-8)
        worst = max(worst, err)
    return worst
