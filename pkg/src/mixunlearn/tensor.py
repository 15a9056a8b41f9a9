"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation records its inputs and a backward closure,
and ``backward()`` walks the recorded graph once in topological order.
Everything is float64 numpy underneath; there is no GPU path and no
broadcasting beyond what the kernels here explicitly support.

The graph recorder is per-thread (see ``no_grad``); forward passes on
frozen parameters may run concurrently, but a single graph must be built
and walked by one thread.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatch",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "tsum",
    "tmean",
    "reshape",
    "concat",
    "l2norm",
    "softmax",
    "log_softmax",
    "logsumexp",
    "conv2d",
    "maxpool2d",
    "upsample2x",
    "cosine_similarity",
    "topo_order",
]

COSINE_NORM_EPS = 1e-12  # stabilizer added to each norm in cosine_similarity


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


class no_grad:
    """Context manager disabling graph recording on the current thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


class Tensor:
    """n-d float64 array, optionally a node in the differentiation graph.

    ``grad`` accumulates across backward passes; callers zero it explicitly
    between optimizer steps (standard training-loop contract).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def is_leaf(self) -> bool:
        return self._backward is None

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self._op!r}{flag})"

    # operator sugar; scalars and ndarrays lift to constant tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _add_grad(grads: dict, t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.data.shape} and {b.data.shape} are incompatible") from None


def topo_order(root: Tensor) -> list[Tensor]:
    """Post-order over the graph: every node appears after its inputs."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad leaf.

    Repeated calls without zeroing accumulate into existing grads.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    order = topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            node._backward(g, grads)
        elif node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g


# ---------------------------------------------------------------- kernels


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    data = a.data + b.data

    def bwd(g, grads):
        _add_grad(grads, a, _unbroadcast(g, a.data.shape))
        _add_grad(grads, b, _unbroadcast(g, b.data.shape))

    return _result(data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    data = a.data - b.data

    def bwd(g, grads):
        _add_grad(grads, a, _unbroadcast(g, a.data.shape))
        _add_grad(grads, b, _unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    data = a.data * b.data

    def bwd(g, grads):
        _add_grad(grads, a, _unbroadcast(g * b.data, a.data.shape))
        _add_grad(grads, b, _unbroadcast(g * a.data, b.data.shape))

    return _result(data, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    data = a.data / b.data

    def bwd(g, grads):
        _add_grad(grads, a, _unbroadcast(g / b.data, a.data.shape))
        _add_grad(grads, b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(data, (a, b), bwd, "div")


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatch(f"matmul: expected 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(f"matmul: inner dims differ, {a.data.shape} vs {b.data.shape}")
    data = a.data @ b.data

    def bwd(g, grads):
        _add_grad(grads, a, g @ b.data.T)
        _add_grad(grads, b, a.data.T @ g)

    return _result(data, (a, b), bwd, "matmul")


def relu(t) -> Tensor:
    t = _lift(t)
    data = np.maximum(t.data, 0.0)

    def bwd(g, grads):
        _add_grad(grads, t, g * (data > 0))

    return _result(data, (t,), bwd, "relu")


def sigmoid(t) -> Tensor:
    t = _lift(t)
    x = t.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g, grads):
        _add_grad(grads, t, g * data * (1.0 - data))

    return _result(data, (t,), bwd, "sigmoid")


def exp(t) -> Tensor:
    t = _lift(t)
    data = np.exp(t.data)

    def bwd(g, grads):
        _add_grad(grads, t, g * data)

    return _result(data, (t,), bwd, "exp")


def log(t) -> Tensor:
    t = _lift(t)
    data = np.log(t.data)

    def bwd(g, grads):
        _add_grad(grads, t, g / t.data)

    return _result(data, (t,), bwd, "log")


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(t, axis=None, keepdims=False) -> Tensor:
    t = _lift(t)
    data = t.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g, grads):
        _add_grad(grads, t, _expand_reduced(g, t.data.shape, axis, keepdims).copy())

    return _result(data, (t,), bwd, "sum")


def tmean(t, axis=None, keepdims=False) -> Tensor:
    t = _lift(t)
    data = t.data.mean(axis=axis, keepdims=keepdims)
    n = t.data.size if axis is None else t.data.shape[axis]

    def bwd(g, grads):
        _add_grad(grads, t, _expand_reduced(g, t.data.shape, axis, keepdims) / n)

    return _result(data, (t,), bwd, "mean")


def reshape(t, shape) -> Tensor:
    t = _lift(t)
    data = t.data.reshape(shape)

    def bwd(g, grads):
        _add_grad(grads, t, g.reshape(t.data.shape))

    return _result(data, (t,), bwd, "reshape")


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, grads):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _add_grad(grads, t, piece)

    return _result(data, tuple(ts), bwd, "concat")


def l2norm(t, axis=None, keepdims=False) -> Tensor:
    t = _lift(t)
    sq = (t.data * t.data).sum(axis=axis, keepdims=keepdims)
    data = np.sqrt(sq)

    def bwd(g, grads):
        ge = _expand_reduced(g, t.data.shape, axis, keepdims)
        ne = _expand_reduced(data, t.data.shape, axis, keepdims)
        _add_grad(grads, t, ge * t.data / np.maximum(ne, 1e-300))

    return _result(data, (t,), bwd, "l2norm")


def softmax(t, axis: int = -1) -> Tensor:
    t = _lift(t)
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, grads):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _add_grad(grads, t, data * (g - dot))

    return _result(data, (t,), bwd, "softmax")


def log_softmax(t, axis: int = -1) -> Tensor:
    t = _lift(t)
    z = t.data - t.data.max(axis=axis, keepdims=True)
    data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bwd(g, grads):
        _add_grad(grads, t, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _result(data, (t,), bwd, "log_softmax")


def logsumexp(t) -> Tensor:
    """Scalar log-sum-exp over all elements, max-subtracted for stability."""
    t = _lift(t)
    m = float(t.data.max())
    return add(log(tsum(exp(sub(t, m)))), m)


def cosine_similarity(a, b, axis=None) -> Tensor:
    """Cosine of the angle between a and b (rowwise when axis=-1).

    Norms are stabilized with COSINE_NORM_EPS so degenerate all-zero inputs
    yield 0 instead of NaN.
    """
    a, b = _lift(a), _lift(b)
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"cosine_similarity: shapes {a.data.shape} vs {b.data.shape}")
    num = tsum(mul(a, b), axis=axis)
    na = add(l2norm(a, axis=axis), COSINE_NORM_EPS)
    nb = add(l2norm(b, axis=axis), COSINE_NORM_EPS)
    return div(num, mul(na, nb))


def conv2d(x, w, b=None, padding: str = "same") -> Tensor:
    """2-d convolution, stride 1, via im2col + matmul.

    x: (B, C, H, W); w: (O, C, kh, kw); b: (O,) or None.
    padding 'same' (odd kernels) or 'valid'.
    """
    x, w = _lift(x), _lift(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatch(f"conv2d: expected 4-d x and w, got {x.data.shape} and {w.data.shape}")
    B, C, H, W = x.data.shape
    O, Cw, kh, kw = w.data.shape
    if C != Cw:
        raise ShapeMismatch(f"conv2d: channel mismatch, x {x.data.shape} vs w {w.data.shape}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("conv2d: 'same' padding requires odd kernels")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = [x, w]
    bt = None
    if b is not None:
        bt = _lift(b)
        if bt.data.shape != (O,):
            raise ShapeMismatch(f"conv2d: bias shape {bt.data.shape}, expected ({O},)")
        out = out + bt.data.reshape(1, O, 1, 1)
        parents.append(bt)

    def bwd(g, grads):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        _add_grad(grads, w, (gmat.T @ cols).reshape(w.data.shape))
        if bt is not None:
            _add_grad(grads, bt, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + Ho, j : j + Wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            _add_grad(grads, x, dxp[:, :, ph : ph + H, pw : pw + W] if ph or pw else dxp)

    return _result(out, tuple(parents), bwd, "conv2d")


def maxpool2d(t) -> Tensor:
    """2x2 max pooling with stride 2; ties resolve to the first maximum."""
    t = _lift(t)
    if t.data.ndim != 4:
        raise ShapeMismatch(f"maxpool2d: expected 4-d input, got {t.data.shape}")
    B, C, H, W = t.data.shape
    if H % 2 or W % 2:
        raise ShapeMismatch(f"maxpool2d: spatial dims must be even, got {t.data.shape}")
    Hh, Wh = H // 2, W // 2
    quads = t.data.reshape(B, C, Hh, 2, Wh, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Hh, Wh, 4)
    idx = quads.argmax(axis=-1)
    data = np.take_along_axis(quads, idx[..., None], axis=-1)[..., 0]

    def bwd(g, grads):
        dq = np.zeros_like(quads)
        np.put_along_axis(dq, idx[..., None], g[..., None], axis=-1)
        dx = dq.reshape(B, C, Hh, Wh, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        _add_grad(grads, t, dx)

    return _result(data, (t,), bwd, "maxpool2d")


def upsample2x(t) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of a (B, C, H, W) tensor."""
    t = _lift(t)
    if t.data.ndim != 4:
        raise ShapeMismatch(f"upsample2x: expected 4-d input, got {t.data.shape}")
    data = t.data.repeat(2, axis=2).repeat(2, axis=3)
    B, C, H, W = t.data.shape

    def bwd(g, grads):
        _add_grad(grads, t, g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))

    return _result(data, (t,), bwd, "upsample2x")
