"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive records its parents and a closure that maps the
output gradient to parent gradients.  ``Tensor.backward`` walks the recorded
graph in reverse topological order, so the summation order of accumulated
gradients is fixed by construction order and results are reproducible.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        """Build the result of a primitive.

        ``backward(g)`` must return one gradient (or None) per parent.
        """
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return Tensor.from_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor.from_op(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    s = (0.5 * (np.tanh(0.5 * x.data) + 1.0)).astype(x.dtype)
    return Tensor.from_op(s, (x,), lambda g: (g * s * (1 - s),))


def log(x: Tensor) -> Tensor:
    return Tensor.from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def blend(x: Tensor, v: Tensor, m: Tensor) -> Tensor:
    """Mask-replacement embedding ``x * (1 - m) + v * m`` with broadcasting."""
    x, v, m = as_tensor(x), as_tensor(v), as_tensor(m)
    try:
        out = x.data * (1 - m.data) + v.data * m.data
    except ValueError as exc:
        raise ShapeError(f"blend: incompatible shapes x{x.shape} v{v.shape} m{m.shape}") from exc

    def backward(g):
        gx = _unbroadcast(g * (1 - m.data), x.shape) if x.requires_grad else None
        gv = _unbroadcast(g * m.data, v.shape) if v.requires_grad else None
        gm = _unbroadcast(g * (v.data - x.data), m.shape) if m.requires_grad else None
        return gx, gv, gm

    return Tensor.from_op(out.astype(np.result_type(x.dtype, v.dtype), copy=False), (x, v, m), backward)


# -- reductions and shape ------------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return Tensor.from_op(out, (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), Tensor(np.asarray(1.0 / n, dtype=x.dtype)))


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(x.shape),))


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor.from_op(np.array(out, dtype=x.dtype), (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), backward)


# -- layers ---------------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the last axis; ``x`` is (N, D_in), ``w`` is (D_in, D_out)."""
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {w.shape}")
    out = x.data @ w.data + b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return Tensor.from_op(out, (x, w, b), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: str = "same") -> Tensor:
    """Stride-1 convolution (cross-correlation) on NHWC input.

    ``w`` has shape (k, k, C_in, C_out).  ``padding`` is ``"same"`` (zero pad,
    odd kernels) or ``"valid"``.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: expected NHWC input, got shape {x.shape}")
    kh, kw, cin, cout = w.shape
    n, h, wd, c = x.shape
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cin}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d: 'same' padding needs odd kernel sizes")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else x.data
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{wd}")

    # columns ordered (dy, dx, c) to match w.reshape(-1, cout)
    cols = np.empty((n, ho, wo, kh, kw, cin), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            cols[:, :, :, dy, dx, :] = xp[:, dy:dy + ho, dx:dx + wo, :]
    cols2 = cols.reshape(n * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ wmat).reshape(n, ho, wo, cout) + b.data

    def backward(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols2.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for dy in range(kh):
                for dx in range(kw):
                    gxp[:, dy:dy + ho, dx:dx + wo, :] += gcols[:, :, :, dy, dx, :]
            gx = gxp[:, ph:ph + h, pw:pw + wd, :] if ph or pw else gxp
        return gx, gw, gb

    return Tensor.from_op(out, (x, w, b), backward)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 on NHWC input; trailing odd rows/cols are dropped.

    Ties route the gradient to the first maximal element in row-major scan order.
    """
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected NHWC input, got shape {x.shape}")
    n, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ShapeError(f"max_pool2d: input {h}x{w} too small")
    xc = x.data[:, : ho * 2, : wo * 2, :]
    win = xc.reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros((n, ho, wo, c, 4), dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, : ho * 2, : wo * 2, :] = (
            gwin.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * 2, wo * 2, c)
        )
        return (gx,)

    return Tensor.from_op(out, (x,), backward)


def pad2d(x: Tensor, rows: tuple[int, int], cols: tuple[int, int]) -> Tensor:
    """Zero-pad the spatial axes of an NHWC tensor."""
    (t, b), (l, r) = rows, cols
    if not (t or b or l or r):
        return x
    out = np.pad(x.data, ((0, 0), (t, b), (l, r), (0, 0)))
    h, w = x.shape[1], x.shape[2]
    return Tensor.from_op(out, (x,), lambda g: (g[:, t:t + h, l:l + w, :],))


def splice(base: np.ndarray, patch: Tensor, row: int, col: int) -> Tensor:
    """Constant NHWC ``base`` with ``patch`` written at spatial offset (row, col)."""
    ph, pw = patch.shape[1], patch.shape[2]
    if base.shape[0] != patch.shape[0] or base.shape[3] != patch.shape[3]:
        raise ShapeError(f"splice: patch {patch.shape} incompatible with base {base.shape}")
    if row < 0 or col < 0 or row + ph > base.shape[1] or col + pw > base.shape[2]:
        raise ShapeError("splice: patch leaves the base")
    out = base.copy()
    out[:, row:row + ph, col:col + pw, :] = patch.data
    return Tensor.from_op(out, (patch,), lambda g: (g[:, row:row + ph, col:col + pw, :],))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(logits.data).any():
        raise ValueError("softmax: NaN in logits")
    if logits.shape[axis] < 2:
        raise ShapeError("softmax: need at least two classes")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(p, (logits,), backward)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (logits,), backward)


CE_CLAMP = 1e-12


def cross_entropy(posteriors: Tensor, labels) -> Tensor:
    """Mean of ``-log(max(p[label], 1e-12))`` over the batch.

    ``posteriors`` is (K,) or (N, K); ``labels`` an int or length-N int array.
    """
    p = posteriors if posteriors.ndim == 2 else reshape(posteriors, (1, -1))
    n, k = p.shape
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} rows but {labels.size} labels")
    if (labels < 0).any() or (labels >= k).any():
        raise IndexError(f"cross_entropy: label out of range [0, {k})")
    picked = p.data[np.arange(n), labels]
    clamped = np.maximum(picked, CE_CLAMP)
    out = np.asarray(-np.log(clamped).mean(), dtype=p.dtype)

    def backward(g):
        gp = np.zeros_like(p.data)
        live = picked >= CE_CLAMP
        gp[np.arange(n), labels] = np.where(live, -g / (n * clamped), 0.0)
        return (gp,)

    return Tensor.from_op(out, (p,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Numerically stable mean cross-entropy straight from logits (training loss)."""
    n = logits.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    ls = log_softmax(logits)
    return neg(mean(index(ls, (np.arange(n), labels))))
