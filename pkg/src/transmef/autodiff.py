"""Minimal N-dimensional tensor with reverse-mode automatic differentiation.

Values are stored as numpy arrays (float32 by default, float64 supported for
high-precision gradient oracles).  Every operation records its inputs and a
gradient closure on the output tensor; the resulting implicit DAG is the
computation graph.  ``backward`` on a scalar loss walks the graph in reverse
topological order and accumulates ``dLoss/dLeaf`` into each ``requires_grad``
leaf.

Conventions fixed here:
  * conv2d is cross-correlation (no kernel flip), bias per output channel.
  * GELU uses the tanh approximation 0.5*x*(1+tanh(sqrt(2/pi)*(x+0.044715*x^3))).
  * Reductions use numpy's fixed (pairwise) summation order, so identical
    inputs give bit-identical outputs and gradients.
  * Every forward op checks its output for NaN/Inf and raises NonFiniteError.
    (The check is a summation probe: it cannot miss a NaN/Inf, and can only
    false-positive if finite magnitudes exceed ~1e38, outside our domain.)

Tensors are immutable after creation except for gradient accumulation; a
graph must stay on one logical thread.
"""

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes or dimensions are inconsistent."""


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data.sum()):
        raise NonFiniteError(f"non-finite values in output of '{op}'")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op="leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = None
        self._op = _op

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.data.shape)}, op={self._op!r}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def _accum_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def backward(self, free_graph: bool = True):
        backward(self, free_graph=free_graph)


def create(shape, values, requires_grad: bool = False, dtype=None) -> Tensor:
    """Validated constructor: flat row-major values laid out into ``shape``.

    ``shape`` must be a non-empty list of positive extents whose product
    equals ``len(values)``.
    """
    shape = list(shape)
    if len(shape) == 0:
        raise ShapeError("empty shape is not allowed")
    if any(int(s) != s or s <= 0 for s in shape):
        raise ShapeError(f"shape extents must be positive integers, got {shape}")
    n = 1
    for s in shape:
        n *= int(s)
    values = np.asarray(values, dtype=dtype or DEFAULT_DTYPE).reshape(-1)
    if values.size != n:
        raise ShapeError(f"shape {shape} needs {n} values, got {values.size}")
    return Tensor(values.reshape(shape), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _make(data, parents, op) -> Tensor:
    _check_finite(data, op)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, _op=op)
    out = Tensor(data, requires_grad=True, _parents=tuple(parents), _op=op)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ops ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data + b.data, (a, b), "add")
    if out._parents:
        def _bw(g):
            if a.requires_grad:
                a._accum_grad(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum_grad(_unbroadcast(g, b.data.shape))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data - b.data, (a, b), "sub")
    if out._parents:
        def _bw(g):
            if a.requires_grad:
                a._accum_grad(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum_grad(_unbroadcast(-g, b.data.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data * b.data, (a, b), "mul")
    if out._parents:
        def _bw(g):
            if a.requires_grad:
                a._accum_grad(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum_grad(_unbroadcast(g * a.data, b.data.shape))
        out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _make(a.data / b.data, (a, b), "div")
    if out._parents:
        def _bw(g):
            if a.requires_grad:
                a._accum_grad(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accum_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        out._backward = _bw
    return out


def pow_scalar(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    p = float(exponent)
    out = _make(a.data ** p, (a,), "pow_scalar")
    if out._parents:
        def _bw(g):
            a._accum_grad(g * p * a.data ** (p - 1.0))
        out._backward = _bw
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.exp(a.data), (a,), "exp")
    if out._parents:
        y = out.data
        def _bw(g):
            a._accum_grad(g * y)
        out._backward = _bw
    return out


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.sqrt(a.data), (a,), "sqrt")
    if out._parents:
        y = out.data
        def _bw(g):
            a._accum_grad(g * 0.5 / y)
        out._backward = _bw
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.maximum(a.data, 0), (a,), "relu")
    if out._parents:
        mask = a.data > 0
        def _bw(g):
            a._accum_grad(g * mask)
        out._backward = _bw
    return out


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_A * x * x * x))
    out = _make(0.5 * x * (1.0 + t), (a,), "gelu")
    if out._parents:
        def _bw(g):
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            a._accum_grad(g * local)
        out._backward = _bw
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _make(y, (a,), "sigmoid")
    if out._parents:
        def _bw(g):
            a._accum_grad(g * y * (1.0 - y))
        out._backward = _bw
    return out


# -- matrix and shape ops ------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")
    out = _make(np.matmul(a.data, b.data), (a, b), "matmul")
    if out._parents:
        def _bw(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accum_grad(_unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accum_grad(_unbroadcast(gb, b.data.shape))
        out._backward = _bw
    return out


def _im2col(xp: np.ndarray, h_out: int, w_out: int, kh: int, kw: int) -> np.ndarray:
    """Padded (C,Hp,Wp) -> (C*kh*kw, h_out*w_out) patch matrix."""
    c = xp.shape[0]
    col = np.empty((c, kh * kw, h_out * w_out), xp.dtype)
    for u in range(kh):
        for v in range(kw):
            col[:, u * kw + v, :] = xp[:, u:u + h_out, v:v + w_out].reshape(c, -1)
    return col.reshape(c * kh * kw, h_out * w_out)


def conv2d(x, kernel, bias=None, padding: int = 1) -> Tensor:
    """2-D cross-correlation of x[C_in,H,W] with kernel[C_out,C_in,kh,kw].

    Spatial extent is preserved for kh=kw=3, padding=1; the 1x1/padding=0
    variant is the decoder head.  Other odd kernels (e.g. the 11x11 SSIM
    window) run with padding=0.  Requires kh-1 >= padding.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if bias is not None:
        bias = _as_tensor(bias)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects x[C,H,W] and kernel[Co,Ci,kh,kw]")
    c_out, c_in, kh, kw = kernel.data.shape
    if x.data.shape[0] != c_in:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.data.shape[0]}, kernel wants {c_in}")
    if bias is not None and bias.data.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},)")
    p = int(padding)
    if kh - 1 < p or kw - 1 < p:
        raise ShapeError("conv2d requires kernel size - 1 >= padding")
    h, w = x.data.shape[1], x.data.shape[2]
    h_out, w_out = h + 2 * p - kh + 1, w + 2 * p - kw + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError("conv2d input smaller than kernel")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    col = _im2col(xp, h_out, w_out, kh, kw)
    res = kernel.data.reshape(c_out, -1) @ col
    if bias is not None:
        res += bias.data[:, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = _make(res.reshape(c_out, h_out, w_out), parents, "conv2d")
    if out._parents:
        col_cache = col if kernel.requires_grad else None

        def _bw(g):
            g2 = g.reshape(c_out, -1)
            if bias is not None and bias.requires_grad:
                bias._accum_grad(g2.sum(axis=1))
            if kernel.requires_grad:
                kernel._accum_grad((g2 @ col_cache.T).reshape(kernel.data.shape))
            if x.requires_grad:
                pg = kh - 1 - p
                gp = np.pad(g, ((0, 0), (pg, pg), (pg, pg))) if pg else g
                gcol = _im2col(gp, h, w, kh, kw)
                kf = np.ascontiguousarray(
                    kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)).reshape(c_in, -1)
                x._accum_grad((kf @ gcol).reshape(x.data.shape))
        out._backward = _bw
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (a,), "softmax")
    if out._parents:
        def _bw(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accum_grad(y * (g - dot))
        out._backward = _bw
    return out


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum")
    if out._parents:
        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum_grad(np.broadcast_to(g, a.data.shape))
        out._backward = _bw
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = _make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), "mean")
    if out._parents:
        count = a.data.size // max(out.data.size, 1)
        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum_grad(np.broadcast_to(g, a.data.shape) / count)
        out._backward = _bw
    return out


def reshape(a, *shape) -> Tensor:
    a = _as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = _make(a.data.reshape(shape), (a,), "reshape")
    if out._parents:
        def _bw(g):
            a._accum_grad(g.reshape(a.data.shape))
        out._backward = _bw
    return out


def transpose(a, *axes) -> Tensor:
    a = _as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.data.ndim)))
    out = _make(a.data.transpose(axes), (a,), "transpose")
    if out._parents:
        inv = np.argsort(axes)
        def _bw(g):
            a._accum_grad(g.transpose(inv))
        out._backward = _bw
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    if out._parents:
        sizes = [t.data.shape[axis] for t in tensors]
        def _bw(g):
            start = 0
            for t, s in zip(tensors, sizes):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(start, start + s)
                    t._accum_grad(g[tuple(idx)])
                start += s
        out._backward = _bw
    return out


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = _make(a.data[idx], (a,), "narrow")
    if out._parents:
        def _bw(g):
            gx = np.zeros_like(a.data)
            gx[idx] = g
            a._accum_grad(gx)
        out._backward = _bw
    return out


def upsample_nearest(a, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of the last two axes of a 3-D tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 3:
        raise ShapeError("upsample_nearest expects a [C,h,w] tensor")
    f = int(factor)
    out = _make(np.repeat(np.repeat(a.data, f, axis=1), f, axis=2), (a,), "upsample")
    if out._parents:
        c, h, w = a.data.shape
        def _bw(g):
            a._accum_grad(g.reshape(c, h, f, w, f).sum(axis=(2, 4)))
        out._backward = _bw
    return out


# -- reverse pass --------------------------------------------------------------


def backward(loss: Tensor, free_graph: bool = True) -> None:
    """Reverse-topological gradient accumulation from a scalar loss.

    Leaves with requires_grad end up holding dLoss/dLeaf in ``.grad``
    (accumulated on top of any existing gradient).  With ``free_graph``
    the interior closures and parent links are dropped afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError("backward requires a scalar (single-element) loss")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss._accum_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
    if free_graph:
        for node in topo:
            if node._parents:
                node._parents = ()
                node._backward = None
                node.grad = None
