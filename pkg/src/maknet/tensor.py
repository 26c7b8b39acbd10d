"""Dense tensors with reverse-mode automatic differentiation.

Values are flat numpy arrays (float64 by default, float32 selectable via
:func:`set_default_dtype` or per-tensor ``dtype``). Differentiable ops record
a backward closure on their output; calling :meth:`Tensor.backward` on a
scalar walks the recorded graph in reverse topological order and accumulates
gradients into ``.grad`` of every tensor that requires them. Graph recording
can be suspended with :func:`no_grad` for inference.

Determinism: given identical inputs and rng state, forward and backward are
bit-identical in a single-threaded process. Gradient accumulation order is
fixed by graph construction order.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit as _expit

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "set_default_dtype",
    "default_dtype",
    "set_debug_checks",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "power",
    "log",
    "exp",
    "sigmoid",
    "tanh",
    "relu",
    "mish",
    "cast",
    "clip",
    "tsum",
    "tmean",
    "amax",
    "reshape",
    "concat",
    "linear",
    "conv2d",
    "maxpool2d",
    "avgpool2d",
    "batch_norm",
    "dropout",
]

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_DEBUG_CHECKS = False


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op.

    Carries the op name, the offending dimension label, and the
    expected/actual extents.
    """

    def __init__(self, op: str, dimension: str, expected, got):
        self.op = op
        self.dimension = dimension
        self.expected = expected
        self.got = got
        super().__init__(
            f"{op}: dimension {dimension!r} expected {expected}, got {got}"
        )


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors created from non-array data."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


def set_debug_checks(enabled: bool) -> None:
    """Enable per-op finite-value assertions (slow; meant for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Context manager that suspends graph recording."""
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
    """N-dimensional float array, optionally participating in autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    # keep ndarray operators from hijacking `ndarray <op> Tensor`; numpy
    # then defers to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (
                np.float32,
                np.float64,
            ):
                arr = data
            else:
                arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # ------------------------------------------------------------------
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

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # ------------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate gradients of this scalar w.r.t. all graph inputs."""
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar tensor, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise ValueError("tensor does not require grad")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.grad is not None:
                node._backward(node.grad)

    # operator sugar ----------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# ----------------------------------------------------------------------
# graph plumbing


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative postorder DFS; parents precede children in the result."""
    order: list[Tensor] = []
    seen = {id(root)}
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, idx = stack.pop()
        parents = node._parents
        if idx < len(parents):
            stack.append((node, idx + 1))
            p = parents[idx]
            if p._backward is not None and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, 0))
        else:
            order.append(node)
    return order


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by forward op")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        else:
            t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (the inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a = _as_tensor(a, None)
    b = _as_tensor(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, None)
    b = _as_tensor(b, a.dtype)
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, None)
    b = _as_tensor(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a, None)
    b = _as_tensor(b, a.dtype)
    data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _result(-a.data, (a,), backward)


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a scalar exponent."""
    p = float(p)
    data = a.data**p

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _result(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g / a.data)

    return _result(np.log(a.data), (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data)

    return _result(data, (a,), backward)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    return _expit(x)


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_stable(a.data)

    def backward(g):
        _accum(a, g * data * (1.0 - data))

    return _result(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - data * data))

    return _result(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0))

    return _result(data, (a,), backward)


def mish(a: Tensor) -> Tensor:
    """x * tanh(softplus(x)), with softplus computed stably."""
    sp = np.logaddexp(0.0, a.data)
    t = np.tanh(sp)
    data = a.data * t

    def backward(g):
        sig = _sigmoid_stable(a.data)
        _accum(a, g * (t + a.data * (1.0 - t * t) * sig))

    return _result(data, (a,), backward)


def cast(a: Tensor, dtype) -> Tensor:
    """Dtype conversion that stays on the gradient path."""
    if a.dtype == np.dtype(dtype):
        return a
    data = a.data.astype(dtype)

    def backward(g):
        _accum(a, g.astype(a.dtype))

    return _result(data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes where lo <= a <= hi."""
    data = np.clip(a.data, lo, hi)

    def backward(g):
        _accum(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _result(data, (a,), backward)


# ----------------------------------------------------------------------
# reductions, shaping


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gk, a.shape))

    return _result(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else _axis_count(a.shape, axis)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / count, a.shape))
        else:
            gk = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gk / count, a.shape))

    return _result(data, (a,), backward)


def _axis_count(shape, axis) -> int:
    if isinstance(axis, int):
        return shape[axis]
    n = 1
    for ax in axis:
        n *= shape[ax]
    return n


def amax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient routes to the first maximal element."""
    idx = a.data.argmax(axis=axis)
    data_k = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    data = data_k if keepdims else np.squeeze(data_k, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gk, axis=axis)
        _accum(a, gx)

    return _result(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _result(data, (a,), backward)


def _getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[key] += g
        _accum(a, gx)

    return _result(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        idx = [slice(None)] * g.ndim
        for t, n in zip(tensors, sizes):
            idx[axis] = slice(offset, offset + n)
            _accum(t, g[tuple(idx)])
            offset += n

    return _result(data, tensors, backward)


# ----------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", "inner", a.shape[-1], b.shape[0])
    data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result(data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: x (N, F) @ weight (O, F)^T + bias (O,)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError("linear", "in_features", weight.shape[1], x.shape[-1])
    data = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError("linear", "bias", (weight.shape[0],), bias.shape)
        data = data + bias.data

    def backward(g):
        _accum(x, g @ weight.data)
        _accum(weight, g.T @ x.data)
        if bias is not None:
            _accum(bias, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(data, parents, backward)


# ----------------------------------------------------------------------
# spatial ops


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _windows(xp: np.ndarray, kh, kw, sh, sw, oh, ow) -> np.ndarray:
    """Read-only strided view (N, C, KH, KW, OH, OW) over a padded input."""
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * sh, s3 * sw),
        writeable=False,
    )


def _im2col(xp: np.ndarray, kh, kw, sh, sw, oh, ow) -> np.ndarray:
    """Patch matrix (C*KH*KW, N*OH*OW) so one GEMM covers the whole batch."""
    n, c = xp.shape[:2]
    win = _windows(xp, kh, kw, sh, sw, oh, ow)
    return win.transpose(1, 2, 3, 0, 4, 5).reshape(c * kh * kw, n * oh * ow)


def _col2im(
    gcols: np.ndarray, n, c, h, w, kh, kw, sh, sw, oh, ow, ph, pw
) -> np.ndarray:
    """Scatter-add a (C*KH*KW, N*OH*OW) gradient back to input layout."""
    gview = gcols.reshape(c, kh, kw, n, oh, ow)
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=gcols.dtype)
    for i in range(kh):
        hs = slice(i, i + sh * oh, sh)
        for j in range(kw):
            gxp[:, :, hs, j : j + sw * ow : sw] += gview[:, i, j].transpose(
                1, 0, 2, 3
            )
    if ph or pw:
        return gxp[:, :, ph : ph + h, pw : pw + w]
    return gxp


def _pad_nchw(arr: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph or pw:
        return np.pad(arr, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    return arr


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=(1, 1),
    padding=(0, 0),
) -> Tensor:
    """2-D cross-correlation over NCHW input with OIHW kernels.

    Output extent per axis is floor((H + 2*pad - K) / stride) + 1.
    """
    if x.ndim != 4:
        raise ShapeError("conv2d", "input_rank", 4, x.ndim)
    if weight.ndim != 4:
        raise ShapeError("conv2d", "kernel_rank", 4, weight.ndim)
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ShapeError("conv2d", "in_channels", ic, c)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {(sh, sw)}")
    if ph < 0 or pw < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {(ph, pw)}")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1:
        raise ShapeError("conv2d", "output_height", ">= 1", oh)
    if ow < 1:
        raise ShapeError("conv2d", "output_width", ">= 1", ow)
    if bias is not None and bias.shape != (oc,):
        raise ShapeError("conv2d", "bias", (oc,), bias.shape)

    cols = _im2col(_pad_nchw(x.data, ph, pw), kh, kw, sh, sw, oh, ow)
    w2 = weight.data.reshape(oc, -1)
    out2 = w2 @ cols
    if bias is not None:
        out2 += bias.data[:, None]
    out = np.ascontiguousarray(
        out2.reshape(oc, n, oh, ow).transpose(1, 0, 2, 3)
    )

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(oc, n * oh * ow)
        if bias is not None:
            _accum(bias, g2.sum(axis=1))
        if weight.requires_grad:
            # patch matrices dominate training memory, so they are rebuilt
            # here instead of kept alive from the forward pass
            cols_b = _im2col(_pad_nchw(x.data, ph, pw), kh, kw, sh, sw, oh, ow)
            _accum(weight, (g2 @ cols_b.T).reshape(weight.shape))
        if x.requires_grad:
            gcols = w2.T @ g2
            _accum(x, _col2im(gcols, n, ic, h, w, kh, kw, sh, sw, oh, ow, ph, pw))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def _pool_geometry(op, x, window, stride):
    if x.ndim != 4:
        raise ShapeError(op, "input_rank", 4, x.ndim)
    n, c, h, w = x.shape
    kh, kw = _pair(window)
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ValueError(f"{op}: stride must be >= 1, got {(sh, sw)}")
    if kh > h or kw > w:
        raise ShapeError(op, "window", f"<= {(h, w)}", (kh, kw))
    if (h - kh) % sh != 0 or (w - kw) % sw != 0:
        raise ShapeError(
            op, "tiling", "window/stride covering the input exactly", (h, w)
        )
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    return n, c, h, w, kh, kw, sh, sw, oh, ow


def maxpool2d(x: Tensor, window, stride) -> Tensor:
    """Max pooling; gradient goes to the first (row-major) max per window."""
    n, c, h, w, kh, kw, sh, sw, oh, ow = _pool_geometry(
        "maxpool2d", x, window, stride
    )
    win = (
        _windows(x.data, kh, kw, sh, sw, oh, ow)
        .transpose(0, 1, 4, 5, 2, 3)
        .reshape(n, c, oh, ow, kh * kw)
    )
    flat_idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, flat_idx[..., None], axis=-1)[..., 0]

    def backward(g):
        ih = np.arange(oh)[None, None, :, None] * sh + flat_idx // kw
        iw = np.arange(ow)[None, None, None, :] * sw + flat_idx % kw
        gx = np.zeros_like(x.data)
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (ni, ci, ih, iw), g)
        _accum(x, gx)

    return _result(out, (x,), backward)


def avgpool2d(x: Tensor, window, stride) -> Tensor:
    """Average pooling; gradient spreads uniformly over each window."""
    n, c, h, w, kh, kw, sh, sw, oh, ow = _pool_geometry(
        "avgpool2d", x, window, stride
    )
    win = _windows(x.data, kh, kw, sh, sw, oh, ow)
    out = win.mean(axis=(2, 3))
    scale = 1.0 / (kh * kw)

    def backward(g):
        gs = g * scale
        gx = np.zeros_like(x.data)
        for i in range(kh):
            hs = slice(i, i + sh * oh, sh)
            for j in range(kw):
                gx[:, :, hs, j : j + sw * ow : sw] += gs
        _accum(x, gx)

    return _result(out, (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
):
    """Per-channel batch normalization over (N, H, W).

    Pure function: running statistics are read, never written; training mode
    returns the batch mean/var so the caller can update its own state.
    Returns ``(out, batch_mean, batch_var)`` with the stats ``None`` in eval
    mode.
    """
    if x.ndim != 4:
        raise ShapeError("batch_norm", "input_rank", 4, x.ndim)
    n, c, h, w = x.shape
    if gamma.shape != (c,):
        raise ShapeError("batch_norm", "gamma_channels", (c,), gamma.shape)
    if beta.shape != (c,):
        raise ShapeError("batch_norm", "beta_channels", (c,), beta.shape)

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
    else:
        mu = np.asarray(running_mean, dtype=x.dtype)
        var = np.asarray(running_var, dtype=x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    mu4 = mu.reshape(1, c, 1, 1)
    inv4 = inv.reshape(1, c, 1, 1)
    xhat = (x.data - mu4) * inv4
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        _accum(beta, g.sum(axis=(0, 2, 3)))
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            m = n * h * w
            mean_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True) / m
            mean_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True) / m
            _accum(x, inv4 * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat))
        else:
            _accum(x, dxhat * inv4)

    out_t = _result(out, (x, gamma, beta), backward)
    if training:
        return out_t, mu, var
    return out_t, None, None


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale = keep / (1.0 - p)
    data = x.data * scale

    def backward(g):
        _accum(x, g * scale)

    return _result(data, (x,), backward)
