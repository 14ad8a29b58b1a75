"""Dense tensors with reverse-mode autodiff on a numpy substrate.

Storage is always a row-major contiguous float32 or float64 ndarray. Every op
allocates a fresh output buffer (no views escape), records the inputs it needs
for its gradient, and `backward` replays the records in reverse topological
order. Saved buffers are released as backward consumes them, so a graph can be
walked once; a second walk raises.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)
_FLOATS = (F32, F64)


class _GradMode(threading.local):
    enabled = True


_grad_mode = _GradMode()


@contextlib.contextmanager
def no_grad():
    """Disable op recording inside the block (forward values only)."""
    prev = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


class Node:
    """One recorded op: the input tensors and the rule mapping d(out) to d(inputs)."""

    __slots__ = ("inputs", "grad_fn", "name", "freed")

    def __init__(self, inputs, grad_fn, name):
        self.inputs = inputs
        self.grad_fn = grad_fn
        self.name = name
        self.freed = False

    def free(self):
        self.inputs = ()
        self.grad_fn = None
        self.freed = True


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def numpy(self) -> np.ndarray:
        """The backing array. Treat as read-only."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    # -- operator sugar ------------------------------------------------------

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def flip(self, axis):
        return flip(self, axis)

    def backward(self, leaves=None):
        backward(self, leaves)


def _scalar_err(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


# -- graph plumbing ----------------------------------------------------------


def _wrap(x, like_dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like_dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _wrap(b, a.dtype)
    if isinstance(b, Tensor):
        return _wrap(a, b.dtype), b
    return Tensor(a), Tensor(b)


def _own(arr: np.ndarray) -> np.ndarray:
    # Ops must hand out buffers they own; numpy slicing/reshape returns views.
    # (ascontiguousarray is avoided: it silently promotes 0-d to 1-d.)
    arr = np.asarray(arr)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr) if arr.ndim else arr.copy()
    if arr.base is not None:
        arr = arr.copy()
    return arr


def _result(data, inputs, grad_fn, name) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _own(data)
    out.grad = None
    out.node = None
    out.requires_grad = False
    if _grad_mode.enabled and any(t.requires_grad or t.node is not None for t in inputs):
        out.requires_grad = True
        out.node = Node(tuple(inputs), grad_fn, name)
    return out


def _check_finite(arr, name):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor, leaves=None):
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate into `.grad` of every requires_grad leaf reached from
    `loss`. Leaves passed in `leaves` that the sweep does not reach get an
    explicit zero gradient. Saved activations are freed as the sweep consumes
    them; sweeping the same records twice raises RuntimeError.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")

    if loss.node is not None and loss.node.freed:
        raise RuntimeError("backward on a freed graph")

    # Iterative topological order over tensors that carry nodes.
    topo: list[Tensor] = []
    seen: set[int] = set()
    if loss.node is not None:
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                topo.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.node is None:
                continue
            if t.node.freed:
                raise RuntimeError("backward on a freed graph")
            stack.append((t, True))
            for inp in t.node.inputs:
                if inp.node is not None and id(inp) not in seen:
                    stack.append((inp, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    keep: dict[int, Tensor] = {id(loss): loss}
    for t in reversed(topo):
        g = grads.pop(id(t), None)
        keep.pop(id(t), None)
        node = t.node
        if g is None:
            node.free()
            continue
        in_grads = node.grad_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            if inp.node is None:
                if inp.requires_grad:
                    inp.grad = ig if inp.grad is None else inp.grad + ig
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
                keep[id(inp)] = inp
        node.free()

    if loss.node is None and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0

    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


# -- elementwise ops ---------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), grad_fn, "add")


def sub(a, b):
    a, b = _pair(a, b)
    out = a.data - b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), grad_fn, "sub")


def mul(a, b):
    a, b = _pair(a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _result(out, (a, b), grad_fn, "mul")


def div(a, b):
    a, b = _pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    _check_finite(out, "div")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g / bd
        gb = -g * ad / (bd * bd)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), grad_fn, "div")


def neg(a):
    a = _wrap(a, F32)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def texp(a):
    a = _wrap(a, F32)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp")

    def grad_fn(g):
        return (g * out,)

    return _result(out, (a,), grad_fn, "exp")


def tlog(a):
    a = _wrap(a, F32)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    _check_finite(out, "log")
    ad = a.data

    def grad_fn(g):
        return (g / ad,)

    return _result(out, (a,), grad_fn, "log")


def _sigmoid_arr(x):
    # Stable in both tails.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _wrap(a, F32)
    out = _sigmoid_arr(a.data)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), grad_fn, "sigmoid")


def softplus(a):
    a = _wrap(a, F32)
    x = a.data
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = _sigmoid_arr(x)

    def grad_fn(g):
        return (g * sig,)

    return _result(out, (a,), grad_fn, "softplus")


def silu(a):
    a = _wrap(a, F32)
    x = a.data
    sig = _sigmoid_arr(x)
    out = x * sig

    def grad_fn(g):
        return (g * (sig + x * sig * (1.0 - sig)),)

    return _result(out, (a,), grad_fn, "silu")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": texp,
    "log": tlog,
    "softplus": softplus,
    "silu": silu,
    "sigmoid": sigmoid,
}

_BINARY = {"add", "sub", "mul", "div"}


def elementwise(op: str, a, b=None):
    """Dispatch an elementwise op by name. Binary ops broadcast numpy-style."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} is binary")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"{op} is unary")
    return fn(a)


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape):
    shape = tuple(shape)
    out = a.data.reshape(shape)
    in_shape = a.shape

    def grad_fn(g):
        return (g.reshape(in_shape),)

    return _result(out, (a,), grad_fn, "reshape")


def transpose(a: Tensor, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def grad_fn(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _result(out, (a,), grad_fn, "transpose")


def flip(a: Tensor, axis):
    out = np.flip(a.data, axis)

    def grad_fn(g):
        return (np.ascontiguousarray(np.flip(g, axis)),)

    return _result(out, (a,), grad_fn, "flip")


def broadcast_to(a: Tensor, shape):
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)
    in_shape = a.shape

    def grad_fn(g):
        return (_unbroadcast(g, in_shape),)

    return _result(out, (a,), grad_fn, "broadcast_to")


def index(a: Tensor, key):
    out = a.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=a.dtype)
    in_shape = a.shape
    in_dtype = a.dtype

    def grad_fn(g):
        gi = np.zeros(in_shape, dtype=in_dtype)
        gi[key] = g
        return (gi,)

    return _result(out, (a,), grad_fn, "index")


def concat(tensors, axis=0):
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of nothing")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(np.ascontiguousarray(p) for p in parts)

    return _result(out, tuple(tensors), grad_fn, "concat")


def where(cond, a, b):
    """Select per element by a boolean ndarray (the condition is not differentiated)."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _pair(a, b)
    out = np.where(cond, a.data, b.data)

    def grad_fn(g):
        ga = np.where(cond, g, 0.0)
        gb = np.where(cond, 0.0, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), grad_fn, "where")


# -- reductions --------------------------------------------------------------


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    in_shape = a.shape
    kshape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(kshape), in_shape).copy(),)

    return _result(out, (a,), grad_fn, "sum")


def tmean(a: Tensor, axis=None, keepdims=False):
    axes = _axis_tuple(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axis, keepdims) * (1.0 / count)


# -- fused ops ---------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _pair(a, b)
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), grad_fn, "matmul")


def conv2d_depthwise(x: Tensor, kernel: Tensor):
    """Per-channel 2-D correlation with zero 'same' padding.

    x: [B, C, H, W], kernel: [C, 1, K, K] with K odd. No channel mixing.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d_depthwise expects x [B,C,H,W] and kernel [C,1,K,K]")
    B, C, H, W = x.shape
    KC, one, K, K2 = kernel.shape
    if KC != C or one != 1 or K != K2:
        raise ValueError(f"kernel shape {kernel.shape} does not match {C} channels")
    if K % 2 == 0:
        raise ValueError("kernel size must be odd")
    p = K // 2
    xd, kd = x.data, kernel.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros_like(xd)
    for i in range(K):
        for j in range(K):
            out += kd[:, 0, i, j][None, :, None, None] * xp[:, :, i : i + H, j : j + W]

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        for i in range(K):
            for j in range(K):
                gxp[:, :, i : i + H, j : j + W] += kd[:, 0, i, j][None, :, None, None] * g
                gk[:, 0, i, j] = np.sum(xp[:, :, i : i + H, j : j + W] * g, axis=(0, 2, 3))
        gx = np.ascontiguousarray(gxp[:, :, p : p + H, p : p + W])
        return gx, gk

    return _result(out, (x, kernel), grad_fn, "conv2d_depthwise")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"gamma/beta must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data * xhat + beta.data

    def grad_fn(g):
        gd = gamma.data * g
        m1 = gd.mean(axis=-1, keepdims=True)
        m2 = (gd * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gd - m1 - xhat * m2)
        sum_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=sum_axes)
        gbeta = g.sum(axis=sum_axes)
        return gx, ggamma, gbeta

    return _result(out, (x, gamma, beta), grad_fn, "layer_norm")


def log_softmax(x: Tensor, axis: int = -1):
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    z = xd - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def grad_fn(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), grad_fn, "log_softmax")


# -- linear recurrence (scan) ------------------------------------------------

PARALLEL_MIN_LEN = 32  # below this the tree scan is pure overhead


def _scan_arrays(a, b, h0, parallel):
    """All states of h_k = a_k * h_{k-1} + b_k along axis 1.

    a, b: [B, L, ...], h0: [B, ...]. The parallel path is a Blelloch
    up/down-sweep over the pair monoid (a2,b2)o(a1,b1) = (a2*a1, a2*b1+b2).
    """
    L = a.shape[1]
    if not parallel or L < PARALLEL_MIN_LEN:
        h = np.empty_like(b)
        prev = h0
        for k in range(L):
            prev = a[:, k] * prev + b[:, k]
            h[:, k] = prev
        return h

    Lp = 1 << (L - 1).bit_length()
    pad = [(0, 0)] * a.ndim
    pad[1] = (0, Lp - L)
    A = np.pad(a, pad, constant_values=1.0)
    Bv = np.pad(b, pad, constant_values=0.0)

    levels = Lp.bit_length() - 1
    for d in range(levels):  # up-sweep: each subtree folds left-to-right
        step = 1 << (d + 1)
        off = 1 << d
        hi = (slice(None), slice(step - 1, Lp, step))
        lo = (slice(None), slice(off - 1, Lp, step))
        A_hi = A[hi]
        Bv[hi] = A_hi * Bv[lo] + Bv[hi]
        A[hi] = A_hi * A[lo]

    A[:, -1] = 1.0  # down-sweep turns subtree folds into exclusive prefixes
    Bv[:, -1] = 0.0
    for d in reversed(range(levels)):
        step = 1 << (d + 1)
        off = 1 << d
        hi = (slice(None), slice(step - 1, Lp, step))
        lo = (slice(None), slice(off - 1, Lp, step))
        A_left = A[lo].copy()
        B_left = Bv[lo].copy()
        A_pref = A[hi].copy()
        B_pref = Bv[hi].copy()
        A[lo] = A_pref
        Bv[lo] = B_pref
        A[hi] = A_left * A_pref
        Bv[hi] = A_left * B_pref + B_left

    A = A[:, :L]
    Bv = Bv[:, :L]
    # inclusive_k = p_k o exclusive_k, then apply to h0
    A_inc = a * A
    B_inc = a * Bv + b
    return A_inc * np.expand_dims(h0, 1) + B_inc


def linear_recurrence(a: Tensor, b: Tensor, h0: Tensor, parallel: bool = False):
    """Differentiable h_k = a_k*h_{k-1} + b_k over axis 1, all states returned.

    a, b: [B, L, ...] (same shape); h0: broadcastable to a[:, 0] shape.
    """
    if a.shape != b.shape:
        raise ValueError(f"decay and input shapes differ: {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise ValueError("scan needs at least [batch, length, ...]")
    if a.shape[1] == 0:
        raise ValueError("cannot scan a length-0 sequence")
    step_shape = (a.shape[0],) + a.shape[2:]
    h0d = np.broadcast_to(h0.data, step_shape).astype(a.dtype, copy=False)
    h = _scan_arrays(a.data, b.data, h0d, parallel)
    ad = a.data
    h0_shape = h0.shape

    def grad_fn(g):
        # Suffix pass: g_k = dL/dh_k(total) = g_k + a_{k+1} * g_{k+1}, run as a
        # forward scan on the time-reversed sequence with decays shifted by one.
        a_rev = ad[:, ::-1]
        a_hat = np.concatenate([np.zeros_like(a_rev[:, :1]), a_rev[:, :-1]], axis=1)
        g_rev = g[:, ::-1]
        zero0 = np.zeros_like(h0d)
        acc = _scan_arrays(a_hat, np.ascontiguousarray(g_rev), zero0, parallel)
        acc = np.ascontiguousarray(acc[:, ::-1])
        h_prev = np.concatenate([h0d[:, None], h[:, :-1]], axis=1)
        da = acc * h_prev
        db = acc
        dh0 = _unbroadcast(ad[:, 0] * acc[:, 0], h0_shape)
        return da, db, dh0

    return _result(h, (a, b, h0), grad_fn, "linear_recurrence")
