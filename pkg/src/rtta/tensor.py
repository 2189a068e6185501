"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        w = tape.watch(Tensor(w0))
        loss = ops.sum(ops.mul(w, w))
    grads = tape.backprop(loss, [w])

Outside a tape every primitive is a plain numpy evaluation, which keeps
inference and attack bookkeeping cheap. Tapes are thread-local.
"""
import functools
import threading
from collections.abc import Mapping

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError",
    "backprop", "detach", "finite_difference_grad", "current_tape",
]


class ShapeError(ValueError):
    """Operand shapes incompatible with a primitive."""

    def __init__(self, primitive, detail):
        super().__init__(f"{primitive}: {detail}")
        self.primitive = primitive


class NonFiniteError(FloatingPointError):
    """A forward evaluation produced NaN or Inf."""

    def __init__(self, primitive):
        super().__init__(f"non-finite value produced by {primitive}")
        self.primitive = primitive


class Tensor:
    """Dense float64 value with a gradient slot and an optional tape position."""

    __slots__ = ("values", "grad", "tape", "tape_id", "name")

    def __init__(self, values, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.tape = None
        self.tape_id = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def numpy(self):
        return self.values

    def item(self):
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_local = threading.local()


def current_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self.nodes = []
        self._leaves = 0

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def watch(self, t):
        """Mark ``t`` as a differentiable leaf; returns ``t`` itself."""
        if not isinstance(t, Tensor):
            t = Tensor(t)
        t.tape = self
        self._leaves -= 1
        t.tape_id = self._leaves  # negative ids mark leaves
        return t

    def tracks(self, t):
        return isinstance(t, Tensor) and t.tape is self

    def _record(self, op, inputs, output, backward):
        output.tape = self
        output.tape_id = len(self.nodes)
        self.nodes.append(_Node(op, inputs, output, backward))

    def backprop(self, loss, wrt):
        """Reverse-mode gradients of scalar ``loss`` w.r.t. ``wrt``.

        ``wrt`` may be a mapping or a sequence of tensors; the result mirrors
        it. Tensors not reachable from ``loss`` (including detached ones)
        receive zeros.
        """
        if loss.size != 1:
            raise ShapeError("backprop", f"loss must be scalar, got shape {loss.shape}")
        grads = {}
        if self.tracks(loss):
            grads[loss.tape_id] = np.ones_like(loss.values)
            if loss.tape_id >= 0:
                for node in reversed(self.nodes[: loss.tape_id + 1]):
                    g = grads.pop(node.output.tape_id, None)
                    if g is None:
                        continue
                    in_grads = node.backward(g)
                    for t, gi in zip(node.inputs, in_grads):
                        if gi is None or not self.tracks(t):
                            continue
                        prev = grads.get(t.tape_id)
                        grads[t.tape_id] = gi if prev is None else prev + gi

        def lookup(t):
            if self.tracks(t) and t.tape_id in grads:
                g = np.broadcast_to(grads[t.tape_id], t.shape).copy()
            else:
                g = np.zeros_like(t.values)
            t.grad = g
            return g

        if isinstance(wrt, Mapping):
            return {k: lookup(t) for k, t in wrt.items()}
        return [lookup(t) for t in wrt]


def backprop(loss, wrt):
    """Backpropagate through the tape that produced ``loss``."""
    tape = loss.tape
    if tape is None:
        if loss.size != 1:
            raise ShapeError("backprop", f"loss must be scalar, got shape {loss.shape}")
        tape = Tape()
    return tape.backprop(loss, wrt)


def detach(t):
    """Value-identical tensor with its tape lineage severed."""
    return Tensor(t.values if isinstance(t, Tensor) else t)


def finite_difference_grad(fn, params, h=1e-5):
    """Central-difference gradient of scalar ``fn(params)``.

    ``params`` maps names to arrays; each coordinate is perturbed by ``±h``
    in a private copy so the caller's arrays are untouched.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for k, arr in work.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(work))
            flat[i] = orig - h
            fm = float(fn(work))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out[k] = g
    return out


# ---------------------------------------------------------------------------
# primitives


def _quiet(fn):
    """Silence numpy overflow warnings; non-finite results raise NonFiniteError instead."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore"):
            return fn(*args, **kwargs)
    return wrapper


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op, value, inputs, backward):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    out = Tensor(value)
    tape = current_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape._record(op, inputs, out, backward)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


@_quiet
def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _finish("add", a.values + b.values, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


@_quiet
def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _finish("sub", a.values - b.values, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


@_quiet
def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.values, b.values
    return _finish("mul", av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def neg(a):
    a = _as_tensor(a)
    return _finish("neg", -a.values, (a,), lambda g: (-g,))


@_quiet
def exp(a):
    a = _as_tensor(a)
    v = np.exp(a.values)
    return _finish("exp", v, (a,), lambda g: (g * v,))


def log(a):
    a = _as_tensor(a)
    if np.any(a.values <= 0):
        raise NonFiniteError("log")
    av = a.values
    return _finish("log", np.log(av), (a,), lambda g: (g / av,))


@_quiet
def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"incompatible operands {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _finish("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


@_quiet
def affine(x, w, b):
    """``x @ w + b`` for ``x`` of shape (N, in) or (in,), ``w`` (in, out), ``b`` (out,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    vec = x.values.ndim == 1
    xv = x.values[None, :] if vec else x.values
    if xv.ndim != 2 or w.values.ndim != 2 or xv.shape[1] != w.shape[0]:
        raise ShapeError("affine", f"input {x.shape} incompatible with weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError("affine", f"bias {b.shape} does not match weight {w.shape}")
    wv = w.values
    out = xv @ wv + b.values

    def backward(g):
        g2 = g[None, :] if vec else g
        gx = g2 @ wv.T
        return (gx[0] if vec else gx), xv.T @ g2, g2.sum(axis=0)

    return _finish("affine", out[0] if vec else out, (x, w, b), backward)


@_quiet
def conv2d(x, w, b, padding=0):
    """Stride-1 2-D convolution with symmetric zero padding.

    ``x`` is (N, C, H, W), ``w`` is (O, C, k, k), ``b`` is (O,).
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.values.ndim != 4 or w.values.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, cw, k, k2 = w.shape
    if cw != c or k != k2:
        raise ShapeError("conv2d", f"weight {w.shape} incompatible with input channels {c}")
    if b.shape != (o,):
        raise ShapeError("conv2d", f"bias {b.shape} does not match {o} output channels")
    p = int(padding)
    hp, wp = h + 2 * p, wd + 2 * p
    ho, wo = hp - k + 1, wp - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", f"kernel {k} larger than padded input {hp}x{wp}")
    xp = np.pad(x.values, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(x.values)
    cols = kernels.im2col(xp, k)  # N, Ho, Wo, C*k*k
    wmat = w.values.reshape(o, -1)
    out = (cols.reshape(-1, c * k * k) @ wmat.T).reshape(n, ho, wo, o) + b.values
    out = out.transpose(0, 3, 1, 2)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = (gt.T @ cols.reshape(-1, c * k * k)).reshape(w.shape)
        gcols = np.ascontiguousarray((gt @ wmat).reshape(n, ho, wo, c * k * k))
        gxp = kernels.col2im(gcols, c, k, hp, wp)
        gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
        return gx, gw, gt.sum(axis=0)

    return _finish("conv2d", np.ascontiguousarray(out), (x, w, b), backward)


def relu(a):
    a = _as_tensor(a)
    mask = a.values > 0
    return _finish("relu", np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def clamp_min(a, lo):
    """``max(a, lo)`` elementwise; zero gradient where clamped."""
    a = _as_tensor(a)
    mask = a.values >= lo
    return _finish("clamp_min", np.where(mask, a.values, lo), (a,), lambda g: (g * mask,))


def _bn_axes(v):
    if v.ndim == 2:
        return (0,), (1, -1)
    if v.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ShapeError("batch_norm", f"expected 2-D or 4-D input, got {v.shape}")


@_quiet
def batch_norm(x, gamma, beta, mean=None, var=None, eps=1e-5):
    """Batch normalization over the channel axis (axis 1).

    With ``mean``/``var`` given they are constants (inference mode) and the
    second return value is None. Otherwise batch statistics are used and
    differentiated through, and ``(batch_mean, batch_var)`` (biased
    variance) is returned alongside the output.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    xv = x.values
    axes, bshape = _bn_axes(xv)
    c = xv.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batch_norm", f"affine params {gamma.shape}/{beta.shape} vs {c} channels")
    gv = gamma.values.reshape(bshape)
    if mean is not None:
        mv = np.asarray(mean).reshape(bshape)
        inv = 1.0 / np.sqrt(np.asarray(var).reshape(bshape) + eps)
        xhat = (xv - mv) * inv
        out = xhat * gv + beta.values.reshape(bshape)

        def backward(g):
            return g * gv * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _finish("batch_norm", out, (x, gamma, beta), backward), None

    m = xv.size // c
    if m < 2:
        raise ShapeError("batch_norm", "batch statistics need at least 2 values per channel")
    bm = xv.mean(axis=axes)
    bv = xv.var(axis=axes)
    inv = 1.0 / np.sqrt(bv.reshape(bshape) + eps)
    xhat = (xv - bm.reshape(bshape)) * inv
    out = xhat * gv + beta.values.reshape(bshape)

    def backward(g):
        gxhat = g * gv
        gx = inv * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _finish("batch_norm", out, (x, gamma, beta), backward), (bm, bv)


def log_softmax(z):
    """Max-shifted log-softmax over the last axis."""
    z = _as_tensor(z)
    zv = z.values
    shifted = zv - zv.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _finish("log_softmax", out, (z,),
                   lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def softmax(z):
    z = _as_tensor(z)
    zv = z.values
    e = np.exp(zv - zv.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    return _finish("softmax", p, (z,),
                   lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    shape = a.shape
    out = a.values.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _finish("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None):
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {old} to {shape}") from None
    return _finish("reshape", out, (a,), lambda g: (g.reshape(old),))


def flatten(a):
    return reshape(a, (a.shape[0], -1))


def avg_pool2(a):
    """2x2 average pooling with stride 2 over the trailing spatial axes."""
    a = _as_tensor(a)
    n, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2", f"spatial extent {h}x{w} not divisible by 2")
    out = a.values.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _finish("avg_pool2", out, (a,), backward)


def pick(z, index):
    """Row-wise gather ``z[i, index[i]]`` for 2-D ``z``."""
    z = _as_tensor(z)
    idx = np.asarray(index, dtype=np.int64)
    if z.values.ndim != 2 or idx.shape != (z.shape[0],):
        raise ShapeError("pick", f"index {idx.shape} incompatible with {z.shape}")
    rows = np.arange(z.shape[0])
    shape = z.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, idx), g)
        return (out,)

    return _finish("pick", z.values[rows, idx], (z,), backward)
