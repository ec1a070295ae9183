"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tape records one forward pass; ``Tape.backward`` replays the recorded
nodes in reverse insertion order, which is a valid reverse topological
order because every node is appended after its inputs. Tensors are
immutable value wrappers around ndarrays; only tensors watched on the
active tape (or derived from them while it is active) carry tape
linkage, everything else is a constant.

Broadcasting between two operands is restricted to leading dimensions:
the smaller shape must be a trailing suffix of the larger one. Anything
else must go through an explicit ``broadcast_to``.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Incompatible operand shapes for a named operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class NonFiniteError(ArithmeticError):
    """A value that must be finite was NaN or infinite."""


class Tape:
    """Append-only record of one forward pass.

    Usage::

        with Tape() as tape:
            w = tape.watch(w)
            loss = ...
        tape.backward(loss)
        g = tape.grad(w)
    """

    _active: "Tape | None" = None

    def __init__(self):
        self._inputs: list[tuple] = []   # per node: tuple of input node ids (None for constants)
        self._vjps: list = []            # per node: callable grad_out -> per-input grads
        self._grads: list | None = None

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise RuntimeError("a Tape is already active; one tape per forward pass")
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = None
        return False

    def __len__(self) -> int:
        return len(self._inputs)

    def _record(self, input_ids: tuple, vjp) -> int:
        self._inputs.append(input_ids)
        self._vjps.append(vjp)
        return len(self._inputs) - 1

    def watch(self, t: "Tensor") -> "Tensor":
        """Return a leaf copy of ``t`` that participates in this tape."""
        t = as_tensor(t)
        out = Tensor(t.data)
        out.tape = self
        out.nid = self._record((), None)
        return out

    def backward(self, loss: "Tensor") -> None:
        """Accumulate gradients of a scalar loss w.r.t. every reachable node."""
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.data.shape}")
        if loss.tape is None:
            # a constant loss (e.g. fully detached): every gradient is zero
            self._grads = [None] * len(self._inputs)
            return
        if loss.tape is not self:
            raise ValueError("loss is not attached to this tape")
        grads: list = [None] * len(self._inputs)
        grads[loss.nid] = np.ones_like(loss.data)
        for nid in range(loss.nid, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            vjp = self._vjps[nid]
            if vjp is None:  # leaf
                continue
            in_ids = self._inputs[nid]
            in_grads = vjp(g)
            for iid, ig in zip(in_ids, in_grads):
                if iid is None or ig is None:
                    continue
                # accumulation always allocates, so views returned by vjps are safe
                grads[iid] = ig if grads[iid] is None else grads[iid] + ig
        self._grads = grads

    def grad(self, t: "Tensor") -> np.ndarray:
        """Gradient for a taped tensor; exact zeros if unreachable from the loss."""
        if self._grads is None:
            raise RuntimeError("backward() has not been called")
        if t.tape is not self or t.nid is None:
            raise ValueError("tensor is not attached to this tape")
        g = self._grads[t.nid]
        if g is None:
            return np.zeros_like(t.data)
        return g


class Tensor:
    """N-dimensional float array, optionally linked to a gradient tape."""

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.tape: Tape | None = None
        self.nid: int | None = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")

    def detach(self) -> "Tensor":
        return detach(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        tag = "" if self.tape is None else f", node={self.nid}"
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})\n{self.data!r}"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, p): return pow_scalar(self, p)
    def __getitem__(self, idx): return tslice(self, idx)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _active_for(*tensors) -> Tape | None:
    """The active tape, if any passed tensor is taped on it."""
    t = Tape._active
    if t is None:
        return None
    for x in tensors:
        if x.tape is t:
            return t
    return None


def _emit(tape: Tape | None, out: Tensor, inputs: tuple, vjp) -> Tensor:
    if tape is not None:
        out.tape = tape
        out.nid = tape._record(tuple(x.nid if x.tape is tape else None for x in inputs), vjp)
    return out


def detach(t: Tensor) -> Tensor:
    """Value-identical tensor with no tape linkage (stop-gradient)."""
    t = as_tensor(t)
    return Tensor(t.data)


# --- broadcasting helpers (leading-dims only) -------------------------------

def _check_leading_broadcast(op: str, a: np.ndarray, b: np.ndarray):
    sa, sb = a.shape, b.shape
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) and big[len(big) - len(small):] != small:
        raise ShapeError(op, sa, sb)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


# --- elementwise binary ops --------------------------------------------------

def _binary(op_name, a, b, fwd, vjp_factory):
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_leading_broadcast(op_name, a.data, b.data)
    out = Tensor(fwd(a.data, b.data))
    tape = _active_for(a, b)
    if tape is None:
        return out
    sa, sb = a.data.shape, b.data.shape
    vjp = vjp_factory(a.data, b.data, out.data)

    def _vjp(g):
        ga, gb = vjp(g)
        return (_unbroadcast(ga, sa) if ga is not None else None,
                _unbroadcast(gb, sb) if gb is not None else None)

    return _emit(tape, out, (a, b), _vjp)


def add(a, b):
    return _binary("add", a, b, np.add, lambda ad, bd, y: lambda g: (g, g))


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda ad, bd, y: lambda g: (g, -g))


def mul(a, b):
    return _binary("mul", a, b, np.multiply, lambda ad, bd, y: lambda g: (g * bd, g * ad))


def div(a, b):
    return _binary("div", a, b, np.divide,
                   lambda ad, bd, y: lambda g: (g / bd, -g * ad / (bd * bd)))


def where(cond, a, b):
    """Select ``a`` where a constant boolean mask holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    if not (cond.shape == a.data.shape == b.data.shape):
        raise ShapeError("where", cond.shape, a.data.shape, b.data.shape)
    out = Tensor(np.where(cond, a.data, b.data))
    tape = _active_for(a, b)
    if tape is None:
        return out
    zero = np.zeros((), dtype=out.data.dtype)
    return _emit(tape, out, (a, b),
                 lambda g: (np.where(cond, g, zero), np.where(cond, zero, g)))


# --- elementwise unary ops ----------------------------------------------------

def _unary(op_name, x, fwd, dydx):
    """dydx(x_data, y_data) -> local derivative array."""
    x = as_tensor(x)
    out = Tensor(fwd(x.data))
    tape = _active_for(x)
    if tape is None:
        return out
    d = dydx(x.data, out.data)
    return _emit(tape, out, (x,), lambda g: (g * d,))


def neg(x):
    x = as_tensor(x)
    out = Tensor(-x.data)
    tape = _active_for(x)
    if tape is None:
        return out
    return _emit(tape, out, (x,), lambda g: (-g,))


def exp(x):
    return _unary("exp", x, np.exp, lambda xd, y: y)


def log(x):
    return _unary("log", x, np.log, lambda xd, y: 1.0 / xd)


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda xd, y: 0.5 / y)


def sin(x):
    return _unary("sin", x, np.sin, lambda xd, y: np.cos(xd))


def cos(x):
    return _unary("cos", x, np.cos, lambda xd, y: -np.sin(xd))


def relu(x):
    return _unary("relu", x, lambda xd: np.maximum(xd, 0),
                  lambda xd, y: (xd > 0).astype(xd.dtype))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows; the two branches share it
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x):
    return _unary("sigmoid", x, _sigmoid_np, lambda xd, y: y * (1.0 - y))


def softplus(x):
    return _unary("softplus", x, lambda xd: np.logaddexp(np.zeros((), dtype=xd.dtype), xd),
                  lambda xd, y: _sigmoid_np(xd))


def silu(x):
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    out = Tensor(x.data * s)
    tape = _active_for(x)
    if tape is None:
        return out
    xd = x.data
    return _emit(tape, out, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def pow_scalar(x, p):
    p = float(p)
    return _unary("pow", x, lambda xd: xd ** p, lambda xd, y: p * xd ** (p - 1.0))


# --- matmul -------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul", ad.shape, bd.shape)
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError("matmul", ad.shape, bd.shape)
    if ad.ndim > 2 and bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError("matmul", ad.shape, bd.shape)
    out = Tensor(np.matmul(ad, bd))
    tape = _active_for(a, b)
    if tape is None:
        return out

    def _vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit(tape, out, (a, b), _vjp)


# --- reductions ----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))
    tape = _active_for(x)
    if tape is None:
        return out
    shape = x.data.shape
    axes = _norm_axis(axis, x.data.ndim)

    def _vjp(g):
        if not keepdims:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
            g = g.reshape(kshape)
        return (np.broadcast_to(g, shape),)

    return _emit(tape, out, (x,), _vjp)


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.data.ndim)
    n = 1
    for a in axes:
        n *= x.data.shape[a]
    s = tsum(x, axis=axis, keepdims=keepdims)
    return mul(s, np.asarray(1.0 / n, dtype=x.data.dtype))


def exclusive_cumsum(x, axis=-1):
    """y[..., i] = sum of x[..., j] for j < i along ``axis``."""
    x = as_tensor(x)
    ax = axis % x.data.ndim
    cs = np.cumsum(x.data, axis=ax)
    y = np.zeros_like(x.data)
    head = [slice(None)] * x.data.ndim
    tail = [slice(None)] * x.data.ndim
    head[ax] = slice(1, None)
    tail[ax] = slice(None, -1)
    y[tuple(head)] = cs[tuple(tail)]
    out = Tensor(y)
    tape = _active_for(x)
    if tape is None:
        return out

    def _vjp(g):
        gf = np.flip(g, axis=ax)
        cs2 = np.cumsum(gf, axis=ax)
        gx = np.zeros_like(g)
        gx[tuple(head)] = cs2[tuple(tail)]
        return (np.flip(gx, axis=ax),)

    return _emit(tape, out, (x,), _vjp)


# --- shape ops ------------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    tape = _active_for(x)
    if tape is None:
        return out
    orig = x.data.shape
    return _emit(tape, out, (x,), lambda g: (g.reshape(orig),))


def transpose(x, axes=None):
    x = as_tensor(x)
    out = Tensor(np.transpose(x.data, axes))
    tape = _active_for(x)
    if tape is None:
        return out
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _emit(tape, out, (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape):
    """Explicit general broadcast; the adjoint sums over expanded axes."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        y = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", x.data.shape, shape) from None
    out = Tensor(np.ascontiguousarray(y))
    tape = _active_for(x)
    if tape is None:
        return out
    orig = x.data.shape
    extra = len(shape) - len(orig)
    sum_axes = tuple(range(extra)) + tuple(
        i + extra for i, s in enumerate(orig) if s == 1 and shape[i + extra] != 1
    )

    def _vjp(g):
        if sum_axes:
            g = g.sum(axis=sum_axes, keepdims=False)
        return (g.reshape(orig),)

    return _emit(tape, out, (x,), _vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % max(t.data.ndim for t in tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=ax))
    tape = _active_for(*tensors)
    if tape is None:
        return out
    sizes = [t.data.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _vjp(g):
        outs = []
        sl = [slice(None)] * g.ndim
        for i in range(len(sizes)):
            sl[ax] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _emit(tape, out, tuple(tensors), _vjp)


def stack(tensors, axis=0):
    if axis != 0:
        raise ValueError("stack only supports axis=0")
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, (1,) + t.data.shape) for t in tensors], axis=0)


def tslice(x, idx):
    """Basic indexing (ints, slices, Ellipsis); no advanced indexing."""
    x = as_tensor(x)
    out = Tensor(x.data[idx])
    tape = _active_for(x)
    if tape is None:
        return out
    shape = x.data.shape

    def _vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[idx] += g
        return (gx,)

    return _emit(tape, out, (x,), _vjp)


# --- gradient checking -----------------------------------------------------------

def grad_check(f, x, eps: float = 1e-5, rel_floor: float = 1e-6) -> float:
    """Max per-coordinate relative error of the tape gradient of ``f`` at ``x``
    against central finite differences.

    ``f`` takes a taped Tensor and returns a scalar Tensor; it must be
    deterministic. Per-coordinate denominators are floored at
    ``rel_floor`` times the gradient's max magnitude, so components far
    below the dominant scale are compared absolutely; coordinates where
    both gradients vanish contribute 0.
    """
    x = as_tensor(x)
    xd = np.array(x.data, dtype=np.float64)

    with Tape() as tape:
        xt = tape.watch(Tensor(xd))
        y = f(xt)
    if not np.all(np.isfinite(y.data)):
        raise NonFiniteError("grad_check: function value is not finite")
    tape.backward(y)
    g_tape = tape.grad(xt)

    flat = xd.reshape(-1)
    g_fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(xd)).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(xd)).data)
        flat[i] = orig
        g_fd[i] = (fp - fm) / (2.0 * eps)
    if not np.all(np.isfinite(g_fd)):
        raise NonFiniteError("grad_check: finite-difference gradient is not finite")
    g_fd = g_fd.reshape(xd.shape)

    denom = np.maximum(np.abs(g_tape), np.abs(g_fd))
    diff = np.abs(g_tape - g_fd)
    scale = max(1e-12, rel_floor * float(denom.max(initial=0.0)))
    rel = np.where(denom > scale, diff / np.maximum(denom, scale), 0.0)
    return float(rel.max(initial=0.0))
