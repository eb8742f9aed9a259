"""Small numpy tensor engine.

Reverse mode records primitives on a :class:`Tape` and replays adjoints in
reverse order. Forward mode carries a tangent array on each :class:`Tensor`
and propagates it eagerly. The two modes are kept apart: :func:`jvp` refuses
to run while a tape is recording, and a tape cannot be opened inside ``jvp``.

Values are float64 unless a :func:`precision` block selects float32.
"""
from __future__ import annotations

import threading
import warnings
from typing import Callable, Sequence

import numpy as np

SNAKE_EPS = 1e-9

_state = threading.local()


class ShapeError(ValueError):
    """Raised when a primitive receives non-conforming shapes."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op
        self.detail = detail


class ModeError(RuntimeError):
    """Raised when forward and reverse mode are interleaved."""


class UnusedParameterWarning(UserWarning):
    """A parameter passed to ``grad`` did not take part in the recorded loss."""


def _active_tape():
    return getattr(_state, "tape", None)


def _jvp_depth() -> int:
    return getattr(_state, "jvp_depth", 0)


def default_dtype():
    return getattr(_state, "dtype", np.float64)


class precision:
    """Context manager selecting the working float type for this thread.

    >>> with precision(np.float32):
    ...     y = Tensor([1.0]) * 2
    """

    def __init__(self, dtype):
        dtype = np.dtype(dtype)
        if dtype not in (np.float32, np.float64):
            raise ValueError(f"unsupported dtype {dtype}")
        self.dtype = dtype.type
        self._prev = None

    def __enter__(self):
        self._prev = default_dtype()
        _state.dtype = self.dtype
        return self

    def __exit__(self, *exc):
        _state.dtype = self._prev
        return False


class Tensor:
    """Float array with an optional forward-mode tangent and a tape node."""

    __slots__ = ("value", "tangent", "node")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to the Tensor methods

    def __init__(self, value, tangent=None):
        self.value = np.asarray(value, dtype=default_dtype())
        if tangent is not None:
            tangent = np.asarray(tangent, dtype=default_dtype())
            if tangent.shape != self.value.shape:
                raise ShapeError(
                    "Tensor", f"tangent shape {tangent.shape} != value shape {self.value.shape}"
                )
        self.tangent = tangent
        self.node = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        extra = ", tangent" if self.tangent is not None else ""
        return f"Tensor(shape={self.shape}{extra})"

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered computation record for one reverse-mode pass.

    Usage::

        with Tape() as tape:
            tape.watch(params)
            loss = f(params)
        grads = tape.gradient(loss, params)
    """

    def __init__(self):
        self._parents: list = []
        self._vjps: list = []
        self._released = False

    def __enter__(self) -> "Tape":
        if _jvp_depth():
            raise ModeError("cannot record gradients inside jvp")
        if _active_tape() is not None:
            raise ModeError("a tape is already recording on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def __len__(self) -> int:
        return len(self._parents)

    def _push(self, parents, vjp) -> int:
        if self._released:
            raise ModeError("tape already consumed by gradient()")
        self._parents.append(parents)
        self._vjps.append(vjp)
        return len(self._parents) - 1

    def watch(self, tensors: Sequence[Tensor]) -> None:
        for t in tensors:
            t.node = (self, self._push(None, None))

    def index(self, t: Tensor):
        node = t.node
        if node is None or node[0] is not self:
            return None
        return node[1]

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Adjoints of the scalar ``loss`` with respect to each of ``params``.

        Parameters that did not take part in the recorded loss get a zero
        gradient and trigger an :class:`UnusedParameterWarning`. The tape's
        saved intermediates are released afterwards.
        """
        loss = as_tensor(loss)
        if loss.value.size != 1:
            raise ShapeError("grad", f"loss must be scalar, got shape {loss.shape}")
        wanted: dict[int, list[int]] = {}
        for i, p in enumerate(params):
            idx = self.index(p)
            if idx is not None:
                wanted.setdefault(idx, []).append(i)
        out: list = [None] * len(params)
        root = self.index(loss)
        if root is not None:
            adj = {root: np.ones_like(loss.value)}
            for idx in range(root, -1, -1):
                g = adj.pop(idx, None)
                if g is None:
                    continue
                for i in wanted.get(idx, ()):
                    out[i] = np.array(g)
                vjp = self._vjps[idx]
                if vjp is None:
                    continue
                for p, gp in zip(self._parents[idx], vjp(g)):
                    if p is None or gp is None:
                        continue
                    prev = adj.get(p)
                    adj[p] = gp if prev is None else prev + gp
        missing = [i for i, g in enumerate(out) if g is None]
        for i in missing:
            out[i] = np.zeros_like(params[i].value)
        if missing:
            warnings.warn(
                f"{len(missing)} parameter(s) not in the computation record; zero gradient returned",
                UnusedParameterWarning,
                stacklevel=2,
            )
        self._vjps = []
        self._parents = []
        self._released = True
        return out


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Reverse-mode gradient of a scalar loss recorded on a tape."""
    loss = as_tensor(loss)
    if loss.value.size != 1:
        raise ShapeError("grad", f"loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        warnings.warn("loss was not recorded on a tape", UnusedParameterWarning, stacklevel=2)
        return [np.zeros_like(p.value) for p in params]
    return loss.node[0].gradient(loss, params)


def jvp(f: Callable, primals: Sequence, tangents: Sequence):
    """Evaluate ``f(*primals)`` and its directional derivative along ``tangents``.

    Returns ``(value, derivative)`` as numpy arrays. ``f`` must not record on a
    tape; parameters closed over by ``f`` carry no tangent and act as constants.
    """
    if _active_tape() is not None:
        raise ModeError("jvp cannot run while a gradient tape is recording")
    if len(primals) != len(tangents):
        raise ShapeError("jvp", f"{len(primals)} primals but {len(tangents)} tangents")
    args = []
    for p, t in zip(primals, tangents):
        p = np.asarray(p.value if isinstance(p, Tensor) else p, dtype=default_dtype())
        t = np.asarray(t, dtype=default_dtype())
        if t.shape != p.shape:
            t = np.broadcast_to(t, p.shape) if t.ndim == 0 else t
            if t.shape != p.shape:
                raise ShapeError("jvp", f"tangent shape {t.shape} != primal shape {p.shape}")
        args.append(Tensor(p, np.array(t)))
    _state.jvp_depth = _jvp_depth() + 1
    try:
        out = as_tensor(f(*args))
    finally:
        _state.jvp_depth -= 1
    deriv = out.tangent if out.tangent is not None else np.zeros_like(out.value)
    return out.value, deriv


def stop_gradient(x) -> Tensor:
    """Same values; no adjoint flows back and the tangent is dropped."""
    return Tensor(as_tensor(x).value)


# ---------------------------------------------------------------------------
# primitive plumbing


def _make(value: np.ndarray, inputs: tuple, vjp, jvp_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    dt = default_dtype()
    out.value = value if value.dtype == dt else value.astype(dt)
    out.tangent = None
    out.node = None
    if any(x.tangent is not None for x in inputs):
        tan = jvp_fn(*[x.tangent for x in inputs])
        if tan is not None:
            tan = np.asarray(tan, dtype=default_dtype())
            if tan.shape != value.shape:
                tan = np.array(np.broadcast_to(tan, value.shape))
        out.tangent = tan
    tape = _active_tape()
    if tape is not None:
        parents = tuple(tape.index(x) for x in inputs)
        if any(p is not None for p in parents):
            out.node = (tape, tape._push(parents, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _tsum(*parts):
    parts = [p for p in parts if p is not None]
    if not parts:
        return None
    acc = parts[0]
    for p in parts[1:]:
        acc = acc + p
    return acc


def _broadcast_value(op, a, b, fn):
    try:
        return fn(a.value, b.value)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    v = _broadcast_value("add", a, b, np.add)
    return _make(
        v, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        lambda ta, tb: _tsum(ta, tb),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    v = _broadcast_value("sub", a, b, np.subtract)
    return _make(
        v, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        lambda ta, tb: _tsum(ta, None if tb is None else -tb),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    v = _broadcast_value("mul", a, b, np.multiply)
    return _make(
        v, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        lambda ta, tb: _tsum(None if ta is None else ta * bv, None if tb is None else av * tb),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    v = _broadcast_value("div", a, b, np.divide)
    return _make(
        v, (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * v / bv, bv.shape)),
        lambda ta, tb: _tsum(None if ta is None else ta / bv, None if tb is None else -tb * v / bv),
    )


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make(-x.value, (x,), lambda g: (-g,), lambda t: -t)


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    v = xv ** p
    return _make(
        v, (x,),
        lambda g: (g * p * xv ** (p - 1),),
        lambda t: t * p * xv ** (p - 1),
    )


def exp(x) -> Tensor:
    x = as_tensor(x)
    v = np.exp(x.value)
    return _make(v, (x,), lambda g: (g * v,), lambda t: t * v)


def log(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _make(np.log(xv), (x,), lambda g: (g / xv,), lambda t: t / xv)


def sin(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _make(np.sin(xv), (x,), lambda g: (g * np.cos(xv),), lambda t: t * np.cos(xv))


def cos(x) -> Tensor:
    x = as_tensor(x)
    xv = x.value
    return _make(np.cos(xv), (x,), lambda g: (-g * np.sin(xv),), lambda t: -t * np.sin(xv))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    v = np.tanh(x.value)
    return _make(v, (x,), lambda g: (g * (1 - v * v),), lambda t: t * (1 - v * v))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = 1.0 / (1.0 + np.exp(-x.value))
    return _make(v, (x,), lambda g: (g * v * (1 - v),), lambda t: t * v * (1 - v))


def snakebeta(x, alpha, beta, axis: int = 1) -> Tensor:
    """x + sin^2(alpha*x) / (beta + eps), alpha and beta per channel along ``axis``."""
    x, alpha, beta = as_tensor(x), as_tensor(alpha), as_tensor(beta)
    axis = axis % x.ndim
    if alpha.ndim != 1 or beta.shape != alpha.shape or x.shape[axis] != alpha.shape[0]:
        raise ShapeError(
            "snakebeta",
            f"alpha {alpha.shape} / beta {beta.shape} must be ({x.shape[axis]},) for axis {axis} of {x.shape}",
        )
    bshape = [1] * x.ndim
    bshape[axis] = -1
    a = alpha.value.reshape(bshape)
    inv = 1.0 / (beta.value.reshape(bshape) + SNAKE_EPS)
    xv = x.value
    s = np.sin(a * xv)
    v = xv + inv * s * s
    red = tuple(i for i in range(x.ndim) if i != axis)
    ashape = alpha.shape

    def partials():
        s2 = np.sin(2 * a * xv) * inv
        return 1 + a * s2, xv * s2, -inv * inv * s * s

    def vjp(g):
        dx, da, db = partials()
        return g * dx, (g * da).sum(axis=red).reshape(ashape), (g * db).sum(axis=red).reshape(ashape)

    def jvp_fn(tx, ta, tb):
        dx, da, db = partials()
        return _tsum(
            None if tx is None else tx * dx,
            None if ta is None else ta.reshape(bshape) * da,
            None if tb is None else tb.reshape(bshape) * db,
        )

    return _make(v, (x, alpha, beta), vjp, jvp_fn)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = _norm_axes(axis, x.ndim)
    v = x.value.sum(axis=axes, keepdims=keepdims)

    def expand(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, shape)

    return _make(v, (x,), lambda g: (expand(g),), lambda t: t.sum(axis=axes, keepdims=keepdims))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axes, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    try:
        v = x.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {orig} into {tuple(shape)}") from None
    return _make(v, (x,), lambda g: (g.reshape(orig),), lambda t: t.reshape(shape))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", f"axes {axes} invalid for {x.ndim}-d input")
    inv = tuple(np.argsort(axes))
    return _make(x.value.transpose(axes), (x,), lambda g: (g.transpose(inv),), lambda t: t.transpose(axes))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros(shape, dtype=default_dtype())
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.value[idx], (x,), vjp, lambda t: t[idx])


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        v = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", f"shapes {[t.shape for t in tensors]} along axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def jvp_fn(*ts):
        return np.concatenate(
            [np.zeros(x.shape, dtype=default_dtype()) if t is None else t for x, t in zip(tensors, ts)], axis=axis
        )

    return _make(v, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)), jvp_fn)


def pad(x, widths) -> Tensor:
    """Zero padding; ``widths`` as for ``np.pad``."""
    x = as_tensor(x)
    widths = tuple(tuple(w) for w in widths)
    if len(widths) != x.ndim:
        raise ShapeError("pad", f"{len(widths)} pad pairs for {x.ndim}-d input")
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return _make(np.pad(x.value, widths), (x,), lambda g: (g[sl],), lambda t: np.pad(t, widths))


def zero_stuff(x, axis: int = 2, factor: int = 2) -> Tensor:
    """Insert ``factor - 1`` zeros between samples along ``axis`` (length n -> (n-1)*factor+1)."""
    x = as_tensor(x)
    n = x.shape[axis]
    shape = list(x.shape)
    shape[axis] = (n - 1) * factor + 1
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(None, None, factor)
    sl = tuple(sl)

    def up(a):
        out = np.zeros(shape, dtype=default_dtype())
        out[sl] = a
        return out

    return _make(up(x.value), (x,), lambda g: (g[sl],), up)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    v = e / e.sum(axis=axis, keepdims=True)
    return _make(
        v, (x,),
        lambda g: (v * (g - (g * v).sum(axis=axis, keepdims=True)),),
        lambda t: v * (t - (t * v).sum(axis=axis, keepdims=True)),
    )


# ---------------------------------------------------------------------------
# linear maps


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    try:
        v = np.matmul(av, bv)
    except ValueError:
        raise ShapeError("matmul", f"batch dims do not broadcast: {a.shape} @ {b.shape}") from None
    return _make(
        v, (a, b),
        lambda g: (
            _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape),
            _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape),
        ),
        lambda ta, tb: _tsum(
            None if ta is None else np.matmul(ta, bv),
            None if tb is None else np.matmul(av, tb),
        ),
    )


def conv2d(x, w, b=None, *, stride: int = 1, dilation: int = 1, padding: int = 0,
           causal: bool = True, groups: int = 1) -> Tensor:
    """2-D convolution over (frequency, time).

    ``x`` is (B, Cin, F, T) and ``w`` is (Cout, Cin // groups, kF, kT). The
    frequency axis takes symmetric zero ``padding`` and ``stride``; the time
    axis takes ``dilation`` and, when ``causal``, (kT - 1) * dilation zero
    frames on the left so that output frame n only sees input frames <= n.
    With ``causal=False`` the time axis is 'valid' (caller supplies history).
    ``groups`` is 1 or Cin (depth-wise).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-d input and weight, got {x.shape} and {w.shape}")
    B, Ci, F, T = x.shape
    Co, Cg, kF, kT = w.shape
    if groups not in (1, Ci) or Cg * groups != Ci or (groups > 1 and Co != Ci):
        raise ShapeError(
            "conv2d", f"channel mismatch: input {Ci} ch, weight {w.shape}, groups={groups}"
        )
    if b is not None:
        b = as_tensor(b)
        if b.shape != (Co,):
            raise ShapeError("conv2d", f"bias shape {b.shape} != ({Co},)")
    tp = (kT - 1) * dilation if causal else 0
    Fo = (F + 2 * padding - kF) // stride + 1
    To = T + tp - (kT - 1) * dilation
    if Fo < 1 or To < 1:
        raise ShapeError("conv2d", f"empty output for input {x.shape} with kernel {(kF, kT)}")
    K = kF * kT
    offsets = [(i, j * dilation) for i in range(kF) for j in range(kT)]
    fspan = stride * (Fo - 1) + 1
    pointwise = K == 1 and stride == 1 and padding == 0
    w2 = w.value.reshape(Co, Cg * K)

    def cols_of(xv):
        if pointwise:
            return xv[:, :, None, :, :To] if To != T else xv[:, :, None]
        xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (tp, 0))) if (padding or tp) else xv
        return np.stack([xp[:, :, i:i + fspan:stride, j:j + To] for i, j in offsets], axis=2)

    def apply(cols, wmat):
        n = cols.shape[0]
        if groups == 1:
            out = np.matmul(wmat, cols.reshape(n, Ci * K, Fo * To))
            return out.reshape(n, Co, Fo, To)
        return np.einsum("bckft,ck->bcft", cols, wmat)

    bval = None if b is None else b.value[None, :, None, None]
    inputs = (x, w) if b is None else (x, w, b)
    xt, wt = x.tangent, w.tangent
    if xt is not None and wt is None and (b is None or b.tangent is None):
        # stack value and tangent along batch: one im2col, one matmul
        both = apply(cols_of(np.concatenate([x.value, xt])), w2)
        v, tangent = both[:B], both[B:]
        cols = None
    else:
        cols = cols_of(x.value)
        v = apply(cols, w2)
        tangent = None
    if bval is not None:
        v = v + bval

    def get_cols():
        return cols if cols is not None else cols_of(x.value)

    def vjp(g):
        c = get_cols()
        if groups == 1:
            g2 = g.reshape(B, Co, Fo * To)
            gw = np.tensordot(g2, c.reshape(B, Ci * K, Fo * To), axes=([0, 2], [0, 2]))
            gcols = np.matmul(w2.T, g2).reshape(B, Ci, K, Fo, To)
        else:
            gw = np.einsum("bcft,bckft->ck", g, c)
            gcols = g[:, :, None] * w2[None, :, :, None, None]
        if pointwise:
            gx = gcols[:, :, 0]
            if To != T:
                gx = np.concatenate([gx, np.zeros((B, Ci, F, T - To), dtype=gx.dtype)], axis=3)
        else:
            gxp = np.zeros((B, Ci, F + 2 * padding, T + tp), dtype=default_dtype())
            for k, (i, j) in enumerate(offsets):
                gxp[:, :, i:i + fspan:stride, j:j + To] += gcols[:, :, k]
            gx = gxp[:, :, padding:padding + F, tp:tp + T]
        grads = (gx, gw.reshape(w.shape))
        if b is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    def jvp_fn(tx, tw, tb=None):
        if tangent is not None:
            return tangent
        c = get_cols()
        parts = [
            None if tx is None else apply(cols_of(tx), w2),
            None if tw is None else apply(c, tw.reshape(Co, Cg * K)),
            None if tb is None else np.broadcast_to(tb[None, :, None, None], v.shape),
        ]
        return _tsum(*parts)

    return _make(v, inputs, vjp, jvp_fn)


def conv1d(x, w, b=None, *, dilation: int = 1, causal: bool = True) -> Tensor:
    """Causal 1-D convolution: x (B, Cin, T), w (Cout, Cin, k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError("conv1d", f"expected 3-d input and weight, got {x.shape} and {w.shape}")
    B, Ci, T = x.shape
    Co, Cg, k = w.shape
    out = conv2d(
        reshape(x, (B, Ci, 1, T)), reshape(w, (Co, Cg, 1, k)), b,
        dilation=dilation, causal=causal,
    )
    return reshape(out, (B, Co, out.shape[-1]))
