"""Reverse-mode differentiation over a recorded operation list.

Values are float64 numpy arrays wrapped in :class:`Var`. While a
:class:`Tape` is active (used as a context manager), every op appends its
output to the tape in execution order, so the backward pass is a single
reverse sweep over that list and ``replay`` recomputes the whole forward
pass in order. Outside a tape the same ops compute eagerly and record
nothing, so forward-only code paths (sampling, inversion, grid scoring)
pay no differentiation cost.

Gradients are never mutated in place: accumulation always rebinds
``var.grad``, so shared cotangent arrays stay valid.
"""

from __future__ import annotations

import numpy as np

_STACK: list["Tape"] = []


def active_tape():
    return _STACK[-1] if _STACK else None


class Var:
    """A node holding a float64 array, its gradient slot, and closures."""

    __slots__ = ("value", "grad", "requires_grad", "_backward", "_recompute")

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._recompute = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Param(Var):
    """A named leaf with requires_grad set; owns exactly one gradient slot."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


class Tape:
    """Execution-ordered record of ops from one forward pass."""

    def __init__(self):
        self.ops: list[Var] = []

    def __enter__(self):
        _STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _STACK.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted")
        return False

    def backward(self, out: Var, seed=1.0, wrt=()):
        """Reverse sweep from ``out`` seeded with cotangent ``seed``.

        Clears every gradient slot reachable from this tape (and the
        explicit ``wrt`` leaves) first, so repeated sweeps over one
        recorded graph stay independent. Returns the gradient for each
        entry of ``wrt``, substituting zeros where nothing flowed.
        """
        for v in self.ops:
            v.grad = None
        for p in wrt:
            p.grad = None
        out.grad = np.broadcast_to(
            np.asarray(seed, dtype=np.float64), out.value.shape
        ).copy()
        for v in reversed(self.ops):
            if v._backward is not None and v.grad is not None:
                v._backward(v.grad)
        return [p.grad if p.grad is not None else np.zeros_like(p.value) for p in wrt]

    def replay(self):
        """Recompute every recorded op in order; leaves feed current values."""
        for v in self.ops:
            if v._recompute is not None:
                v._recompute()


def _record(value, inputs, backward, recompute) -> Var:
    tape = active_tape()
    req = any(i.requires_grad for i in inputs)
    out = Var(value, requires_grad=req and tape is not None)
    if tape is not None:
        out._recompute = recompute
        if out.requires_grad:
            out._backward = backward
        tape.ops.append(out)
    return out


def _add_grad(var: Var, g):
    if not var.requires_grad:
        return
    # rebind, never in-place: g may alias another node's grad
    var.grad = g if var.grad is None else var.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along axes broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def const(x) -> Var:
    return Var(x)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_var(a), as_var(b)

    def bw(g, out=None):
        _add_grad(a, _unbroadcast(g, a.value.shape))
        _add_grad(b, _unbroadcast(g, b.value.shape))

    out = _record(a.value + b.value, (a, b), bw, None)
    out._recompute = lambda: out.value.__setitem__(..., a.value + b.value) if out.value.ndim else _reset(out, lambda: a.value + b.value)
    out._recompute = _mk_recompute(out, lambda: a.value + b.value)
    return out


def _reset(out, f):
    out.value = np.asarray(f(), dtype=np.float64)


def _mk_recompute(out, f):
    def rc():
        out.value = np.asarray(f(), dtype=np.float64)

    return rc


def sub(a, b):
    a, b = as_var(a), as_var(b)

    def bw(g):
        _add_grad(a, _unbroadcast(g, a.value.shape))
        _add_grad(b, _unbroadcast(-g, b.value.shape))

    out = _record(a.value - b.value, (a, b), bw, None)
    out._recompute = _mk_recompute(out, lambda: a.value - b.value)
    return out


def mul(a, b):
    a, b = as_var(a), as_var(b)

    def bw(g):
        _add_grad(a, _unbroadcast(g * b.value, a.value.shape))
        _add_grad(b, _unbroadcast(g * a.value, b.value.shape))

    out = _record(a.value * b.value, (a, b), bw, None)
    out._recompute = _mk_recompute(out, lambda: a.value * b.value)
    return out


def div(a, b):
    a, b = as_var(a), as_var(b)

    def bw(g):
        _add_grad(a, _unbroadcast(g / b.value, a.value.shape))
        _add_grad(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    out = _record(a.value / b.value, (a, b), bw, None)
    out._recompute = _mk_recompute(out, lambda: a.value / b.value)
    return out


def neg(a):
    a = as_var(a)

    def bw(g):
        _add_grad(a, -g)

    out = _record(-a.value, (a,), bw, None)
    out._recompute = _mk_recompute(out, lambda: -a.value)
    return out


# ---------------------------------------------------------------------------
# transcendental


def exp(a):
    a = as_var(a)
    val = np.exp(a.value)

    def bw(g):
        _add_grad(a, g * out.value)

    out = _record(val, (a,), bw, None)
    out._recompute = _mk_recompute(out, lambda: np.exp(a.value))
    return out


def log(a):
    a = as_var(a)

    def bw(g):
        _add_grad(a, g / a.value)

    out = _record(np.log(a.value), (a,), bw, None)
    out._recompute = _mk_recompute(out, lambda: np.log(a.value))
    return out


def log1p(a):
    a = as_var(a)

    def bw(g):
        _add_grad(a, g / (1.0 + a.value))

    out = _record(np.log1p(a.value), (a,), bw, None)
    out._recompute = _mk_recompute(out, lambda: np.log1p(a.value))
    return out


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on raw arrays."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    a = as_var(a)

    def bw(g):
        _add_grad(a, g * sigmoid_values(np.asarray(a.value)))

    out = _record(np.logaddexp(0.0, a.value), (a,), bw, None)
    out._recompute = _mk_recompute(out, lambda: np.logaddexp(0.0, a.value))
    return out


def elu(a, alpha: float = 1.0):
    """Exponential linear unit; x >= 0 takes the identity branch."""
    a = as_var(a)

    def fwd():
        return np.where(a.value >= 0, a.value, alpha * np.expm1(a.value))

    def bw(g):
        d1 = np.where(a.value >= 0, 1.0, alpha * np.exp(a.value))
        _add_grad(a, g * d1)

    out = _record(fwd(), (a,), bw, None)
    out._recompute = _mk_recompute(out, fwd)
    return out


def elu_prime(a, alpha: float = 1.0):
    """First derivative of ELU as a differentiable op (x >= 0 gives 1)."""
    a = as_var(a)

    def fwd():
        return np.where(a.value >= 0, 1.0, alpha * np.exp(a.value))

    def bw(g):
        d2 = np.where(a.value >= 0, 0.0, alpha * np.exp(a.value))
        _add_grad(a, g * d2)

    out = _record(fwd(), (a,), bw, None)
    out._recompute = _mk_recompute(out, fwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands")

    def bw(g):
        _add_grad(a, g @ b.value.T)
        _add_grad(b, a.value.T @ g)

    out = _record(a.value @ b.value, (a, b), bw, None)
    out._recompute = _mk_recompute(out, lambda: a.value @ b.value)
    return out


def bmm(a, b):
    """Batched matmul over stacks of matrices: (n,i,j) @ (n,j,k)."""
    a, b = as_var(a), as_var(b)
    if a.value.ndim != 3 or b.value.ndim != 3:
        raise ValueError("bmm expects 3-D operands")

    def bw(g):
        _add_grad(a, g @ b.value.transpose(0, 2, 1))
        _add_grad(b, a.value.transpose(0, 2, 1) @ g)

    out = _record(a.value @ b.value, (a, b), bw, None)
    out._recompute = _mk_recompute(out, lambda: a.value @ b.value)
    return out


def transpose(a, axes=None):
    a = as_var(a)
    ax = axes if axes is not None else tuple(reversed(range(a.value.ndim)))
    inv = np.argsort(ax)

    def bw(g):
        _add_grad(a, g.transpose(inv))

    out = _record(a.value.transpose(ax), (a,), bw, None)
    out._recompute = _mk_recompute(out, lambda: a.value.transpose(ax))
    return out


def reshape(a, shape):
    a = as_var(a)

    def bw(g):
        _add_grad(a, g.reshape(a.value.shape))

    out = _record(a.value.reshape(shape), (a,), bw, None)
    out._recompute = _mk_recompute(out, lambda: a.value.reshape(shape))
    return out


def index(a, key):
    """Static basic-slice read; backward scatters into the sliced region."""
    a = as_var(a)

    def bw(g):
        ga = np.zeros_like(a.value)
        ga[key] += g
        _add_grad(a, ga)

    out = _record(np.array(a.value[key]), (a,), bw, None)
    out._recompute = _mk_recompute(out, lambda: np.array(a.value[key]))
    return out


def vsum(a, axis=None, keepdims: bool = False):
    a = as_var(a)

    def bw(g):
        if axis is None:
            _add_grad(a, np.broadcast_to(g, a.value.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _add_grad(a, np.broadcast_to(ge, a.value.shape).copy())

    out = _record(a.value.sum(axis=axis, keepdims=keepdims), (a,), bw, None)
    out._recompute = _mk_recompute(out, lambda: a.value.sum(axis=axis, keepdims=keepdims))
    return out


def vmean(a, axis=None):
    a = as_var(a)
    n = a.value.size if axis is None else a.value.shape[axis]

    def bw(g):
        if axis is None:
            _add_grad(a, np.broadcast_to(g / n, a.value.shape).copy())
        else:
            _add_grad(a, np.broadcast_to(np.expand_dims(g, axis) / n, a.value.shape).copy())

    out = _record(a.value.mean(axis=axis), (a,), bw, None)
    out._recompute = _mk_recompute(out, lambda: a.value.mean(axis=axis))
    return out


def masked_conv2d(x, kernel, bias, mask: np.ndarray):
    """Same-padded 2-D convolution with a fixed binary kernel mask.

    ``x`` is (n, C, H, W), ``kernel`` (O, C, kh, kw), ``bias`` (O,) or None.
    The mask multiplies the kernel at apply time so masked taps never
    influence outputs and receive exactly zero gradient.
    """
    x, kernel = as_var(x), as_var(kernel)
    n, c, h, w = x.value.shape
    o, c2, kh, kw = kernel.value.shape
    if c2 != c:
        raise ValueError(f"kernel expects {c2} input channels, got {c}")
    if kh % 2 != 1 or kw % 2 != 1:
        raise ValueError("kernel sides must be odd")
    ph, pw = kh // 2, kw // 2
    inputs = [x, kernel]
    if bias is not None:
        bias = as_var(bias)
        inputs.append(bias)

    def fwd():
        km = kernel.value * mask
        xp = np.pad(x.value, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        out_val = np.zeros((n, o, h, w))
        for i in range(kh):
            for j in range(kw):
                out_val += np.einsum(
                    "oc,nchw->nohw", km[:, :, i, j], xp[:, :, i : i + h, j : j + w]
                )
        if bias is not None:
            out_val += bias.value[None, :, None, None]
        return out_val

    def bw(g):
        km = kernel.value * mask
        xp = np.pad(x.value, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        gk = np.zeros_like(kernel.value)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i : i + h, j : j + w]
                gk[:, :, i, j] = np.einsum("nohw,nchw->oc", g, patch)
                gxp[:, :, i : i + h, j : j + w] += np.einsum(
                    "oc,nohw->nchw", km[:, :, i, j], g
                )
        _add_grad(kernel, gk * mask)
        _add_grad(x, gxp[:, :, ph : ph + h, pw : pw + w])
        if bias is not None:
            _add_grad(bias, g.sum(axis=(0, 2, 3)))

    out = _record(fwd(), tuple(inputs), bw, None)
    out._recompute = _mk_recompute(out, fwd)
    return out
