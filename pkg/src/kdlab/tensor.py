"""Reverse-mode autodiff on n-dimensional float64 arrays.

Every value in the lab (images, logits, probabilities, features) is a
:class:`Tensor`. Operations executed while a :class:`Tape` is active record
a node with a backward rule; :func:`backward` replays the tape in reverse
and accumulates gradients into the leaf tensors that requested them.
NumPy supplies the array arithmetic; the differentiation rules here are
written by hand and checked against central finite differences.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateBatchError,
    ParameterError,
    ShapeError,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LN_EPS = 1e-5
LOG_FLOOR = 1e-12

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def tune_allocator(threshold: int = 256 * 1024 * 1024) -> None:
    """Keep large heap blocks resident instead of returning them to the OS.

    Training reallocates the same multi-megabyte activation buffers every
    step; with glibc's default mmap threshold each one pays mmap plus page
    faults. Best effort: silently a no-op off glibc.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(ctypes.c_int(-3), ctypes.c_int(threshold))  # M_MMAP_THRESHOLD
        libc.mallopt(ctypes.c_int(-1), ctypes.c_int(threshold))  # M_TRIM_THRESHOLD
    except Exception:
        pass


class Tensor:
    """Float64 array with optional gradient accumulation.

    ``data`` is a C-contiguous (row-major) float64 ndarray. ``grad``, when
    populated by :func:`backward`, matches ``data``'s shape. Values are
    treated as immutable once created; only ``grad`` accumulates (and the
    optimizer, which owns its parameters, updates ``data`` in place between
    recorded steps).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Arithmetic sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis, keepdims)


class TapeNode:
    """One recorded operation: inputs, output, and its backward rule.

    Rules take d(loss)/d(output) and return one gradient (or None) per
    input. A rule must never mutate the incoming gradient array: adds and
    reshapes pass it through by reference, so it may be shared.
    """

    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor,
                 backward: Callable[[np.ndarray], tuple]):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Execution-ordered record of operations; use as a context manager.

    Nodes are appended in forward order, so the list is already
    topologically sorted: every node's inputs precede it.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()


class no_grad:
    """Context manager that suspends recording (teacher/eval passes)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()


_TAPE_STACK: list[Tape | None] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...],
          backward_rule: Callable[[np.ndarray], tuple]) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.nodes.append(TapeNode(inputs, out, backward_rule))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf's ``grad``.

    Repeated calls keep accumulating until grads are cleared; intermediate
    gradients live only inside this call.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        for tin, gin in zip(node.inputs, node.backward(gout)):
            if gin is None or not tin.requires_grad:
                continue
            key = id(tin)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                if not gin.flags["C_CONTIGUOUS"]:
                    gin = np.ascontiguousarray(gin)  # materialize broadcast views
                grads[key] = gin
                owners[key] = tin
    for key, g in grads.items():
        leaf = owners[key]
        leaf.grad = g if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data + s, (a,), lambda g: (g,))
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    # bias-style broadcast: b's shape must match a's trailing extents
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        lead = tuple(range(a.ndim - b.ndim))
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add: cannot combine shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data - s, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes differ: {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data * s, (a,), lambda g: (g * s,))
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ: {a.shape} vs {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-d matrix product; backward is dA = g Bᵀ, dB = Aᵀ g."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} x {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over matching leading (batch) axes."""
    if a.ndim < 3 or a.ndim != b.ndim:
        raise ShapeError(f"bmm expects stacked matrices, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} x {b.shape}")

    def rule(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(np.matmul(a.data, b.data), (a, b), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    old = x.shape
    return _make(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(int(i) for i in np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    ndim = parts[0].ndim
    for p in parts[1:]:
        if p.ndim != ndim:
            raise ShapeError("concat: rank mismatch")
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1].tolist()

    def rule(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, cuts, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis),
                 tuple(parts), rule)


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """Fixed-index slice along one axis (the axis is removed)."""
    if not 0 <= index < x.shape[axis]:
        raise ShapeError(f"select: index {index} out of range for axis {axis} of {x.shape}")

    def rule(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _make(np.take(x.data, index, axis=axis), (x,), rule)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        view = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot expand {x.shape} to {shape}") from exc
    extra = len(shape) - x.ndim
    axes = tuple(range(extra)) + tuple(
        extra + i for i in range(x.ndim) if x.shape[i] == 1 and shape[extra + i] != 1
    )
    xshape = x.shape

    def rule(g):
        return ((g.sum(axis=axes) if axes else g).reshape(xshape),)

    return _make(view, (x,), rule)


def _norm_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    xshape = x.shape

    def rule(g):
        if not keepdims and x.ndim:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, xshape),)

    return _make(x.data.sum(axis=axes or None, keepdims=keepdims), (x,), rule)


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    inv = 1.0 / count
    xshape = x.shape

    def rule(g):
        if not keepdims and x.ndim:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * inv, xshape),)

    return _make(x.data.mean(axis=axes or None, keepdims=keepdims), (x,), rule)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # derivative at exactly 0 is defined as 0
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """x·Φ(x) via the tanh approximation; smooth everywhere.

    Assembled with in-place ufuncs: this runs inside every MLP, and stray
    large temporaries dominate its cost. The derivative is finished here
    too, so backward is a single multiply.
    """
    v = x.data
    v2 = v * v
    th = v2 * _GELU_A
    th += 1.0
    th *= v
    th *= _GELU_C
    np.tanh(th, out=th)
    half = th + 1.0
    half *= 0.5
    out = v * half
    v2 *= 3.0 * _GELU_A  # v2 becomes (1 + 3 A v^2)
    v2 += 1.0
    th *= th  # th becomes the sech^2 chain: (1 - tanh^2 u)
    np.subtract(1.0, th, out=th)
    th *= v2
    th *= v
    th *= 0.5 * _GELU_C
    th += half  # th is now d(gelu)/dx
    deriv = th

    def rule(g):
        return (g * deriv,)

    return _make(out, (x,), rule)


def log(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log with the argument clamped below at ``floor``."""
    clamped = np.maximum(x.data, floor)
    mask = x.data > floor

    def rule(g):
        return (g * mask / clamped,)

    return _make(np.log(clamped), (x,), rule)


def softmax_t(logits: Tensor, t: float) -> Tensor:
    """Temperature-scaled softmax over the last axis.

    Logits are divided by ``t`` and shifted by the row max before
    exponentiation, so rows sum to 1 without overflow for any finite input.
    """
    t = float(t)
    if t <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {t}")
    y = logits.data * (1.0 / t)
    y -= y.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)
    inv_t = 1.0 / t

    def rule(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        out = g - dot
        out *= y
        out *= inv_t
        return (out,)

    return _make(y, (logits,), rule)


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(ls)

    def rule(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(ls, (logits,), rule)


# ---------------------------------------------------------------------------
# convolution and normalization


def conv2d(x: Tensor, w: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with FCkk kernels plus bias.

    im2col uses a channels-first column layout so forward, d(w), and
    d(cols) are each one large GEMM.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and FCkk kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cw}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {f} filters")
    stride = int(stride)
    padding = int(padding)
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d: stride {stride} / padding {padding} invalid")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if padding:
        xp = np.zeros((n, c, hp, wp))
        xp[:, :, padding:padding + h, padding:padding + wd] = x.data
    else:
        xp = x.data
    cols = np.empty((c, kh, kw, n, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * oh:stride,
                               j:j + stride * ow:stride].transpose(1, 0, 2, 3)
    cols2 = cols.reshape(c * kh * kw, n * oh * ow)
    w2 = w.data.reshape(f, -1)
    out = (w2 @ cols2).reshape(f, n, oh, ow).transpose(1, 0, 2, 3) \
        + bias.data.reshape(1, f, 1, 1)

    def rule(g):
        gl = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * oh * ow)
        db = g.sum(axis=(0, 2, 3))
        dw = (gl @ cols2.T).reshape(w.shape)
        dcols = (w2.T @ gl).reshape(c, kh, kw, n, oh, ow)
        dxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride,
                    j:j + stride * ow:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
        dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        return (dx, dw, db)

    return _make(out, (x, w, bias), rule)


class RunningStats:
    """Per-channel running mean/variance used by batchnorm in eval mode."""

    def __init__(self, channels: int):
        self.mean = Tensor(np.zeros(channels))
        self.var = Tensor(np.ones(channels))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running: RunningStats, mode: str = "train") -> Tensor:
    """Per-channel batch normalization over (N, H, W), epsilon 1e-5.

    Train mode normalizes by batch statistics (biased variance) and updates
    ``running`` with momentum 0.1; eval mode normalizes by ``running``.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine shapes {gamma.shape}/{beta.shape} != ({c},)")
    if mode not in ("train", "eval"):
        raise ParameterError(f"batchnorm2d: unknown mode {mode!r}")
    train = mode == "train"
    if train:
        m = n * h * w
        if m < 2:
            raise DegenerateBatchError(
                f"batchnorm2d needs at least 2 elements per channel in train mode, got {m}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running.mean.data[...] = (1 - BN_MOMENTUM) * running.mean.data + BN_MOMENTUM * mu
        running.var.data[...] = (1 - BN_MOMENTUM) * running.var.data + BN_MOMENTUM * var
    else:
        mu = running.mean.data
        var = running.var.data
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = x.data - mu.reshape(1, c, 1, 1)
    xhat *= inv.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1)
    out += beta.data.reshape(1, c, 1, 1)

    def rule(g):
        t = g * xhat
        dgamma = t.sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gh = g * gamma.data.reshape(1, c, 1, 1)
        if train:
            np.multiply(gh, xhat, out=t)
            dot = t.mean(axis=(0, 2, 3), keepdims=True)
            dx = gh - gh.mean(axis=(0, 2, 3), keepdims=True)
            np.multiply(xhat, dot, out=t)
            dx -= t
            dx *= inv.reshape(1, c, 1, 1)
        else:
            gh *= inv.reshape(1, c, 1, 1)
            dx = gh
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), rule)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize over the last axis (variance uses 1/d), then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: affine shapes {gamma.shape}/{beta.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = x.data - mu
    xhat *= inv
    out = xhat * gamma.data
    out += beta.data
    lead = tuple(range(x.ndim - 1))

    def rule(g):
        t = g * xhat
        dgamma = t.sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gh = g * gamma.data
        np.multiply(gh, xhat, out=t)
        dot = t.mean(axis=-1, keepdims=True)
        dx = gh - gh.mean(axis=-1, keepdims=True)
        np.multiply(xhat, dot, out=t)
        dx -= t
        dx *= inv
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    Relative error per element is |analytic − numeric| divided by
    max(1, |analytic|, |numeric|). ``f`` must be scalar-valued and is
    re-evaluated with elementwise perturbations of ``x``.
    """
    prev_rg, prev_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    try:
        with Tape() as tape:
            out = f(x)
            if out.size != 1:
                raise ContractError(f"grad_check needs a scalar function, got {out.shape}")
            backward(tape, out)
        analytic = (np.zeros_like(x.data) if x.grad is None else x.grad).reshape(-1).copy()
        flat = x.data.reshape(-1)
        numeric = np.empty_like(analytic)
        with no_grad():
            for i in range(flat.size):
                v = flat[i]
                flat[i] = v + eps
                hi = f(x).item()
                flat[i] = v - eps
                lo = f(x).item()
                flat[i] = v
                numeric[i] = (hi - lo) / (2.0 * eps)
    finally:
        x.requires_grad = prev_rg
        x.grad = prev_grad
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
