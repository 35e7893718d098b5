"""Dense tensors with a define-by-run reverse-mode gradient tape.

Storage is ``float32`` by default; every op preserves the dtype of its
inputs, so the same code runs in ``float64`` for finite-difference checks.
Reductions and the row-softmax accumulate in ``float64``.

Ops record onto the innermost active :class:`Tape`. Outside a tape they
compute values only, which is how frozen-encoder inference runs.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "DegenerateVectorError",
    "tensor",
    "matmul",
    "add",
    "mul",
    "scale",
    "relu",
    "exp",
    "log",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "transpose",
    "l2_normalize",
    "softmax_cross_rows",
    "conv2d",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class DegenerateVectorError(ValueError):
    def __init__(self, row: int, norm: float):
        super().__init__(f"row {row} has norm {norm:.3e}, at or below the normalization floor")
        self.row = row


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records ops in creation order; consumed by a single backward pass.

    Creation order is a valid topological order, so the backward sweep is a
    plain reversed walk. Tapes are thread-confined.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _record(self, inputs, output: Tensor, backward_fn) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a consumed tape")
        output._tape = self
        self.nodes.append(_Node(inputs, output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward called twice on the same tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            for t in node.inputs:
                if t.requires_grad:
                    leaves[id(t)] = t
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for t, g in zip(node.inputs, node.backward_fn(g_out)):
                if g is None or not _needs_grad(t):
                    continue
                key = id(t)
                grads[key] = grads[key] + g if key in grads else g
        for key, t in leaves.items():
            g = grads.get(key)
            g = np.zeros_like(t.data) if g is None else g.astype(t.data.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g
        self.nodes = []


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._tape is not None


def _as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    _check_finite(op, data)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(_needs_grad(t) for t in inputs):
        tape._record(tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _result_dtype(*ts: Tensor):
    return np.result_type(*[t.data.dtype for t in ts])


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return _make("matmul", A @ B, (a, b), bw)


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add shape mismatch: {a.shape} and {b.shape}") from None
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make("add", out, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul shape mismatch: {a.shape} and {b.shape}") from None
    A, B = a.data, b.data

    def bw(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _make("mul", out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c_ = a.data.dtype.type(c)

    def bw(g):
        return (g * c_,)

    return _make("scale", a.data * c_, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _make("relu", a.data * mask, (a,), bw)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make("exp", out, (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    A = a.data

    def bw(g):
        return (g / A,)

    return _make("log", np.log(A), (a,), bw)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.dtype)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _make("reduce_sum", np.asarray(out), (a,), bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, dtype=np.float64, keepdims=keepdims).astype(a.dtype)
    shape = a.shape
    count = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    inv = a.data.dtype.type(1.0 / count)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, shape).astype(g.dtype, copy=True),)

    return _make("reduce_mean", np.asarray(out), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape

    def bw(g):
        return (g.reshape(src),)

    return _make("reshape", a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")

    def bw(g):
        return (g.T,)

    return _make("transpose", a.data.T, (a,), bw)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit Euclidean norm."""
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize needs [n, d], got {x.shape}")
    norms = np.sqrt(np.sum(x.data.astype(np.float64) ** 2, axis=1))
    bad = np.nonzero(norms <= eps)[0]
    if bad.size:
        raise DegenerateVectorError(int(bad[0]), float(norms[bad[0]]))
    norms = norms.astype(x.dtype)[:, None]
    y = x.data / norms

    def bw(g):
        # (I - y y^T) g / ||x|| per row
        dot = np.sum(g * y, axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _make("l2_normalize", y, (x,), bw)


def softmax_cross_rows(logits: Tensor, targets: np.ndarray, exclude_diagonal: bool = True) -> Tensor:
    """Sum over rows of the cross-entropy between ``targets`` and the row softmax.

    Returns ``-sum_ij targets[i, j] * log softmax(logits[i])[j]``. With
    ``exclude_diagonal`` the softmax of row ``i`` runs over ``j != i`` only;
    ``targets`` must then be zero on the diagonal. Targets need not be
    normalized: a row of zeros contributes nothing.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_rows needs a matrix, got {logits.shape}")
    T = np.asarray(targets, dtype=np.float64)
    if T.shape != logits.shape:
        raise ShapeError(f"targets shape {T.shape} does not match logits {logits.shape}")
    n, m = logits.shape
    L = logits.data.astype(np.float64)
    if exclude_diagonal:
        if n != m:
            raise ShapeError("diagonal exclusion needs square logits")
        if np.any(np.diag(T) != 0):
            raise DomainError("targets must be zero on the excluded diagonal")
        L = L.copy()
        np.fill_diagonal(L, -np.inf)
        if n < 2:
            raise ShapeError("need at least two columns once the diagonal is excluded")
    row_max = np.max(L, axis=1, keepdims=True)
    shifted = L - row_max
    e = np.exp(shifted)
    denom = np.sum(e, axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    if exclude_diagonal:
        np.fill_diagonal(log_probs, 0.0)
    total = -np.sum(T * log_probs)
    probs = e / denom
    row_mass = np.sum(T, axis=1, keepdims=True)
    dtype = logits.dtype

    def bw(g):
        grad = (row_mass * probs - T) * float(g)
        return (grad.astype(dtype),)

    return _make("softmax_cross_rows", np.asarray(total, dtype=dtype), (logits,), bw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """NHWC convolution; ``w`` has shape [kh, kw, c_in, c_out]."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    X = x.data
    kh, kw, cin, cout = w.shape
    B, H, W, _ = X.shape
    Xp = np.pad(X, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")
    cols = np.empty((B, Ho, Wo, kh, kw, cin), dtype=X.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = Xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :]
    cols2 = cols.reshape(B * Ho * Wo, kh * kw * cin)
    Wm = w.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ Wm).reshape(B, Ho, Wo, cout)

    def bw(g):
        g2 = g.reshape(B * Ho * Wo, cout)
        dW = (cols2.T @ g2).reshape(w.shape)
        dcols = (g2 @ Wm.T).reshape(B, Ho, Wo, kh, kw, cin)
        dXp = np.zeros_like(Xp)
        for i in range(kh):
            for j in range(kw):
                dXp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += dcols[:, :, :, i, j, :]
        dX = dXp[:, padding : padding + H, padding : padding + W, :]
        return dX, dW

    return _make("conv2d", out, (x, w), bw)


# ---------------------------------------------------------------------------
# driving the tape


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            return
        raise TapeError("loss is not on an active tape")
    tape.backward(loss)


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-3) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` maps a tensor to a scalar tensor. The step actually taken is
    measured from the perturbed values, so it stays exact in any dtype.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape():
        y = f(xt)
        if not np.isfinite(y.data).all():
            raise NonFiniteError("f is non-finite at x")
        if y._tape is None:
            analytic = np.zeros_like(x0)
        else:
            backward(y)
            analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    flat = x0.reshape(-1)
    numeric = np.zeros(flat.size, dtype=np.float64)
    for k in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[k] = flat[k] + h
        xm[k] = flat[k] - h
        fp = f(Tensor(xp.reshape(x0.shape))).data
        fm = f(Tensor(xm.reshape(x0.shape))).data
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite value while probing coordinate {k}")
        numeric[k] = (float(fp) - float(fm)) / (float(xp[k]) - float(xm[k]))
    a = analytic.reshape(-1).astype(np.float64)
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a)))) if a.size else 0.0
