"""Dense tensors with reverse-mode automatic differentiation.

Every operation records its inputs and an adjoint closure on the output
node, so the implicit tape is the operation graph itself: nodes appear in
the order they were executed, inputs always precede outputs, and
``Tensor.backward`` replays the adjoints in reverse topological order,
visiting each node exactly once per call.

Conventions:

- values are stored row-major as numpy arrays, float64 by default
  (``set_precision`` switches new tensors to float32 for faster training;
  verification requires float64);
- tensors are treated as immutable once they enter a graph; leaf
  parameters may be mutated *between* graphs (that is how the optimizer
  and the finite-difference harness work);
- ``backward`` accumulates into ``.grad``: calling it twice without
  zeroing doubles the gradients;
- a tape and its backward pass belong to one thread, independent graphs
  may run concurrently.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericalError

LOG_EPS = 1e-12

_default_dtype = np.float64
_grad_enabled = True
_debug_checks = False


def set_precision(dtype: str) -> None:
    """Select the scalar type for newly created tensors ("float64" or "float32")."""
    global _default_dtype
    if dtype not in ("float64", "float32"):
        raise ValueError(f"unsupported precision {dtype!r}")
    _default_dtype = np.float64 if dtype == "float64" else np.float32


def get_precision() -> str:
    return "float64" if _default_dtype is np.float64 else "float32"


def set_debug_checks(enabled: bool) -> None:
    """When enabled, every forward op asserts its output is finite."""
    global _debug_checks
    _debug_checks = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block (cheap inference-only forwards)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """An n-dimensional array with an optional gradient slot.

    ``values`` is the payload, ``grad`` (same shape, filled by backward)
    holds d(loss)/d(self), and ``requires_grad`` marks leaves the user
    wants gradients for. Non-leaf tensors keep references to their parents
    plus an adjoint closure; that record is what backward replays.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_adjoint")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=_default_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A view of the same values cut out of the graph (receives no grad)."""
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # same-shape arithmetic sugar; everything else lives as module functions
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def backward(self) -> None:
        """Populate ``grad`` on every tensor this scalar depends on.

        The graph is walked once in reverse topological order; per-node
        adjoints are aggregated in a scratch table and only added to the
        persistent ``.grad`` slots at the end, so repeated calls accumulate
        exactly one d(loss)/d(param) each.
        """
        if self.values.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")

        order = _toposort(self)
        table: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            out_grad = table.pop(id(node), None)
            if out_grad is None:
                continue
            if node.grad is None:
                node.grad = out_grad.copy()
            else:
                node.grad = node.grad + out_grad
            if node._adjoint is None:
                continue
            for parent, contrib in zip(node._parents, node._adjoint(out_grad)):
                if contrib is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in table:
                    table[key] = table[key] + contrib
                else:
                    table[key] = contrib


def _toposort(root: Tensor) -> list[Tensor]:
    """Iterative post-order over parents; inputs always precede their consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _node(values: np.ndarray, parents: Iterable[Tensor], adjoint) -> Tensor:
    """Wrap an op result; record parents/adjoint only when grads can flow."""
    if _debug_checks and not np.all(np.isfinite(values)):
        raise NumericalError("non-finite values produced by a forward op")
    parents = tuple(parents)
    out = Tensor(values, requires_grad=_grad_enabled and any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._adjoint = adjoint
    return out


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _node(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _node(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    av, bv = a.values, b.values
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(t.values * c, (t,), lambda g: (g * c,))


def shift(t: Tensor, c: float) -> Tensor:
    """Add a plain constant to every entry."""
    return _node(t.values + float(c), (t,), lambda g: (g,))


def mul_scalar(t: Tensor, s: Tensor) -> Tensor:
    """Multiply by a single-element tensor (the one broadcast the model needs)."""
    if s.values.size != 1:
        raise DimensionError(f"mul_scalar: scalar operand has shape {s.shape}")
    sv = float(s.values.reshape(-1)[0])
    tv = t.values

    def adjoint(g):
        return g * sv, np.sum(g * tv).reshape(s.shape)

    return _node(tv * sv, (t, s), adjoint)


def reciprocal(t: Tensor) -> Tensor:
    out = 1.0 / t.values
    return _node(out, (t,), lambda g: (-g * out * out,))


def relu(t: Tensor) -> Tensor:
    mask = t.values > 0
    return _node(np.where(mask, t.values, 0.0), (t,), lambda g: (g * mask,))


def sigmoid(t: Tensor) -> Tensor:
    # split by sign so exp never overflows
    v = t.values
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                   np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return _node(out, (t,), lambda g: (g * out * (1.0 - out),))


def log(t: Tensor) -> Tensor:
    """Natural log with the input clamped below at LOG_EPS.

    Keeps saturated sigmoid outputs finite inside cross-entropy terms; the
    gradient is zero in the clamped region (the forward value is constant
    there), 1/x elsewhere.
    """
    clamped = np.maximum(t.values, LOG_EPS)
    active = t.values >= LOG_EPS
    return _node(np.log(clamped), (t,), lambda g: (np.where(active, g / clamped, 0.0),))


def sqrt(t: Tensor) -> Tensor:
    out = np.sqrt(t.values)
    return _node(out, (t,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = t.shape
    if int(np.prod(shape)) != t.values.size:
        raise DimensionError(f"reshape: cannot view {orig} as {tuple(shape)}")
    return _node(t.values.reshape(shape), (t,), lambda g: (g.reshape(orig),))


def transpose(t: Tensor) -> Tensor:
    if t.values.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {t.shape}")
    return _node(t.values.T.copy(), (t,), lambda g: (g.T,))


def sum_all(t: Tensor) -> Tensor:
    shape = t.shape
    return _node(t.values.sum(keepdims=False).reshape(()), (t,),
                 lambda g: (np.broadcast_to(g, shape).copy() if shape else g,))


def add_bias(t: Tensor, bias: Tensor) -> Tensor:
    """Broadcast-add a vector over the last axis (linear/conv bias)."""
    if bias.values.ndim != 1 or t.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: shapes {t.shape} and {bias.shape} do not align")
    axes = tuple(range(t.values.ndim - 1))
    return _node(t.values + bias.values, (t, bias), lambda g: (g, g.sum(axis=axes)))


# ---------------------------------------------------------------------------
# linear algebra and spatial ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    av, bv = a.values, b.values
    return _node(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def softmax_rows(t: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, stabilized by subtracting the row max."""
    if t.values.ndim != 2:
        raise DimensionError(f"softmax_rows: expected a matrix, got shape {t.shape}")
    z = t.values - t.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def adjoint(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _node(p, (t,), adjoint)


def conv2d(f: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of an H x W x Cin map with a kh x kw x Cin x Cout kernel."""
    if f.values.ndim != 3 or kernel.values.ndim != 4:
        raise DimensionError(f"conv2d: expected HxWxC and khxkwxCinxCout, got {f.shape} and {kernel.shape}")
    h, w, cin = f.shape
    kh, kw, kcin, cout = kernel.shape
    if cin != kcin:
        raise DimensionError(f"conv2d: input channels {f.shape} vs kernel {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride={stride} pad={pad}")
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise DimensionError(
            f"conv2d: non-integral output size for input {f.shape}, kernel {kernel.shape}, "
            f"stride {stride}, pad {pad}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: empty output for input {f.shape}, kernel {kernel.shape}")

    fp = np.pad(f.values, ((pad, pad), (pad, pad), (0, 0))) if pad else f.values
    # im2col: (oh, ow, kh, kw, cin) -> (oh*ow, kh*kw*cin), matching the kernel reshape
    windows = sliding_window_view(fp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    cols = windows.transpose(0, 1, 3, 4, 2).reshape(oh * ow, kh * kw * cin)
    kmat = kernel.values.reshape(kh * kw * cin, cout)
    out = (cols @ kmat).reshape(oh, ow, cout)

    def adjoint(g):
        gmat = g.reshape(oh * ow, cout)
        dkernel = (cols.T @ gmat).reshape(kh, kw, cin, cout)
        dcols = (gmat @ kmat.T).reshape(oh, ow, kh, kw, cin)
        dfp = np.zeros_like(fp)
        for di in range(kh):
            for dj in range(kw):
                dfp[di:di + oh * stride:stride, dj:dj + ow * stride:stride, :] += dcols[:, :, di, dj, :]
        df = dfp[pad:pad + h, pad:pad + w, :] if pad else dfp
        return df, dkernel

    return _node(out, (f, kernel), adjoint)


def global_avg_pool(f: Tensor) -> Tensor:
    """Mean over the two spatial axes of an H x W x C map."""
    if f.values.ndim != 3:
        raise DimensionError(f"global_avg_pool: expected HxWxC, got shape {f.shape}")
    h, w, c = f.shape
    return _node(f.values.mean(axis=(0, 1)), (f,),
                 lambda g: (np.broadcast_to(g / (h * w), (h, w, c)).copy(),))


def global_max_pool(f: Tensor) -> Tensor:
    """Spatial max per channel; the gradient goes to the first row-major argmax cell."""
    if f.values.ndim != 3:
        raise DimensionError(f"global_max_pool: expected HxWxC, got shape {f.shape}")
    h, w, c = f.shape
    flat = f.values.reshape(h * w, c)
    idx = np.argmax(flat, axis=0)  # first flat index wins ties (row-major rule)
    out = flat[idx, np.arange(c)]

    def adjoint(g):
        dflat = np.zeros_like(flat)
        dflat[idx, np.arange(c)] = g
        return (dflat.reshape(h, w, c),)

    return _node(out, (f,), adjoint)


# ---------------------------------------------------------------------------
# verification harness


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      step: float = 1e-6) -> float:
    """Max relative error between backward() gradients and central differences.

    ``f`` rebuilds the forward graph from the current parameter values and
    returns the scalar loss; it must be deterministic. Relative error per
    coordinate is |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|). Losses whose
    selection rules (argmax cells, assignment) sit at a tie are outside the
    contract: a perturbation can flip the selection and the comparison is
    meaningless there.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    grads = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, g_ad in zip(params, grads):
            flat = p.values.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + step
                up = f().item()
                flat[i] = saved - step
                down = f().item()
                flat[i] = saved
                g_fd = (up - down) / (2.0 * step)
                ga = float(g_ad.reshape(-1)[i])
                err = abs(ga - g_fd) / max(1e-8, abs(ga) + abs(g_fd))
                if err > worst:
                    worst = err
    return worst
