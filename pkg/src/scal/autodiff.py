"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation on tensors that require gradients records its inputs and a
local backward closure on the output tensor.  ``Tensor.backward`` walks the
resulting DAG once in reverse topological order.  The graph is rebuilt on
every forward pass; nothing is cached between steps.

Broadcasting is deliberately limited to two cases: equal shapes, and a 0-d
scalar combined with any tensor.  Row-vector bias addition has its own
operation (``add_bias``).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericDomainError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, finite differences)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """A float64 array that can take part in a gradient tape.

    Leaf tensors are created by the user.  Non-leaf tensors carry ``_parents``
    and a ``_backward`` closure mapping the upstream gradient to one gradient
    per parent (``None`` for parents that need none).
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return _result(self.values.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"

    def __len__(self) -> int:
        return self.values.shape[0]

    # operator sugar
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

    def backward(self) -> None:
        """Backpropagate from this scalar, accumulating into ``.grad``.

        Gradients are summed into any existing ``.grad``; callers zero them
        explicitly between steps.
        """
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values: np.ndarray, parents: Sequence[Tensor] = (), backward=None, op: str = "") -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} (only equal shapes or 0-d scalars broadcast)")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(
        a.values + b.values,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(
        a.values - b.values,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _result(
        a.values * b.values,
        (a, b),
        lambda g: (_reduce_to(g * b.values, a.shape), _reduce_to(g * a.values, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.values == 0.0):
        raise NumericDomainError("div: division by zero")
    out = a.values / b.values

    def backward(g):
        return (
            _reduce_to(g / b.values, a.shape),
            _reduce_to(-g * out / b.values, b.shape),
        )

    return _result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.values, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    """Multiply by a non-differentiable constant."""
    a = as_tensor(a)
    c = float(c)
    return _result(a.values * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values <= 0.0):
        raise NumericDomainError(f"log: nonpositive input (min {a.values.min():.3g})")
    return _result(np.log(a.values), (a,), lambda g: (g / a.values,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0.0
    return _result(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; the gradient is zero where clamping was active."""
    a = as_tensor(a)
    inside = (a.values >= lo) & (a.values <= hi)
    return _result(np.clip(a.values, lo, hi), (a,), lambda g: (g * inside,), "clip")


_UNARY = {"exp": exp, "log": log, "relu": relu, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(tag: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name.  ``scale`` takes a plain number as ``b``."""
    if tag in _UNARY:
        return _UNARY[tag](a)
    if tag in _BINARY:
        if b is None:
            raise ContractError(f"{tag} needs two operands")
        return _BINARY[tag](a, b)
    if tag == "scale":
        return scale(a, b)
    raise ContractError(f"unknown elementwise op {tag!r}")


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    av, bv = a.values, b.values
    return _result(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def add_bias(x, bias) -> Tensor:
    """Add a length-m row vector to every row of an n x m matrix."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: shapes {x.shape} and {bias.shape} do not align")
    return _result(x.values + bias.values, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


def softmax(logits) -> Tensor:
    """Row-wise softmax with max subtraction."""
    x = as_tensor(logits)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ShapeError(f"softmax: need an n x K matrix with K >= 2, got {x.shape}")
    z = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def row_outer(a, b) -> Tensor:
    """Per-row flattened outer product: out[i, p*K + q] = a[i, p] * b[i, q]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"row_outer: shapes {a.shape} and {b.shape} need equal row counts")
    n, p = a.shape
    q = b.shape[1]
    av, bv = a.values, b.values
    out = (av[:, :, None] * bv[:, None, :]).reshape(n, p * q)

    def backward(g):
        g3 = g.reshape(n, p, q)
        return (np.einsum("npq,nq->np", g3, bv), np.einsum("npq,np->nq", g3, av))

    return _result(out, (a, b), backward, "row_outer")


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat_rows needs at least one tensor")
    tail = tensors[0].shape[1:]
    for t in tensors:
        if t.shape[1:] != tail:
            raise ShapeError(f"concat_rows: trailing shapes differ ({t.shape} vs {tensors[0].shape})")
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]
    out = np.concatenate([t.values for t in tensors], axis=0)
    return _result(out, tensors, lambda g: tuple(np.split(g, splits, axis=0)), "concat_rows")


def take_rows(x, index) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.values[idx], (x,), backward, "take_rows")


def pick(x, columns) -> Tensor:
    """Select one entry per row: out[i] = x[i, columns[i]]."""
    x = as_tensor(x)
    cols = np.asarray(columns, dtype=np.intp)
    if x.ndim != 2 or cols.shape != (x.shape[0],):
        raise ShapeError(f"pick: need an n x K matrix and n column indices, got {x.shape} and {cols.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[rows, cols] = g
        return (full,)

    return _result(x.values[rows, cols], (x,), backward, "pick")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.values.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape
    return _result(np.asarray(x.values.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size
    if n == 0:
        raise ContractError("mean of an empty tensor")
    return _result(np.asarray(x.values.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def gradient_reverse(x, lam: float = 1.0) -> Tensor:
    """Identity forward; the backward pass multiplies the upstream gradient by -lam."""
    x = as_tensor(x)
    lam = float(lam)
    if lam < 0:
        raise ContractError(f"gradient_reverse: lambda must be nonnegative, got {lam}")
    return _result(x.values.copy(), (x,), lambda g: (-lam * g,), "gradient_reverse")


def identity(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.values.copy(), (x,), lambda g: (g,), "identity")


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Iterable[Tensor],
    step: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between backward-pass and central-difference gradients.

    The error of one entry is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps entries whose true gradient is ~0 from reporting rounding noise as
    a large relative error.

    ``fn`` must compute the true objective.  A graph that contains
    ``gradient_reverse`` reports the reversed gradient by design, which finite
    differences cannot see; swap reversal for ``identity`` before checking.
    """
    inputs = list(inputs)
    if step <= 0:
        raise ContractError("step must be positive")
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    out = fn(*inputs)
    if out.size != 1:
        raise ContractError(f"check_gradients: fn must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            t.values = np.ascontiguousarray(t.values)
            flat = t.values.reshape(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = float(fn(*inputs).values)
                flat[i] = orig - step
                f_minus = float(fn(*inputs).values)
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                denom = max(abs(a_flat[i]), abs(numeric), floor)
                worst = max(worst, abs(a_flat[i] - numeric) / denom)
    for t in inputs:
        t.zero_grad()
    return worst
