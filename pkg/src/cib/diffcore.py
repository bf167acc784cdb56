"""Reverse-mode automatic differentiation over dense float64 arrays.

A computation graph is recorded dynamically as ops execute. Gradients are
assembled out of the same primitive ops, so a gradient is itself a graph
node and can be differentiated again; the critic's input-gradient penalty
relies on this. Everything runs on 64-bit floats so finite-difference
checks are clean.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Inconsistent input shapes, tagged with the offending op."""

    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"{op}: {message}")


class Tensor:
    """Graph node: a float64 array plus the wiring for the backward pass.

    ``parents`` holds the input nodes, ``vjps`` one vector-Jacobian product
    per parent. A leaf (parameter, constant, input) has no parents. Data is
    treated as immutable once wrapped; optimizers rebind ``data`` instead of
    writing into it.
    """

    __slots__ = ("data", "parents", "vjps")

    def __init__(self, data, parents=(), vjps=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.vjps = vjps

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    """Lift an array or scalar to a constant leaf; Tensors pass through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def stop_gradient(t: Tensor) -> Tensor:
    """Identity forward, zero backward: detaches t from the graph."""
    return Tensor(t.data)


# -- elementwise arithmetic, numpy broadcasting ------------------------------

def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a gradient back to an operand's shape after broadcasting."""
    while g.data.ndim > len(shape):
        g = tsum(g, axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.data.shape[ax] != 1:
            g = tsum(g, axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape),
         lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.data.shape),
         lambda g: _unbroadcast(neg(g), b.data.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.data * b.data,
        (a, b),
        (lambda g: _unbroadcast(mul(g, b), a.data.shape),
         lambda g: _unbroadcast(mul(g, a), b.data.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(
        a.data / b.data,
        (a, b),
        (lambda g: _unbroadcast(div(g, b), a.data.shape),
         lambda g: _unbroadcast(neg(div(mul(g, a), square(b))), b.data.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), (lambda g: neg(g),))


# -- elementwise nonlinearities ----------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), (a,), ())
    out.vjps = (lambda g: mul(g, out),)
    return out


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), (a,), (lambda g: div(g, a),))


def square(a: Tensor) -> Tensor:
    return Tensor(np.square(a.data), (a,),
                  (lambda g: mul(g, mul(a, as_tensor(2.0))),))


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data), (a,), ())
    out.vjps = (lambda g: div(g, mul(out, as_tensor(2.0))),)
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    val = np.empty_like(x)
    pos = x >= 0
    val[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    val[~pos] = ex / (1.0 + ex)
    out = Tensor(val, (a,), ())
    out.vjps = (lambda g: mul(g, mul(out, sub(as_tensor(1.0), out))),)
    return out


def softplus(a: Tensor) -> Tensor:
    return Tensor(np.logaddexp(0.0, a.data), (a,),
                  (lambda g: mul(g, sigmoid(a)),))


def _exp_below_zero(a: Tensor) -> Tensor:
    # exp(x) on x <= 0, zero elsewhere; closed under differentiation
    out = Tensor(np.where(a.data > 0, 0.0, np.exp(np.minimum(a.data, 0.0))),
                 (a,), ())
    out.vjps = (lambda g: mul(g, _exp_below_zero(a)),)
    return out


def _elu_grad(a: Tensor) -> Tensor:
    return Tensor(np.where(a.data > 0, 1.0, np.exp(np.minimum(a.data, 0.0))),
                  (a,), (lambda g: mul(g, _exp_below_zero(a)),))


def elu(a: Tensor) -> Tensor:
    x = a.data
    return Tensor(np.where(x > 0, x, np.expm1(np.minimum(x, 0.0))), (a,),
                  (lambda g: mul(g, _elu_grad(a)),))


def relu(a: Tensor) -> Tensor:
    mask = Tensor((a.data > 0).astype(np.float64))
    return Tensor(np.maximum(a.data, 0.0), (a,), (lambda g: mul(g, mask),))


# -- shape ops ----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul", f"expects 2-d operands, got "
                                   f"{a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", f"inner dimensions differ: "
                                   f"{a.data.shape} vs {b.data.shape}")
    return Tensor(
        a.data @ b.data,
        (a, b),
        (lambda g: matmul(g, transpose(b)),
         lambda g: matmul(transpose(a), g)),
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", f"expects a 2-d operand, got {a.data.shape}")
    return Tensor(a.data.T.copy(), (a,), (lambda g: transpose(g),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return Tensor(np.reshape(a.data, shape), (a,),
                  (lambda g: reshape(g, old),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    return Tensor(np.broadcast_to(a.data, shape).copy(), (a,),
                  (lambda g: _unbroadcast(g, a.data.shape),))


def concat_cols(parts: list[Tensor]) -> Tensor:
    for p in parts:
        if p.data.ndim != 2:
            raise ShapeError("concat_cols", f"expects 2-d operands, got {p.data.shape}")
    rows = {p.data.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError("concat_cols", f"row counts differ: "
                                        f"{[p.data.shape for p in parts]}")
    widths = [p.data.shape[1] for p in parts]
    offsets = np.concatenate(([0], np.cumsum(widths)))
    vjps = tuple(
        (lambda lo, hi: lambda g: slice_cols(g, lo, hi))(offsets[i], offsets[i + 1])
        for i in range(len(parts))
    )
    return Tensor(np.concatenate([p.data for p in parts], axis=1),
                  tuple(parts), vjps)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    n, w = a.data.shape

    def vjp(g):
        pieces = []
        if lo > 0:
            pieces.append(Tensor(np.zeros((n, lo))))
        pieces.append(g)
        if hi < w:
            pieces.append(Tensor(np.zeros((n, w - hi))))
        return concat_cols(pieces) if len(pieces) > 1 else g

    return Tensor(a.data[:, lo:hi].copy(), (a,), (vjp,))


# -- reductions ----------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.data.shape

    if axis is None:
        return Tensor(np.sum(a.data), (a,),
                      (lambda g: broadcast_to(g, shape),))

    def vjp(g):
        if not keepdims:
            expanded_shape = list(g.data.shape)
            expanded_shape.insert(axis, 1)
            g = reshape(g, tuple(expanded_shape))
        return broadcast_to(g, shape)

    return Tensor(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), (vjp,))


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return div(tsum(a, axis=axis, keepdims=keepdims), as_tensor(float(n)))


# -- backward pass -------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order  # parents precede consumers


def grad(output: Tensor, wrt: list[Tensor], seed: float = 1.0) -> list[Tensor]:
    """Gradients of a scalar output as graph tensors (differentiable again).

    Nodes without a path to the output get an exact-zero gradient. Each node
    is visited once, in reverse topological order.
    """
    if output.data.ndim != 0:
        raise ShapeError("backward", f"output must be a scalar, "
                                     f"got shape {output.data.shape}")
    order = _toposort(output)
    grads: dict[int, Tensor] = {id(output): as_tensor(np.float64(seed))}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            pg = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else add(acc, pg)
    return [grads.get(id(w)) if grads.get(id(w)) is not None
            else Tensor(np.zeros_like(w.data)) for w in wrt]


def backward(output: Tensor, wrt: list[Tensor], seed: float = 1.0) -> list[np.ndarray]:
    """Gradient arrays of a scalar output with respect to the given leaves."""
    return [g.data for g in grad(output, wrt, seed=seed)]


def finite_difference_gradient(f, p: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function; the testing oracle.

    ``f`` maps an array like ``p`` to a float. Stays independent of the tape.
    """
    if h <= 0:
        raise ValueError("finite_difference_gradient: h must be positive")
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros_like(p)
    flat = out.ravel()
    base = p.copy()
    for i in range(p.size):
        orig = base.ravel()[i]
        base.ravel()[i] = orig + h
        up = f(base)
        base.ravel()[i] = orig - h
        down = f(base)
        base.ravel()[i] = orig
        flat[i] = (up - down) / (2.0 * h)
    return out
