"""Dense float64 arrays with a small reverse-mode differentiation tape.

Plain ``numpy.ndarray`` (float64) plays the role of the immutable tensor
value.  :class:`Var` wraps one array as a node on a tape: every operation
on a ``Var`` records its parents and a vector-Jacobian product, and
:func:`backward` sweeps the recorded graph in reverse topological order.
Graphs are built fresh for each evaluation and never reused.

Broadcasting follows numpy's trailing-dimension rules; gradients flowing
into a broadcast operand are summed back to its original shape.
"""

import math

import numpy as np

from . import special
from .errors import ContractViolation

ELEMENTWISE_OPS = ("add", "sub", "mul", "div", "log", "exp", "softplus", "neg")


def as_array(x):
    arr = np.asarray(x, dtype=np.float64)
    return arr


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError as exc:
        raise ContractViolation(
            f"shapes {np.shape(a)} and {np.shape(b)} do not broadcast"
        ) from exc


def _softplus(x):
    # x > 0 branch is x + log(1 + exp(-x)); folding both branches through |x|
    # keeps exp() from overflowing.
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _check_divisor(b):
    if np.any(np.asarray(b) == 0.0):
        raise ZeroDivisionError("division by exact zero")


def elementwise(op, a, b=None):
    """Apply a tagged elementwise operation to arrays or :class:`Var` nodes.

    Binary tags (``add``, ``sub``, ``mul``, ``div``) need ``b``; unary tags
    (``log``, ``exp``, ``softplus``, ``neg``) must not get one.  When either
    operand is a ``Var`` the result is recorded on the tape.
    """
    if op not in ELEMENTWISE_OPS:
        raise ContractViolation(f"unknown elementwise op {op!r}")
    binary = op in ("add", "sub", "mul", "div")
    if binary and b is None:
        raise ContractViolation(f"{op} needs two operands")
    if not binary and b is not None:
        raise ContractViolation(f"{op} takes one operand")

    if isinstance(a, Var) or isinstance(b, Var):
        a = as_var(a)
        if binary:
            b = as_var(b)
            _broadcast_shape(a.value, b.value)
        result = {
            "add": lambda: a + b,
            "sub": lambda: a - b,
            "mul": lambda: a * b,
            "div": lambda: a / b,
            "log": a.log,
            "exp": a.exp,
            "softplus": a.softplus,
            "neg": a.__neg__,
        }[op]()
        return result

    a = as_array(a)
    if binary:
        b = as_array(b)
        _broadcast_shape(a, b)
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        try:
            if op == "add":
                out = a + b
            elif op == "sub":
                out = a - b
            elif op == "mul":
                out = a * b
            elif op == "div":
                _check_divisor(b)
                out = a / b
            elif op == "log":
                out = np.log(a)
            elif op == "exp":
                out = np.exp(a)
            elif op == "softplus":
                out = _softplus(a)
            else:
                out = -a
        except FloatingPointError as exc:
            raise ContractViolation(f"{op} produced a non-finite value") from exc
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A value on the differentiation tape.

    ``parents`` holds the input nodes and ``vjp`` maps the adjoint of this
    node to one adjoint contribution per parent (already shaped like the
    parent's broadcast result; reduction to the parent shape happens in
    :func:`backward`).
    """

    __slots__ = ("value", "grad", "parents", "vjp", "name")
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjp=None, name=None):
        self.value = as_array(value)
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def detach(self):
        return Var(self.value)

    def item(self):
        return float(self.value)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_var(other)
        return Var(self.value + other.value, (self, other), lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_var(other)
        return Var(self.value - other.value, (self, other), lambda g: (g, -g))

    def __rsub__(self, other):
        return as_var(other) - self

    def __mul__(self, other):
        other = as_var(other)
        a, b = self.value, other.value
        return Var(a * b, (self, other), lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_var(other)
        a, b = self.value, other.value
        _check_divisor(b)
        out = a / b
        return Var(out, (self, other), lambda g: (g / b, -g * out / b))

    def __rtruediv__(self, other):
        return as_var(other) / self

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: (-g,))

    def __pow__(self, k):
        if isinstance(k, Var):
            raise ContractViolation("only constant exponents are supported")
        a = self.value
        return Var(a**k, (self,), lambda g: (g * k * a ** (k - 1),))

    def __matmul__(self, other):
        other = as_var(other)
        a, b = self.value, other.value
        if a.ndim != 2 or b.ndim != 2:
            raise ContractViolation("matmul expects two 2-d operands")
        return Var(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def __rmatmul__(self, other):
        return as_var(other) @ self

    def __getitem__(self, idx):
        a = self.value

        def vjp(g):
            full = np.zeros_like(a)
            np.add.at(full, idx, g)
            return (full,)

        return Var(a[idx], (self,), vjp)

    # unary functions --------------------------------------------------------

    def log(self):
        a = self.value
        return Var(np.log(a), (self,), lambda g: (g / a,))

    def exp(self):
        out = np.exp(self.value)
        return Var(out, (self,), lambda g: (g * out,))

    def softplus(self):
        a = self.value
        return Var(_softplus(a), (self,), lambda g: (g * _sigmoid(a),))

    def sigmoid(self):
        s = _sigmoid(self.value)
        return Var(s, (self,), lambda g: (g * s * (1.0 - s),))

    def tanh(self):
        t = np.tanh(self.value)
        return Var(t, (self,), lambda g: (g * (1.0 - t * t),))

    def relu(self):
        a = self.value
        return Var(np.maximum(a, 0.0), (self,), lambda g: (g * (a > 0),))

    def abs(self):
        a = self.value
        return Var(np.abs(a), (self,), lambda g: (g * np.sign(a),))

    def clamp_min(self, floor):
        a = self.value
        return Var(np.maximum(a, floor), (self,), lambda g: (g * (a > floor),))

    def digamma(self):
        a = self.value
        return Var(special.digamma(a), (self,), lambda g: (g * special.trigamma(a),))

    def lgamma(self):
        a = self.value
        return Var(special.log_gamma(a), (self,), lambda g: (g * special.digamma(a),))

    # reductions and reshaping ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self.value
        out = a.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape),)

        return Var(out, (self,), vjp)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod(
            [self.value.shape[i] for i in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        a = self.value
        return Var(a.reshape(*shape), (self,), lambda g: (g.reshape(a.shape),))

    @property
    def T(self):
        return Var(self.value.T, (self,), lambda g: (g.T,))


def as_var(x):
    return x if isinstance(x, Var) else Var(x)


def concat(items, axis=0):
    items = [as_var(v) for v in items]
    sizes = [v.shape[axis] for v in items]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Var(np.concatenate([v.value for v in items], axis=axis), tuple(items), vjp)


def dense(weight, x):
    """``weight @ x`` with a fixed summation order over the inner axis.

    BLAS may reorder the inner-product accumulation depending on the size
    of ``x``; summing explicitly keeps each output column independent of
    how many columns are evaluated together.
    """
    w, xv = as_var(weight), as_var(x)
    W, X = w.value, xv.value
    out = np.zeros((W.shape[0], X.shape[1]))
    for k in range(W.shape[1]):
        out += W[:, k : k + 1] * X[k : k + 1, :]
    return Var(out, (w, xv), lambda g: (g @ X.T, W.T @ g))


def value_of(x):
    return x.value if isinstance(x, Var) else as_array(x)


# functional forms that also accept plain arrays ---------------------------


def digamma(x):
    return x.digamma() if isinstance(x, Var) else special.digamma(x)


def lgamma(x):
    return x.lgamma() if isinstance(x, Var) else special.log_gamma(x)


def log(x):
    return x.log() if isinstance(x, Var) else np.log(x)


def clamp_min(x, floor):
    return x.clamp_min(floor) if isinstance(x, Var) else np.maximum(x, floor)


def asum(x, axis=None, keepdims=False):
    return x.sum(axis=axis, keepdims=keepdims) if isinstance(x, Var) else np.sum(
        x, axis=axis, keepdims=keepdims
    )


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root):
    """Reverse-mode sweep from a scalar ``root``.

    Fills ``.grad`` on every node reachable from ``root`` and returns a
    mapping from node to gradient array.
    """
    if root.value.size != 1:
        raise ContractViolation(f"backward needs a scalar root, got shape {root.shape}")
    order = _topological(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None or node.vjp is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            g = _unbroadcast(np.asarray(g, dtype=np.float64), parent.value.shape)
            parent.grad = g.copy() if parent.grad is None else parent.grad + g
    return {node: (node.grad if node.grad is not None else np.zeros_like(node.value))
            for node in order}


def grad_check(f, x, h=1e-5):
    """Compare reverse-mode and central-difference gradients of ``f`` at ``x``.

    ``f`` maps a :class:`Var` to a scalar :class:`Var`.  Returns the maximum
    over coordinates of ``|numeric - analytic| / max(1, |analytic|)``.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    xv = Var(x)
    out = f(xv)
    if not np.isfinite(out.value).all():
        raise ContractViolation("f is not finite at x")
    analytic = backward(out)[xv]

    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        fp = float(f(Var(x)).value)
        flat[i] = saved - h
        fm = float(f(Var(x)).value)
        flat[i] = saved
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ContractViolation(f"f is not finite near x at coordinate {i}")
        numeric = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(numeric - a) / max(1.0, abs(a)))
    return worst
