"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure pushing the output gradient back to them.  Graphs are rebuilt on
each forward pass, so variable-size graphs (coarsening) need no special
handling.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Input lies outside the op's mathematical domain."""


class ContractError(ValueError):
    """A precondition of the API was violated."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where finite numbers are required."""


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the graph (faster forward passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def precision(dtype):
    """Temporarily build tensors in another float type (oracle use only)."""
    global DTYPE
    prev = DTYPE
    DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A named, trainable leaf.  ``frozen`` ones still get gradients but the
    optimizer never touches them."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.frozen = frozen

    def __repr__(self):
        flag = ", frozen" if self.frozen else ""
        return f"Parameter({self.name!r}, shape={self.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: a._accumulate(-g))


def _unary(a: Tensor, value: np.ndarray, local_grad: np.ndarray) -> Tensor:
    return _make(value, (a,), lambda g: a._accumulate(g * local_grad))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _unary(a, t, 1.0 - t * t)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(a.data)
    return _unary(a, s, s * (1.0 - s))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _unary(a, np.where(pos, a.data, slope * a.data), np.where(pos, 1.0, slope))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    return _unary(a, np.log(a.data), 1.0 / a.data)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _unary(a, e, e)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    value = 0.5 * x * (1.0 + t)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return _unary(a, value, 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: a._accumulate(g * c))


_ELEMENTWISE = {"tanh": tanh, "sigmoid": sigmoid, "log": log}


def elementwise(op: str, *args, slope: float = 0.2) -> Tensor:
    """Dispatch by name: tanh, sigmoid, leaky_relu, log (unary) or mul, add
    (binary, identical shapes required)."""
    if op in ("mul", "add"):
        if len(args) != 2:
            raise ContractError(f"{op} takes two operands")
        a, b = as_tensor(args[0]), as_tensor(args[1])
        if a.shape != b.shape:
            raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")
        return mul(a, b) if op == "mul" else add(a, b)
    if len(args) != 1:
        raise ContractError(f"{op} takes one operand")
    if op == "leaky_relu":
        return leaky_relu(args[0], slope)
    try:
        return _ELEMENTWISE[op](args[0])
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    """Matrix product; leading (batch) dimensions broadcast as in numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), bw)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: a._accumulate(np.transpose(g, inv)))


def index(a: Tensor, key) -> Tensor:
    """Numpy-style indexing; repeated indices accumulate in backward."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, key, g)
        a._accumulate(full)

    return _make(a.data[key], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=ax)):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis)


# ---------------------------------------------------------------------------
# normalisations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        x._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(
                inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
            )

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from
    ``loss``.  Gradients add onto whatever is already stored."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss._accumulate(np.ones(loss.shape, dtype=DTYPE))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# gradient verification


def numeric_gradient(f: Callable[[], Tensor], p: Parameter, eps: float = 1e-5,
                     oracle_dtype=np.float64, entries=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. entries of ``p`` (all by default,
    else the given flat positions; the rest come back as NaN).

    With ``oracle_dtype=np.longdouble`` the perturbed forward passes run in
    extended precision, which keeps round-off in ``f(x+e) - f(x-e)`` well
    below small gradients.
    """
    saved = p.data
    work = saved.astype(oracle_dtype)
    p.data = work
    flat = work.reshape(-1)
    numeric = np.full(flat.size, np.nan, dtype=oracle_dtype)
    positions = range(flat.size) if entries is None else entries
    try:
        with no_grad(), precision(oracle_dtype):
            for i in positions:
                orig = flat[i]
                flat[i] = orig + eps
                up = f().data.reshape(-1)[0]
                flat[i] = orig - eps
                down = f().data.reshape(-1)[0]
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NumericError(f"non-finite loss while perturbing {p.name}[{i}]")
                numeric[i] = (up - down) / (2 * oracle_dtype(eps))
    finally:
        p.data = saved
    return numeric.reshape(p.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.longdouble)
    n = np.asarray(numeric, dtype=np.longdouble)
    return (np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))).astype(np.float64)


def checked_errors(f: Callable[[], Tensor], p: Parameter, analytic: np.ndarray, eps: float = 1e-5,
                   refine_dtype=None, refine_above: float = 1e-7) -> np.ndarray:
    """Relative error of every entry against float64 central differences.

    With ``refine_dtype`` set, entries above ``refine_above`` whose absolute
    discrepancy is small enough to be float64 round-off in the difference
    quotient are re-differenced in that dtype and keep the more precise
    error.  Larger discrepancies are reported as measured.
    """
    numeric = numeric_gradient(f, p, eps)
    err = relative_error(analytic, numeric)
    if refine_dtype is not None:
        with no_grad():
            scale_ = max(1.0, abs(float(f().data.reshape(-1)[0])))
        roundoff = 64 * np.finfo(np.float64).eps * scale_ / eps
        flat = err.reshape(-1)
        gap = np.abs(np.asarray(analytic).reshape(-1) - numeric.reshape(-1))
        suspect = np.flatnonzero((flat > refine_above) & (gap < roundoff))
        if suspect.size:
            fine = numeric_gradient(f, p, eps, refine_dtype, suspect).reshape(-1)
            flat[suspect] = relative_error(np.asarray(analytic).reshape(-1)[suspect], fine[suspect])
    return err


def grad_errors(f: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5,
                refine_dtype=None) -> dict[str, float]:
    """Per-parameter max relative error between backward and central
    differences; see :func:`grad_check`."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    zero_grad(params)
    loss = f()
    _require_finite(loss.data, "loss")
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    zero_grad(params)
    errors: dict[str, float] = {}
    for i, (p, g) in enumerate(zip(params, analytic)):
        name = p.name or f"param{i}"
        _require_finite(g, name)
        rel = checked_errors(f, p, g, eps, refine_dtype)
        errors[name] = float(rel.max()) if rel.size else 0.0
    return errors


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter], eps: float = 1e-5,
               refine_dtype=None) -> float:
    """Max over every entry of every parameter of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.

    ``f`` must be deterministic and return a scalar tensor.  See
    :func:`checked_errors` for ``refine_dtype``.
    """
    errs = grad_errors(f, params, eps, refine_dtype)
    return max(errs.values(), default=0.0)


def _require_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
