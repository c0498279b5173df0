"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in numpy arrays. Every differentiable operation links its output
to its inputs and stamps it with a creation counter; those links are the
dynamic tape, rebuilt on every forward pass. ``backward`` walks the reachable
part of the tape in reverse execution order, visiting each node exactly once,
and accumulates gradients into the leaves that asked for them.

Everything is double precision and deterministic: identical inputs produce
bit-identical outputs.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_STAMP = itertools.count()


class Tensor:
    """A dense float64 array with optional gradient tracking.

    Leaves are created directly; operation results carry parent links and a
    backward closure. ``grad`` is populated on leaves by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_stamp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._stamp = next(_STAMP)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's values, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"

    # operator sugar; scalars and ndarrays are promoted to constant tensors
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return mul(self, as_tensor(-1.0))

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, key):
        return _getitem(self, key)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap an op result; record tape links only if a parent tracks gradients."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast to produce it."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Leaves that do not feed into ``loss`` are left untouched (their gradient
    is zero by definition). Gradients accumulate across calls; use
    ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # Collect reachable tape nodes, then process in reverse execution order.
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._stamp, reverse=True)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data / b.data
    except ValueError as exc:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from exc

    def back(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(data, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")
    data = a.data @ b.data
    return _make(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    data = np.maximum(a.data, b.data)
    choose_a = a.data >= b.data

    def back(g):
        return (
            _unbroadcast(g * choose_a, a.shape),
            _unbroadcast(g * ~choose_a, b.shape),
        )

    return _make(data, (a, b), back)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient goes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    data = np.minimum(a.data, b.data)
    choose_a = a.data <= b.data

    def back(g):
        return (
            _unbroadcast(g * choose_a, a.shape),
            _unbroadcast(g * ~choose_a, b.shape),
        )

    return _make(data, (a, b), back)


# ---------------------------------------------------------------------------
# shape manipulation


def transpose(x: Tensor, axes=None) -> Tensor:
    data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def back(g):
        return (np.transpose(g, inv),)

    return _make(data, (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)
    return _make(data, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(data, tuple(tensors), back)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(data, tuple(tensors), back)


def _getitem(x: Tensor, key) -> Tensor:
    data = x.data[key]

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(data, (x,), back)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows by integer index; repeated indices accumulate gradients."""
    indices = np.asarray(indices, dtype=np.intp)
    data = x.data[indices]

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, indices, g)
        return (full,)

    return _make(data, (x,), back)


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, x.shape).copy(),)

    return _make(data, (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), as_tensor(1.0 / count))


def l1_norm(x: Tensor) -> Tensor:
    """Sum of absolute values, as a scalar."""
    data = np.abs(x.data).sum()
    sign = np.sign(x.data)
    return _make(np.asarray(data), (x,), lambda g: (g * sign,))


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _make(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    keep = x.data > 0
    data = np.where(keep, x.data, slope * x.data)
    return _make(data, (x,), lambda g: (g * np.where(keep, 1.0, slope),))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    pos = x.data >= 0
    z = np.exp(np.where(pos, -x.data, x.data))
    data = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))
    return _make(data, (x,), lambda g: (g * data * (1.0 - data),))


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    return _make(data, (x,), lambda g: (g * data,))


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)
    return _make(data, (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------------------
# softmax family


def softmax(x: Tensor, axis: int) -> Tensor:
    """Normalized exponential along ``axis``, stabilized by max-subtraction."""
    if x.data.shape == () or x.data.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), back)


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int) -> Tensor:
    """Softmax over the entries where ``mask`` is true; excluded slots get
    an exact 0 (their logits enter as -inf, so normalization stays exact).

    ``mask`` is a plain boolean array broadcastable to ``x``.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
    if not mask.any(axis=axis).all():
        raise ContractError("masked_softmax: a row has no valid entries")
    z = np.where(mask, x.data, -np.inf)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), back)


# ---------------------------------------------------------------------------
# normalization and regularization


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    momentum: float = 0.1,
    eps: float = 1e-5,
    training: bool,
    mask: np.ndarray | None = None,
    update_running: bool = True,
) -> Tensor:
    """Per-feature batch normalization over the row axis of an (n, d) input.

    In training mode statistics are the population mean/variance of the rows
    (restricted to ``mask`` rows when given — padded rows must not skew the
    statistics — though normalization is still applied to every row), and the
    running estimates are updated in place with ``momentum``. Eval mode uses
    the running estimates, which makes the op act row-wise.
    """
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"batch_norm expects a nonempty (n, d) input, got {x.shape}")

    if training:
        if mask is None:
            mu = x.data.mean(axis=0)
            var = x.data.var(axis=0)
            weights = np.full(x.shape[0], 1.0 / x.shape[0])
        else:
            mask = np.asarray(mask, dtype=bool)
            m = int(mask.sum())
            if m == 0:
                raise ContractError("batch_norm: mask excludes every row")
            mu = x.data[mask].mean(axis=0)
            var = x.data[mask].var(axis=0)
            weights = np.where(mask, 1.0 / m, 0.0)
        if update_running:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mu = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    data = gamma.data * xhat + beta.data

    if training:

        def back(g):
            gx = g * gamma.data
            sum_gx = gx.sum(axis=0)
            sum_gx_xhat = (gx * xhat).sum(axis=0)
            dx = inv_std * (gx - weights[:, None] * (sum_gx + xhat * sum_gx_xhat))
            return (dx, (g * xhat).sum(axis=0), g.sum(axis=0))

    else:

        def back(g):
            return (g * gamma.data * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _make(data, (x, gamma, beta), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: active only in training mode with p > 0."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ContractError(f"dropout probability must be < 1, got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.isfinite(x.data).all():
        raise NumericError(f"{what} contains non-finite values")
    return x
