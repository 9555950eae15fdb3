"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

The op set is exactly what the models in this package need: matmul,
elementwise add/sub/mul, scalar scale, ReLU, axis softmax with an optional
temperature divisor, natural log, concatenation, sum/mean reductions, batch
normalization with running statistics, and a gated recurrent cell.  A few
shape-plumbing primitives (reshape, index_select, sigmoid/tanh/power) exist
because batched model forwards cannot be expressed without them.

A computation graph and its tensors belong to one thread; distinct graphs
(e.g. per cross-validation cell) may run concurrently without shared state.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "BatchNorm",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "relu",
    "softmax",
    "log",
    "sigmoid",
    "tanh",
    "power",
    "concat",
    "tensor_sum",
    "tensor_mean",
    "reshape",
    "index_select",
    "lstm_cell",
    "backward",
    "grad_check",
    "uniform_init",
]


def _as_array(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


class Tensor:
    """Dense float64 array participating in a computation graph.

    Leaves are created directly; every op returns a new Tensor holding a
    reference to its parents and a backward closure.  After ``backward()``
    on a scalar root, ``grad`` is populated on every reachable tensor with
    ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, values, requires_grad: bool = False):
        self.data = _as_array(values)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # Operator sugar; scalars are promoted to constant tensors.
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def bwd(g):
        return (g * factor,)

    return _make(a.data * factor, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    # Subgradient at 0 is 0.
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), bwd)


def log(a: Tensor) -> Tensor:
    def bwd(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), bwd)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data**exponent

    def bwd(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# matmul, softmax, concat, reductions, shape plumbing
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bwd)


def softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Softmax along ``axis``; logits are divided by ``temperature`` first."""
    temperature = float(temperature)
    if temperature <= 0.0:
        raise ValueError(f"softmax: temperature must be > 0, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _make(out, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    shapes = [t.shape for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        trimmed_a, trimmed_b = list(s), list(ref)
        trimmed_a[axis] = trimmed_b[axis] = 0
        if trimmed_a != trimmed_b:
            raise ValueError(f"concat: shapes {shapes} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(out, tuple(tensors), bwd)


def _normalize_axes(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bwd)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    if axes is None:
        count = a.data.size
    else:
        count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy() / count,)

    return _make(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}") from None

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bwd)


def index_select(a: Tensor, axis: int, indices) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def bwd(g):
        acc = np.zeros_like(a.data)
        # np.add.at accumulates for repeated indices
        np.add.at(acc, (slice(None),) * axis + (indices,), g)
        return (acc,)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# parameters, initialization, batch norm, gated recurrent cell
# ---------------------------------------------------------------------------

class Parameter:
    """Named learnable tensor; ``requires_grad`` is always true."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, values):
        self.name = name
        self.tensor = Tensor(values, requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, values) -> None:
        self.tensor.data = _as_array(values)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Weights uniform in +-1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class BatchNorm:
    """Per-feature standardization with learned scale/shift and running stats.

    The feature axis is the last one; all leading axes form the batch.
    Running statistics follow an exponential moving average with momentum
    0.1.  In inference mode the layer is a fixed affine map.
    """

    def __init__(self, num_features: int, name: str, momentum: float = 0.1, eps: float = 1e-5):
        self.num_features = num_features
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(f"{name}.gamma", np.ones(num_features))
        self.beta = Parameter(f"{name}.beta", np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.name = name

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        self.running_mean = np.asarray(values[f"{self.name}.running_mean"], dtype=np.float64)
        self.running_var = np.asarray(values[f"{self.name}.running_var"], dtype=np.float64)

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if x.shape[-1] != self.num_features:
            raise ValueError(
                f"batchnorm {self.name}: expected {self.num_features} features, got shape {x.shape}"
            )
        batch_axes = tuple(range(x.ndim - 1))
        if training:
            mu = x.mean(axis=batch_axes)
            centered = sub(x, mu)
            var = mul(centered, centered).mean(axis=batch_axes)
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mu.data
            self.running_var = (1.0 - m) * self.running_var + m * var.data
            inv_std = power(add(var, Tensor(np.full(self.num_features, self.eps))), -0.5)
            normed = mul(centered, inv_std)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            normed = mul(sub(x, Tensor(self.running_mean)), Tensor(inv))
        return add(mul(normed, self.gamma.tensor), self.beta.tensor)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor):
    """One gated-cell update: input/forget/output gates plus tanh candidate.

    ``x`` is (batch, in_dim); ``h`` and ``c`` are (batch, H); ``w_x`` is
    (in_dim, 4H), ``w_h`` (H, 4H), ``b`` (4H,).  Returns (h_next, c_next).
    """
    hidden = h.shape[-1]
    if w_x.shape[-1] != 4 * hidden or w_h.shape[-1] != 4 * hidden:
        raise ValueError(
            f"lstm_cell: projection widths {w_x.shape} / {w_h.shape} do not match hidden {hidden}"
        )
    z = add(add(matmul(x, w_x), matmul(h, w_h)), b)
    idx = np.arange(4 * hidden)
    gate_i = sigmoid(index_select(z, -1, idx[:hidden]))
    gate_f = sigmoid(index_select(z, -1, idx[hidden : 2 * hidden]))
    gate_o = sigmoid(index_select(z, -1, idx[2 * hidden : 3 * hidden]))
    candidate = tanh(index_select(z, -1, idx[3 * hidden :]))
    c_next = add(mul(gate_f, c), mul(gate_i, candidate))
    h_next = mul(gate_o, tanh(c_next))
    return h_next, c_next


# ---------------------------------------------------------------------------
# backward pass and gradient verification
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Populate gradients of ``root`` w.r.t. every requires_grad tensor.

    The root must be scalar.  Each graph node is visited exactly once, in
    reverse topological order; a second backward on the same root is an
    error (rebuild the graph instead of silently accumulating).
    """
    if root.data.shape != ():
        raise ValueError(f"backward: root must be scalar, got shape {root.data.shape}")
    if root._consumed:
        raise RuntimeError("backward: this graph was already differentiated; rebuild it first")
    root._consumed = True
    if not root.requires_grad:
        return

    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(function, x: Tensor, step: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``function`` must map ``x`` to a scalar Tensor.  The relative error per
    entry is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if step <= 0:
        raise ValueError(f"grad_check: step must be > 0, got {step}")
    x.requires_grad = True
    x.grad = None
    out = function(x)
    if out.data.shape != ():
        raise ValueError(f"grad_check: function output must be scalar, got shape {out.data.shape}")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad

    numeric = np.zeros_like(x.data)
    flat = x.data.flat
    num_flat = numeric.flat
    for i in range(x.data.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = function(x).item()
        flat[i] = orig - step
        f_minus = function(x).item()
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
