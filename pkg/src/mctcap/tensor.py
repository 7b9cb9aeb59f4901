"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Tensors created through a :class:`Tape`
(via :meth:`Tape.watch`) are tracked; every operation that touches a tracked
tensor appends a node to that tape. Operations on untracked tensors skip the
bookkeeping entirely, which keeps inference cheap.

All operations act on the trailing one or two axes and accept arbitrary
leading batch axes, so a batch of sequences is processed by one graph node.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

MASK_VALUE = -1e9


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: Optional["Tape"] = None, node_id: Optional[int] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x: ArrayLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Append-only record of operations for one forward/backward pass.

    ``fault`` names an operation whose backward result is negated; it exists
    only so the gradient checker can demonstrate that it catches a broken
    derivative.
    """

    def __init__(self, fault: Optional[str] = None):
        self.nodes: List[Tuple[str, Tuple[Optional[int], ...], Optional[Callable]]] = []
        self.shapes: List[Tuple[int, ...]] = []
        self.fault = fault

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, data: ArrayLike) -> Tensor:
        """Register ``data`` as a leaf and return the tracked tensor."""
        arr = data.data if isinstance(data, Tensor) else np.asarray(data, dtype=np.float64)
        node_id = len(self.nodes)
        self.nodes.append(("leaf", (), None))
        self.shapes.append(arr.shape)
        return Tensor(arr, self, node_id)

    def record(self, op: str, value: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
        parent_ids = tuple(p.node_id if p.tape is self else None for p in parents)
        if self.fault == op:
            inner = vjp

            def vjp(g, _inner=inner):
                return tuple(None if x is None else -x for x in _inner(g))

        node_id = len(self.nodes)
        self.nodes.append((op, parent_ids, vjp))
        self.shapes.append(value.shape)
        return Tensor(value, self, node_id)

    def backward(self, root: Tensor) -> Dict[int, np.ndarray]:
        return backward(self, root)


def backward(tape: Tape, root: Tensor) -> Dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``root``; returns node id -> gradient array."""
    if root.tape is not tape:
        raise ValueError("root tensor is not recorded on this tape")
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: Dict[int, np.ndarray] = {root.node_id: np.ones(root.shape)}
    for node_id in range(root.node_id, -1, -1):
        g = grads.get(node_id)
        if g is None:
            continue
        _, parent_ids, vjp = tape.nodes[node_id]
        if vjp is None:
            continue
        parent_grads = vjp(g)
        for pid, pg in zip(parent_ids, parent_grads):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
        # interior gradients are not needed once propagated
        if tape.nodes[node_id][0] != "leaf":
            del grads[node_id]
    return grads


def _tape_of(*tensors: Tensor) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands are recorded on different tapes")
            tape = t.tape
    return tape


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(op: str, value: np.ndarray, parents: Sequence[Tensor], vjp_factory: Callable[[], Callable]) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(value)
    return tape.record(op, value, parents, vjp_factory())


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def factory():
        ad, bd = a.data, b.data

        def vjp(g):
            ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.tracked else None
            gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.tracked else None
            if ga is not None:
                ga = _unbroadcast(ga, ad.shape)
            if gb is not None:
                gb = _unbroadcast(gb, bd.shape)
            return ga, gb

        return vjp

    return _make("matmul", out, (a, b), factory)


def transpose(x: ArrayLike) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got shape {x.shape}")
    return _make("transpose", np.swapaxes(x.data, -1, -2), (x,),
                 lambda: lambda g: (np.swapaxes(g, -1, -2),))


# ---------------------------------------------------------------------------
# elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    sa, sb = a.shape, b.shape
    return _make("add", out, (a, b),
                 lambda: lambda g: (_unbroadcast(g, sa) if a.tracked else None,
                                    _unbroadcast(g, sb) if b.tracked else None))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def factory():
        ad, bd = a.data, b.data
        return lambda g: (_unbroadcast(g * bd, ad.shape) if a.tracked else None,
                          _unbroadcast(g * ad, bd.shape) if b.tracked else None)

    return _make("mul", out, (a, b), factory)


def scale(x: ArrayLike, c: float) -> Tensor:
    x = as_tensor(x)
    return _make("scale", x.data * c, (x,), lambda: lambda g: (g * c,))


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def factory():
        active = x.data > 0
        return lambda g: (g * active,)

    return _make("relu", out, (x,), factory)


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make("sigmoid", out, (x,), lambda: lambda g: (g * out * (1.0 - out),))


def tanh(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda: lambda g: (g * (1.0 - out * out),))


def masked_fill(x: ArrayLike, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replace entries where ``mask`` is True by ``value``; masked entries get zero gradient."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, value, x.data)
    except ValueError:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} does not fit {x.shape}") from None
    keep = ~mask
    return _make("masked_fill", out, (x,), lambda: lambda g: (_unbroadcast(g * keep, x.shape),))


# ---------------------------------------------------------------------------
# structural


def concat_cols(parts: Sequence[ArrayLike]) -> Tensor:
    """Concatenate along the last axis, preserving block order."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat_cols: leading shapes differ: {[q.shape for q in parts]}")
    out = np.concatenate([p.data for p in parts], axis=-1)
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def factory():
        return lambda g: tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make("concat_cols", out, parts, factory)


def slice_cols(x: ArrayLike, start: int, stop: int) -> Tensor:
    """Columns ``start:stop`` of the last axis."""
    x = as_tensor(x)
    out = x.data[..., start:stop]

    def factory():
        def vjp(g):
            full = np.zeros(x.shape)
            full[..., start:stop] = g
            return (full,)
        return vjp

    return _make("slice_cols", out, (x,), factory)


def stack(parts: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.stack([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: shapes differ: {[p.shape for p in parts]}") from None

    def factory():
        def vjp(g):
            return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))
        return vjp

    return _make("stack", out, parts, factory)


def select(x: ArrayLike, index: int, axis: int) -> Tensor:
    """Take one slice along ``axis`` (the axis is dropped)."""
    x = as_tensor(x)
    out = np.take(x.data, index, axis=axis)

    def factory():
        def vjp(g):
            full = np.zeros(x.shape)
            idx = [slice(None)] * x.data.ndim
            idx[axis] = index
            full[tuple(idx)] = g
            return (full,)
        return vjp

    return _make("select", out, (x,), factory)


def embedding_rows(table: ArrayLike, ids) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = ids[(ids < 0) | (ids >= n)].ravel()[0]
        raise IndexError(f"embedding_rows: id {bad} out of range for table with {n} rows")
    out = table.data[ids]

    def factory():
        def vjp(g):
            full = np.zeros(table.shape)
            np.add.at(full, ids.ravel(), g.reshape(-1, table.shape[-1]))
            return (full,)
        return vjp

    return _make("embedding_rows", out, (table,), factory)


def reduce_sum(x: ArrayLike, axis: Optional[int] = None) -> Tensor:
    """Sum over ``axis``; with ``axis=None`` the result has shape (1,)."""
    x = as_tensor(x)
    if axis is None:
        out = np.array([x.data.sum()])
        return _make("sum", out, (x,), lambda: lambda g: (np.full(x.shape, g[0]),))
    out = x.data.sum(axis=axis)
    return _make("sum", out, (x,),
                 lambda: lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))


# ---------------------------------------------------------------------------
# normalisation


def softmax_rows(x: ArrayLike) -> Tensor:
    """Softmax over the last axis with per-row max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def factory():
        return lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (x,), factory)


def log_softmax_rows(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def factory():
        p = np.exp(out)
        return lambda g: (g - p * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (x,), factory)


def layer_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalise each row (last axis) to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def factory():
        gd = gain.data

        def vjp(g):
            gx = None
            if x.tracked:
                gh = g * gd
                gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                            - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            gg = _unbroadcast(g * xhat, gain.shape) if gain.tracked else None
            gb = _unbroadcast(g, bias.shape) if bias.tracked else None
            return gx, gg, gb

        return vjp

    return _make("layer_norm", out, (x, gain, bias), factory)


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x: ArrayLike, eps: float = 1e-5,
               fault: Optional[str] = None) -> float:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Returns the largest per-coordinate ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    tape = Tape(fault=fault)
    xt = tape.watch(x0)
    out = f(xt)
    if out.tape is None:
        analytic = np.zeros_like(x0)
    else:
        analytic = backward(tape, out).get(xt.node_id, np.zeros_like(x0))

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(x0.copy())).data.sum())
        flat[i] = orig - eps
        lo = float(f(Tensor(x0.copy())).data.sum())
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * eps)

    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def watch_all(tape: Tape, arrays: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    return {k: tape.watch(v) for k, v in arrays.items()}


def wrap_all(arrays: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    return {k: Tensor(v) for k, v in arrays.items()}


def gradients_by_name(grads: Dict[int, np.ndarray], tensors: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    return {k: grads.get(t.node_id, np.zeros(t.shape)) for k, t in tensors.items()}


__all__: Iterable[str] = [
    "MASK_VALUE", "ShapeError", "Tensor", "Tape", "as_tensor", "backward", "matmul", "transpose",
    "add", "mul", "scale", "relu", "sigmoid", "tanh", "masked_fill", "concat_cols", "slice_cols", "stack",
    "select", "embedding_rows", "reduce_sum", "softmax_rows", "log_softmax_rows", "layer_norm",
    "grad_check", "watch_all", "wrap_all", "gradients_by_name",
]
