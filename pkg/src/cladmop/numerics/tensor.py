"""Dense tensor values on a dynamic differentiation tape.

Every value is a rank-1 or rank-2 numpy array wrapped in a ``Tensor`` node.
The tape is rebuilt on every forward pass: operations record their parents
and a backward closure, and :func:`backward` replays the tape in reverse
topological order, accumulating gradients into every reachable
:class:`Parameter`.

Storage defaults to float32. All operations preserve the dtype of their
inputs, so the same graph code runs end-to-end in float64 when tight
tolerances are needed (gradient checks, loss oracles). Reductions always
accumulate in float64 before casting back to the working dtype.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's precondition."""


class Tensor:
    """One node of the computation tape."""

    __slots__ = ("data", "parents", "backward_fn", "grad", "param", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, param=None):
        self.data = data
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None
        self.param = param
        self.requires_grad = param is not None or any(
            p.requires_grad for p in parents
        )

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype})"


class Parameter:
    """Model weight with an accumulated gradient.

    ``trainable=False`` marks the value frozen: the value array is never
    touched by an optimizer step, though gradients still accumulate so
    downstream code can audit flow.
    """

    __slots__ = ("value", "grad", "trainable", "name")

    def __init__(self, value, trainable=True, name=""):
        self.value = np.asarray(value)
        if self.value.ndim not in (1, 2):
            raise ShapeError(f"parameters must be rank 1 or 2, got {self.value.ndim}")
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def tensor(self) -> Tensor:
        """Fresh leaf node for this parameter on the current tape."""
        return Tensor(self.value, param=self)

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={tuple(self.shape)}, trainable={self.trainable})"


def constant(values, dtype=np.float32) -> Tensor:
    """Leaf tensor that never receives gradient."""
    arr = np.asarray(values, dtype=dtype)
    return Tensor(arr)


def _accumulate(node: Tensor, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.array(g, dtype=node.data.dtype)
    else:
        node.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable Parameter.

    Repeated calls without zeroing the parameters' gradients accumulate.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.grad is None:
            continue
        if node.backward_fn is not None:
            node.backward_fn(node.grad)
        if node.param is not None:
            node.param.grad += node.grad.reshape(node.param.grad.shape)


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
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# elementwise / broadcast arithmetic


def _is_row_broadcast(big, small) -> bool:
    return (
        big.ndim == 2
        and small.ndim == 2
        and small.shape[0] == 1
        and small.shape[1] == big.shape[1]
    )


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    # row-broadcast case: reduce over rows, float64 accumulation
    return np.sum(g, axis=0, keepdims=True, dtype=np.float64).astype(g.dtype)


def _check_addable(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if _is_row_broadcast(a.data, b.data) or _is_row_broadcast(b.data, a.data):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_addable(a, b, "add")
    out = Tensor(a.data + b.data, (a, b))

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _sum_to(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _sum_to(g, b.shape))

    out.backward_fn = backward_fn
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_addable(a, b, "sub")
    out = Tensor(a.data - b.data, (a, b))

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _sum_to(g, a.shape))
        if b.requires_grad:
            _accumulate(b, -_sum_to(g, b.shape))

    out.backward_fn = backward_fn
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_addable(a, b, "mul")
    out = Tensor(a.data * b.data, (a, b))

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _sum_to(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _sum_to(g * a.data, b.shape))

    out.backward_fn = backward_fn
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * a.data.dtype.type(c), (a,))

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g * a.data.dtype.type(c))

    out.backward_fn = backward_fn
    return out


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, (a, b))

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    out.backward_fn = backward_fn
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose requires rank 2, got shape {a.shape}")
    out = Tensor(np.ascontiguousarray(a.data.T), (a,))

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g.T)

    out.backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0), (a,))

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0))

    out.backward_fn = backward_fn
    return out


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.data))
    s = s.astype(a.data.dtype)
    out = Tensor(s, (a,))

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g * s * (1.0 - s))

    out.backward_fn = backward_fn
    return out


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = Tensor(e, (a,))

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g * e)

    out.backward_fn = backward_fn
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), (a,))

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    out.backward_fn = backward_fn
    return out


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """Clamp values; gradient passes through only where unclipped."""
    out = Tensor(np.clip(a.data, low, high), (a,))
    inside = (a.data > low) & (a.data < high)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g * inside)

    out.backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)


def sum_all(a: Tensor) -> Tensor:
    val = np.sum(a.data, dtype=np.float64)
    out = Tensor(np.array([[val]], dtype=a.data.dtype), (a,))

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, np.full_like(a.data, g.reshape(-1)[0]))

    out.backward_fn = backward_fn
    return out


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


def mean_rows(a: Tensor) -> Tensor:
    """Arithmetic mean over rows: (n, d) -> (1, d)."""
    if a.data.ndim != 2 or a.shape[0] < 1:
        raise ShapeError(f"mean_rows requires a nonempty rank-2 tensor, got {a.shape}")
    n = a.shape[0]
    val = (np.sum(a.data, axis=0, keepdims=True, dtype=np.float64) / n).astype(
        a.data.dtype
    )
    out = Tensor(val, (a,))

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, np.repeat(g / n, n, axis=0))

    out.backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# structural ops


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows of zero tensors")
    width = parts[0].shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != width:
            raise ShapeError(f"concat_rows: width mismatch {p.shape} vs {width}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0), tuple(parts))
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, g[lo:hi])

    out.backward_fn = backward_fn
    return out


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of zero tensors")
    height = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != height:
            raise ShapeError(f"concat_cols: height mismatch {p.shape} vs {height}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1), tuple(parts))
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, g[:, lo:hi])

    out.backward_fn = backward_fn
    return out


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    out = Tensor(a.data[lo:hi].copy(), (a,))

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[lo:hi] = g
            _accumulate(a, full)

    out.backward_fn = backward_fn
    return out


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    out = Tensor(np.ascontiguousarray(a.data[:, lo:hi]), (a,))

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, lo:hi] = g
            _accumulate(a, full)

    out.backward_fn = backward_fn
    return out


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows by index (table lookup); backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows requires rank 2, got {a.shape}")
    out = Tensor(a.data[idx], (a,))

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accumulate(a, full)

    out.backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# fused row-wise ops


def softmax_rows(x: Tensor) -> Tensor:
    """Row-stabilized softmax: each output row is nonnegative and sums to 1."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows requires rank 2, got {x.shape}")
    shifted = x.data - np.max(x.data, axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=1, keepdims=True, dtype=np.float64).astype(e.dtype)
    s = s.astype(x.data.dtype)
    out = Tensor(s, (x,))

    def backward_fn(g):
        if x.requires_grad:
            inner = np.sum(g * s, axis=1, keepdims=True, dtype=np.float64).astype(
                g.dtype
            )
            _accumulate(x, s * (g - inner))

    out.backward_fn = backward_fn
    return out


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows requires rank 2, got {x.shape}")
    shifted = x.data - np.max(x.data, axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True, dtype=np.float64))
    val = (shifted - lse).astype(x.data.dtype)
    sm = np.exp(val)
    out = Tensor(val, (x,))

    def backward_fn(g):
        if x.requires_grad:
            rowsum = np.sum(g, axis=1, keepdims=True, dtype=np.float64).astype(g.dtype)
            _accumulate(x, g - sm * rowsum)

    out.backward_fn = backward_fn
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to mean 0 / variance 1, then affine transform."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm requires rank 2, got {x.shape}")
    d = x.shape[1]
    if gain.data.reshape(-1).shape[0] != d or bias.data.reshape(-1).shape[0] != d:
        raise ShapeError(
            f"layer_norm: gain/bias length must equal last dim {d}, "
            f"got {gain.shape} and {bias.shape}"
        )
    x64 = x.data.astype(np.float64)
    mu = np.mean(x64, axis=1, keepdims=True)
    var = np.mean((x64 - mu) ** 2, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    g_row = gain.data.reshape(1, -1).astype(np.float64)
    b_row = bias.data.reshape(1, -1).astype(np.float64)
    out = Tensor((xhat * g_row + b_row).astype(x.data.dtype), (x, gain, bias))

    def backward_fn(g):
        g64 = g.astype(np.float64)
        if gain.requires_grad:
            _accumulate(
                gain,
                np.sum(g64 * xhat, axis=0).reshape(gain.shape).astype(gain.data.dtype),
            )
        if bias.requires_grad:
            _accumulate(
                bias, np.sum(g64, axis=0).reshape(bias.shape).astype(bias.data.dtype)
            )
        if x.requires_grad:
            gy = g64 * g_row
            m1 = np.mean(gy, axis=1, keepdims=True)
            m2 = np.mean(gy * xhat, axis=1, keepdims=True)
            _accumulate(x, ((gy - m1 - xhat * m2) * inv).astype(x.data.dtype))

    out.backward_fn = backward_fn
    return out


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit Euclidean norm."""
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows requires rank 2, got {x.shape}")
    x64 = x.data.astype(np.float64)
    norm = np.sqrt(np.sum(x64 * x64, axis=1, keepdims=True)) + eps
    xhat = x64 / norm
    out = Tensor(xhat.astype(x.data.dtype), (x,))

    def backward_fn(g):
        if x.requires_grad:
            g64 = g.astype(np.float64)
            inner = np.sum(g64 * xhat, axis=1, keepdims=True)
            _accumulate(x, ((g64 - xhat * inner) / norm).astype(x.data.dtype))

    out.backward_fn = backward_fn
    return out
