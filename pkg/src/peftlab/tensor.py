"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are stored as row-major numpy arrays. Every differentiable operation
records its inputs and a local gradient rule on the output tensor; calling
``backward`` on a scalar loss replays the recorded graph in reverse
topological order (the tape) and accumulates gradients additively into every
leaf that has ``requires_grad`` set.

Gradients accumulate across uses of a leaf, so optimizers must zero them
between steps. Everything is 64-bit; the only broadcasting supported is
adding a 1-D row vector to each row of a matrix (bias addition).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class Tensor:
    """A dense n-dimensional float64 value with an optional gradient buffer.

    ``data`` always has length equal to the product of ``shape`` (it *is* a
    numpy array of that shape); ``grad``, when present, matches ``data``'s
    shape exactly. Tensors produced by operations carry references to their
    parents and a gradient rule; plain leaves carry neither.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_rule", "_op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _grad_rule: Optional[Callable] = None,
        _op: str = "",
    ):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in tensor input (op={_op or 'leaf'})")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        # An op output needs gradients if any parent does; leaves say so explicitly.
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._grad_rule = _grad_rule
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A graph-free copy of the current value."""
        return Tensor(self.data.copy())

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}{flag})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """The recorded computation reachable from one output, in topological order.

    Every node's inputs precede it in ``nodes``; ``backward`` walks the list
    exactly once in reverse, so each node's gradient rule fires exactly once.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Tape":
        """Topologically order all gradient-relevant nodes feeding ``output``."""
        order: list[Tensor] = []
        visited: set[int] = set()
        # Iterative DFS keeps deep graphs from hitting the recursion limit.
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)

    def backward(self) -> None:
        root = self.nodes[-1]
        if root.grad is None:
            root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._grad_rule is not None and node.grad is not None:
                node._grad_rule(node.grad)


def backward(loss: Tensor) -> None:
    """Populate gradients of every ``requires_grad`` leaf under a scalar loss."""
    if loss.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.trace(loss).backward()


# ---------------------------------------------------------------------------
# elementwise and shape operations


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b. Shapes must match, except a 1-D ``b`` broadcast over rows of 2-D ``a``."""
    row_broadcast = a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]
    if not row_broadcast and a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not match")
    out = Tensor(a.data + b.data, _parents=(a, b), _op="add")

    def grad_rule(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0) if row_broadcast else g)

    out._grad_rule = grad_rule
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not match")
    out = Tensor(a.data - b.data, _parents=(a, b), _op="sub")

    def grad_rule(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    out._grad_rule = grad_rule
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not match")
    out = Tensor(a.data * b.data, _parents=(a, b), _op="mul")

    def grad_rule(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    out._grad_rule = grad_rule
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, _parents=(a,), _op="scale")

    def grad_rule(g):
        if a.requires_grad:
            a._accumulate(g * c)

    out._grad_rule = grad_rule
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product; dA = g·Bᵀ, dB = Aᵀ·g."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b), _op="matmul")

    def grad_rule(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._grad_rule = grad_rule
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expects a 2-D tensor, got {a.shape}")
    out = Tensor(a.data.T.copy(), _parents=(a,), _op="transpose")

    def grad_rule(g):
        if a.requires_grad:
            a._accumulate(g.T)

    out._grad_rule = grad_rule
    return out


def reshape(a: Tensor, shape: tuple) -> Tensor:
    """Row-major reshape; element count must be preserved."""
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = Tensor(a.data.reshape(shape).copy(), _parents=(a,), _op="reshape")

    def grad_rule(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    out._grad_rule = grad_rule
    return out


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Rows of ``a`` followed by rows of ``b``; both blocks preserved exactly."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: widths disagree, {a.shape} vs {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=0), _parents=(a, b), _op="concat_rows")
    na = a.shape[0]

    def grad_rule(g):
        if a.requires_grad:
            a._accumulate(g[:na])
        if b.requires_grad:
            b._accumulate(g[na:])

    out._grad_rule = grad_rule
    return out


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: row counts disagree, {a.shape} vs {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=1), _parents=(a, b), _op="concat_cols")
    ca = a.shape[1]

    def grad_rule(g):
        if a.requires_grad:
            a._accumulate(g[:, :ca])
        if b.requires_grad:
            b._accumulate(g[:, ca:])

    out._grad_rule = grad_rule
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop``; the gradient scatters back into that band."""
    if a.data.ndim != 2:
        raise ShapeError(f"slice_rows: expects a 2-D tensor, got {a.shape}")
    out = Tensor(a.data[start:stop].copy(), _parents=(a,), _op="slice_rows")

    def grad_rule(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[start:stop] = g
            a._accumulate(full)

    out._grad_rule = grad_rule
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols: expects a 2-D tensor, got {a.shape}")
    out = Tensor(a.data[:, start:stop].copy(), _parents=(a,), _op="slice_cols")

    def grad_rule(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            a._accumulate(full)

    out._grad_rule = grad_rule
    return out


def select_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather rows by index (duplicates allowed); gradient scatter-adds."""
    if a.data.ndim != 2:
        raise ShapeError(f"select_rows: expects a 2-D tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"select_rows: index out of range for {a.shape[0]} rows")
    out = Tensor(a.data[idx].copy(), _parents=(a,), _op="select_rows")

    def grad_rule(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

    out._grad_rule = grad_rule
    return out


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), _parents=(a,), _op="relu")

    def grad_rule(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    out._grad_rule = grad_rule
    return out


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax; max-subtraction keeps finite inputs overflow-free."""
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expects a 2-D tensor, got {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, _parents=(a,), _op="softmax_rows")

    def grad_rule(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            a._accumulate(y * (g - dot))

    out._grad_rule = grad_rule
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization with learnable gain and bias."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm: expects a 2-D tensor, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_sigma
    out = Tensor(xhat * gain.data + bias.data, _parents=(x, gain, bias), _op="layer_norm")

    def grad_rule(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            mean_gy = gy.mean(axis=1, keepdims=True)
            mean_gy_xhat = (gy * xhat).mean(axis=1, keepdims=True)
            x._accumulate(inv_sigma * (gy - mean_gy - xhat * mean_gy_xhat))

    out._grad_rule = grad_rule
    return out


def embedding_lookup(table: Tensor, token_ids: Sequence[int]) -> Tensor:
    """Gather table rows by token id; the gradient scatter-adds into the table."""
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    ids = np.asarray(token_ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding_lookup: token id out of range for table of {table.shape[0]} rows"
        )
    out = Tensor(table.data[ids].copy(), _parents=(table,), _op="embedding_lookup")

    def grad_rule(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            table._accumulate(full)

    out._grad_rule = grad_rule
    return out


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean over rows: (n, d) -> (d,)."""
    if a.data.ndim != 2:
        raise ShapeError(f"mean_rows: expects a 2-D tensor, got {a.shape}")
    if a.shape[0] == 0:
        raise ValueError("mean_rows: cannot average zero rows")
    n = a.shape[0]
    out = Tensor(a.data.mean(axis=0), _parents=(a,), _op="mean_rows")

    def grad_rule(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g / n, a.shape).copy())

    out._grad_rule = grad_rule
    return out


def sum_squares(a: Tensor) -> Tensor:
    """Σ xᵢ² over all elements; gradient 2x."""
    out = Tensor(np.float64((a.data * a.data).sum()), _parents=(a,), _op="sum_squares")

    def grad_rule(g):
        if a.requires_grad:
            a._accumulate(2.0 * g * a.data)

    out._grad_rule = grad_rule
    return out


def sum_all(a: Tensor) -> Tensor:
    """Σ xᵢ over all elements; gradient is all-ones."""
    out = Tensor(np.float64(a.data.sum()), _parents=(a,), _op="sum_all")

    def grad_rule(g):
        if a.requires_grad:
            a._accumulate(g * np.ones_like(a.data))

    out._grad_rule = grad_rule
    return out


def mean_scalars(items: Sequence[Tensor]) -> Tensor:
    """Mean of scalar tensors, kept on the tape."""
    if not items:
        raise ValueError("mean_scalars: empty sequence")
    total = items[0]
    for t in items[1:]:
        total = add(total, t)
    return scale(total, 1.0 / len(items))


def cross_entropy_logits(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood from raw logits, one row per example.

    Uses the row-wise log-softmax directly so saturated logits stay finite.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_logits: expects 2-D logits, got {logits.shape}")
    ids = np.asarray(labels, dtype=np.intp)
    m, c = logits.shape
    if ids.shape != (m,):
        raise ShapeError(f"cross_entropy_logits: {m} logit rows but {ids.shape} labels")
    if ids.size and (ids.min() < 0 or ids.max() >= c):
        raise ValueError(f"cross_entropy_logits: label out of range for {c} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    nll = -log_probs[np.arange(m), ids].mean()
    out = Tensor(np.float64(nll), _parents=(logits,), _op="cross_entropy_logits")
    softmax = np.exp(log_probs)

    def grad_rule(g):
        if logits.requires_grad:
            grad = softmax.copy()
            grad[np.arange(m), ids] -= 1.0
            logits._accumulate(g * grad / m)

    out._grad_rule = grad_rule
    return out


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, key_mask=None) -> Tensor:
    """Multi-head scaled dot-product attention over one sequence.

    ``q``, ``k``, ``v`` are (n, d) with d divisible by ``heads``; columns are
    split into per-head blocks, attended independently, and reassembled.
    ``key_mask`` is an optional boolean vector marking key positions (PAD)
    that no query may attend to.
    """
    n, d = q.shape
    if k.shape != (n, d) or v.shape != (n, d):
        raise ShapeError(f"attention: q/k/v shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    if d % heads != 0:
        raise ShapeError(f"attention: width {d} not divisible by {heads} heads")
    dh = d // heads
    # (n, d) -> (heads, n, dh)
    qh = q.data.reshape(n, heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(n, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(n, heads, dh).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh)
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)
        if mask.shape != (n,):
            raise ShapeError(f"attention: key_mask must have shape ({n},), got {mask.shape}")
        scores = scores - 1e9 * mask[None, None, :]
    shifted = scores - scores.max(axis=2, keepdims=True)
    e = np.exp(shifted)
    att = e / e.sum(axis=2, keepdims=True)
    ctx = att @ vh
    out = Tensor(ctx.transpose(1, 0, 2).reshape(n, d), _parents=(q, k, v), _op="attention")

    def grad_rule(g):
        gh = g.reshape(n, heads, dh).transpose(1, 0, 2)
        if v.requires_grad:
            dv = att.transpose(0, 2, 1) @ gh
            v._accumulate(dv.transpose(1, 0, 2).reshape(n, d))
        if q.requires_grad or k.requires_grad:
            datt = gh @ vh.transpose(0, 2, 1)
            dscores = att * (datt - (datt * att).sum(axis=2, keepdims=True))
            dscores /= np.sqrt(dh)
            if q.requires_grad:
                dq = dscores @ kh
                q._accumulate(dq.transpose(1, 0, 2).reshape(n, d))
            if k.requires_grad:
                dk = dscores.transpose(0, 2, 1) @ qh
                k._accumulate(dk.transpose(1, 0, 2).reshape(n, d))

    out._grad_rule = grad_rule
    return out
