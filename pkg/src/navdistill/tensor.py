"""Dense float64 tensors with reverse-mode automatic differentiation.

Every loss in this package is assembled from the operations in this module.
A Tensor wraps a numpy float64 array together with an optional gradient
buffer and a tape node (parents + backward closure).  Tapes are rebuilt on
every forward pass; ``backward`` walks the tape once and accumulates
gradients into every reachable tensor with ``requires_grad`` set.

Scope is deliberately narrow: 2-D matmul, row-wise ops, element-wise ops,
the multi-head attention primitives, and the scalar losses the models need.
No broadcasting beyond row-bias and size-1 scalars, no views, no reuse of a
tape across passes.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class NonPositiveTemperature(ValueError):
    """Raised when a softened cross-entropy is asked for with t <= 0."""


class NonScalarLoss(ValueError):
    """Raised when backward() is called on a non-scalar tensor."""


def _as_array(values) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    return np.ascontiguousarray(a)


class Tensor:
    """A dense float64 array plus its tape node.

    ``data`` is row-major and C-contiguous, so ``data.ravel()`` is the flat
    value buffer.  ``grad`` is allocated lazily by backward passes and has
    the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.data = _as_array(values)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A constant copy of this tensor, cut off from the tape."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the common arithmetic
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op result; drops the tape node when no parent needs gradients."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_finite_shapes(name, a, b):
    raise ShapeError(f"{name}: incompatible shapes {a.data.shape} and {b.data.shape}")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise sum; also accepts a (N,) row bias against (M, N), or a size-1 operand."""
    if a.data.shape == b.data.shape:
        def bwd(g):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(g)
        return _make(a.data + b.data, (a, b), bwd)
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        def bwd(g):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(g.sum(axis=0))
        return _make(a.data + b.data, (a, b), bwd)
    if b.data.size == 1:
        def bwd(g):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(g.sum().reshape(b.data.shape))
        return _make(a.data + b.data.reshape(()), (a, b), bwd)
    _check_finite_shapes("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape == b.data.shape:
        def bwd(g):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(-g)
        return _make(a.data - b.data, (a, b), bwd)
    if b.data.size == 1:
        def bwd(g):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(-g.sum().reshape(b.data.shape))
        return _make(a.data - b.data.reshape(()), (a, b), bwd)
    if a.data.size == 1:
        def bwd(g):
            if a.requires_grad:
                a._accum(g.sum().reshape(a.data.shape))
            if b.requires_grad:
                b._accum(-g)
        return _make(a.data.reshape(()) - b.data, (a, b), bwd)
    _check_finite_shapes("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product; one operand may be size-1 (scalar gate)."""
    if a.data.shape == b.data.shape:
        def bwd(g):
            if a.requires_grad:
                a._accum(g * b.data)
            if b.requires_grad:
                b._accum(g * a.data)
        return _make(a.data * b.data, (a, b), bwd)
    if b.data.size == 1:
        bs = b.data.reshape(())
        def bwd(g):
            if a.requires_grad:
                a._accum(g * bs)
            if b.requires_grad:
                b._accum((g * a.data).sum().reshape(b.data.shape))
        return _make(a.data * bs, (a, b), bwd)
    if a.data.size == 1:
        return mul(b, a)
    _check_finite_shapes("mul", a, b)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    def bwd(g):
        a._accum(g * c)
    return _make(a.data * c, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product (M,K) @ (K,N)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        _check_finite_shapes("matmul", a, b)
    def bwd(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)
    return _make(a.data @ b.data, (a, b), bwd)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows; one tape node for the fused op."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        _check_finite_shapes("affine", x, w)
    if b.data.shape != (w.data.shape[1],):
        _check_finite_shapes("affine bias", w, b)
    def bwd(g):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            w._accum(x.data.T @ g)
        if b.requires_grad:
            b._accum(g.sum(axis=0))
    return _make(x.data @ w.data + b.data, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# nonlinearities

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU; smooth everywhere, which keeps finite-difference checks tight."""
    xd = x.data
    x2 = xd * xd
    u = _GELU_C * (xd + 0.044715 * (x2 * xd))
    th = np.tanh(u)
    out = 0.5 * xd * (1.0 + th)
    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        dx = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du
        x._accum(g * dx)
    return _make(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    s = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))
    def bwd(g):
        x._accum(g * s * (1.0 - s))
    return _make(s, (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, max-shifted for stability."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got shape {x.data.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        x._accum(y * (g - dot))
    return _make(y, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to mean 0 / variance 1, then affine by gamma, beta."""
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-D tensor, got shape {x.data.shape}")
    d = x.data.shape[1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} do not match width {d}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    def bwd(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            x._accum(inv * (dxhat - m1 - xhat * m2))
    return _make(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# multi-head attention primitives
#
# Heads are carried stacked along the row axis: the score matrix for h heads
# over S_q queries and S_k keys is a single (h*S_q, S_k) tensor, rows grouped
# head-major.  A row-wise softmax of that stack is exactly the per-head
# attention softmax, and an MSE over the stack equals the per-head-averaged
# MSE used for attention alignment.


def head_scores(q: Tensor, k: Tensor, n_heads: int) -> Tensor:
    """Scaled dot-product scores per head: (h*S_q, S_k), scale 1/sqrt(D/h)."""
    sq, d = q.data.shape
    sk, dk_ = k.data.shape
    if dk_ != d or d % n_heads != 0:
        _check_finite_shapes(f"head_scores[h={n_heads}]", q, k)
    dh = d // n_heads
    inv = 1.0 / math.sqrt(dh)
    q3 = q.data.reshape(sq, n_heads, dh).transpose(1, 0, 2)
    k3 = k.data.reshape(sk, n_heads, dh).transpose(1, 0, 2)
    s = (q3 @ k3.transpose(0, 2, 1)) * inv
    def bwd(g):
        g3 = g.reshape(n_heads, sq, sk)
        if q.requires_grad:
            dq3 = (g3 @ k3) * inv
            q._accum(dq3.transpose(1, 0, 2).reshape(sq, d))
        if k.requires_grad:
            dk3 = (g3.transpose(0, 2, 1) @ q3) * inv
            k._accum(dk3.transpose(1, 0, 2).reshape(sk, d))
    return _make(s.reshape(n_heads * sq, sk), (q, k), bwd)


def head_mix(probs: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Per-head weighted value sum, heads re-concatenated: (S_q, D)."""
    sk, d = v.data.shape
    if d % n_heads != 0 or probs.data.ndim != 2 or probs.data.shape[0] % n_heads != 0 \
            or probs.data.shape[1] != sk:
        _check_finite_shapes(f"head_mix[h={n_heads}]", probs, v)
    sq = probs.data.shape[0] // n_heads
    dh = d // n_heads
    p3 = probs.data.reshape(n_heads, sq, sk)
    v3 = v.data.reshape(sk, n_heads, dh).transpose(1, 0, 2)
    c3 = p3 @ v3
    def bwd(g):
        g3 = g.reshape(sq, n_heads, dh).transpose(1, 0, 2)
        if probs.requires_grad:
            probs._accum((g3 @ v3.transpose(0, 2, 1)).reshape(n_heads * sq, sk))
        if v.requires_grad:
            dv3 = p3.transpose(0, 2, 1) @ g3
            v._accum(dv3.transpose(1, 0, 2).reshape(sk, d))
    return _make(c3.transpose(1, 0, 2).reshape(sq, d), (probs, v), bwd)


# ---------------------------------------------------------------------------
# gathering / assembly


def take_rows(x: Tensor, idx) -> Tensor:
    """Rows x[idx] of a 2-D tensor (also the embedding lookup); gradient scatter-adds."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D tensor, got shape {x.data.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    def bwd(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        x._accum(dx)
    return _make(x.data[idx], (x,), bwd)


def row(x: Tensor, i: int) -> Tensor:
    """A single row of a 2-D tensor, as a 1-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"row needs a 2-D tensor, got shape {x.data.shape}")
    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[i] = g
        x._accum(dx)
    return _make(x.data[i].copy(), (x,), bwd)


def take(x: Tensor, idx) -> Tensor:
    """Elements x[idx] of a 1-D tensor."""
    if x.data.ndim != 1:
        raise ShapeError(f"take needs a 1-D tensor, got shape {x.data.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    def bwd(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        x._accum(dx)
    return _make(x.data[idx], (x,), bwd)


def put(values: Tensor, positions, size: int) -> Tensor:
    """A length-``size`` vector holding ``values`` at ``positions``, zeros elsewhere."""
    pos = np.asarray(positions, dtype=np.int64)
    if values.data.ndim != 1 or pos.shape != values.data.shape:
        raise ShapeError(f"put: values shape {values.data.shape} vs positions {pos.shape}")
    out = np.zeros(size, dtype=np.float64)
    out[pos] = values.data
    def bwd(g):
        values._accum(g[pos])
    return _make(out, (values,), bwd)


def stack_rows(vectors: list[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a (M, N) tensor."""
    n = vectors[0].data.shape[0]
    for v in vectors:
        if v.data.ndim != 1 or v.data.shape[0] != n:
            raise ShapeError(f"stack_rows: inconsistent shape {v.data.shape}, expected ({n},)")
    data = np.stack([v.data for v in vectors])
    def bwd(g):
        for i, v in enumerate(vectors):
            if v.requires_grad:
                v._accum(g[i])
    return _make(data, tuple(vectors), bwd)


def concat_rows(mats: list[Tensor]) -> Tensor:
    """Concatenate 2-D tensors with equal column count along the row axis."""
    n = mats[0].data.shape[1]
    for m in mats:
        if m.data.ndim != 2 or m.data.shape[1] != n:
            raise ShapeError(f"concat_rows: inconsistent shape {m.data.shape}, expected (*, {n})")
    data = np.concatenate([m.data for m in mats], axis=0)
    offsets = np.cumsum([0] + [m.data.shape[0] for m in mats])
    def bwd(g):
        for i, m in enumerate(mats):
            if m.requires_grad:
                m._accum(g[offsets[i]:offsets[i + 1]])
    return _make(data, tuple(mats), bwd)


def concat_vec(vecs: list[Tensor]) -> Tensor:
    """Concatenate 1-D tensors into one vector."""
    for v in vecs:
        if v.data.ndim != 1:
            raise ShapeError(f"concat_vec needs 1-D tensors, got shape {v.data.shape}")
    data = np.concatenate([v.data for v in vecs])
    offsets = np.cumsum([0] + [v.data.shape[0] for v in vecs])
    def bwd(g):
        for i, v in enumerate(vecs):
            if v.requires_grad:
                v._accum(g[offsets[i]:offsets[i + 1]])
    return _make(data, tuple(vecs), bwd)


def flatten(x: Tensor) -> Tensor:
    shape = x.data.shape
    def bwd(g):
        x._accum(g.reshape(shape))
    return _make(x.data.reshape(-1).copy(), (x,), bwd)


def mean_rows(x: Tensor) -> Tensor:
    """Column means of a 2-D tensor: (M, N) -> (N,)."""
    if x.data.ndim != 2:
        raise ShapeError(f"mean_rows needs a 2-D tensor, got shape {x.data.shape}")
    m = x.data.shape[0]
    def bwd(g):
        x._accum(np.broadcast_to(g / m, x.data.shape).copy())
    return _make(x.data.mean(axis=0), (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(g):
        x._accum(np.broadcast_to(g, x.data.shape).copy())
    return _make(np.asarray(x.data.sum()), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    def bwd(g):
        x._accum(np.broadcast_to(g / n, x.data.shape).copy())
    return _make(np.asarray(x.data.mean()), (x,), bwd)


# ---------------------------------------------------------------------------
# losses


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of squared differences; symmetric; gradient to both sides."""
    if a.data.shape != b.data.shape:
        _check_finite_shapes("mse", a, b)
    diff = a.data - b.data
    n = diff.size
    def bwd(g):
        gs = g.reshape(())
        if a.requires_grad:
            a._accum((2.0 / n) * gs * diff)
        if b.requires_grad:
            b._accum((-2.0 / n) * gs * diff)
    return _make(np.asarray((diff ** 2).mean()), (a, b), bwd)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max()
    s = z - m
    return s - math.log(np.exp(s).sum())


def soft_cross_entropy(teacher_logits: Tensor, student_logits: Tensor, t: float) -> Tensor:
    """CE(softmax(teacher/t), softmax(student/t)) = -sum p_i log q_i.

    The teacher distribution is treated as a constant: gradients flow only to
    the student logits.
    """
    if t <= 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {t}")
    if teacher_logits.data.ndim != 1 or teacher_logits.data.shape != student_logits.data.shape:
        _check_finite_shapes("soft_cross_entropy", teacher_logits, student_logits)
    p = np.exp(_log_softmax(teacher_logits.data / t))
    logq = _log_softmax(student_logits.data / t)
    loss = -(p * logq).sum()
    def bwd(g):
        if student_logits.requires_grad:
            q = np.exp(logq)
            student_logits._accum(g.reshape(()) * (q - p) / t)
    return _make(np.asarray(loss), (student_logits,), bwd)


def cross_entropy_index(logits: Tensor, target: int) -> Tensor:
    """Negative log softmax probability of the target index."""
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy_index needs 1-D logits, got shape {logits.data.shape}")
    n = logits.data.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range for {n} logits")
    logq = _log_softmax(logits.data)
    def bwd(g):
        if logits.requires_grad:
            q = np.exp(logq)
            q[target] -= 1.0
            logits._accum(g.reshape(()) * q)
    return _make(np.asarray(-logq[target]), (logits,), bwd)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor):
    """Accumulate d(loss)/d(tensor) into every reachable requires_grad tensor.

    Repeated calls without zeroing the grads accumulate, matching the usual
    gradient-accumulation semantics.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss._accum(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# parameter initialization


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    """Xavier-uniform weight init; fan sizes read off the first/last dims."""
    fan_in, fan_out = shape[0], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)
