"""Reverse-mode autodiff over numpy arrays.

Small tape-based autograd: each op returns a new Tensor holding a backward
closure over its parents. The tape is rebuilt on every forward pass; calling
`backward()` on a scalar loss accumulates gradients into `.grad` of every
reachable tensor with `requires_grad=True`. Double precision is used for
gradient checking, single precision for training.
"""

from __future__ import annotations

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ContractError(RuntimeError):
    """An op was called outside its contract (bad preconditions)."""


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _backward=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward_fn = _backward

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.values.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar; grads accumulate until zeroed."""
        if self.values.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and (p.requires_grad or p._parents):
                    stack.append((p, False))
        # stored gradients are never mutated in place, so aliasing closure
        # outputs is safe; a second contribution allocates the sum
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward_fn is None:
                continue
            for parent, pg in node._backward_fn(g):
                if not (parent.requires_grad or parent._parents):
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _needs_tape(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _make(values: np.ndarray, parents: tuple, backward) -> Tensor:
    if _needs_tape(*parents):
        return Tensor(values, _parents=parents, _backward=backward)
    return Tensor(values)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = a.values + b.values

    def bwd(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = a.values - b.values

    def bwd(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    out = a.values * b.values

    def bwd(g):
        return ((a, _unbroadcast(g * b.values, a.shape)),
                (b, _unbroadcast(g * a.values, b.shape)))

    return _make(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.values * s

    def bwd(g):
        return ((a, g * s),)

    return _make(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports 2-D and stacked 3-D operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.shape[-1] != b.values.shape[-2 if b.values.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.values @ b.values

    def bwd(g):
        ga = g @ np.swapaxes(b.values, -1, -2)
        gb = np.swapaxes(a.values, -1, -2) @ g
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

    return _make(out, (a, b), bwd)


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.values.sum(dtype=a.values.dtype))

    def bwd(g):
        return ((a, np.broadcast_to(g, a.shape)),)

    return _make(out, (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.values.size
    out = np.asarray(a.values.sum(dtype=a.values.dtype) / n)

    def bwd(g):
        return ((a, np.broadcast_to(g / n, a.shape)),)

    return _make(out, (a,), bwd)


def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1,
            bias: np.ndarray | None = None) -> Tensor:
    """Temperature softmax with max-subtraction; temperature must be > 0.

    `bias` is a constant additive term (an attention mask); it shifts the
    logits but takes no gradient.
    """
    if temperature <= 0:
        raise ContractError(f"softmax temperature must be positive, got {temperature}")
    x = _as_tensor(x)
    if not np.isfinite(x.values).all():
        raise NumericError("softmax input contains non-finite values")
    z = x.values / temperature
    if bias is not None:
        z = z + bias
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((x, (out * (g - dot)) / temperature),)

    return _make(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bwd(g):
        return ((x, g - sm * g.sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bwd)


def cross_entropy(pred_logits: Tensor, target_probs: Tensor | np.ndarray) -> Tensor:
    """-sum(target * log_softmax(pred)); mean over leading axes if batched.

    Targets are treated as constants (no gradient flows into them).
    """
    pred_logits = _as_tensor(pred_logits)
    q = target_probs.values if isinstance(target_probs, Tensor) else np.asarray(target_probs)
    if pred_logits.shape != q.shape:
        raise DimensionError(
            f"cross_entropy operands disagree: pred {pred_logits.shape} vs target {q.shape}")
    if (q < -1e-9).any():
        raise ContractError("cross_entropy target probabilities must be non-negative")
    sums = q.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise ContractError("cross_entropy target probabilities must sum to 1")
    rows = cross_entropy_rows(pred_logits, q)
    return tmean(rows) if rows.values.ndim else rows


def cross_entropy_rows(pred_logits: Tensor, target_probs: np.ndarray) -> Tensor:
    """Per-row cross entropy over the last axis, no reduction."""
    lsm = log_softmax(pred_logits, axis=-1)
    q = np.asarray(target_probs, dtype=pred_logits.dtype)
    prod = mul(lsm, Tensor(q, dtype=pred_logits.dtype))
    out = -prod.values.sum(axis=-1)

    def bwd(g):
        return ((prod, -np.repeat(np.expand_dims(g, -1), q.shape[-1], axis=-1)),)

    return _make(np.asarray(out), (prod,), bwd)


def smooth_l1(a: Tensor, b: Tensor | np.ndarray, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 (Huber) distance: 0.5 e^2/beta if |e|<beta else |e|-0.5 beta."""
    a = _as_tensor(a)
    bv = b.values if isinstance(b, Tensor) else np.asarray(b)
    b_t = b if isinstance(b, Tensor) else Tensor(bv, dtype=a.dtype)
    if a.shape != b_t.shape:
        raise DimensionError(f"smooth_l1 operands disagree: {a.shape} vs {b_t.shape}")
    e = a.values - b_t.values
    ae = np.abs(e)
    quad = ae < beta
    vals = np.where(quad, 0.5 * e * e / beta, ae - 0.5 * beta)
    n = vals.size
    out = np.asarray(vals.sum(dtype=a.dtype) / n)

    def bwd(g):
        de = np.where(quad, e / beta, np.sign(e)) * (g / n)
        return ((a, de), (b_t, -de))

    return _make(out, (a, b_t), bwd)


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.values))
    out = x.values * sig

    def bwd(g):
        return ((x, g * (sig * (1.0 + x.values * (1.0 - sig)))),)

    return _make(out, (x,), bwd)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """RMS normalization over the last axis, with a learned gain."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(f"rms_norm gain {weight.shape} does not match input {x.shape}")
    d = x.shape[-1]
    ms = (x.values * x.values).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xn = x.values * inv
    out = xn * weight.values

    def bwd(g):
        gw = (g * xn).reshape(-1, d).sum(axis=0)
        gxn = g * weight.values
        gx = inv * gxn - (x.values * inv ** 3 / d) * (gxn * x.values).sum(axis=-1, keepdims=True)
        return ((x, gx), (weight, gw))

    return _make(out, (x, weight), bwd)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive (even, odd) channel pairs by per-position angles.

    x: (..., S, D) with D even; cos/sin: (S, D/2) broadcast over leading axes.
    """
    x = _as_tensor(x)
    if x.shape[-1] % 2:
        raise DimensionError(f"rotary needs an even channel count, got {x.shape}")
    xe, xo = x.values[..., 0::2], x.values[..., 1::2]
    out = np.empty_like(x.values)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def bwd(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return ((x, gx),)

    return _make(out, (x,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from an embedding table; scatter-add on backward."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    out = table.values[ids]

    def bwd(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids, g)
        return ((table, gt),)

    return _make(out, (table,), bwd)


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = np.concatenate([a.values, b.values], axis=axis)
    na = a.shape[axis]

    def bwd(g):
        ga, gb = np.split(g, [na], axis=axis)
        return ((a, ga), (b, gb))

    return _make(out, (a, b), bwd)


def gather_last(x: Tensor, indices: np.ndarray) -> Tensor:
    """Per-row gather along the last axis; indices shape matches x bar last dim."""
    x = _as_tensor(x)
    idx = np.asarray(indices)
    out = np.take_along_axis(x.values, idx, axis=-1)

    def bwd(g):
        gx = np.zeros_like(x.values)
        np.put_along_axis(gx, idx, g, axis=-1)  # indices are distinct per row
        return ((x, gx),)

    return _make(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.values.reshape(shape)
    orig = x.shape

    def bwd(g):
        return ((x, g.reshape(orig)),)

    return _make(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    out = x.values.transpose(axes)
    inv = np.argsort(axes)

    def bwd(g):
        return ((x, g.transpose(inv)),)

    return _make(out, (x,), bwd)


def shift_right_rows(x: Tensor) -> Tensor:
    """Shift along axis 1 by one position; zeros enter at column 0."""
    x = _as_tensor(x)
    out = np.zeros_like(x.values)
    out[:, 1:] = x.values[:, :-1]

    def bwd(g):
        gx = np.zeros_like(g)
        gx[:, :-1] = g[:, 1:]
        return ((x, gx),)

    return _make(out, (x,), bwd)


def masked_rows(x: Tensor, row_mask: np.ndarray) -> Tensor:
    """Select rows (leading axis) by boolean mask."""
    x = _as_tensor(x)
    mask = np.asarray(row_mask, dtype=bool)
    out = x.values[mask]

    def bwd(g):
        gx = np.zeros_like(x.values)
        gx[mask] = g
        return ((x, gx),)

    return _make(out, (x,), bwd)


class AdamW:
    """Decoupled-weight-decay Adam over a list of parameter Tensors."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def clip_grad_norm(self, max_norm: float) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(total))
        if norm > max_norm and norm > 0:
            s = max_norm / norm
            for p in self.params:
                if p.grad is not None:
                    p.grad *= s
        return norm

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.values -= self.lr * self.weight_decay * p.values
            p.values -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def adamw_step(params: list[Tensor], state: AdamW) -> None:
    """Apply one optimizer update from the grads stored on `params`."""
    assert state.params is params or all(a is b for a, b in zip(state.params, params))
    state.step()
