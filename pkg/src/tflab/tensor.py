"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is a numpy float64 array wrapped in a Tensor. Ops record their
inputs and a backward closure on the output; backward() walks the recorded
nodes in exact reverse insertion order, so gradient accumulation order is
deterministic and repeated runs are bit-identical. The engine is deliberately
small: dense arrays only, no views into shared storage, no dtype zoo.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Input values are outside the op's domain (log of <= 0, div by 0, ...)."""


class MaskError(ValueError):
    """An attention mask is malformed or leaves a row with no allowed entry."""


class ParameterError(ValueError):
    """An op hyperparameter (dropout rate, temperature, ...) is out of range."""


class GraphError(RuntimeError):
    """The autodiff graph was used after being consumed by backward()."""


_seq_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block. Forward values only."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_seq_counter)
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over the axes that were broadcast to reach its shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float64)
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not align") from None


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.data, b.data, "add")
    out_data = a.data + b.data

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _node(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.data, b.data, "sub")
    out_data = a.data - b.data

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.data, b.data, "mul")
    out_data = a.data * b.data

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.data, b.data, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: zero denominator")
    out_data = a.data / b.data

    def backward(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return _node(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = _coerce(a)

    def backward(g):
        _accum(a, -g)

    return _node(-a.data, (a,), backward)


def scale(a, s: float) -> Tensor:
    """Multiply by a compile-time python scalar."""
    a = _coerce(a)
    s = float(s)

    def backward(g):
        _accum(a, g * s)

    return _node(a.data * s, (a,), backward)


def exp(a) -> Tensor:
    a = _coerce(a)
    out_data = np.exp(a.data)
    if not np.all(np.isfinite(out_data)):
        raise DomainError("exp: overflow")

    def backward(g):
        _accum(a, g * out_data)

    return _node(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: non-positive input")
    out_data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _node(out_data, (a,), backward)


def power(a, p: float) -> Tensor:
    a = _coerce(a)
    p = float(p)
    if p != round(p) and np.any(a.data <= 0.0):
        raise DomainError("power: non-integer exponent needs positive base")
    out_data = a.data ** p

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _node(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: negative input")
    out_data = np.sqrt(a.data)

    def backward(g):
        # derivative is unbounded at exactly 0; callers keep inputs positive
        _accum(a, g * 0.5 / out_data)

    return _node(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = _coerce(a)
    keep = a.data > 0.0

    def backward(g):
        _accum(a, g * keep)

    return _node(np.where(keep, a.data, 0.0), (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(a)), computed stably; derivative is the logistic sigmoid."""
    a = _coerce(a)
    out_data = np.logaddexp(0.0, a.data)

    def backward(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
        _accum(a, g * sig)

    return _node(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and structure ops

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape))

    return _node(out_data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(out_data, (a, b), backward)


def transpose(a) -> Tensor:
    a = _coerce(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expects 2-D, got {a.shape}")

    def backward(g):
        _accum(a, g.T)

    return _node(a.data.T.copy(), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(out_data.copy(), (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    parts = [_coerce(t) for t in tensors]
    if not parts:
        raise ShapeError("concat: empty input list")
    try:
        out_data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = [p.data.shape[axis] for p in parts]

    def backward(g):
        offset = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            _accum(p, g[tuple(idx)])
            offset += n

    return _node(out_data, tuple(parts), backward)


def getitem(a, idx) -> Tensor:
    a = _coerce(a)
    out_data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _node(np.array(out_data, copy=True), (a,), backward)


# ---------------------------------------------------------------------------
# neural ops

def masked_softmax(scores, mask, mode: str = "neg_inf") -> Tensor:
    """Row-wise softmax over the last axis restricted to mask==1 positions.

    mode "neg_inf" (default) sets disallowed logits to -inf before the
    softmax, so masked positions get probability exactly 0. mode "product"
    multiplies the raw scores by the mask and runs an ordinary softmax
    (kept for ablation; masked positions then leak probability mass).
    """
    scores = _coerce(scores)
    mask_arr = np.asarray(getattr(mask, "matrix", mask), dtype=np.float64)
    if mask_arr.shape != scores.shape:
        raise ShapeError(f"masked_softmax: mask shape {mask_arr.shape} != scores shape {scores.shape}")
    if not np.all((mask_arr == 0.0) | (mask_arr == 1.0)):
        raise MaskError("masked_softmax: mask entries must be 0 or 1")
    if mode not in ("neg_inf", "product"):
        raise ParameterError(f"masked_softmax: unknown mode {mode!r}")

    if mode == "product":
        z = scores.data * mask_arr
        m = z.max(axis=-1, keepdims=True)
        e = np.exp(z - m)
        denom = e.sum(axis=-1, keepdims=True)
        p = e / denom

        def backward(g):
            dot = (g * p).sum(axis=-1, keepdims=True)
            dz = p * (g - dot)
            _accum(scores, dz * mask_arr)

        return _node(p, (scores,), backward)

    allowed = mask_arr == 1.0
    if not allowed.any(axis=-1).all():
        raise MaskError("masked_softmax: a row has no allowed positions")
    neg = np.where(allowed, scores.data, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(neg - m), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    p = e / denom

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accum(scores, p * (g - dot))

    return _node(p, (scores,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-8) -> Tensor:
    """Normalize over the last axis, then apply the affine (gamma, beta)."""
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    if eps <= 0:
        raise ParameterError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        gg = g * gamma.data
        _accum(gamma, (g * xhat).sum(axis=tuple(range(g.ndim - 1))))
        _accum(beta, g.sum(axis=tuple(range(g.ndim - 1))))
        mean_gg = gg.mean(axis=-1, keepdims=True)
        mean_ggx = (gg * xhat).mean(axis=-1, keepdims=True)
        _accum(x, (gg - mean_gg - xhat * mean_ggx) * inv)

    return _node(out_data, (x, gamma, beta), backward)


def dropout(x, p: float, rng_seed: int, training: bool) -> Tensor:
    """Inverted dropout; a given (p, rng_seed) always draws the same mask."""
    x = _coerce(x)
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout: rate {p} outside [0, 1)")
    if not training or p == 0.0:
        return x
    keep = np.random.default_rng(rng_seed).random(x.shape) >= p
    factor = keep / (1.0 - p)

    def backward(g):
        _accum(x, g * factor)

    return _node(x.data * factor, (x,), backward)


def mse(pred, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    pred, target = _coerce(pred), _coerce(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    out_data = np.asarray((diff * diff).sum() / n)

    def backward(g):
        coeff = 2.0 / n * float(g)
        _accum(pred, coeff * diff)
        _accum(target, -coeff * diff)

    return _node(out_data, (pred, target), backward)


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between two vectors (1-D tensors)."""
    a, b = _coerce(a), _coerce(b)
    av, bv = a.data.reshape(-1), b.data.reshape(-1)
    if a.size != b.size:
        raise ShapeError(f"cosine_similarity: sizes {a.size} and {b.size} differ")
    na = math.sqrt(float(av @ av))
    nb = math.sqrt(float(bv @ bv))
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine_similarity: zero-norm input")
    s = float(av @ bv) / (na * nb)

    def backward(g):
        g = float(g)
        _accum(a, (g * (bv / (na * nb) - s * av / (na * na))).reshape(a.data.shape))
        _accum(b, (g * (av / (na * nb) - s * bv / (nb * nb))).reshape(b.data.shape))

    return _node(np.asarray(s), (a, b), backward)


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Visits reachable nodes in exact reverse insertion order (a valid reverse
    topological order, since ops are recorded as they execute), so
    accumulation order never varies between runs. The graph is consumed; a
    second call on the same loss raises GraphError.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward: graph already consumed; rebuild the loss before calling again")
    if not loss.requires_grad:
        raise GraphError("backward: loss does not require grad (built under no_grad or from constants)")

    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)

    loss.grad = np.ones_like(loss.data)
    for t in nodes:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
            t._backward = None
    loss._consumed = True


# ---------------------------------------------------------------------------
# optimizers

class Optimizer:
    """Shared bookkeeping: a parameter list and grad clearing."""

    def __init__(self, params: Iterable[Tensor], lr: float):
        self.params = list(params)
        if lr < 0:
            raise ParameterError("optimizer: negative learning rate")
        self.lr = float(lr)
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def remove_params(self, dropped: Iterable[Tensor]) -> None:
        gone = {id(p) for p in dropped}
        self.params = [p for p in self.params if id(p) not in gone]
        self._drop_state(gone)

    def _drop_state(self, gone: set[int]) -> None:
        pass

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def step(self) -> None:
        self.step_count += 1
        for p in self.params:
            if p.grad is None:
                continue
            p.data -= self.lr * p.grad


class Adam(Optimizer):
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ParameterError("adam: betas must lie in [0, 1)")
        if eps <= 0:
            raise ParameterError("adam: eps must be positive")
        self.betas = (float(b1), float(b2))
        self.eps = float(eps)
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def _drop_state(self, gone: set[int]) -> None:
        for key in list(self._m):
            if key in gone:
                del self._m[key]
                del self._v[key]

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        for p in self.params:
            if p.grad is None:
                continue
            key = id(p)
            m = self._m.get(key)
            v = self._v.get(key)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = b1 * m + (1.0 - b1) * p.grad
            v = b2 * v + (1.0 - b2) * (p.grad * p.grad)
            self._m[key] = m
            self._v[key] = v
            mhat = m / (1.0 - b1 ** t)
            vhat = v / (1.0 - b2 ** t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, params: Iterable[Tensor], lr: float | None = None) -> Optimizer:
    if kind == "sgd":
        return SGD(params, lr if lr is not None else 1e-2)
    if kind == "adam":
        return Adam(params, lr if lr is not None else 1e-3)
    raise ParameterError(f"unknown optimizer kind {kind!r}")


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               max_coords_per_param: int = 8, seed: int = 0) -> float:
    """Compare analytic gradients of f() against central finite differences.

    f must rebuild its graph on every call and be deterministic. Returns the
    max over sampled coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    if h <= 0:
        raise ParameterError("grad_check: step h must be positive")
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ana in zip(params, analytic):
        n = p.data.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        flat = p.data.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with no_grad():
                f_plus = f().item()
            flat[c] = orig - h
            with no_grad():
                f_minus = f().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = 0.0 if ana is None else float(ana.reshape(-1)[c])
            rel = abs(a - numeric) / max(1.0, abs(a))
            if rel > worst:
                worst = rel
    return worst
