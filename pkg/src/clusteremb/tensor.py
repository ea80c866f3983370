"""Dense numerics with define-by-run reverse-mode gradients.

Every op returns a :class:`Tensor` whose backward closure pushes the
incoming gradient into its parents. The tape is implicit: calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order. Graphs are rebuilt per minibatch.

Values are float32 by default. :func:`precision` switches the dtype used
for newly created parameters, which gradient checks use to run in float64.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True

UNIFORM_LOW = 1e-20
UNIFORM_HIGH = 1.0 - 1e-7


class DimensionError(ValueError):
    """Raised when operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient contains NaN or Inf."""


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype of newly created tensors."""
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @classmethod
    def param(cls, data) -> "Tensor":
        return cls(np.array(data, dtype=_DTYPE), requires_grad=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        """Backpropagate from this tensor; a scalar gets seed gradient 1."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and (p._parents or p.requires_grad):
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # interior nodes: release graph and gradient buffers
                node.grad = None
                node._backward = None
                node._parents = ()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents)
    out.requires_grad = False
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")

    def backward(g):
        if _tracks(a):
            a._accumulate(_unbroadcast(g, a.shape))
        if _tracks(b):
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")

    def backward(g):
        if _tracks(a):
            a._accumulate(_unbroadcast(g, a.shape))
        if _tracks(b):
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if _tracks(a):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if _tracks(b):
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)

    def backward(g):
        a._accumulate(g * c)

    return _result(a.data * c, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - y * y))

    return _result(y, (a,), backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    half = x.dtype.type(0.5) if isinstance(x, np.ndarray) else 0.5
    return half * (np.tanh(x * half) + 1)


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_np(a.data)

    def backward(g):
        a._accumulate(g * y * (1.0 - y))

    return _result(y, (a,), backward)


_ELEMENTWISE = {"tanh": tanh, "sigmoid": sigmoid, "mul": mul, "add": add}


def elementwise(name: str, *args) -> Tensor:
    """Dispatch ``tanh``, ``sigmoid``, ``mul`` or ``add`` by name."""
    try:
        fn = _ELEMENTWISE[name]
    except KeyError:
        raise ValueError(f"unknown elementwise op {name!r}") from None
    return fn(*args)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``; mask is a constant."""
    mask = np.asarray(mask, dtype=bool)
    _check_broadcast(a, b, "where")

    def backward(g):
        if _tracks(a):
            a._accumulate(_unbroadcast(np.where(mask, g, 0), a.shape))
        if _tracks(b):
            b._accumulate(_unbroadcast(np.where(mask, 0, g), b.shape))

    return _result(np.where(mask, a.data, b.data), (a, b), backward)


# ------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is 2-D and ``a`` has any leading batch dims."""
    if b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def backward(g):
        if _tracks(a):
            a._accumulate(g @ b.data.T)
        if _tracks(b):
            a2 = a.data.reshape(-1, a.shape[-1])
            b._accumulate(a2.T @ g.reshape(-1, g.shape[-1]))

    return _result(a.data @ b.data, (a, b), backward)


def _flush_subnormal(g: np.ndarray) -> np.ndarray:
    """Zero gradients below the normal range; subnormal BLAS inputs run ~30x slower."""
    tiny = np.finfo(g.dtype).tiny
    small = np.abs(g) < tiny
    if small.any():
        g = np.where(small, g.dtype.type(0), g)
    return g


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``w @ x + b`` for ``w`` of shape (p, n); ``x`` may carry leading batch dims."""
    if (w.data.ndim != 2 or x.shape[-1] != w.shape[1]
            or (b is not None and b.shape != (w.shape[0],))):
        bs = None if b is None else b.shape
        raise DimensionError(f"affine: x{x.shape}, W{w.shape}, b{bs} do not conform")

    def backward(g):
        g = _flush_subnormal(g)
        if _tracks(x):
            x._accumulate(g @ w.data)
        if _tracks(w):
            g2 = g.reshape(-1, g.shape[-1])
            w._accumulate(g2.T @ x.data.reshape(-1, x.shape[-1]))
        if b is not None and _tracks(b):
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    y = x.data @ w.data.T
    if b is None:
        return _result(y, (x, w), backward)
    return _result(y + b.data, (x, w, b), backward)


# ------------------------------------------------------------------ shaping


def take(a: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing with a scatter-add backward."""
    y = a.data[idx]

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[idx] += g

    return _result(y, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = list(tensors)
    y = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if _tracks(t):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _result(y, ts, backward)


def gather(table: Tensor, rows: np.ndarray) -> Tensor:
    """Row lookup ``table[rows]`` for an integer index array of any shape."""
    rows = np.asarray(rows)
    if rows.size and (rows.min() < 0 or rows.max() >= table.shape[0]):
        raise IndexError(f"gather: row index out of range for table of {table.shape[0]} rows")
    y = table.data[rows]

    def backward(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, rows.reshape(-1), g.reshape((-1,) + table.shape[1:]))

    return _result(y, (table,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def total(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(a.data.sum(dtype=a.dtype), (a,), backward)


# --------------------------------------------------------- softmax and loss


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted."""
    y = _softmax_np(a.data)

    def backward(g):
        a._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (a,), backward)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is (C,) with a scalar label or (B, C) with B labels. The
    backward pass yields ``(softmax(logits) - one_hot(label)) / B``.
    """
    z = logits.data
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = z2.shape
    if lab.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {lab.shape[0]} labels for {n} rows")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    logp = log_softmax_np(z2.astype(np.float64))
    loss = -logp[np.arange(n), lab].mean()
    if not math.isfinite(loss):
        raise NonFiniteError("cross-entropy loss is not finite")
    probs = np.exp(logp)

    def backward(g):
        d = probs.copy()
        d[np.arange(n), lab] -= 1.0
        d *= float(g) / n
        d = d.astype(z.dtype)
        logits._accumulate(d[0] if single else d)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), backward)


# --------------------------------------------------------------------- RNG


class Rng:
    """Seeded random stream (PCG64) for initialisation, shuffling and noise."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, n: int) -> list["Rng"]:
        """Independent child streams, stable for a given seed."""
        children = np.random.SeedSequence(self.seed).spawn(n)
        out = []
        for ss in children:
            r = Rng.__new__(Rng)
            r.seed = self.seed
            r._gen = np.random.Generator(np.random.PCG64(ss))
            out.append(r)
        return out

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def gumbel(self, shape) -> np.ndarray:
        return gumbel_from_uniform(self._gen.random(size=shape))


class ReplayRng:
    """Records Gumbel draws on the first pass and replays them afterwards.

    Used to freeze the noise while a loss closure is evaluated repeatedly.
    """

    def __init__(self, rng: Rng):
        self._rng = rng
        self._draws: list[np.ndarray] = []
        self._pos = 0
        self.recording = True

    def rewind(self):
        """Restart the stream; replay begins once something was recorded."""
        self._pos = 0
        self.recording = not self._draws

    def gumbel(self, shape) -> np.ndarray:
        if self.recording:
            g = self._rng.gumbel(shape)
            self._draws.append(g)
            return g
        g = self._draws[self._pos]
        self._pos += 1
        if g.shape != ((shape,) if isinstance(shape, int) else tuple(shape)):
            raise DimensionError("replayed noise shape differs from request")
        return g


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), UNIFORM_LOW, UNIFORM_HIGH)
    return -np.log(-np.log(u))


def sample_gumbel(rng: Rng, n: int) -> Tensor:
    """``n`` draws of Gumbel(0, 1) noise as a constant tensor."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return Tensor(rng.gumbel(n))


# -------------------------------------------------------------------- Adam


class Adam:
    """Adam with bias correction; gradients are cleared after every step."""

    def __init__(self, params: Iterable[Tensor], lr: float = 0.001, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        for i, g in enumerate(grads):
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in parameter #{i} {self.params[i].shape}")
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
            if norm > self.clip_norm:
                c = self.clip_norm / norm
                grads = [g * g.dtype.type(c) for g in grads]

        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            upd = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            p.data -= upd.astype(p.dtype)
            p.grad = None


def adam_step(params: Sequence[Tensor], state: Adam | None = None, lr: float = 0.001) -> Adam:
    """One Adam update of ``params`` using their ``.grad``; returns the state."""
    if state is None:
        state = Adam(params, lr=lr)
    state.step()
    return state


# ---------------------------------------------------------- gradient check


def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                   eps: float = 1e-4, floor: float = 1e-6) -> float:
    """Max relative error between backprop and central finite differences.

    ``loss_fn`` must be deterministic (freeze any noise with :class:`ReplayRng`).
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.zero_grad()

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(loss_fn().data)
                flat[i] = orig - eps
                down = float(loss_fn().data)
                flat[i] = orig
                num = (up - down) / (2 * eps)
                a = float(gflat[i])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
    return worst
