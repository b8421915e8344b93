"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is define-by-run: every operation on a :class:`Tensor` appends a
node to an implicit tape, and ``loss.backward()`` walks the tape in reverse
topological order exactly once. Only float64 is supported; broadcasting is
limited to aligning a smaller operand against the trailing axes of a larger
one (leading batch dimensions), which keeps the op set small enough to audit.

The traversal order is a deterministic function of graph construction order,
so seeded runs accumulate gradients in a fixed order and are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with an op; names the op and the shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing leading-axis broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


def _as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(t: "Tensor") -> bool:
    return t.requires_grad or bool(t._parents)


class Tensor:
    """A dense float64 array that records the ops applied to it.

    Leaves created with ``requires_grad=True`` are parameters: after
    ``backward()`` their ``grad`` slot holds dL/dparam (overwritten, not
    accumulated, on every backward). Leaves without ``requires_grad`` are
    constants and never receive gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @staticmethod
    def _op(data: np.ndarray, parents: tuple, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad or p._parents for p in parents):
            out._parents = parents
            out._backward = backward
        return out

    # ------------------------------------------------------------------
    # basic structure
    # ------------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # ------------------------------------------------------------------
    # arithmetic
    # ------------------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        try:
            data = self.data + other.data
        except ValueError:
            raise ShapeError("add", self.shape, other.shape) from None

        def backward(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return Tensor._op(data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(g):
            return (-g,)

        return Tensor._op(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        try:
            data = self.data * other.data
        except ValueError:
            raise ShapeError("mul", self.shape, other.shape) from None
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g * b.data, a.shape) if _needs_grad(a) else None
            gb = _unbroadcast(g * a.data, b.shape) if _needs_grad(b) else None
            return ga, gb

        return Tensor._op(data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        try:
            data = self.data / other.data
        except ValueError:
            raise ShapeError("div", self.shape, other.shape) from None
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g / b.data, a.shape)
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            return ga, gb

        return Tensor._op(data, (self, other), backward)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise TypeError("only scalar exponents are supported")
        data = self.data**n
        x = self

        def backward(g):
            return (g * n * x.data ** (n - 1),)

        return Tensor._op(data, (self,), backward)

    def __matmul__(self, other):
        other = _as_tensor(other)
        if self.ndim < 2 or other.ndim < 2:
            raise ShapeError("matmul", self.shape, other.shape)
        try:
            data = self.data @ other.data
        except ValueError:
            raise ShapeError("matmul", self.shape, other.shape) from None
        a, b = self, other

        def backward(g):
            ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape) if _needs_grad(a) else None
            gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape) if _needs_grad(b) else None
            return ga, gb

        return Tensor._op(data, (self, other), backward)

    # ------------------------------------------------------------------
    # elementwise nonlinearities
    # ------------------------------------------------------------------

    def relu(self):
        x = self

        def backward(g):
            return (g * (x.data > 0),)

        return Tensor._op(np.maximum(self.data, 0.0), (self,), backward)

    def sigmoid(self):
        out = np.empty_like(self.data)
        pos = self.data >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-self.data[pos]))
        ez = np.exp(self.data[~pos])
        out[~pos] = ez / (1.0 + ez)

        def backward(g):
            return (g * out * (1.0 - out),)

        return Tensor._op(out, (self,), backward)

    def exp(self):
        out = np.exp(self.data)

        def backward(g):
            return (g * out,)

        return Tensor._op(out, (self,), backward)

    def log(self):
        x = self

        def backward(g):
            return (g / x.data,)

        return Tensor._op(np.log(self.data), (self,), backward)

    def sqrt(self):
        out = np.sqrt(self.data)

        def backward(g):
            # subgradient 0 at exactly 0 so distances to coincident points
            # do not poison the graph with infinities
            safe = np.where(out > 0.0, out, 1.0)
            return (np.where(out > 0.0, g * 0.5 / safe, 0.0),)

        return Tensor._op(out, (self,), backward)

    def softmax(self, axis: int = -1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            inner = (g * out).sum(axis=axis, keepdims=True)
            return (out * (g - inner),)

        return Tensor._op(out, (self,), backward)

    # ------------------------------------------------------------------
    # reductions and reshaping
    # ------------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            gk = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gk, shape).copy(),)

        return Tensor._op(data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.shape[a] for a in axis]))
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        data = self.data.reshape(shape)

        def backward(g):
            return (g.reshape(old),)

        return Tensor._op(data, (self,), backward)

    def transpose(self, axes):
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        data = self.data.transpose(axes)

        def backward(g):
            return (g.transpose(inverse),)

        return Tensor._op(data, (self,), backward)

    def __getitem__(self, key):
        data = self.data[key]
        shape = self.shape

        def backward(g):
            full = np.zeros(shape)
            full[key] = g
            return (full,)

        return Tensor._op(data, (self,), backward)

    def index_select(self, axis: int, indices) -> "Tensor":
        indices = np.asarray(indices, dtype=np.intp)
        data = np.take(self.data, indices, axis=axis)
        shape = self.shape
        unique = np.unique(indices).size == indices.size

        def backward(g):
            full = np.zeros(shape)
            idx = [slice(None)] * len(shape)
            idx[axis] = indices
            if unique:
                full[tuple(idx)] = g
            else:
                # np.add.at is slow but handles repeated indices correctly
                np.add.at(full, tuple(idx), g)
            return (full,)

        return Tensor._op(data, (self,), backward)

    # ------------------------------------------------------------------
    # autograd driver
    # ------------------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every reachable ``requires_grad`` leaf.

        Must be called on a scalar (the loss). Leaf gradients are overwritten,
        so no explicit zeroing between steps is needed.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg


def scale_rows(x: np.ndarray, weight: Tensor, bias: Tensor) -> Tensor:
    """out[..., f, h] = x[..., f] * weight[f, h] + bias[f, h].

    Fused broadcast-multiply-add for per-feature linear embeddings of scalar
    inputs; the backward contracts the batch axes directly instead of
    materializing full-size temporaries.
    """
    x = np.asarray(x, dtype=np.float64)
    if weight.shape != bias.shape or x.shape[-1] != weight.shape[0]:
        raise ShapeError("scale_rows", x.shape, weight.shape, bias.shape)
    data = x[..., None] * weight.data + bias.data
    batch_axes = tuple(range(x.ndim - 1))
    f, h = weight.shape
    flat_x = x.reshape(-1, f)

    def backward(g):
        flat_g = g.reshape(-1, f, h)
        gw = np.einsum("nfh,nf->fh", flat_g, flat_x) if _needs_grad(weight) else None
        gb = g.sum(axis=batch_axes) if _needs_grad(bias) else None
        return gw, gb

    return Tensor._op(data, (weight, bias), backward)


def concat(tensors: list, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._op(data, tuple(tensors), backward)


def stack(tensors: list, axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = _as_tensor(t)
        expanded.append(t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]))
    return concat(expanded, axis=axis)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Attention(q, k, v) = softmax(q kᵀ / √d) v over the last two axes."""
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    scores = (q @ k.transpose(tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))) * (1.0 / np.sqrt(d))
    return scores.softmax(axis=-1) @ v


def bce(p: Tensor, y) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against labels ``y``."""
    p = _as_tensor(p)
    y = _as_tensor(y)
    losses = -(y * p.log() + (1.0 - y) * (1.0 - p).log())
    return losses.mean()


def bce_with_logits(z: Tensor, y) -> Tensor:
    """Numerically stable mean BCE of sigmoid(z) against labels ``y``.

    Uses max(z,0) − z·y + log(1+exp(−|z|)) so large logits never overflow.
    """
    z = _as_tensor(z)
    yv = np.asarray(_as_tensor(y).data, dtype=np.float64)
    data = np.maximum(z.data, 0.0) - z.data * yv + np.log1p(np.exp(-np.abs(z.data)))
    n = data.size
    zt = z

    def backward(g):
        p = np.empty_like(zt.data)
        pos = zt.data >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-zt.data[pos]))
        ez = np.exp(zt.data[~pos])
        p[~pos] = ez / (1.0 + ez)
        return (np.broadcast_to(g, zt.shape) * (p - yv),)

    out = Tensor._op(data, (z,), backward)
    return out.sum() * (1.0 / n)


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates, one pair per parameter, plus timestep."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @staticmethod
    def for_params(params: list) -> "AdamState":
        return AdamState(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            t=0,
        )


def adam_step(
    params: list,
    grads: list,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One Adam update with bias correction; mutates ``params`` in place."""
    if len(params) != len(state.m):
        raise ShapeError("adam_step", (len(params),), (len(state.m),))
    state.t += 1
    t = state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeError("adam_step", p.data.shape, g.shape)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def gradcheck(loss_fn, params: list, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call. Error per coordinate is |a − n| / (|a| + |n| + 1e-12).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            flat[i] = orig - eps
            down = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("loss is not finite during perturbation")
            num = (up - down) / (2.0 * eps)
            err = abs(aflat[i] - num) / (abs(aflat[i]) + abs(num) + 1e-12)
            worst = max(worst, err)
    return worst
