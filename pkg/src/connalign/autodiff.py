"""Dense float64 tensors with a recorded forward pass and reverse-mode gradients.

Operations only build a graph while a :class:`Recording` is active::

    with Recording() as rec:
        loss = (x * x).sum()
    grads = rec.backward(loss)   # {node_id: ndarray}

Outside a recording every primitive is a plain numpy evaluation, which is what
inference and finite-difference probes use.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NonFiniteError, ShapeError

_ids = itertools.count()
_local = threading.local()

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A shape-carrying float64 array that can take part in a recording."""

    __slots__ = ("data", "requires_grad", "node_id", "grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.node_id = next(_ids)
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    out_id: int
    parent_ids: tuple[int, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Recording:
    """Ordered tape of primitive applications.

    Nodes are appended as primitives run, so the list is topologically
    ordered by construction; :meth:`backward` walks it once in reverse.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    def __enter__(self) -> "Recording":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def _record(self, op, out, parents, backward):
        for p in parents:
            if p.requires_grad and p.node_id not in self._produced:
                self.leaves[p.node_id] = p
        self.nodes.append(Node(op, out.node_id, tuple(p.node_id if p.requires_grad else -1 for p in parents), backward))
        self._produced.add(out.node_id)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Seed d(loss)/d(loss) = 1 and propagate; fills ``.grad`` on leaves."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(node.out_id)
            if g is None:
                continue
            for pid, pg in zip(node.parent_ids, node.backward(g)):
                if pid < 0 or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        for nid, leaf in self.leaves.items():
            leaf.grad = grads.get(nid, np.zeros_like(leaf.data))
        return grads


def current_recording() -> Recording | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    rec = current_recording()
    if rec is None:
        raise RuntimeError("backward() called with no active Recording")
    return rec.backward(loss)


def _result(op: str, out: np.ndarray, parents: Sequence[Tensor], bw) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite values produced by '{op}' (output shape {out.shape})")
    rg = any(p.requires_grad for p in parents)
    t = Tensor._wrap(out, rg)
    if rg:
        rec = current_recording()
        if rec is not None:
            rec._record(op, t, parents, bw)
    return t


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ----------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        "mul", ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape))
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _result("log", out, (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return _result("gelu", x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _result("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value`` (no gradient there)."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    keep = ~mask
    return _result("masked_fill", np.where(mask, value, a.data), (a,), lambda g: (g * keep,))


# ----------------------------------------------------------------------
# structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return _result("matmul", ad @ bd, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose needs ndim >= 2, got shape {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result("concat", out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


def getitem(a: Tensor, idx) -> Tensor:
    src = a.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (int, np.integer, slice)) for p in parts)

    def bw(g):
        z = np.zeros(src)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _result("getitem", a.data[idx], (a,), bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab}): min {ids.min()}, max {ids.max()}")
    src = table.shape

    def bw(g):
        z = np.zeros(src)
        np.add.at(z, ids, g)
        return (z,)

    return _result("embedding", table.data[ids], (table,), bw)


# ----------------------------------------------------------------------
# fused numerics


def _masked_logits(x: np.ndarray, valid, axis: int):
    if valid is None:
        return x, None
    valid = np.broadcast_to(np.asarray(valid, dtype=bool), x.shape)
    if not valid.any(axis=axis).all():
        raise ShapeError("softmax slice with every position masked")
    return np.where(valid, x, -np.inf), valid


def softmax(a: Tensor, axis: int = -1, valid=None) -> Tensor:
    """Max-subtracted softmax; positions with ``valid`` false get weight 0."""
    if a.shape[axis] < 1:
        raise ShapeError(f"softmax over empty axis {axis} of shape {a.shape}")
    z, _ = _masked_logits(a.data, valid, axis)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _result("softmax", y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1, valid=None) -> Tensor:
    """Stable log-softmax; masked positions output 0 and receive no gradient."""
    if a.shape[axis] < 1:
        raise ShapeError(f"log_softmax over empty axis {axis} of shape {a.shape}")
    z, vmask = _masked_logits(a.data, valid, axis)
    shifted = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    if vmask is not None:
        out = np.where(vmask, out, 0.0)

    def bw(g):
        if vmask is not None:
            g = np.where(vmask, g, 0.0)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result("layer_norm", xhat * gd + beta.data, (x, gamma, beta), bw)


def l2_normalize(x: Tensor, eps: float = 1e-12, axis: int = -1) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    y = xd / denom

    def bw(g):
        radial = np.where(big, y * (g * y).sum(axis=axis, keepdims=True), 0.0)
        return ((g - radial) / denom,)

    return _result("l2_normalize", y, (x,), bw)


# ----------------------------------------------------------------------
# verification


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Largest |analytic - central difference| / max(1, |analytic|) over entries.

    ``f`` is re-evaluated with each parameter entry nudged by ``±step`` in
    place. ``max_entries`` caps how many entries per parameter are probed
    (chosen with ``seed``); ``None`` probes all of them.
    """
    for p in params:
        p.grad = None
    with Recording() as rec:
        loss = f()
    rec.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
