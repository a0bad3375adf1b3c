"""Dense float64 tensors with a reverse-mode gradient tape.

Operations are batch-first and follow numpy broadcasting.  A ``Tape`` records
an operation only while it is active and at least one operand requires a
gradient, so inference runs at plain numpy speed.

    with Tape() as tape:
        loss = some_scalar_expression(params)
    tape.backward(loss)
"""
from __future__ import annotations

import json
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
CHECKPOINT_FORMAT = "fscm-tensors"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Tape:
    """Ordered record of primitive operations; replayed in reverse by ``backward``."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.all(np.isfinite(loss.value)):
            raise NonFiniteError(f"non-finite loss {loss.value}")
        loss.grad = np.ones_like(loss.value)
        for out, fn in reversed(self.records):
            if out.grad is not None:
                fn(out.grad)


def _active() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def _record(out_value: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _active()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(out_value)
    out = Tensor(out_value, requires_grad=True)
    tape.records.append((out, backward))
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.value.shape:
        g = _unbroadcast(g, t.value.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _acc_at(t: Tensor, key, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.value)
    t.grad[key] += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a.value, b.value, "add")

    def bw(g):
        _acc(a, g)
        _acc(b, g)

    return _record(a.value + b.value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a.value, b.value, "sub")

    def bw(g):
        _acc(a, g)
        _acc(b, -g)

    return _record(a.value - b.value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a.value, b.value, "mul")

    def bw(g):
        _acc(a, g * b.value)
        _acc(b, g * a.value)

    return _record(a.value * b.value, (a, b), bw)


mul_elementwise = mul


def sigmoid(a: Tensor) -> Tensor:
    out = _sig(a.value)

    def bw(g):
        _acc(a, g * out * (1.0 - out))

    return _record(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def bw(g):
        _acc(a, g * (1.0 - out * out))

    return _record(out, (a,), bw)


def softmax(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (broadcastable, 0/1) removes entries; a fully masked row yields
    all zeros rather than a uniform distribution.
    """
    x = logits.value
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        z = np.where(mask, x, -np.inf)
        m = z.max(axis=-1, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(np.where(mask, x, 0.0) - m), 0.0)
        s = e.sum(axis=-1, keepdims=True)
        out = e / np.where(s > 0, s, 1.0)

    def bw(g):
        _acc(logits, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _record(out, (logits,), bw)


def square_sum(a: Tensor) -> Tensor:
    def bw(g):
        _acc(a, 2.0 * g * a.value)

    return _record(np.asarray(np.sum(a.value * a.value)), (a,), bw)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.value.shape))

    return _record(np.asarray(out), (a,), bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _acc(a, g * c)

    return _record(a.value * c, (a,), bw)


# ------------------------------------------------------------------ structure


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(g):
        _acc(a, g.reshape(a.value.shape))

    return _record(a.value.reshape(shape), (a,), bw)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None

    def bw(g):
        _acc(a, _unbroadcast(g, a.value.shape))

    return _record(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [constant(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {err}") from None
    bounds = np.cumsum([0] + [t.value.shape[axis] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _acc(t, g[tuple(idx)])

    return _record(out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [constant(t) for t in tensors]
    out = np.stack([t.value for t in tensors], axis=axis)

    def bw(g):
        for k, t in enumerate(tensors):
            if t.requires_grad:
                _acc(t, np.take(g, k, axis=axis))

    return _record(out, tensors, bw)


def index(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back into ``a``."""
    out = a.value[key]
    basic = _is_basic(key)

    def bw(g):
        if not a.requires_grad:
            return
        if basic:
            _acc_at(a, key, g)
        else:
            if a.grad is None:
                a.grad = np.zeros_like(a.value)
            np.add.at(a.grad, key, g)

    return _record(np.array(out, copy=not basic) if basic else out, (a,), bw)


def _is_basic(key) -> bool:
    if not isinstance(key, tuple):
        key = (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in key)


def gather_rows(a: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    """``np.take(a, idx, axis)`` with a scatter-add backward via one-hot matmul."""
    idx = np.asarray(idx)
    n = a.value.shape[axis]
    out = np.take(a.value, idx, axis=axis)

    def bw(g):
        if not a.requires_grad:
            return
        flat = idx.reshape(-1)
        onehot = np.zeros((n, flat.size))
        onehot[flat, np.arange(flat.size)] = 1.0
        # move the gathered axes to the end, contract against the one-hot map
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(g.ndim - idx.ndim, g.ndim)))
        gm = gm.reshape(gm.shape[: g.ndim - idx.ndim] + (flat.size,))
        ga = gm @ onehot.T
        _acc(a, np.moveaxis(ga, -1, axis))

    return _record(out, (a,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    return gather_rows(table, ids, axis=0)


# -------------------------------------------------------------------- linear


def matvec(W: Tensor, x: Tensor) -> Tensor:
    if W.value.ndim != 2 or x.value.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: cannot apply {W.shape} to {x.shape}")
    return linear(x, W)


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W.T + b`` over the last axis of ``x``."""
    if W.value.ndim != 2 or x.value.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {W.shape}")
    out = x.value @ W.value.T
    if b is not None:
        if b.shape != (W.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {W.shape}")
        out = out + b.value
    inputs = (x, W) if b is None else (x, W, b)

    def bw(g):
        _acc(x, g @ W.value)
        if W.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x.value.reshape(-1, x.value.shape[-1])
            _acc(W, g2.T @ x2)
        if b is not None and b.requires_grad:
            _acc(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _record(out, inputs, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b`` with identical leading dimensions."""
    if a.value.shape[:-2] != b.value.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def bw(g):
        _acc(a, g @ np.swapaxes(b.value, -1, -2))
        _acc(b, np.swapaxes(a.value, -1, -2) @ g)

    return _record(out, (a, b), bw)


# ----------------------------------------------------------------------- GRU


def gru_cell(x: Tensor, h: Tensor, W: Tensor, U: Tensor, b: Tensor) -> Tensor:
    """One GRU step.

    ``W`` is (3H, D) and ``U`` is (3H, H), rows ordered update, reset,
    candidate.  The reset gate acts on the state before the candidate's
    recurrent product::

        z = sig(Wz x + Uz h + bz)
        r = sig(Wr x + Ur h + br)
        c = tanh(Wc x + Uc (r*h) + bc)
        h' = (1 - z) * h + z * c
    """
    H = h.value.shape[-1]
    if W.shape[0] != 3 * H or U.shape != (3 * H, H) or b.shape != (3 * H,):
        raise ShapeError(f"gru_cell: state {h.shape} inconsistent with W {W.shape}, U {U.shape}, b {b.shape}")
    if x.value.shape[-1] != W.shape[1] or x.value.shape[:-1] != h.value.shape[:-1]:
        raise ShapeError(f"gru_cell: input {x.shape} inconsistent with W {W.shape} / state {h.shape}")
    hv = h.value
    gx = x.value @ W.value.T + b.value
    Uzr = U.value[: 2 * H]
    Uc = U.value[2 * H :]
    gh = hv @ Uzr.T
    z = _sig(gx[..., :H] + gh[..., :H])
    r = _sig(gx[..., H : 2 * H] + gh[..., H:])
    rh = r * hv
    c = np.tanh(gx[..., 2 * H :] + rh @ Uc.T)
    out = hv + z * (c - hv)

    def bw(g):
        dz = g * (c - hv) * z * (1.0 - z)
        dc = g * z * (1.0 - c * c)
        drh = dc @ Uc
        dr = drh * hv * r * (1.0 - r)
        dgx = np.concatenate([dz, dr, dc], axis=-1)
        dgh = np.concatenate([dz, dr], axis=-1)
        if h.requires_grad:
            _acc(h, g * (1.0 - z) + drh * r + dgh @ Uzr)
        if x.requires_grad:
            _acc(x, dgx @ W.value)
        lead = dgx.reshape(-1, 3 * H)
        if W.requires_grad:
            _acc(W, lead.T @ x.value.reshape(-1, x.value.shape[-1]))
        if b.requires_grad:
            _acc(b, lead.sum(axis=0))
        if U.requires_grad:
            hv2 = hv.reshape(-1, H)
            dU = np.concatenate(
                [dgh.reshape(-1, 2 * H).T @ hv2, dc.reshape(-1, H).T @ rh.reshape(-1, H)], axis=0
            )
            _acc(U, dU)

    return _record(out, (x, h, W, U, b), bw)


def _sig(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --------------------------------------------------------------------- losses


def binary_cross_entropy(p: Tensor, labels: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Summed BCE with probabilities clamped to ``[eps, 1 - eps]``."""
    y = np.asarray(labels, dtype=DTYPE)
    if y.shape != p.shape:
        raise ShapeError(f"binary_cross_entropy: labels {y.shape} vs predictions {p.shape}")
    pc = np.clip(p.value, eps, 1.0 - eps)
    out = -np.sum(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    inside = (p.value > eps) & (p.value < 1.0 - eps)

    def bw(g):
        _acc(p, g * inside * (-(y / pc) + (1.0 - y) / (1.0 - pc)))

    return _record(np.asarray(out), (p,), bw)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t.value)):
        raise NonFiniteError(f"non-finite values in {what}")
    return t


# ---------------------------------------------------------------- checkpoints


def tensors_to_document(tensors: dict[str, Tensor], meta: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": {
            name: {"shape": list(t.shape), "values": t.value.reshape(-1).tolist()}
            for name, t in sorted(tensors.items())
        },
    }


def tensors_from_document(doc: dict) -> tuple[dict[str, np.ndarray], dict]:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a tensor checkpoint (format={doc.get('format')!r})")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    out = {}
    for name, entry in doc["tensors"].items():
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=DTYPE)
        if values.size != int(np.prod(shape)):
            raise ValueError(f"tensor {name!r}: {values.size} values for shape {shape}")
        out[name] = values.reshape(shape)
    return out, doc.get("meta", {})


def save_tensors(path, tensors: dict[str, Tensor], meta: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(tensors_to_document(tensors, meta), fh, sort_keys=True)
        fh.write("\n")


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as fh:
        return tensors_from_document(json.load(fh))


def global_norm(arrays: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.sum(a * a) for a in arrays])))
