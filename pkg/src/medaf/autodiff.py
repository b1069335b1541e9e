"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient. Outside a tape, ops run as plain numpy and
nothing is recorded, which is what evaluation code relies on.

No broadcasting is implemented: elementwise ops require equal shapes (or a
Python scalar), and every op checks shapes before computing.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, ConfigError, ContractError, DimensionError

_local = threading.local()


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
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

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ArgumentError("only division by a Python scalar is supported")
        return mul(self, 1.0 / float(other))


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the block are appended in
    execution order, which is a valid topological order by construction.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, vjp) -> None:
        self.nodes.append(Node(inputs, output, vjp))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _result(arr: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs)
    if needs:
        tape = active_tape()
        if tape is not None:
            tape.record(inputs, out, vjp)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if tape is None:
        tape = active_tape()
        if tape is None:
            raise ContractError("backward() needs a tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    owners: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        owners.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = inp
    for key, g in grads.items():
        leaf = owners[key]
        leaf.grad = np.array(g, dtype=np.float64) if leaf.grad is None else leaf.grad + g


# ----------------------------------------------------------------------------
# elementwise


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,))
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


class relu_masks:
    """Collect every ReLU activation mask computed inside the block (for kink detection)."""

    def __enter__(self) -> list[np.ndarray]:
        self.masks: list[np.ndarray] = []
        _local.relu_log = self.masks
        return self.masks

    def __exit__(self, *exc) -> None:
        _local.relu_log = None


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    log = getattr(_local, "relu_log", None)
    if log is not None:
        log.append(mask)
    # np.maximum keeps NaN visible so divergence is caught downstream
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    old = x.shape
    return _result(out, (x,), lambda g: (g.reshape(old),))


# ----------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        shape = x.shape
        return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))
    ax = axis % x.ndim
    return _result(x.data.sum(axis=ax), (x,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing (spatial) axes: ``[..., H, W] -> [...]``."""
    if x.ndim < 2:
        raise DimensionError(f"global_average_pool needs [..., H, W], got {x.shape}")
    h, w = x.shape[-2:]
    area = h * w
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(g[..., None, None] / area, shape).copy(),)

    return _result(x.data.mean(axis=(-2, -1)), (x,), vjp)


def center_spatial(x: Tensor) -> Tensor:
    """Subtract each map's own spatial mean: ``x - mean_{h,w}(x)``."""
    if x.ndim < 2:
        raise DimensionError(f"center_spatial needs [..., H, W], got {x.shape}")
    out = x.data - x.data.mean(axis=(-2, -1), keepdims=True)
    return _result(out, (x,), lambda g: (g - g.mean(axis=(-2, -1), keepdims=True),))


# ----------------------------------------------------------------------------
# layers


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``[C,H,W]`` or ``[B,C,H,W]`` input with ``[O,C,kH,kW]``."""
    if stride < 1 or padding < 0:
        raise ArgumentError(f"bad stride/padding {stride}/{padding}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    B, C, H, W = xd.shape
    O, Ck, kh, kw = kernel.shape
    if C != Ck:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"conv2d: bias {bias.shape} for {O} output channels")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    kmat = kernel.data.reshape(O, -1)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))
    if unbatched:
        out = out[0]

    def vjp(g):
        g4 = g[None] if unbatched else g
        gm = g4.transpose(0, 2, 3, 1).reshape(-1, O)
        gk = (gm.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ kmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros((B, C, Hp, Wp))
            he, we = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + he:stride, j:j + we:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W]
            if unbatched:
                gx = gx[0]
        return (gx, gk) if bias is None else (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, inputs, vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape}, weight {weight.shape}")
    O = weight.shape[0]
    if bias is not None and bias.shape != (O,):
        raise DimensionError(f"linear: bias {bias.shape} for {O} outputs")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gx = g @ wd
        g2 = g.reshape(-1, O)
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, inputs, vjp)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    return _result(s, (x,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _result(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``[K]`` logits take an int label; ``[B, K]`` logits take ``B`` labels and
    the result is the batch mean.
    """
    K = logits.shape[-1]
    lab = np.asarray(labels, dtype=np.int64)
    if logits.ndim == 1:
        if lab.ndim != 0:
            raise DimensionError("single logit vector needs a scalar label")
    elif logits.ndim != 2 or lab.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {lab.shape}")
    if np.any(lab < 0) or np.any(lab >= K):
        raise ArgumentError(f"label out of range for {K} classes")
    logp = log_softmax(logits)
    if logits.ndim == 1:
        picked = _result(np.asarray(logp.data[lab]), (logp,), _pick_vjp(logp.shape, lab))
        return neg(picked)
    rows = np.arange(lab.shape[0])
    picked = _result(logp.data[rows, lab], (logp,), _pick_vjp(logp.shape, (rows, lab)))
    return neg(mean(picked))


def _pick_vjp(shape, index):
    def vjp(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)
    return vjp


# ----------------------------------------------------------------------------
# structural


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise DimensionError("stack of nothing")
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _result(out, tensors, vjp)


def select(x: Tensor, index: int, axis: int = 0) -> Tensor:
    """Take one slice along ``axis`` and drop that axis."""
    ax = axis % x.ndim
    n = x.shape[ax]
    if not -n <= index < n:
        raise ArgumentError(f"index {index} out of range for axis of length {n}")
    out = np.take(x.data, index, axis=ax)

    def vjp(g):
        full = np.zeros(x.shape)
        sl = [slice(None)] * x.ndim
        sl[ax] = index
        full[tuple(sl)] = g
        return (full,)

    return _result(out, (x,), vjp)


def take_channel(x: Tensor, index) -> Tensor:
    """Per-sample channel gather.

    ``[K, H, W]`` with an int gives ``[H, W]``; ``[B, K, H, W]`` with ``B``
    indices gives ``[B, H, W]`` holding ``x[b, index[b]]``.
    """
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim == 3:
        if idx.ndim != 0:
            raise DimensionError("unbatched map needs a scalar channel index")
        return select(x, int(idx), axis=0)
    if x.ndim != 4 or idx.shape != (x.shape[0],):
        raise DimensionError(f"take_channel: map {x.shape}, index {idx.shape}")
    K = x.shape[1]
    if np.any(idx < 0) or np.any(idx >= K):
        raise ArgumentError(f"channel index out of range for {K} channels")
    rows = np.arange(x.shape[0])
    return _result(x.data[rows, idx], (x,), _pick_vjp(x.shape, (rows, idx)))


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """``out[..., k] = sum_i weights[..., i] * values[..., i, k]``."""
    if values.ndim != weights.ndim + 1 or values.shape[:-1] != weights.shape:
        raise DimensionError(f"weighted_sum: weights {weights.shape}, values {values.shape}")
    wd, vd = weights.data, values.data
    out = np.einsum("...i,...ik->...k", wd, vd)

    def vjp(g):
        gw = np.einsum("...k,...ik->...i", g, vd)
        gv = wd[..., :, None] * g[..., None, :]
        return gw, gv

    return _result(out, (weights, values), vjp)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8, batch_dims: int = 0) -> Tensor:
    """Cosine of flattened trailing dims, denominator clamped to at least ``eps``.

    With ``batch_dims=1`` the leading axis indexes independent pairs and the
    result has that axis' length. A zero vector on either side gives 0.
    """
    _same_shape(a, b, "cosine_similarity")
    lead = a.shape[:batch_dims]
    ad = a.data.reshape(lead + (-1,))
    bd = b.data.reshape(lead + (-1,))
    dot = (ad * bd).sum(axis=-1)
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    prod = na * nb
    clamped = prod <= eps
    denom = np.where(clamped, eps, prod)
    cos = dot / denom

    def vjp(g):
        safe_na2 = np.where(clamped, 1.0, na * na)
        safe_nb2 = np.where(clamped, 1.0, nb * nb)
        ga = bd / denom[..., None] - np.where(clamped, 0.0, cos / safe_na2)[..., None] * ad
        gb = ad / denom[..., None] - np.where(clamped, 0.0, cos / safe_nb2)[..., None] * bd
        ga = g[..., None] * ga
        gb = g[..., None] * gb
        return ga.reshape(a.shape), gb.reshape(b.shape)

    return _result(cos, (a, b), vjp)


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class SgdMomentumState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be nonnegative, got {self.weight_decay}")


def sgd_step(params: Mapping[str, Tensor], state: SgdMomentumState) -> None:
    """``v <- momentum * v + grad; p <- p - lr * v``, then clear grads.

    With ``state.weight_decay > 0`` the gradient is ``grad + weight_decay * p``.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for parameter(s): {', '.join(missing)}")
    lr, m, wd = state.learning_rate, state.momentum, state.weight_decay
    for name, p in params.items():
        g = p.grad + wd * p.data if wd else p.grad
        v = state.velocity.get(name)
        if v is None:
            v = g.copy()
        else:
            if v.shape != p.shape:
                raise ContractError(f"velocity for {name} has shape {v.shape}, param {p.shape}")
            v = m * v + g
        state.velocity[name] = v
        p.data = p.data - lr * v
        p.grad = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
