"""Dense float64 tensors with tape-based reverse-mode differentiation.

Activations use the layout ``(N, T, H, W, C)``. Parameters may take any
shape (scalars for connection gates, vectors for peer weights, matrices for
fully connected heads, 5-D kernels for convolutions).

Recording happens only inside an active :class:`Tape` and only for ops that
have at least one input requiring a gradient, so evaluation outside a tape
is free of bookkeeping.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from functools import lru_cache
from dataclasses import dataclass
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_local = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def clone(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def __deepcopy__(self, memo) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data.copy()
        out.grad = None if self.grad is None else self.grad.copy()
        out.requires_grad = self.requires_grad
        out.node_id = self.node_id
        out.name = self.name
        memo[id(self)] = out
        return out

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


@dataclass
class Node:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager to make it the active tape of the current
    thread. A parent is always recorded before its children, so a reverse
    sweep over ``nodes`` is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._previous: list[Tape | None] = []

    def __enter__(self) -> "Tape":
        self._previous.append(getattr(_local, "tape", None))
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._previous.pop()

    def record(self, op, out, parents, backward) -> int:
        self.nodes.append(Node(op, out, tuple(parents), backward))
        return len(self.nodes) - 1

    def backward(self, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
        """Propagate d(loss)/d(.) to every recorded input.

        ``params`` listed here that the loss does not reach end with a zero
        gradient instead of ``None``.
        """
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        if loss.node_id is None:
            return
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            if not g.flags.c_contiguous:
                g = np.ascontiguousarray(g)
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pg
                else:
                    parent.grad = parent.grad + pg


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] = ()) -> None:
    tape.backward(loss, params)


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


# FLOP instrumentation. Ops add their cost to the innermost scope name while
# a counter is active; see peernet.cost for the accounting convention.


class FlopCounter(dict):
    def add(self, n: int) -> None:
        scope = _local.flop_scopes[-1] if getattr(_local, "flop_scopes", None) else "other"
        self[scope] = self.get(scope, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.values())


@contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    prev = getattr(_local, "flops", None)
    _local.flops = counter
    try:
        yield counter
    finally:
        _local.flops = prev


@contextmanager
def flop_scope(name: str) -> Iterator[None]:
    scopes = getattr(_local, "flop_scopes", None)
    if scopes is None:
        scopes = _local.flop_scopes = []
    scopes.append(name)
    try:
        yield
    finally:
        scopes.pop()


def _flops(n: int) -> None:
    counter = getattr(_local, "flops", None)
    if counter is not None:
        counter.add(n)


def _emit(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not math.isfinite(float(data.sum())):
        raise NonFiniteError(op)
    out = Tensor(data)
    tape = getattr(_local, "tape", None)
    if tape is not None:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out.node_id = tape.record(op, out, parents, backward)
                break
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------------
# elementwise


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = _sigmoid_array(x.data)
    if x.data.ndim == 5:
        _flops(4 * y.size)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", x.data * mask, (x,), lambda g: (g * mask,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def add_n(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("add_n needs at least one tensor")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ValueError(f"add_n: shape mismatch {shape} vs {x.shape}")
    if len(xs) == 1:
        return xs[0]
    total = xs[0].data.copy()
    for x in xs[1:]:
        total += x.data
    return _emit("add_n", total, tuple(xs), lambda g: (g,) * len(xs))


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``x`` by the scalar tensor ``s``."""
    if s.size != 1:
        raise ValueError(f"scale: expected scalar multiplier, got shape {s.shape}")
    sv = s.data.reshape(())
    xd = x.data

    def bw(g):
        return g * sv, np.sum(g * xd).reshape(s.shape)

    return _emit("scale", xd * sv, (x, s), bw)


def gated_sum(
    xs: Sequence[Tensor], logits: Sequence[Tensor], attention: Sequence[Tensor | None]
) -> Tensor:
    """``sum_j sigmoid(logits[j]) * attention[j] * xs[j]`` as a single op.

    ``attention[j]`` is a per-frame channel vector as in :func:`channel_scale`
    or ``None`` for no attention. Equivalent to ``add_n`` over
    ``scale(channel_scale(x, a), sigmoid(w))`` terms, with one tape node.
    """
    if not xs or not len(xs) == len(logits) == len(attention):
        raise ValueError("gated_sum needs matching, non-empty inputs")
    shape = xs[0].shape
    for x, w, a in zip(xs, logits, attention):
        if x.shape != shape:
            raise ValueError(f"gated_sum: shape mismatch {shape} vs {x.shape}")
        if w.size != 1:
            raise ValueError(f"gated_sum: gate logit must be scalar, got shape {w.shape}")
        if a is not None:
            _check_channel_vector(x, a, "gated_sum")
    gates = [float(_sigmoid_array(w.data.reshape(()))) for w in logits]
    # the gate folds into the small channel vector, one full-size product per term
    coefs = [s if a is None else s * a.data for s, a in zip(gates, attention)]
    total = coefs[0] * xs[0].data
    for x, c in zip(xs[1:], coefs[1:]):
        total += c * x.data

    def bw(g):
        gx, gw, ga = [], [], []
        for x, w, s, a, c in zip(xs, logits, gates, attention, coefs):
            gx.append(c * g)
            if a is None:
                gw.append(np.reshape(s * (1 - s) * np.vdot(g, x.data), w.shape))
                continue
            t = np.sum(g * x.data, axis=_channel_axes(x, a), keepdims=True).reshape(a.shape)
            gw.append(np.reshape(s * (1 - s) * np.vdot(t, a.data), w.shape))
            ga.append(s * t)
        return (*gx, *gw, *ga)

    parents = (*xs, *logits, *(a for a in attention if a is not None))
    return _emit("gated_sum", total, parents, bw)


def _check_channel_vector(x: Tensor, a: Tensor, op: str) -> None:
    if x.data.ndim != 5 or a.data.ndim != 5:
        raise ValueError(f"{op} expects 5-D tensors")
    N, T, _, _, C = x.shape
    an, at, ah, aw, ac = a.shape
    if ac != C:
        raise ValueError(f"{op}: channel mismatch {ac} vs {C}")
    if ah != 1 or aw != 1 or an not in (1, N) or at not in (1, T):
        raise ValueError(f"{op}: bad attention shape {a.shape} for {x.shape}")


def _channel_axes(x: Tensor, a: Tensor) -> tuple[int, ...]:
    """Axes of ``x`` summed to get the gradient of a broadcast channel vector ``a``."""
    return (2, 3) + tuple(ax for ax in (0, 1) if a.shape[ax] == 1 and x.shape[ax] != 1)


def channel_scale(x: Tensor, a: Tensor) -> Tensor:
    """Per-frame channel-wise product ``a[n,t,0,0,c] * x[n,t,h,w,c]``.

    ``a`` may also have leading dims of 1 (``(1,1,1,1,C)``), in which case
    the same channel vector is applied to every frame.
    """
    _check_channel_vector(x, a, "channel_scale")
    xd, ad = x.data, a.data
    reduce_axes = _channel_axes(x, a)

    def bw(g):
        return g * ad, np.sum(g * xd, axis=reduce_axes, keepdims=True).reshape(a.shape)

    return _emit("channel_scale", xd * ad, (x, a), bw)


# ----------------------------------------------------------------------------
# reductions and pooling


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit("sum", np.array(np.sum(x.data)), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit("mean", np.array(np.mean(x.data)), (x,), lambda g: (np.broadcast_to(g / n, shape),))


def gap_spatial(x: Tensor) -> Tensor:
    """Global average pool over H and W, one vector per frame."""
    if x.data.ndim != 5:
        raise ValueError("gap_spatial expects (N,T,H,W,C)")
    N, T, H, W, C = x.shape
    if H < 1 or W < 1:
        raise ValueError("gap_spatial: zero spatial extent")
    y = x.data.mean(axis=(2, 3), keepdims=True)
    shape = x.shape
    return _emit("gap_spatial", y, (x,), lambda g: (np.broadcast_to(g / (H * W), shape),))


def _pool_view(x: np.ndarray, k: int) -> np.ndarray:
    N, T, H, W, C = x.shape
    if H % k or W % k:
        raise ValueError(f"pooling factor {k} does not divide spatial size {H}x{W}")
    return x.reshape(N, T, H // k, k, W // k, k, C)


def avg_pool_spatial(x: Tensor, k: int) -> Tensor:
    if k == 1:
        return x
    v = _pool_view(x.data, k)
    y = v.mean(axis=(3, 5))
    shape = x.shape

    def bw(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None, :] / (k * k), v.shape)
        return (gx.reshape(shape),)

    return _emit("avg_pool", y, (x,), bw)


def max_pool_spatial(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max pool (pool size = stride = k)."""
    if k == 1:
        return x
    N, T, H, W, C = x.shape
    v = _pool_view(x.data, k).transpose(0, 1, 2, 4, 6, 3, 5)
    v = v.reshape(N, T, H // k, W // k, C, k * k)
    idx = v.argmax(axis=-1)
    y = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gv = np.zeros(v.shape)
        np.put_along_axis(gv, idx[..., None], g[..., None], axis=-1)
        gv = gv.reshape(N, T, H // k, W // k, C, k, k).transpose(0, 1, 2, 5, 3, 6, 4)
        return (gv.reshape(N, T, H, W, C),)

    return _emit("max_pool", y, (x,), bw)


def temporal_max(x: Tensor) -> Tensor:
    """Max over the time axis of ``(N, T, 1, 1, K)`` logits, giving ``(N, K)``."""
    N, T, H, W, K = x.shape
    if H != 1 or W != 1:
        raise ValueError("temporal_max expects pooled per-frame vectors")
    v = x.data.reshape(N, T, K)
    idx = v.argmax(axis=1)
    y = np.take_along_axis(v, idx[:, None, :], axis=1)[:, 0, :]

    def bw(g):
        gv = np.zeros((N, T, K))
        np.put_along_axis(gv, idx[:, None, :], g[:, None, :], axis=1)
        return (gv.reshape(x.shape),)

    return _emit("temporal_max", y, (x,), bw)


# ----------------------------------------------------------------------------
# softmax family


def _softmax_array(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(v: Tensor) -> Tensor:
    """Softmax over the last axis (max-shifted)."""
    v = _as_tensor(v)
    if v.size == 0 or v.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    s = _softmax_array(v.data)
    if v.data.ndim == 5:
        _flops(4 * s.size)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _emit("softmax", s, (v,), bw)


def one_shot_peer_mix(h: Tensor, peers: Sequence[Tensor]) -> Tensor:
    """``sum_k softmax(h)_k * peers[k]`` over equally shaped peer tensors."""
    m = len(peers)
    if m == 0:
        raise ValueError("one_shot_peer_mix needs at least one peer")
    if h.shape != (m,):
        raise ValueError(f"h has shape {h.shape}, expected ({m},)")
    shape = peers[0].shape
    for p in peers:
        if p.shape != shape:
            raise ValueError("one_shot_peer_mix: peers must share a shape")
    s = _softmax_array(h.data)
    out = np.zeros(shape)
    for k in range(m):
        out += s[k] * peers[k].data

    def bw(g):
        gs = np.array([np.sum(g * p.data) for p in peers])
        gh = s * (gs - np.dot(gs, s))
        return (gh,) + tuple(s[k] * g for k in range(m))

    return _emit("one_shot_peer_mix", out, (h, *peers), bw)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ValueError(f"concat_channels: leading shape mismatch {lead} vs {x.shape[:-1]}")
    cuts = np.cumsum([x.shape[-1] for x in xs])[:-1]
    y = np.concatenate([x.data for x in xs], axis=-1)
    return _emit("concat", y, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=-1)))


def mix_projected(h: Tensor, gaps: Tensor | Sequence[Tensor], projectors: Sequence[Tensor]) -> Tensor:
    """Fused ``sum_k softmax(h)_k * (g_k @ P_k)``.

    Each peer's pooled vector ``g_k`` (width ``C_k``) is projected to a common
    width by ``P_k`` (``C_k x C``) before the softmax-weighted sum. ``gaps``
    is either the list of ``g_k`` or their concatenation along channels.
    """
    m = len(projectors)
    if m == 0:
        raise ValueError("mix_projected needs a non-empty peer list")
    if h.shape != (m,):
        raise ValueError(f"h has shape {h.shape}, expected ({m},)")
    if not isinstance(gaps, Tensor):
        if len(gaps) != m:
            raise ValueError("mix_projected needs one pooled vector per projector")
        for g_k, p_k in zip(gaps, projectors):
            if g_k.shape[-1] != p_k.shape[0]:
                raise ValueError(f"projector {p_k.shape} does not match peer width {g_k.shape[-1]}")
        gaps = concat_channels(gaps)
    widths = [p.shape[0] for p in projectors]
    cout = projectors[0].shape[1]
    if gaps.shape[-1] != sum(widths):
        raise ValueError(f"pooled width {gaps.shape[-1]} != total projector width {sum(widths)}")
    s = _softmax_array(h.data)
    seg = np.repeat(np.arange(m), widths)
    stacked = np.concatenate([p.data for p in projectors], axis=0)
    scaled = stacked * s[seg, None]
    xd = gaps.data
    rows = xd.size // xd.shape[-1]
    _flops(2 * rows * sum(widths) * cout)
    out = xd @ scaled
    starts = np.concatenate(([0], np.cumsum(widths)[:-1]))

    def bw(g):
        g2 = g.reshape(-1, cout)
        gram = xd.reshape(-1, xd.shape[-1]).T @ g2
        gs = np.add.reduceat((gram * stacked).sum(axis=1), starts)
        gh = s * (gs - gs @ s)
        gx = g @ scaled.T
        gp = gram * s[seg, None]
        return (gh, gx, *np.split(gp, starts[1:], axis=0))

    return _emit("mix_projected", out, (h, gaps, *projectors), bw)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    N, K = logits.shape
    if labels.shape != (N,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {N}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise ValueError(f"label index out of range [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logsum - z[np.arange(N), labels])

    def bw(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(N), labels] -= 1.0
        return (g * p / N,)

    return _emit("softmax_cross_entropy", np.array(loss), (logits,), bw)


def sigmoid_bce(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over every (sample, class) entry."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ValueError(f"targets shape {t.shape} does not match logits {logits.shape}")
    x = logits.data
    loss = np.mean(np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x))))

    def bw(g):
        return (g * (_sigmoid_array(x) - t) / x.size,)

    return _emit("sigmoid_bce", np.array(loss), (logits,), bw)


# ----------------------------------------------------------------------------
# linear maps


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply ``x @ weight + bias`` along the last axis."""
    cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {cin}")
    xd, wd = x.data, weight.data
    y = xd @ wd
    if bias is not None:
        y = y + bias.data
    _flops(2 * (xd.size // cin) * cin * cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = xd.reshape(-1, cin).T @ g2
        gx = g @ wd.T
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", y, parents, bw)


def _same_pad(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _active_taps(size, out, k, stride, dilation, pad0) -> tuple[int, int]:
    """First and last kernel tap that reads at least one non-padding element."""
    active = [
        a for a in range(k)
        if any(0 <= o * stride + a * dilation - pad0 < size for o in range(out))
    ]
    return active[0], active[-1]


@lru_cache(maxsize=4096)
def _axis_plan(size, k, stride, dilation, pad0, out):
    """Cropped tap range plus the (front, back) pad that yields exactly ``out`` windows.

    A negative pad means the input is cropped on that side instead.
    """
    a0, a1 = _active_taps(size, out, k, stride, dilation, pad0)
    front = pad0 - a0 * dilation
    extent = (out - 1) * stride + (a1 - a0) * dilation + 1
    return a0, a1, front, extent - size - front


class _ConvPlan(NamedTuple):
    Ho: int
    Wo: int
    taps: tuple[slice, slice, slice]
    cropped: bool
    kernel: tuple[int, int, int]
    padded_shape: tuple[int, ...] | None
    src: tuple[slice, ...]
    dst: tuple[slice, ...]
    windows: tuple[tuple[slice, ...], ...]


@lru_cache(maxsize=4096)
def _conv_plan(xshape, kshape, stride, dilation) -> _ConvPlan:
    """Geometry of a same-padded conv, cached per shape.

    Kernel taps that would only ever read padding are cropped, and the input
    is padded (or cropped) so the remaining taps produce exactly the output
    windows. ``src``/``dst`` map input elements into the padded buffer.
    """
    N, T, H, W, C = xshape
    kt, kh, kw = kshape
    Ho, ph0, _ = _same_pad(H, kh, stride)
    Wo, pw0, _ = _same_pad(W, kw, stride)
    pt = dilation * (kt - 1) // 2
    axes = (
        _axis_plan(T, kt, 1, dilation, pt, T),
        _axis_plan(H, kh, stride, 1, ph0, Ho),
        _axis_plan(W, kw, stride, 1, pw0, Wo),
    )
    taps = tuple(slice(a0, a1 + 1) for a0, a1, _, _ in axes)
    kernel = tuple(a1 - a0 + 1 for a0, a1, _, _ in axes)
    src, dst, shape = [slice(None)], [slice(None)], [N]
    padded = False
    for (_, _, front, back), size in zip(axes, (T, H, W)):
        lo, hi = max(-front, 0), size - max(-back, 0)
        d0 = max(front, 0)
        src.append(slice(lo, hi))
        dst.append(slice(d0, d0 + hi - lo))
        shape.append(d0 + hi - lo + max(back, 0))
        padded = padded or front > 0 or back > 0
    shape.append(C)
    kt2, kh2, kw2 = kernel
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    windows = tuple(
        (slice(None), slice(a * dilation, a * dilation + T), slice(b, b + hs, stride), slice(c, c + ws, stride))
        for a in range(kt2) for b in range(kh2) for c in range(kw2)
    )
    return _ConvPlan(
        Ho, Wo, taps, kernel != tuple(kshape), kernel,
        tuple(shape) if padded else None, tuple(src), tuple(dst), windows,
    )


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
) -> Tensor:
    """Same-padded convolution over (T, H, W).

    ``weight`` is ``(kt, kh, kw, C_in, C_out)``. ``stride`` applies to both
    spatial axes; ``dilation`` spaces the temporal taps. Time is never
    strided, so ``T`` is preserved.
    """
    if x.data.ndim != 5:
        raise ValueError("conv3d expects (N,T,H,W,C)")
    kt, kh, kw, cin, cout = weight.shape
    N, T, H, W, C = x.shape
    if C != cin:
        raise ValueError(f"conv3d: input channels {C} != kernel channels {cin}")
    if kt % 2 == 0:
        raise ValueError("conv3d: temporal kernel size must be odd")
    plan = _conv_plan(x.shape, (kt, kh, kw), stride, dilation)
    Ho, Wo = plan.Ho, plan.Wo
    kt2, kh2, kw2 = plan.kernel
    wk = weight.data[plan.taps] if plan.cropped else weight.data
    xd = x.data
    if plan.padded_shape is None:
        xp = xd[plan.src]
    else:
        xp = np.zeros(plan.padded_shape)
        xp[plan.dst] = xd[plan.src]
    K = kt2 * kh2 * kw2
    windows = plan.windows
    if K == 1:
        col2 = xp[windows[0]].reshape(-1, cin)
    else:
        # every (output position, tap) pair as one strided view, copied once
        sn, st, sh, sw, sc = xp.strides
        col = as_strided(
            xp,
            (N, T, Ho, Wo, kt2, kh2, kw2, cin),
            (sn, st, sh * stride, sw * stride, st * dilation, sh, sw, sc),
            writeable=False,
        )
        col2 = col.reshape(-1, K * cin)
    wmat = wk.reshape(K * cin, cout)
    y = (col2 @ wmat).reshape(N, T, Ho, Wo, cout)
    if bias is not None:
        y += bias.data
    _flops(2 * kt * kh * kw * cin * cout * N * T * Ho * Wo)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gwk = (col2.T @ g2).reshape(kt2, kh2, kw2, cin, cout)
        if plan.cropped:
            gw = np.zeros(weight.shape)
            gw[plan.taps] = gwk
        else:
            gw = gwk
        gx = None
        if x.requires_grad:
            gcol = g2 @ wmat.T
            if K == 1 and stride == 1:
                gxp = gcol.reshape(xp.shape)
            else:
                gcol = gcol.reshape(N, T, Ho, Wo, K, cin)
                gxp = np.zeros(xp.shape)
                for n, win in enumerate(windows):
                    gxp[win] += gcol[..., n, :]
            if plan.padded_shape is None and gxp.shape == xd.shape:
                gx = gxp
            else:
                gx = np.zeros(xd.shape)
                gx[plan.src] = gxp[plan.dst] if plan.padded_shape is not None else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _emit("conv3d", y, parents, bw)
