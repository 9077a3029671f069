"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward rule on the output
node. Node ids grow monotonically, so creation order is a valid
topological order of the graph and `backward` simply walks reachable
nodes by decreasing id, carrying upstream gradients in a per-call table
before flushing them into each node's persistent `grad`. All math is
double precision and every op is a pure function of its inputs.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Optional, Sequence

import numpy as np

_ids = itertools.count()

# When enabled, every op output is checked for NaN/Inf (construction
# always checks).
_debug_checks = False

COSINE_EPS = 1e-8


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients.

    `requires_grad=True` nodes start with an all-zero `grad` so that a
    tensor never reached by `backward` still reports a zero gradient.
    Gradients accumulate across backward calls until explicitly zeroed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite (got NaN or Inf)")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_rule: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward_rule if out.requires_grad else None
    out._id = next(_ids)
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by an op")
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into every reachable node's grad.

    `loss` must hold exactly one element. Each call propagates through a
    private gradient table and only then adds into the persistent grads,
    so repeated calls without zeroing add up exactly (two identical
    backward passes double every gradient).
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seen = {loss._id}
    nodes = [loss]
    stack = [loss]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                seen.add(p._id)
                nodes.append(p)
                stack.append(p)
    # creation order is a topological order: an op's inputs always have
    # smaller ids than its output
    nodes.sort(key=lambda n: n._id, reverse=True)
    flowing = {loss._id: np.ones_like(loss.data)}
    for node in nodes:
        g = flowing.pop(node._id, None)
        if g is None:
            continue
        node.accumulate_grad(g)
        if node._backward is None:
            continue
        for parent, pg in node._backward(g):
            prev = flowing.get(parent._id)
            # rebind instead of += : pg may alias buffers shared with g
            flowing[parent._id] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise ops


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo the channel broadcast of a [1,h,w] map against [c,h,w]."""
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


def _check_binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    # the single supported broadcast: per-position scalar map over channels
    if (
        a.data.ndim == 3
        and b.data.ndim == 3
        and a.shape[1:] == b.shape[1:]
        and (a.shape[0] == 1 or b.shape[0] == 1)
    ):
        return
    raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes(a, b, "add")

    def bw(g):
        out = []
        if a.requires_grad:
            out.append((a, _reduce_to(g, a.shape)))
        if b.requires_grad:
            out.append((b, _reduce_to(g, b.shape)))
        return out

    return _node(a.data + b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary_shapes(a, b, "mul")

    def bw(g):
        out = []
        if a.requires_grad:
            out.append((a, _reduce_to(g * b.data, a.shape)))
        if b.requires_grad:
            out.append((b, _reduce_to(g * a.data, b.shape)))
        return out

    return _node(a.data * b.data, (a, b), bw)


def scale(x: Tensor, s: float) -> Tensor:
    return _node(x.data * s, (x,), lambda g: [(x, g * s)])


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: [(x, g * mask)])


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: [(x, g * (1.0 - y * y))])


def sigmoid(x: Tensor) -> Tensor:
    y = _expit(x.data)
    return _node(y, (x,), lambda g: [(x, g * y * (1.0 - y))])


def _expit(z: np.ndarray) -> np.ndarray:
    # stable logistic: never exponentiates a large positive argument
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _node(x.data.reshape(shape).copy(), (x,), lambda g: [(x, g.reshape(orig))])


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {x.shape}")
    return _node(x.data.T.copy(), (x,), lambda g: [(x, g.T)])


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    spatial = xs[0].shape[1:]
    for t in xs:
        if t.data.ndim != 3 or t.shape[1:] != spatial:
            raise ValueError(
                f"concat_channels: spatial mismatch {t.shape} vs {xs[0].shape}"
            )
    offsets = np.cumsum([0] + [t.shape[0] for t in xs])

    def bw(g):
        return [
            (t, g[lo:hi])
            for t, lo, hi in zip(xs, offsets[:-1], offsets[1:])
            if t.requires_grad
        ]

    return _node(np.concatenate([t.data for t in xs], axis=0), tuple(xs), bw)


def pad_bottom_right(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad the two trailing spatial axes of a [c,h,w] tensor."""
    if x.data.ndim != 3:
        raise ValueError(f"pad_bottom_right expects [c,h,w], got {x.shape}")
    c, h, w = x.shape
    return _node(
        np.pad(x.data, ((0, 0), (0, pad_h), (0, pad_w))),
        (x,),
        lambda g: [(x, g[:, :h, :w])],
    )


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if x.data.ndim != 3:
        raise ValueError(f"upsample_nearest expects [c,h,w], got {x.shape}")
    c, h, w = x.shape
    f = int(factor)
    y = np.repeat(np.repeat(x.data, f, axis=1), f, axis=2)
    return _node(
        y, (x,), lambda g: [(x, g.reshape(c, h, f, w, f).sum(axis=(2, 4)))]
    )


def space_to_channels(x: Tensor, factor: int) -> Tensor:
    """Fold each non-overlapping f x f spatial block into f*f channels.

    [c, h*f, w*f] -> [c*f*f, h, w]; channel index c*(f*f) + i*f + j holds
    the block element at row offset i, column offset j.
    """
    if x.data.ndim != 3:
        raise ValueError(f"space_to_channels expects [c,h,w], got {x.shape}")
    c, hf, wf = x.shape
    f = int(factor)
    if hf % f or wf % f:
        raise ValueError(f"spatial extents {hf}x{wf} not divisible by {f}")
    h, w = hf // f, wf // f
    y = x.data.reshape(c, h, f, w, f).transpose(0, 2, 4, 1, 3).reshape(c * f * f, h, w)

    def bw(g):
        gx = g.reshape(c, f, f, h, w).transpose(0, 3, 1, 4, 2).reshape(c, hf, wf)
        return [(x, gx)]

    return _node(y, (x,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(
        np.asarray(x.data.sum()), (x,), lambda g: [(x, np.full(shape, float(g)))]
    )


def sum_channels(x: Tensor) -> Tensor:
    """[c,h,w] -> [1,h,w] channel sum."""
    if x.data.ndim != 3:
        raise ValueError(f"sum_channels expects [c,h,w], got {x.shape}")
    c = x.shape[0]
    return _node(
        x.data.sum(axis=0, keepdims=True),
        (x,),
        lambda g: [(x, np.broadcast_to(g, (c,) + g.shape[1:]).copy())],
    )


def _pool_bounds(n: int, out: int):
    return [(i * n) // out for i in range(out + 1)]


def avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Adaptive mean over non-overlapping, approximately equal windows."""
    if x.data.ndim != 3:
        raise ValueError(f"avg_pool expects [c,h,w], got {x.shape}")
    c, h, w = x.shape
    if out_h <= 0 or out_w <= 0:
        raise ValueError("avg_pool output extents must be positive")
    if h < out_h or w < out_w:
        raise ValueError(f"avg_pool cannot upsample {h}x{w} to {out_h}x{out_w}")
    if h % out_h == 0 and w % out_w == 0:
        # uniform windows: reshape-mean, and backward spreads g/area
        fh, fw = h // out_h, w // out_w
        y = x.data.reshape(c, out_h, fh, out_w, fw).mean(axis=(2, 4))

        def bw(g):
            gx = np.broadcast_to(
                g[:, :, None, :, None] / (fh * fw), (c, out_h, fh, out_w, fw)
            )
            # reshape of the zero-stride view materializes a fresh array
            return [(x, gx.reshape(c, h, w))]

        return _node(y, (x,), bw)

    rb = _pool_bounds(h, out_h)
    cb = _pool_bounds(w, out_w)
    y = np.empty((c, out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            y[:, i, j] = x.data[:, rb[i] : rb[i + 1], cb[j] : cb[j + 1]].mean(axis=(1, 2))

    def bw(g):
        gx = np.zeros((c, h, w))
        for i in range(out_h):
            for j in range(out_w):
                area = (rb[i + 1] - rb[i]) * (cb[j + 1] - cb[j])
                gx[:, rb[i] : rb[i + 1], cb[j] : cb[j + 1]] += (
                    g[:, i, j, None, None] / area
                )
        return [(x, gx)]

    return _node(y, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")

    def bw(g):
        out = []
        if a.requires_grad:
            out.append((a, g @ b.data.T))
        if b.requires_grad:
            out.append((b, a.data.T @ g))
        return out

    return _node(a.data @ b.data, (a, b), bw)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, max-subtracted for stability."""
    if x.data.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return [(x, y * (g - dot))]

    return _node(y, (x,), bw)


# ---------------------------------------------------------------------------
# convolution


def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride, :, :]


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of [C,H,W] or [B,C,H,W] input with [O,C,kh,kw] weights.

    Output spatial extents are (H + 2*padding - kh)//stride + 1 and the
    analogue in width; a zero or negative extent is an error, as is any
    channel-count mismatch.
    """
    batched = x.data.ndim == 4
    if not batched and x.data.ndim != 3:
        raise ValueError(f"conv2d input must be 3- or 4-dimensional, got {x.shape}")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d weight must be [O,C,kh,kw], got {w.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, ww_ = xd.shape
    o, wc, kh, kw = w.shape
    if wc != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {wc}")
    if b is not None and b.shape != (o,):
        raise ValueError(f"conv2d bias must have shape ({o},), got {b.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, ww_ + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d output would be empty ({oh}x{ow})")

    if padding:
        xpad = np.zeros((n, c, hp, wp))
        xpad[:, :, padding : padding + h, padding : padding + ww_] = xd
    else:
        xpad = xd
    win = _conv_windows(xpad, kh, kw, stride)  # [n,c,oh,ow,kh,kw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    w2 = w.data.reshape(o, c * kh * kw)
    y = (cols @ w2.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b.data[None, :, None, None]
    if not batched:
        y = y[0]

    def bw(g):
        gb = g if batched else g[None]
        g2 = gb.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        out = []
        if w.requires_grad:
            out.append((w, (g2.T @ cols).reshape(o, c, kh, kw)))
        if b is not None and b.requires_grad:
            out.append((b, gb.sum(axis=(0, 2, 3))))
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(n, oh, ow, c, kh, kw)
            gx = np.zeros((n, c, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gx[
                        :, :, i : i + oh * stride : stride, j : j + ow * stride : stride
                    ] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                gx = gx[:, :, padding : padding + h, padding : padding + ww_]
            out.append((x, gx if batched else gx[0]))
        return out

    parents = (x, w) if b is None else (x, w, b)
    return _node(y, parents, bw)


# ---------------------------------------------------------------------------
# per-position cosine similarity


def cosine_per_position(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the channel vectors of `a` against `b` at each position.

    `a` is [c,h,w]; `b` is either [c,h,w] (position-wise pairs) or a
    single [c] vector compared against every position. The denominator
    carries +1e-8 so zero vectors yield ~0 instead of dividing by zero.
    """
    if a.data.ndim != 3:
        raise ValueError(f"cosine_per_position expects [c,h,w], got {a.shape}")
    c, h, w = a.shape
    shared = b.data.ndim == 1
    if shared:
        if b.shape != (c,):
            raise ValueError(f"vector operand must have shape ({c},), got {b.shape}")
    elif b.shape != a.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")

    af = a.data.reshape(c, h * w)
    bf = b.data.reshape(c, 1) if shared else b.data.reshape(c, h * w)
    dots = (af * bf).sum(axis=0)
    na = np.sqrt((af * af).sum(axis=0))
    nb = np.sqrt((bf * bf).sum(axis=0))
    den = na * nb + COSINE_EPS
    s = dots / den
    na_safe = np.where(na > 0, na, 1.0)
    nb_safe = np.where(nb > 0, nb, 1.0)

    def bw(g):
        gf = g.reshape(h * w)
        out = []
        if a.requires_grad:
            ga = bf / den - (s * nb / na_safe / den) * af
            out.append((a, (ga * gf).reshape(c, h, w)))
        if b.requires_grad:
            gb = (af / den - (s * na / nb_safe / den) * bf) * gf
            out.append((b, gb.sum(axis=1) if shared else gb.reshape(c, h, w)))
        return out

    return _node(s.reshape(1, h, w), (a, b), bw)


# ---------------------------------------------------------------------------
# losses


def bce_with_logits_sum(logits: Tensor, targets) -> Tensor:
    """Sum of per-element binary cross-entropies, computed in logit form.

    `targets` is a constant array (or scalar) of the same shape with
    values in [0,1]; the stable form max(z,0) - z*t + log(1+exp(-|z|))
    never exponentiates a large argument.
    """
    t = np.broadcast_to(np.asarray(targets, dtype=np.float64), logits.shape)
    z = logits.data
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return _node(
        np.asarray(loss.sum()),
        (logits,),
        lambda g: [(logits, float(g) * (_expit(z) - t))],
    )


# ---------------------------------------------------------------------------
# verification


def finite_diff_check(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Compare autodiff gradients of a tensor-to-scalar fn to central differences.

    Returns the max over coordinates of |analytic - numeric| /
    max(|analytic|, |numeric|, 1e-8). `fn` must be deterministic.
    """
    base = Tensor(x.data.copy(), requires_grad=True)
    out = fn(base)
    if out.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    backward(out)
    analytic = base.grad.copy()

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] = flat[i] + h
        f_plus = fn(Tensor(bump.reshape(x.shape))).item()
        bump[i] = flat[i] - h
        f_minus = fn(Tensor(bump.reshape(x.shape))).item()
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
