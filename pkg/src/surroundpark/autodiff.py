"""Dense tensors with reverse-mode automatic differentiation.

The op set is deliberately small: what a shared-encoder convolutional
multi-task network needs (convolution, ReLU, softmax, softsign, pooling,
upsampling, the loss primitives) plus a bias-corrected Adam optimizer.
Values are numpy arrays; float32 is the working precision and float64 is
available as a reference mode for gradient checking.

Recording model: every op appends a node to the innermost active
``Tape`` (``with Tape() as tape: ...``).  ``backward(loss, tape)``
replays the recorded nodes in exact reverse recording order.  Gradients
accumulate additively, so fan-out and multi-sample accumulation compose
naturally; leaf (parameter) gradients persist until explicitly zeroed,
while intermediate gradients are reset at the start of each replay so
one tape can be replayed from several losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS_PROB = 1e-7  # probability clipping floor for the cross-entropy losses


class Tensor:
    """N-dimensional real array, optionally tracked for gradients.

    ``values`` is a row-major numpy array (float32 or float64); ``grad``
    is either None or an array of identical shape.  Tensors are treated
    as immutable once an op has consumed them, except for in-place
    parameter updates performed by the optimizer between tapes.
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.values.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match tensor shape {self.values.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.values.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of ops; backward replays it in reverse order."""

    def __init__(self):
        self.ops: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _ACTIVE.pop()
        assert popped is self, "tape stack corrupted"

    def backward(self, loss: "Tensor") -> None:
        backward(loss, self)


_ACTIVE: list[Tape] = []


def _record(inputs: tuple, output: Tensor, backward_fn) -> None:
    if _ACTIVE and output.requires_grad:
        _ACTIVE[-1].ops.append(_Node(inputs, output, backward_fn))


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients for every requires_grad tensor reachable from loss.

    Intermediate (op output) gradients are cleared first so the same tape
    can be replayed once per loss; leaf gradients accumulate across calls.
    """
    if loss.values.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.values.shape}")
    for node in tape.ops:
        node.output.grad = None
    loss.grad = np.ones((), dtype=loss.values.dtype)
    for node in reversed(tape.ops):
        g_out = node.output.grad
        if g_out is None:
            continue
        grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, grads):
            if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                continue
            t.accumulate_grad(np.asarray(g, dtype=t.values.dtype))


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# elementwise and arithmetic ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Elementwise a + b; b may be a same-shape Tensor or a python scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
        out = Tensor(a.values + b.values, requires_grad=_needs_grad(a, b))
        _record((a, b), out, lambda g: (g, g))
    else:
        out = Tensor(a.values + float(b), requires_grad=a.requires_grad)
        _record((a,), out, lambda g: (g,))
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise a * b; b may be a same-shape Tensor or a python scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
        av, bv = a.values, b.values
        out = Tensor(av * bv, requires_grad=_needs_grad(a, b))
        _record((a, b), out, lambda g: (g * bv, g * av))
    else:
        s = float(b)
        out = Tensor(a.values * s, requires_grad=a.requires_grad)
        _record((a,), out, lambda g: (g * s,))
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    out = Tensor(np.where(mask, x.values, 0), requires_grad=x.requires_grad)
    _record((x,), out, lambda g: (g * mask,))
    return out


def softsign(x: Tensor) -> Tensor:
    """x / (1 + |x|), range (-1, 1); derivative 1 / (1 + |x|)^2."""
    denom = 1.0 + np.abs(x.values)
    out = Tensor(x.values / denom, requires_grad=x.requires_grad)
    _record((x,), out, lambda g: (g / (denom * denom),))
    return out


def softmax(x: Tensor, axis: int) -> Tensor:
    """Stable softmax along ``axis`` (max-subtraction before exp)."""
    if not -x.values.ndim <= axis < x.values.ndim:
        raise ValueError(f"axis {axis} invalid for shape {x.shape}")
    shifted = x.values - np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=x.requires_grad)

    def bwd(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - dot) * y,)

    _record((x,), out, bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.values), requires_grad=x.requires_grad)
    _record((x,), out, lambda g: (np.broadcast_to(g, x.shape).astype(x.values.dtype),))
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.values.size
    out = Tensor(np.mean(x.values), requires_grad=x.requires_grad)
    _record((x,), out, lambda g: (np.broadcast_to(g / n, x.shape).astype(x.values.dtype),))
    return out


# ---------------------------------------------------------------------------
# convolution and spatial ops
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(patches.reshape(n, c * kh * kw, ho * wo))


def _col2im(grad_cols: np.ndarray, xp_shape, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, hp, wp = xp_shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    gx = np.zeros(xp_shape, dtype=grad_cols.dtype)
    gc = grad_cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gc[:, :, i, j]
    return gx


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([C,H,W] or [N,C,H,W]) with ``kernel`` [Co,Ci,kh,kw].

    Backward produces gradients for input, kernel and bias.
    """
    was3d = x.values.ndim == 3
    xv = x.values[None] if was3d else x.values
    if xv.ndim != 4:
        raise ValueError(f"conv2d input must be 3-D or 4-D, got shape {x.shape}")
    co, ci, kh, kw = kernel.values.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel dims must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    n, c, h, w = xv.shape
    if c != ci:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {ci}")
    if bias is not None and bias.values.shape != (co,):
        raise ValueError(f"conv2d bias shape {bias.values.shape} does not match {co} output channels")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d output would be empty: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )

    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv
    cols = _im2col(xp, kh, kw, stride)  # (n, ci*kh*kw, ho*wo)
    wmat = kernel.values.reshape(co, -1)
    out_v = np.matmul(wmat, cols).reshape(n, co, ho, wo)
    if bias is not None:
        out_v = out_v + bias.values[None, :, None, None]
    if was3d:
        out_v = out_v[0]

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    out = Tensor(out_v, requires_grad=_needs_grad(*inputs))

    def bwd(g):
        gv = g[None] if was3d else g
        go = gv.reshape(n, co, ho * wo)
        grad_w = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.values.shape)
        grad_cols = np.matmul(wmat.T, go)
        gxp = _col2im(grad_cols, xp.shape, kh, kw, stride)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if was3d:
            gx = gx[0]
        if bias is not None:
            return gx, grad_w, gv.sum(axis=(0, 2, 3))
        return gx, grad_w

    _record(inputs, out, bwd)
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling of the trailing two axes."""
    y = x.values.repeat(2, axis=-2).repeat(2, axis=-1)
    out = Tensor(y, requires_grad=x.requires_grad)

    def bwd(g):
        s = g.shape
        blocks = g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2)
        return (blocks.sum(axis=(-1, -3)),)

    _record((x,), out, bwd)
    return out


def tile_mean_pool(x: Tensor, rows: int, cols: int) -> Tensor:
    """Average-pool a [C,H,W] map onto a rows x cols tile grid.

    Bin edges follow floor(i*H/rows) so any H >= rows is accepted; when
    the grid divides the map exactly every bin has equal size.
    """
    c, h, w = x.values.shape
    if rows > h or cols > w:
        raise ValueError(f"tile grid {rows}x{cols} exceeds feature map {h}x{w}")
    re = [h * i // rows for i in range(rows + 1)]
    ce = [w * j // cols for j in range(cols + 1)]
    y = np.empty((c, rows, cols), dtype=x.values.dtype)
    for i in range(rows):
        for j in range(cols):
            y[:, i, j] = x.values[:, re[i] : re[i + 1], ce[j] : ce[j + 1]].mean(axis=(1, 2))
    out = Tensor(y, requires_grad=x.requires_grad)

    def bwd(g):
        gx = np.zeros_like(x.values)
        for i in range(rows):
            for j in range(cols):
                area = (re[i + 1] - re[i]) * (ce[j + 1] - ce[j])
                gx[:, re[i] : re[i + 1], ce[j] : ce[j + 1]] += (g[:, i, j] / area)[:, None, None]
        return (gx,)

    _record((x,), out, bwd)
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Leading-axis slice x[start:stop] as a recorded op."""
    if not 0 <= start < stop <= x.values.shape[0]:
        raise ValueError(f"slice [{start}:{stop}] invalid for leading axis {x.values.shape[0]}")
    out = Tensor(x.values[start:stop], requires_grad=x.requires_grad)

    def bwd(g):
        gx = np.zeros_like(x.values)
        gx[start:stop] = g
        return (gx,)

    _record((x,), out, bwd)
    return out


def gather1d(x: Tensor, indices) -> Tensor:
    """Select elements of a 1-D tensor by index; backward scatters."""
    idx = np.asarray(indices, dtype=np.int64)
    if x.values.ndim != 1:
        raise ValueError(f"gather1d expects a 1-D tensor, got shape {x.shape}")
    out = Tensor(x.values[idx], requires_grad=x.requires_grad)

    def bwd(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, idx, g)
        return (gx,)

    _record((x,), out, bwd)
    return out


def spatial_max(x: Tensor) -> Tensor:
    """Per-channel max over the trailing spatial axes of a [C,H,W] map.

    The backward rule routes the gradient to the first maximal position
    per channel (deterministic subgradient).
    """
    c = x.values.shape[0]
    flat = x.values.reshape(c, -1)
    idx = np.argmax(flat, axis=1)
    out = Tensor(flat[np.arange(c), idx], requires_grad=x.requires_grad)

    def bwd(g):
        gx = np.zeros_like(flat)
        gx[np.arange(c), idx] = g
        return (gx.reshape(x.values.shape),)

    _record((x,), out, bwd)
    return out


# ---------------------------------------------------------------------------
# loss primitives
# ---------------------------------------------------------------------------


def categorical_cross_entropy(
    probs: Tensor,
    target_class: np.ndarray,
    mask: np.ndarray | None = None,
    class_axis: int = -1,
) -> Tensor:
    """Mean of -log p[target] over unmasked positions.

    Probabilities are clipped to [1e-7, 1] before the log so the loss is
    bounded; positions where the clip is active receive zero gradient.
    """
    p = np.moveaxis(probs.values, class_axis, -1)
    tgt = np.asarray(target_class, dtype=np.int64)
    if tgt.shape != p.shape[:-1]:
        raise ValueError(f"target shape {tgt.shape} does not match positions {p.shape[:-1]}")
    if mask is None:
        m = np.ones(tgt.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != tgt.shape:
            raise ValueError(f"mask shape {m.shape} does not match target shape {tgt.shape}")
    n = int(m.sum())
    if n == 0:
        raise ValueError("empty loss support")
    sel = np.take_along_axis(p, tgt[..., None], axis=-1)[..., 0]
    clipped = np.clip(sel, _EPS_PROB, 1.0)
    loss = -np.log(clipped[m]).mean()
    out = Tensor(np.asarray(loss, dtype=probs.values.dtype), requires_grad=probs.requires_grad)

    def bwd(g):
        gsel = np.zeros_like(sel)
        active = m & (sel >= _EPS_PROB) & (sel <= 1.0)
        gsel[active] = -g / (clipped[active] * n)
        gp = np.zeros_like(p)
        np.put_along_axis(gp, tgt[..., None], gsel[..., None], axis=-1)
        return (np.moveaxis(gp, -1, class_axis),)

    _record((probs,), out, bwd)
    return out


def binary_cross_entropy(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean BCE of probabilities against 0/1 targets, clipped away from {0,1}."""
    y = np.asarray(targets, dtype=probs.values.dtype)
    if y.shape != probs.values.shape:
        raise ValueError(f"target shape {y.shape} does not match {probs.values.shape}")
    p = np.clip(probs.values, _EPS_PROB, 1.0 - _EPS_PROB)
    n = p.size
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    out = Tensor(np.asarray(loss, dtype=probs.values.dtype), requires_grad=probs.requires_grad)

    def bwd(g):
        inside = (probs.values >= _EPS_PROB) & (probs.values <= 1.0 - _EPS_PROB)
        gp = np.where(inside, (-y / p + (1.0 - y) / (1.0 - p)) * (g / n), 0.0)
        return (gp.astype(probs.values.dtype),)

    _record((probs,), out, bwd)
    return out


def smooth_l1(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean smooth-L1 (Huber, beta=1) over selected elements.

    ``mask`` broadcasts against pred's shape; when None, all elements count.
    """
    t = np.asarray(target, dtype=pred.values.dtype)
    if t.shape != pred.values.shape:
        raise ValueError(f"target shape {t.shape} does not match {pred.values.shape}")
    if mask is None:
        m = np.ones(pred.values.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), pred.values.shape)
    n = int(m.sum())
    if n == 0:
        raise ValueError("empty loss support")
    d = pred.values - t
    a = np.abs(d)
    per = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
    out = Tensor(np.asarray(per[m].mean(), dtype=pred.values.dtype), requires_grad=pred.requires_grad)

    def bwd(g):
        gd = np.where(a < 1.0, d, np.sign(d))
        return (np.where(m, gd * (g / n), 0.0).astype(pred.values.dtype),)

    _record((pred,), out, bwd)
    return out


# ---------------------------------------------------------------------------
# Adam optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators plus hyperparameters."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update; mutates params and state in place."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.values) for p in params]
        state.v = [np.zeros_like(p.values) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=p.values.dtype)
        if g.shape != p.values.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.values.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


class Adam:
    """Convenience wrapper applying adam_step to tensors' own .grad buffers."""

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate, beta1, beta2, epsilon)

    def step(self, scale: float = 1.0) -> None:
        grads = [
            (p.grad * scale if scale != 1.0 else p.grad)
            if p.grad is not None
            else np.zeros_like(p.values)
            for p in self.params
        ]
        adam_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        zero_grads(self.params)
