"""Dense tensors with reverse-mode gradients.

A deliberately small op set backs the whole detection model: linear maps,
activations, cosine similarity, pooling/upsampling, concatenation and
per-channel standardization. Ops record onto the output tensor as they
execute; ``backward`` replays them in the exact reverse of creation order,
so gradient accumulation is deterministic and two identical runs produce
bit-identical gradients. Leaf tensors created with ``requires_grad=True``
accumulate into ``.grad`` across repeated backward calls until cleared.

Double precision is used for gradient checking; runtime code keeps the
dtype of its inputs (float32 for training/inference).
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "constant",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "softmax",
    "tsum",
    "tmean",
    "concat",
    "take",
    "gather_rows",
    "reshape",
    "l2_normalize",
    "cosine_sim",
    "clip_min",
    "elem_max",
    "elem_min",
    "avg_pool2d",
    "global_avg_pool",
    "upsample_nearest",
    "standardize",
    "affine_standardize",
    "weighted_mean",
    "backward",
    "zero_grads",
    "grad_check",
    "StopCapture",
]

_COUNTER = itertools.count()
_GRAD_STACK = [True]


class ShapeError(ValueError):
    """Operand shapes incompatible, or an operand is empty."""


class no_grad:
    """Context manager that disables op recording (inference mode)."""

    def __enter__(self):
        _GRAD_STACK.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_STACK.pop()
        return False


class Tensor:
    """A numpy array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] | None = None
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._seq = next(_COUNTER)

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division unsupported; divide by scalars")
        return mul(self, 1.0 / float(other))


def constant(data) -> Tensor:
    """Wrap an array as an untracked tensor."""
    return Tensor(data)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_nonempty(*ts: Tensor) -> None:
    for t in ts:
        if t.data.size == 0:
            raise ShapeError(f"empty tensor of shape {t.data.shape}")


def _record(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _GRAD_STACK[-1] and any(p.requires_grad or p._parents is not None for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_ok(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.data.shape} with {b.data.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_nonempty(a, b)
    _broadcast_ok(a, b)
    out = a.data + b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_nonempty(a, b)
    _broadcast_ok(a, b)
    out = a.data - b.data
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_nonempty(a, b)
    _broadcast_ok(a, b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    _check_nonempty(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_nonempty(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (n,k)@(k,m), got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return (g @ b.data.T, a.data.T @ g)

    return _record(out, (a, b), vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    _check_nonempty(x)
    mask = x.data > 0  # subgradient at 0 is 0
    return _record(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def clip_min(x, floor: float) -> Tensor:
    """Elementwise max(floor, x); gradient vanishes where the clip is active."""
    x = as_tensor(x)
    _check_nonempty(x)
    mask = x.data > floor
    return _record(np.maximum(x.data, floor), (x,), lambda g: (g * mask,))


def elem_max(a, b) -> Tensor:
    """Elementwise maximum; at ties the gradient follows the first argument."""
    return add(a, relu(sub(b, a)))


def elem_min(a, b) -> Tensor:
    return sub(a, relu(sub(a, b)))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_nonempty(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(y, (x,), vjp)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    _check_nonempty(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _record(out, (x,), vjp)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    _check_nonempty(x)
    if axis is None:
        n = x.data.size
    else:
        n = x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def global_avg_pool(x) -> Tensor:
    """Mean over every element (scalar output)."""
    return tmean(x)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    _check_nonempty(*ts)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record(out, tuple(ts), vjp)


def take(x, index) -> Tensor:
    """Select a row/element by integer (or tuple of integer) index along leading axes."""
    x = as_tensor(x)
    _check_nonempty(x)
    idx = tuple(index) if isinstance(index, (tuple, list)) else (int(index),)
    out = np.asarray(x.data[idx])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _record(out.copy(), (x,), vjp)


def gather_rows(table, indices: np.ndarray) -> Tensor:
    """Row lookup table[indices]; backward scatter-adds into the table."""
    table = as_tensor(table)
    _check_nonempty(table)
    idx = np.asarray(indices)
    if idx.ndim != 1 or idx.dtype.kind not in "iu":
        raise ShapeError("gather_rows expects a 1-D integer index array")
    out = table.data[idx]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), vjp)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    _check_nonempty(x)
    old = x.data.shape
    out = x.data.reshape(shape)
    return _record(out, (x,), lambda g: (g.reshape(old),))


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Normalize along ``axis``; vectors with norm <= eps pass through scaled by 1/eps."""
    x = as_tensor(x)
    _check_nonempty(x)
    norm = np.sqrt((x.data ** 2).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    inv = 1.0 / denom
    y = x.data * inv

    def vjp(g):
        dot = (g * x.data).sum(axis=axis, keepdims=True)
        live = norm > eps
        return (g * inv - x.data * (dot * inv ** 3) * live,)

    return _record(y, (x,), vjp)


def cosine_sim(a, b, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Cosine similarity along the channel axis.

    The second argument broadcasts spatially, so a (h, w, d) map against a
    (d,) vector yields an (h, w) map. Zero-norm slices contribute 0.
    """
    na = l2_normalize(as_tensor(a), axis=axis, eps=eps)
    nb = l2_normalize(as_tensor(b), axis=axis, eps=eps)
    return tsum(mul(na, nb), axis=axis)


def avg_pool2d(x, kernel: int) -> Tensor:
    """Moving average over a 2-D map, stride 1, no padding.

    The kernel is clipped to the map extent per axis, so a map smaller than
    the kernel reduces to a single global mean.
    """
    x = as_tensor(x)
    _check_nonempty(x)
    if x.ndim != 2:
        raise ShapeError(f"avg_pool2d expects a 2-D map, got shape {x.shape}")
    if kernel < 1:
        raise ShapeError("kernel must be >= 1")
    h, w = x.shape
    kh, kw = min(kernel, h), min(kernel, w)
    pad = np.zeros((h + 1, w + 1), dtype=x.dtype)
    np.cumsum(np.cumsum(x.data, axis=0), axis=1, out=pad[1:, 1:])
    sums = pad[kh:, kw:] - pad[:-kh, kw:] - pad[kh:, :-kw] + pad[:-kh, :-kw]
    scale = 1.0 / (kh * kw)
    out = sums * scale
    oh, ow = out.shape

    def vjp(g):
        gx = np.zeros((h, w), dtype=g.dtype)
        gs = g * scale
        for di in range(kh):
            for dj in range(kw):
                gx[di:di + oh, dj:dj + ow] += gs
        return (gx,)

    return _record(out, (x,), vjp)


def upsample_nearest(x, size: tuple[int, int]) -> Tensor:
    """Nearest-neighbor resize of a (H, W) or (H, W, C) map to ``size``."""
    x = as_tensor(x)
    _check_nonempty(x)
    if x.ndim not in (2, 3):
        raise ShapeError(f"upsample_nearest expects 2-D or 3-D input, got {x.shape}")
    h, w = x.shape[:2]
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ShapeError("target size must be positive")
    ri = (np.arange(oh) * h) // oh
    ci = (np.arange(ow) * w) // ow
    out = x.data[ri[:, None], ci[None, :]]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (ri[:, None], ci[None, :]), g)
        return (gx,)

    return _record(out, (x,), vjp)


def standardize(x, gamma, beta, eps: float = 1e-5) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel standardization with learnable scale/shift (training mode).

    ``x`` is (N, C); statistics are taken over axis 0 of this forward batch.
    Returns the output plus the batch mean/var so callers can maintain
    running averages for inference.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_nonempty(x, gamma, beta)
    if x.ndim != 2:
        raise ShapeError(f"standardize expects (N, C); got {x.shape}")
    n = x.shape[0]
    mean = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    ivstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * ivstd
    out = xhat * gamma.data + beta.data

    def vjp(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        dx = (ivstd / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return (dx, dgamma, dbeta)

    return _record(out, (x, gamma, beta), vjp), mean, var


def affine_standardize(x, gamma, beta, mean: np.ndarray, var: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Inference-mode standardization against frozen running statistics."""
    scale = 1.0 / np.sqrt(var + eps)
    return add(mul(mul(sub(x, constant(mean)), constant(scale)), gamma), beta)


def weighted_mean(x, weights: np.ndarray | None) -> Tensor:
    """Mean of ``x``, optionally weighted by a constant mask.

    With weights, computes sum(x * w) / max(sum(w), 1): an all-zero mask
    yields exactly 0 rather than NaN.
    """
    if weights is None:
        return tmean(x)
    w = np.asarray(weights, dtype=float)
    denom = max(float(w.sum()), 1.0)
    return mul(tsum(mul(x, constant(w))), 1.0 / denom)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``.grad``.

    ``root`` must be scalar. Nodes are visited in the exact reverse of
    their creation order; repeated calls without clearing accumulate.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
    seen: dict[int, Tensor] = {id(root): root}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._parents is None:
            continue
        for p in t._parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack.append(p)
    nodes = sorted((t for t in seen.values() if t._parents is not None),
                   key=lambda t: t._seq, reverse=True)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    if root._parents is None:
        if root.requires_grad:
            root.grad = grads[id(root)] if root.grad is None else root.grad + grads[id(root)]
        return
    for t in nodes:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for p, pg in zip(t._parents, t._vjp(g)):
            if pg is None:
                continue
            if p._parents is None and not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    for t in seen.values():
        if t._parents is None and t.requires_grad and id(t) in grads:
            g = grads[id(t)]
            t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


class StopCapture:
    """Replayable stop-gradient sites.

    Model code routes every detach (and every discrete selection, e.g.
    nearest-code indices) through one of these. In ``off`` mode values are
    computed fresh, matching plain training. ``capture`` records each value
    in call order; ``rewind`` switches to ``replay`` so subsequent forward
    passes reuse the recorded values verbatim. Central finite differences
    of a loss agree with straight-through/detached analytic gradients only
    when the stopped values are frozen this way.
    """

    def __init__(self, mode: str = "off"):
        if mode not in ("off", "capture", "replay"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self._values: list = []
        self._cursor = 0

    def value(self, compute: Callable[[], np.ndarray]):
        if self.mode == "replay":
            v = self._values[self._cursor]
            self._cursor += 1
            return v
        v = compute()
        if self.mode == "capture":
            self._values.append(v)
        return v

    def stop(self, t: Tensor) -> Tensor:
        return constant(self.value(lambda: t.data))

    def rewind(self) -> None:
        if self.mode == "off":
            raise ValueError("nothing captured")
        self.mode = "replay"
        self._cursor = 0


def grad_check(fn: Callable[..., Tensor], points: Sequence[Tensor], eps: float = 1e-5,
               samples: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``points`` are float64 leaf tensors; ``fn`` must rebuild its graph on
    every call. Returns the max of |analytic - numeric| / max(1, |numeric|)
    over the probed coordinates (all coordinates, or ``samples`` random ones
    per tensor). Non-finite values surface as ``inf`` so callers fail loudly.
    """
    zero_grads(points)
    out = fn(*points)
    backward(out)
    if not np.isfinite(out.data).all():
        return float("inf")
    worst = 0.0
    for p in points:
        if not p.requires_grad:
            continue
        grad = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        if samples is None or samples >= flat.size:
            coords = range(flat.size)
        else:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(flat.size, size=samples, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn(*points).data)
            flat[i] = orig - eps
            lo = float(fn(*points).data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            analytic = float(grad.reshape(-1)[i])
            if not (np.isfinite(numeric) and np.isfinite(analytic)):
                return float("inf")
            err = abs(analytic - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
