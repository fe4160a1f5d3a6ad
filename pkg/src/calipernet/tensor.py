"""Minimal reverse-mode autodiff over dense float64 arrays.

Feature maps use the (height, width, channels) layout throughout. Every op
records its parents and a backward closure on the output tensor; calling
``backward`` on a scalar walks the recorded graph in reverse creation order.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_node_ids = itertools.count()


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal


def tape(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` that need gradients, in execution order."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in seen or not node.requires_grad:
            continue
        seen.add(node._id)
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._id)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in reversed(tape(loss)):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum. Feature maps must agree spatially; scalars broadcast."""
    if x.data.ndim == 3 and y.data.ndim == 3 and x.shape[:2] != y.shape[:2]:
        raise ValueError(f"add: spatial mismatch {x.shape[:2]} vs {y.shape[:2]}")
    out = x.data + y.data
    xs, ys = x.shape, y.shape
    return _make(out, (x, y), lambda g: (_unbroadcast(g, xs), _unbroadcast(g, ys)))


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,))


def mul(x: Tensor, y: Tensor) -> Tensor:
    xd, yd = x.data, y.data
    xs, ys = x.shape, y.shape
    return _make(
        xd * yd, (x, y), lambda g: (_unbroadcast(g * yd, xs), _unbroadcast(g * xd, ys))
    )


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore"):
        out = np.log(xd)
    return _make(out, (x,), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def take(x: Tensor, index: tuple[np.ndarray, ...]) -> Tensor:
    """Gather ``x.data[index]`` (advanced indexing); repeated indices accumulate."""
    shape = x.shape

    def fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), fn)


def logsumexp(x: Tensor) -> Tensor:
    """log(sum(exp(x))) over all entries, stabilised by the max."""
    m = x.data.max()
    e = np.exp(x.data - m)
    s = e.sum()
    return _make(np.asarray(m + np.log(s)), (x,), lambda g: (g * e / s,))


# ---------------------------------------------------------------------------
# feature-map ops


def _check_map(x: Tensor, op: str) -> None:
    if x.data.ndim != 3:
        raise ValueError(f"{op}: expected an h x w x c tensor, got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an h x w x c_in map with a k x k x c_in x c_out kernel."""
    _check_map(x, "conv2d")
    if kernel.data.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"conv2d: kernel must be k x k x c_in x c_out, got {kernel.shape}")
    k, _, c_in, c_out = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"conv2d: kernel size must be odd, got {k}")
    if x.shape[2] != c_in:
        raise ValueError(
            f"conv2d: input has {x.shape[2]} channels but kernel expects {c_in}"
        )
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match c_out={c_out}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    h, w, _ = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ValueError(f"conv2d: padded input {hp}x{wp} smaller than kernel {k}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    if padding:
        xp = np.zeros((hp, wp, c_in), dtype=DTYPE)
        xp[padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    if k == 1:
        cols = xp[: stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
        cols = np.ascontiguousarray(cols).reshape(ho * wo, c_in)
    else:
        cols = np.empty((ho, wo, k, k, c_in), dtype=DTYPE)
        for di in range(k):
            for dj in range(k):
                cols[:, :, di, dj] = xp[
                    di : di + stride * (ho - 1) + 1 : stride,
                    dj : dj + stride * (wo - 1) + 1 : stride,
                ]
        cols = cols.reshape(ho * wo, k * k * c_in)
    kmat = kernel.data.reshape(k * k * c_in, c_out)
    out = (cols @ kmat + bias.data).reshape(ho, wo, c_out)

    def fn(g):
        g2 = g.reshape(ho * wo, c_out)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(ho, wo, k, k, c_in)
            gxp = np.zeros((hp, wp, c_in), dtype=DTYPE)
            for di in range(k):
                for dj in range(k):
                    gxp[
                        di : di + stride * (ho - 1) + 1 : stride,
                        dj : dj + stride * (wo - 1) + 1 : stride,
                    ] += gcols[:, :, di, dj]
            gx = gxp[padding : padding + h, padding : padding + w]
            if padding:
                gx = gx.copy()
        return gx, gk, gb

    return _make(out, (x, kernel, bias), fn)


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Per-channel normalisation over the spatial positions, then scale and shift.

    With batch size 1 this is batch normalisation in training mode; no running
    statistics are kept.
    """
    _check_map(x, "channel_norm")
    h, w, c = x.shape
    n = h * w
    if n < 2:
        raise ValueError(f"channel_norm: need at least 2 spatial positions, got {h}x{w}")
    flat = x.data.reshape(n, c)
    mean = flat.mean(axis=0)
    centered = flat - mean
    var = (centered * centered).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = centered * inv_std
    out = (xhat * gamma.data + beta.data).reshape(h, w, c)

    def fn(g):
        g2 = g.reshape(n, c)
        gbeta = g2.sum(axis=0)
        ggamma = (g2 * xhat).sum(axis=0)
        gxhat = g2 * gamma.data
        gx = inv_std * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
        return gx.reshape(h, w, c), ggamma, gbeta

    return _make(out, (x, gamma, beta), fn)


def spatial_dropout(
    x: Tensor, rate: float, rng: np.random.Generator, training: bool
) -> Tensor:
    """Zero whole channels with probability ``rate``; survivors scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"spatial_dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    _check_map(x, "spatial_dropout")
    keep = (rng.random(x.shape[2]) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centre (align_corners=False) linear interpolation weights, n_out x n_in."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor with half-pixel-centre sampling."""
    _check_map(x, "bilinear_upsample")
    if factor < 1:
        raise ValueError(f"bilinear_upsample: factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    h, w, c = x.shape
    mh = interp_matrix(h, h * factor)
    mw = interp_matrix(w, w * factor)
    # rows first: (H, h) @ (h, w*c)
    tmp = (mh @ x.data.reshape(h, w * c)).reshape(h * factor, w, c)
    out = np.einsum("bw,awc->abc", mw, tmp, optimize=True)

    def fn(g):
        gt = np.einsum("bw,abc->awc", mw, g, optimize=True)
        gx = (mh.T @ gt.reshape(h * factor, w * c)).reshape(h, w, c)
        return (gx,)

    return _make(out, (x,), fn)


def concat_channels(x: Tensor, y: Tensor) -> Tensor:
    _check_map(x, "concat_channels")
    _check_map(y, "concat_channels")
    if x.shape[:2] != y.shape[:2]:
        raise ValueError(f"concat_channels: spatial mismatch {x.shape[:2]} vs {y.shape[:2]}")
    c1 = x.shape[2]
    out = np.concatenate([x.data, y.data], axis=2)
    return _make(out, (x, y), lambda g: (g[:, :, :c1], g[:, :, c1:]))


def log_softmax_channels(logits: Tensor) -> Tensor:
    _check_map(logits, "log_softmax_channels")
    z = logits.data - logits.data.max(axis=2, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=2, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (logits,), lambda g: (g - p * g.sum(axis=2, keepdims=True),))


@dataclass
class ProbabilityMap:
    """Per-pixel class distribution (h x w x c); channel 0 is background.

    ``log_probs`` is carried alongside when the map comes from logits so that
    losses can take logarithms without underflow.
    """

    probs: Tensor
    log_probs: Optional[Tensor] = None

    def __post_init__(self):
        if self.probs.data.ndim != 3 or self.probs.shape[2] < 2:
            raise ValueError(f"ProbabilityMap needs h x w x c with c >= 2, got {self.probs.shape}")

    @classmethod
    def from_array(cls, probs, requires_grad: bool = False) -> "ProbabilityMap":
        return cls(Tensor(probs, requires_grad=requires_grad))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.probs.shape

    @property
    def num_classes(self) -> int:
        return self.probs.shape[2]

    def values(self) -> np.ndarray:
        return self.probs.data

    def log(self) -> Tensor:
        if self.log_probs is None:
            self.log_probs = log(self.probs)
        return self.log_probs


def softmax_channels(logits: Tensor) -> ProbabilityMap:
    """Channel softmax, returned together with its log for stable losses."""
    _check_map(logits, "softmax_channels")
    if logits.shape[2] < 2:
        raise ValueError("softmax_channels: need at least 2 channels")
    z = logits.data - logits.data.max(axis=2, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=2, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=2, keepdims=True)),)

    return ProbabilityMap(_make(p, (logits,), fn), log_softmax_channels(logits))


# ---------------------------------------------------------------------------
# verification


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor(x)).item()
        flat[i] = orig - step
        fm = f(Tensor(x)).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    leaf = Tensor(np.array(x, dtype=DTYPE), requires_grad=True)
    out = f(leaf)
    backward(out)
    return leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x, step: float = 1e-6, floor: float = 1e-6
) -> float:
    """Max relative discrepancy between backward() and central differences.

    Entries whose gradients are both below ``floor`` in magnitude are compared
    on an absolute scale of ``floor``.
    """
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)
    return relative_error(analytic_grad(f, x), numeric_grad(f, x, step), floor)
