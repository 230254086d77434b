"""Minimal dense-tensor autograd engine.

Tensors hold float64 numpy arrays plus an optional gradient buffer.
Every differentiable op records a backward closure on its output; calling
``backward()`` on a scalar walks the tape in reverse topological order and
accumulates gradients into every reachable tensor with ``requires_grad``.

Scope is deliberately small: only the ops needed by a tiny conv backbone,
RPN heads, cosine attention, and the classification/regression losses.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class GraphError(Exception):
    """Raised on contract violations (shape mismatches, non-scalar backward)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (used by finite differences
    and inference paths where graph bookkeeping is pure overhead)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._prev: tuple = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar. Repeated calls without
        ``zero_grad`` accumulate."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is None:
                continue
            for p, gp in zip(node._prev, node._backward(g)):
                if gp is None:
                    continue
                if id(p) in grads:
                    grads[id(p)] += gp
                else:
                    grads[id(p)] = gp

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def item(self) -> float:
        return float(self.data.reshape(()))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]]) -> Tensor:
    """Wrap an op result; records the tape only when grad mode is on and
    some parent participates in differentiation."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._prev for p in parents):
        out._prev = tuple(parents)
        out._backward = backward
        out.requires_grad = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                          _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, s: float) -> Tensor:
    return _make(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = np.empty_like(a.data)
    pos = a.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    s[~pos] = e / (1.0 + e)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tsum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full_like(a.data, float(g)),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise GraphError("transpose expects a 2-d tensor")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.data[idx], (a,), backward)


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data
    return _make(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d convolution, channels-last: x is (H, W, Cin), kernel is
    (k, k, Cin, Cout). Output extent is floor((H + 2*pad - k) / stride) + 1;
    trailing rows that do not fill a window are dropped, so a 3x3/stride-2/
    pad-1 conv exactly halves even extents."""
    k = kernel.shape[0]
    if kernel.data.ndim != 4 or kernel.shape[1] != k:
        raise GraphError(f"kernel must be (k, k, Cin, Cout), got {kernel.shape}")
    if k % 2 != 1:
        raise GraphError("kernel extent must be odd")
    if stride < 1 or pad < 0:
        raise GraphError("stride must be >= 1 and pad >= 0")
    if x.data.ndim != 3 or x.shape[2] != kernel.shape[2]:
        raise GraphError(f"input {x.shape} incompatible with kernel {kernel.shape}")
    h, w, cin = x.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise GraphError(f"empty output extent for input {x.shape}, "
                         f"k={k}, stride={stride}, pad={pad}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    # windows: (ho, wo, Cin, k, k)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    win = win[::stride, ::stride]
    data = np.einsum("hwcij,ijco->hwo", win, kernel.data, optimize=True)

    def backward(g):
        gk = np.einsum("hwcij,hwo->ijco", win, g, optimize=True)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                # each kernel tap scatters g back onto a strided slab
                gxp[i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    g @ kernel.data[i, j].T
        gx = gxp[pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk

    return _make(data, (x, kernel), backward)


def anchor_scores(fe: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Grouped 1x1 scoring head: fe is (H, W, na*D), w is (na, D), b is
    (na,). Anchor a's score at each cell reads only its own D-slice, so the
    output (H, W, na) never mixes embeddings across anchors."""
    na, d = w.shape
    h, wd, c = fe.shape
    if c != na * d:
        raise GraphError(f"embedding channels {c} != na*D = {na * d}")
    fe4 = fe.data.reshape(h, wd, na, d)
    data = np.einsum("hwad,ad->hwa", fe4, w.data, optimize=True) + b.data

    def backward(g):
        gfe = (g[..., None] * w.data).reshape(h, wd, c)
        gw = np.einsum("hwad,hwa->ad", fe4, g, optimize=True)
        gb = g.sum(axis=(0, 1))
        return gfe, gw, gb

    return _make(data, (fe, w, b), backward)


# -- rows ---------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise GraphError("softmax_rows expects a 2-d tensor")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (x,), backward)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit L2 norm; rows with norm below eps pass
    through as zeros."""
    if x.data.ndim != 2:
        raise GraphError("l2_normalize_rows expects a 2-d tensor")
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    safe = np.where(norms < eps, 1.0, norms)
    y = np.where(norms < eps, 0.0, x.data / safe)

    def backward(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        gx = (g - y * dot) / safe
        return (np.where(norms < eps, 0.0, gx),)

    return _make(y, (x,), backward)


def standardize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Shift each row to zero mean and scale it to unit variance. The output
    row norm is sqrt(D) for a D-column input, so dot products of standardized
    rows are D times the Pearson correlation of the originals."""
    if x.data.ndim != 2:
        raise GraphError("standardize_rows expects a 2-d tensor")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    sigma = np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    y = centered / sigma

    def backward(g):
        # Standard layer-norm gradient: remove the components of g along the
        # constant direction and along y itself, then undo the scaling.
        g_mu = g.mean(axis=1, keepdims=True)
        g_proj = (g * y).mean(axis=1, keepdims=True)
        return ((g - g_mu - y * g_proj) / sigma,)

    return _make(y, (x,), backward)


# -- losses -------------------------------------------------------------------

BCE_EPS = 1e-7


def bce_loss(p: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy against constant targets in [0, 1].
    Probabilities are clamped to [eps, 1-eps]; the gradient is zero in the
    clamped region, matching the clamped forward."""
    t = np.asarray(target, dtype=np.float64)
    pc = np.clip(p.data, BCE_EPS, 1.0 - BCE_EPS)
    data = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    inside = (p.data > BCE_EPS) & (p.data < 1.0 - BCE_EPS)

    def backward(g):
        return (g * inside * (pc - t) / (pc * (1.0 - pc)),)

    return _make(data, (p,), backward)


def smooth_l1(pred: Tensor, target) -> Tensor:
    """Elementwise smooth-L1 of (pred - target): 0.5 d^2 for |d| < 1, else
    |d| - 0.5. Targets are constants."""
    t = np.asarray(target, dtype=np.float64)
    d = pred.data - t
    ad = np.abs(d)
    data = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)

    def backward(g):
        return (g * np.clip(d, -1.0, 1.0),)

    return _make(data, (pred,), backward)
