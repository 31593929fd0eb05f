"""Dense tensor ops with reverse-mode automatic differentiation.

Values are plain numpy arrays (rank <= 4, row-major, float32 or float64);
``Variable`` wraps one array together with its gradient buffer and a node in
the computation tape. Every primitive registers an analytic adjoint, and the
whole set is checked against central finite differences in the test suite.

Broadcasting is deliberately narrow: operands must have equal shapes, or one
of them is a scalar, or one is a single-channel ``[1,H,W]`` map broadcast over
the channel axis of a ``[C,H,W]`` map. Anything else raises.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

_grad_enabled = True

_node_counter = itertools.count()


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / plumbing)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_tensor(data: np.ndarray) -> np.ndarray:
    if data.ndim > 4:
        raise ValueError(f"tensor rank {data.ndim} exceeds the rank-4 limit")
    if data.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        data = data.astype(np.float64)
    return np.ascontiguousarray(data)


class Variable:
    """A tensor value plus gradient buffer, recorded on the computation tape.

    ``grad`` has the same shape as ``data``, starts at zero, and accumulates
    across ``backward`` calls until ``zero_grad`` is called.
    """

    __slots__ = ("_data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self._data = _check_tensor(np.asarray(data))
        self.requires_grad = bool(requires_grad)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        # only leaves hold a persistent gradient buffer; interior tape nodes
        # receive their gradient transiently during backward
        self.grad = (np.zeros_like(self._data)
                     if self.requires_grad and not self._parents else None)
        self._id = next(_node_counter)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        self._data = _check_tensor(np.asarray(value))
        if self.grad is not None and self.grad.shape != self._data.shape:
            self.grad = np.zeros_like(self._data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Variable":
        return Variable(self.data.copy())

    def backward(self):
        """Populate ``grad`` of every requires-grad node reachable from here.

        The loss must be scalar. Gradients from repeated calls accumulate;
        traversal is in reverse topological order, visiting each node once,
        with a deterministic (construction-order) schedule.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Variable] = []
        seen: set[int] = set()
        stack: list[tuple[Variable, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if node._id in seen:
                continue
            seen.add(node._id)
            stack.append((node, True))
            for p in node._parents:
                if p._id not in seen:
                    stack.append((p, False))

        flowing: dict[int, np.ndarray] = {self._id: np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(node._id, None)
            if g is None:
                continue
            if node.grad is not None and node.requires_grad:
                node.grad += g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                held = flowing.get(parent._id)
                flowing[parent._id] = pg if held is None else held + pg

    def __repr__(self):
        return f"Variable(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Variable) or isinstance(other, np.ndarray):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)


def as_variable(x) -> Variable:
    return x if isinstance(x, Variable) else Variable(np.asarray(x))


def _make(data, parents, backward) -> Variable:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Variable(data)
    return Variable(data, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _broadcast_check(a: np.ndarray, b: np.ndarray):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    if a.ndim == 3 and b.ndim == 3 and a.shape[1:] == b.shape[1:] and 1 in (a.shape[0], b.shape[0]):
        return  # single-channel map against [C,H,W]
    raise ValueError(f"incompatible shapes {a.shape} vs {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == () or shape == (1,):
        return grad.sum().reshape(shape)
    # collapse the broadcast channel axis back to 1
    g = grad
    if g.ndim == len(shape):
        axes = tuple(i for i in range(g.ndim) if shape[i] == 1 and g.shape[i] != 1)
        g = g.sum(axis=axes, keepdims=True)
    else:
        g = g.sum(axis=tuple(range(g.ndim - len(shape))))
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------

def add(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _broadcast_check(a.data, b.data)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def sub(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _broadcast_check(a.data, b.data)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    _broadcast_check(a.data, b.data)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd)


def scalar_mul(a, s: float) -> Variable:
    a = as_variable(a)
    s = float(s)
    out = a.data * s

    def bwd(g):
        return (g * s,)

    return _make(out, (a,), bwd)


def relu(a) -> Variable:
    a = as_variable(a)
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _make(out, (a,), bwd)


def sigmoid(a) -> Variable:
    a = as_variable(a)
    # split by sign so exp never overflows
    pos = a.data >= 0
    z = np.exp(np.where(pos, -a.data, a.data))
    out = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bwd)


def l1(a) -> Variable:
    """Sum of absolute values, reduced to a scalar."""
    a = as_variable(a)
    out = np.abs(a.data).sum()

    def bwd(g):
        return (g * np.sign(a.data),)

    return _make(out, (a,), bwd)


def l2(a) -> Variable:
    """Sum of squares (squared L2 norm), reduced to a scalar."""
    a = as_variable(a)
    out = (a.data * a.data).sum()

    def bwd(g):
        return (g * 2.0 * a.data,)

    return _make(out, (a,), bwd)


def mean(a) -> Variable:
    a = as_variable(a)
    out = a.data.mean()
    inv_n = 1.0 / a.data.size

    def bwd(g):
        return (np.full_like(a.data, g * inv_n),)

    return _make(out, (a,), bwd)


def vsum(a) -> Variable:
    a = as_variable(a)
    out = a.data.sum()

    def bwd(g):
        return (np.full_like(a.data, g),)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# channel plumbing
# ---------------------------------------------------------------------------

def split_channels(x) -> tuple[Variable, Variable]:
    """Split a [2C,H,W] map into its first and second C-channel halves."""
    x = as_variable(x)
    if x.data.ndim != 3 or x.shape[0] % 2 != 0:
        raise ValueError(f"split_channels needs [2C,H,W] with even channels, got {x.shape}")
    c = x.shape[0] // 2
    first = slice_channels(x, 0, c)
    second = slice_channels(x, c, 2 * c)
    return first, second


def slice_channels(x, start: int, stop: int) -> Variable:
    x = as_variable(x)
    if x.data.ndim != 3 or not (0 <= start < stop <= x.shape[0]):
        raise ValueError(f"bad channel slice [{start}:{stop}] of {x.shape}")
    out = x.data[start:stop].copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _make(out, (x,), bwd)


def concat_channels(a, b) -> Variable:
    a, b = as_variable(a), as_variable(b)
    if a.data.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ValueError(f"cannot concat {a.shape} with {b.shape}")
    out = np.concatenate([a.data, b.data], axis=0)
    ca = a.shape[0]

    def bwd(g):
        return g[:ca].copy(), g[ca:].copy()

    return _make(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# normalization / gradients / pooling
# ---------------------------------------------------------------------------

def minmax_normalize(x, eps: float = 1e-6) -> Variable:
    """Map a [1,H,W] tensor into [0,1) via (x - min) / (max - min + eps)."""
    x = as_variable(x)
    if x.data.ndim != 3 or x.shape[0] != 1:
        raise ValueError(f"minmax_normalize needs [1,H,W], got {x.shape}")
    flat = x.data.ravel()
    i_min = int(np.argmin(flat))
    i_max = int(np.argmax(flat))
    lo = flat[i_min]
    rng = flat[i_max] - lo + eps
    out = (x.data - lo) / rng

    def bwd(g):
        gx = g / rng
        total = g.sum() / rng
        # s = sum_i g_i * y_i / rng captures the range sensitivity
        s = (g * out).sum() / rng
        gflat = gx.ravel().copy()
        gflat[i_min] += s - total
        gflat[i_max] -= s
        return (gflat.reshape(x.shape),)

    return _make(out, (x,), bwd)


def spatial_gradient(x) -> Variable:
    """Forward differences of a [1,H,W] map, stacked as [2,H,W] (dx, dy).

    dx[i,j] = x[i,j+1] - x[i,j] (zero at the last column), dy analogous
    along rows.
    """
    x = as_variable(x)
    if x.data.ndim != 3 or x.shape[0] != 1:
        raise ValueError(f"spatial_gradient needs [1,H,W], got {x.shape}")
    _, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"spatial_gradient needs H,W >= 2, got {h}x{w}")
    plane = x.data[0]
    out = np.zeros((2, h, w), dtype=x.dtype)
    out[0, :, :-1] = plane[:, 1:] - plane[:, :-1]
    out[1, :-1, :] = plane[1:, :] - plane[:-1, :]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[0, :, 1:] += g[0, :, :-1]
        gx[0, :, :-1] -= g[0, :, :-1]
        gx[0, 1:, :] += g[1, :-1, :]
        gx[0, :-1, :] -= g[1, :-1, :]
        return (gx,)

    return _make(out, (x,), bwd)


def avgpool_down(x, factor: int) -> Variable:
    """Non-overlapping block mean over a [C,H,W] map."""
    x = as_variable(x)
    if x.data.ndim != 3:
        raise ValueError(f"avgpool_down needs [C,H,W], got {x.shape}")
    c, h, w = x.shape
    f = int(factor)
    if f < 1 or h % f or w % f:
        raise ValueError(f"spatial dims {h}x{w} not divisible by factor {f}")
    if f == 1:
        return _make(x.data.copy(), (x,), lambda g: (g.copy(),))
    out = x.data.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))
    inv = 1.0 / (f * f)

    def bwd(g):
        gx = np.repeat(np.repeat(g, f, axis=1), f, axis=2) * inv
        return (gx,)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, c: int, kh: int, kw: int, stride: int,
            ho: int, wo: int, hp: int, wp: int) -> np.ndarray:
    xp = np.zeros((c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, kh * kw, ho, wo)
    k = 0
    for ki in range(kh):
        for kj in range(kw):
            xp[:, ki : ki + (ho - 1) * stride + 1 : stride,
               kj : kj + (wo - 1) * stride + 1 : stride] += cols[:, k]
            k += 1
    return xp


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Variable:
    """Cross-correlate [C,H,W] with [C_out,C,kh,kw] kernels, zero padding."""
    x, w = as_variable(x), as_variable(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValueError(f"conv2d needs x[C,H,W], w[Co,C,kh,kw]; got {x.shape}, {w.shape}")
    c, h, wdt = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"kernel expects {ci} input channels, x has {c}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
    if pad < 0:
        raise ValueError("pad must be >= 0")
    # floor semantics: trailing rows/cols that no window covers are dropped,
    # which is what lets a 3x3 stride-2 pad-1 stage halve an even extent
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wdt + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"shape {h}x{wdt} with pad {pad} too small for kernel {kh}x{kw} stride {stride}")

    if pad:
        xp = np.zeros((c, h + 2 * pad, wdt + 2 * pad), dtype=x.dtype)
        xp[:, pad:-pad, pad:-pad] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = w.data.reshape(co, -1)
    y2 = w2 @ cols
    bias = as_variable(b) if b is not None else None
    if bias is not None:
        if bias.shape != (co,):
            raise ValueError(f"bias shape {bias.shape} != ({co},)")
        y2 = y2 + bias.data[:, None]
    out = y2.reshape(co, ho, wo)

    def bwd(g):
        g2 = g.reshape(co, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        gcols = w2.T @ g2
        gxp = _col2im(gcols, c, kh, kw, stride, ho, wo, h + 2 * pad, wdt + 2 * pad)
        gx = gxp[:, pad : pad + h, pad : pad + wdt] if pad else gxp
        if bias is not None:
            return gx, gw, g2.sum(axis=1)
        return gx, gw

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, bwd)


def deconv2d(x, w, b=None, stride: int = 2) -> Variable:
    """Transposed convolution with a 2x2 kernel at stride 2: exact doubling.

    w is laid out [C_in, C_out, 2, 2]; the adjoint of this op is the
    stride-2, pad-0 forward convolution with the same kernel.
    """
    x, w = as_variable(x), as_variable(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValueError(f"deconv2d needs x[C,H,W], w[Ci,Co,2,2]; got {x.shape}, {w.shape}")
    if stride != 2 or w.shape[2:] != (2, 2):
        raise ValueError(f"deconv2d supports kernel 2x2 stride 2 only, got {w.shape[2:]}, stride {stride}")
    ci, h, wdt = x.shape
    if w.shape[0] != ci:
        raise ValueError(f"kernel expects {w.shape[0]} input channels, x has {ci}")
    co = w.shape[1]

    # taps do not overlap at stride 2 / kernel 2, so this is a pure reshape:
    # [P, Ci] @ [Ci, Co*4] -> [i, j, o, a, b] -> [o, 2i+a, 2j+b]
    p = h * wdt
    x2 = x.data.reshape(ci, p)
    w2 = w.data.reshape(ci, co * 4)
    y = (x2.T @ w2).reshape(h, wdt, co, 2, 2)
    out = np.ascontiguousarray(y.transpose(2, 0, 3, 1, 4)).reshape(co, 2 * h, 2 * wdt)
    bias = as_variable(b) if b is not None else None
    if bias is not None:
        if bias.shape != (co,):
            raise ValueError(f"bias shape {bias.shape} != ({co},)")
        out = out + bias.data[:, None, None]

    def bwd(g):
        g5 = g.reshape(co, h, 2, wdt, 2).transpose(1, 3, 0, 2, 4).reshape(p, co * 4)
        gx = (g5 @ w2.T).T.reshape(x.shape)
        gw = (x2 @ g5).reshape(w.shape)
        if bias is not None:
            return gx, gw, g.sum(axis=(1, 2))
        return gx, gw

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, bwd)
