"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is an explicit tape recorded per forward pass: ops append nodes
(in construction order, which is topological) to the active ``Tape``, and
``Tape.backward`` walks the node list once in reverse, accumulating
gradients additively at fan-out. All math is 64-bit. Every op validates
that its output is finite; NaN/Inf anywhere is an error, never a silent
value.

Stochastic forward nodes (weight samples, Gumbel noise) enter the graph as
constant leaves, so backward differentiates exactly through the sampled
path.
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up; message names the dims."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in tensor data."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    # cheap screen: NaN/Inf survive summation; fall back to a full scan
    # only when the screen trips (the screen can false-alarm on overflow)
    if np.isfinite(arr.sum()):
        return
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        raise NonFiniteError(
            f"{what} contains a non-finite value (first at index {tuple(bad[0])})"
        )


class Tensor:
    """A row-major float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, name or "tensor")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tracked = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"

    # arithmetic sugar; constants are wrapped on the fly
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "back")

    def __init__(self, out: Tensor, back):
        self.out = out
        self.back = back  # list of (input Tensor, fn(out_grad) -> grad array)


class Tape:
    """Ordered record of one forward pass.

    ``nodes`` is topologically ordered by construction. ``seed`` is
    bookkeeping for any stochastic nodes sampled while the tape was active.
    """

    def __init__(self, seed: int | None = None):
        self.nodes: list[_Node] = []
        self.seed = seed

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor) -> None:
        """Populate .grad for every tensor on the path from leaves to loss."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for t, fn in node.back:
                contrib = fn(g)
                # out-of-place accumulation: contributions may alias g
                t.grad = contrib if t.grad is None else t.grad + contrib


_TAPES: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, back_pairs) -> None:
    tape = _active_tape()
    if tape is None:
        return
    pairs = [(t, fn) for t, fn in back_pairs if t._tracked]
    if pairs:
        tape.nodes.append(_Node(out, pairs))
        out._tracked = True


def _result(data: np.ndarray, what: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    _check_finite(out.data, what)
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._tracked = False
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _result(a.data + b.data, "add")
    _record(out, [(a, lambda g: _unbroadcast(g, a.data.shape)),
                  (b, lambda g: _unbroadcast(g, b.data.shape))])
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _result(a.data - b.data, "sub")
    _record(out, [(a, lambda g: _unbroadcast(g, a.data.shape)),
                  (b, lambda g: _unbroadcast(-g, b.data.shape))])
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _result(a.data * b.data, "mul")
    _record(out, [(a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
                  (b, lambda g: _unbroadcast(g * a.data, b.data.shape))])
    return out


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _result(a.data / b.data, "div")
    _record(out, [(a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
                  (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))])
    return out


def square(a) -> Tensor:
    a = _wrap(a)
    out = _result(a.data * a.data, "square")
    _record(out, [(a, lambda g: 2.0 * g * a.data)])
    return out


def exp(a) -> Tensor:
    a = _wrap(a)
    y = np.exp(a.data)
    out = _result(y, "exp")
    _record(out, [(a, lambda g: g * y)])
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    out = _result(np.log(a.data), "log")
    _record(out, [(a, lambda g: g / a.data)])
    return out


def sqrt(a) -> Tensor:
    a = _wrap(a)
    y = np.sqrt(a.data)
    out = _result(y, "sqrt")
    _record(out, [(a, lambda g: g / (2.0 * y))])
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    # overflow-safe logistic
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _result(y, "sigmoid")
    _record(out, [(a, lambda g: g * y * (1.0 - y))])
    return out


def swish(a) -> Tensor:
    """swish(x) = x * sigmoid(x)."""
    a = _wrap(a)
    s = sigmoid(a)  # composed: records its own node
    return mul(a, s)


def softplus(a) -> Tensor:
    """softplus(x) = log(1 + exp(x)), computed overflow-safe."""
    a = _wrap(a)
    y = np.logaddexp(0.0, a.data)
    out = _result(y, "softplus")

    def back(g):
        s = np.empty_like(a.data)
        pos = a.data >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        ex = np.exp(a.data[~pos])
        s[~pos] = ex / (1.0 + ex)
        return g * s

    _record(out, [(a, back)])
    return out


def softmax(a) -> Tensor:
    """Softmax over the last axis; output rows live on the simplex."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, "softmax")

    def back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return y * (g - dot)

    _record(out, [(a, back)])
    return out


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = _result(a.data.sum(axis=axis, keepdims=keepdims), "sum")

    def back(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape)
        gk = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gk, a.data.shape)

    _record(out, [(a, back)])
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = _result(a.data.reshape(shape), "reshape")
    _record(out, [(a, lambda g: g.reshape(a.data.shape))])
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), "concat")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_back(i):
        lo, hi = offsets[i], offsets[i + 1]

        def back(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return back

    _record(out, [(t, make_back(i)) for i, t in enumerate(tensors)])
    return out


def tile_rows(a, n: int) -> Tensor:
    """Stack n copies of a along a new leading axis; backward sums them."""
    a = _wrap(a)
    out = _result(np.broadcast_to(a.data[None], (n,) + a.data.shape).copy(), "tile_rows")
    _record(out, [(a, lambda g: g.sum(axis=0))])
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise ShapeError("matmul needs at least 1-d operands")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dims differ: {a.data.shape[-1]} vs {b.data.shape[0]}"
        )
    out = _result(a.data @ b.data, "matmul")
    if a.data.ndim == 1:
        _record(out, [(a, lambda g: g @ b.data.T),
                      (b, lambda g: np.outer(a.data, g))])
    else:
        _record(out, [(a, lambda g: g @ b.data.T),
                      (b, lambda g: a.data.reshape(-1, a.data.shape[-1]).T
                                    @ g.reshape(-1, g.shape[-1]))])
    return out


# ---------------------------------------------------------------------------
# convolution / pooling


def _pad_spec(h: int, w: int, k: int, stride: int, padding: str):
    if padding == "valid":
        if k > h or k > w:
            raise ShapeError(f"filter size {k} exceeds input dims ({h}, {w})")
        ho = (h - k) // stride + 1
        wo = (w - k) // stride + 1
        return ho, wo, (0, 0), (0, 0)
    if padding == "same":
        ho = -(-h // stride)
        wo = -(-w // stride)
        ph = max((ho - 1) * stride + k - h, 0)
        pw = max((wo - 1) * stride + k - w, 0)
        return ho, wo, (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _im2col(x: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # x is already padded, (N, Hp, Wp, C) -> (N, ho, wo, k, k, C) copy
    n, hp, wp, c = x.shape
    sn, sh, sw, sc = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, ho, wo, k, k, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return np.ascontiguousarray(view)


def _col2im(dcols: np.ndarray, padded_shape, k: int, stride: int, pads_h, pads_w) -> np.ndarray:
    """Overlap-add patch gradients back onto the (padded) input grid."""
    n, hp, wp, cin = padded_shape
    _, ho, wo = dcols.shape[0], dcols.shape[1], dcols.shape[2]
    # transposing first makes each (di, dj) slab contiguous for the adds
    dt = np.ascontiguousarray(dcols.transpose(3, 4, 0, 1, 2, 5))
    dxp = np.zeros((n, hp, wp, cin))
    for di in range(k):
        for dj in range(k):
            dxp[:, di:di + ho * stride:stride, dj:dj + wo * stride:stride, :] += dt[di, dj]
    pt, pb = pads_h
    pl, pr = pads_w
    return dxp[:, pt:hp - pb, pl:wp - pr, :]


def conv2d(x, filters, stride: int = 1, padding: str = "valid") -> Tensor:
    """2-d cross-correlation, NHWC layout.

    ``x`` is (H, W, Cin) or (N, H, W, Cin); ``filters`` is (k, k, Cin, Cout).
    Output spatial dims: valid -> floor((H-k)/stride)+1; same ->
    ceil(H/stride) with zero padding split low/high.
    """
    x, filters = _wrap(x), _wrap(filters)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be 3-d or 4-d, got {x.data.ndim}-d")
    fd = filters.data
    if fd.ndim != 4 or fd.shape[0] != fd.shape[1]:
        raise ShapeError(f"filters must be (k, k, Cin, Cout), got {fd.shape}")
    k, _, cin, cout = fd.shape
    n, h, w, cx = xd.shape
    if cx != cin:
        raise ShapeError(f"input channels {cx} != filter channels {cin}")
    if k == 1 and stride == 1:
        # 1x1 pointwise conv is a channel matmul; skip patch extraction
        fm = fd.reshape(cin, cout)
        y = (xd.reshape(-1, cin) @ fm).reshape(n, h, w, cout)
        out = _result(y[0] if squeeze else y, "conv2d")

        def back_x1(g):
            gf = (g[None] if squeeze else g).reshape(-1, cout)
            dx = (gf @ fm.T).reshape(xd.shape)
            return dx[0] if squeeze else dx

        def back_f1(g):
            gf = (g[None] if squeeze else g).reshape(-1, cout)
            return (xd.reshape(-1, cin).T @ gf).reshape(k, k, cin, cout)

        _record(out, [(x, back_x1), (filters, back_f1)])
        return out

    ho, wo, (pt, pb), (pl, pr) = _pad_spec(h, w, k, stride, padding)
    xp = np.pad(xd, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else xd
    cols = _im2col(xp, k, stride, ho, wo).reshape(n * ho * wo, k * k * cin)
    y = (cols @ fd.reshape(k * k * cin, cout)).reshape(n, ho, wo, cout)
    out = _result(y[0] if squeeze else y, "conv2d")

    hp, wp = xp.shape[1], xp.shape[2]

    def back_x(g):
        gf = (g[None] if squeeze else g).reshape(n * ho * wo, cout)
        dcols = (gf @ fd.reshape(k * k * cin, cout).T).reshape(n, ho, wo, k, k, cin)
        dx = _col2im(dcols, (n, hp, wp, cin), k, stride, (pt, pb), (pl, pr))
        return dx[0] if squeeze else dx

    def back_f(g):
        gf = (g[None] if squeeze else g).reshape(n * ho * wo, cout)
        return (cols.T @ gf).reshape(k, k, cin, cout)

    _record(out, [(x, back_x), (filters, back_f)])
    return out


def maxpool2d(x, window: int) -> Tensor:
    """Channel-wise max over non-overlapping window x window tiles.

    Trailing rows/cols that do not fill a window are dropped. Gradient
    routes to the first (lowest flat index) maximal element per window.
    """
    x = _wrap(x)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, h, w, c = xd.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds input dims ({h}, {w})")
    ho, wo = h // window, w // window
    xc = xd[:, :ho * window, :wo * window, :]
    tiles = (xc.reshape(n, ho, window, wo, window, c)
               .transpose(0, 1, 3, 2, 4, 5)
               .reshape(n, ho, wo, window * window, c))
    idx = tiles.argmax(axis=3)  # first max wins: the in-window tie rule
    y = np.take_along_axis(tiles, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    out = _result(y[0] if squeeze else y, "maxpool2d")

    def back(g):
        gd = g[None] if squeeze else g
        dtiles = np.zeros((n, ho, wo, window * window, c))
        np.put_along_axis(dtiles, idx[:, :, :, None, :], gd[:, :, :, None, :], axis=3)
        dxc = (dtiles.reshape(n, ho, wo, window, window, c)
                     .transpose(0, 1, 3, 2, 4, 5)
                     .reshape(n, ho * window, wo * window, c))
        dx = np.zeros((n, h, w, c))
        dx[:, :ho * window, :wo * window, :] = dxc
        return dx[0] if squeeze else dx

    _record(out, [(x, back)])
    return out


def dense(x, weights, bias) -> Tensor:
    """Affine map: x @ weights + bias, with x a vector or a (N, in) batch."""
    x, weights, bias = _wrap(x), _wrap(weights), _wrap(bias)
    if x.data.size == 0:
        raise ShapeError("dense input is empty")
    if weights.data.ndim != 2:
        raise ShapeError(f"dense weights must be 2-d, got {weights.data.shape}")
    din, dout = weights.data.shape
    if x.data.shape[-1] != din:
        raise ShapeError(f"dense input width {x.data.shape[-1]} != weights rows {din}")
    if bias.data.shape != (dout,):
        raise ShapeError(f"dense bias shape {bias.data.shape} != ({dout},)")
    return add(matmul(x, weights), bias)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Running mean/var for one batchnorm site (not trainable)."""

    def __init__(self, num_features: int):
        self.mean = np.zeros(num_features)
        self.var = np.ones(num_features)

    def copy(self) -> "BatchNormState":
        st = BatchNormState(len(self.mean))
        st.mean = self.mean.copy()
        st.var = self.var.copy()
        return st


def batchnorm(x, gamma, beta, state: BatchNormState, momentum: float = 0.90,
              mode: str = "train") -> Tensor:
    """Normalize across the feature (last) dimension.

    Train mode uses per-batch statistics (population variance) and folds
    them into ``state`` with ``running = momentum*running + (1-m)*batch``;
    eval mode normalizes with the running statistics. Epsilon is 1e-5.
    """
    x = _wrap(x)
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    nd = x.data.ndim
    if nd not in (2, 4):
        raise ShapeError(f"batchnorm expects (N, F) or (N, H, W, C), got {x.data.shape}")
    axes = (0,) if nd == 2 else (0, 1, 2)
    if mode == "train":
        if x.data.shape[0] < 2:
            raise ShapeError("batchnorm train mode needs batch size >= 2")
        m = tmean(x, axis=axes, keepdims=True)
        centered = sub(x, m)
        v = tmean(square(centered), axis=axes, keepdims=True)
        xhat = div(centered, sqrt(add(v, BN_EPS)))
        state.mean = momentum * state.mean + (1.0 - momentum) * m.data.reshape(-1)
        state.var = momentum * state.var + (1.0 - momentum) * v.data.reshape(-1)
    else:
        shape = (1,) * (nd - 1) + (-1,)
        xhat = mul(sub(x, state.mean.reshape(shape)),
                   1.0 / np.sqrt(state.var.reshape(shape) + BN_EPS))
    return add(mul(xhat, gamma), beta)


def activation(kind: str, x) -> Tensor:
    """Dispatch: swish, softplus, or softmax (over the last axis)."""
    if kind == "swish":
        return swish(x)
    if kind == "softplus":
        return softplus(x)
    if kind == "softmax":
        return softmax(x)
    raise ValueError(f"unknown activation {kind!r}")


def global_grad_norm(params) -> float:
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    return float(np.sqrt(sq))


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
