"""Dense NCHW tensor engine with reverse-mode differentiation.

A dynamically recorded tape: every op builds a fresh output tensor that
remembers its parents and how to push gradients back to them. The op set is
exactly what the fusion/correction pipeline needs; there is no broadcasting
beyond the few explicit channel helpers, no views are ever mutated, and all
ops are pure functions of their inputs.

Compute is float32 by default. Ops follow the dtype of their inputs, so
oracle code may run the same graph in float64.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (forward only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Array value plus optional tape entry.

    Leaf tensors created with ``requires_grad=True`` (and every Parameter)
    accumulate into ``.grad`` across backward calls until ``zero_grad`` is
    called; intermediate gradients are transient per backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward_fn):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward_fn = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        return out

    # -- basic protocol -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    # -- reverse pass ---------------------------------------------------------

    def backward(self):
        """Populate gradients of every reachable leaf from this scalar.

        Leaf gradients accumulate; call ``zero_grad`` on parameters between
        steps. Raises if the output is not a single scalar.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            return

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                # leaf: accumulate persistently across backward calls
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class Parameter(Tensor):
    """Named learnable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


# -- elementwise ops ----------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        inv = g / bd
        return inv, -inv * out

    return Tensor._from_op(out, (a, b), backward)


def add_scalar(a: Tensor, s: float) -> Tensor:
    return Tensor._from_op(a.data + a.dtype.type(s), (a,), lambda g: (g,))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    c = a.dtype.type(s)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,))


def sub_const(a: Tensor, const: np.ndarray) -> Tensor:
    """Subtract a constant array; no gradient flows into the constant."""
    return Tensor._from_op(a.data - const.astype(a.dtype, copy=False), (a,), lambda g: (g,))


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(ad * ad, (a,), lambda g: (g * (2 * ad),))


def exp_(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    """x if x >= 0 else slope*x; gradient is slope on the negative branch."""
    mask = a.data >= 0
    factor = np.where(mask, a.dtype.type(1), a.dtype.type(slope))
    return Tensor._from_op(a.data * factor, (a,), lambda g: (g * factor,))


# -- reductions and shape ops -------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return Tensor._from_op(out, (a,), lambda g: (np.full(a.shape, float(g), a.dtype),))


def mean_channels(a: Tensor) -> Tensor:
    """Mean over the channel axis of an NCHW tensor, keepdims."""
    c = a.shape[1]
    out = a.data.mean(axis=1, keepdims=True, dtype=a.dtype)

    def backward(g):
        return (np.broadcast_to(g / c, a.shape),)

    return Tensor._from_op(out, (a,), backward)


def expand_channels(a: Tensor, channels: int) -> Tensor:
    """Repeat a 1-channel NCHW tensor across the channel axis."""
    if a.shape[1] != 1:
        raise ShapeError(f"expand_channels expects 1 input channel, got {a.shape[1]}")
    out = np.repeat(a.data, channels, axis=1)

    def backward(g):
        return (g.sum(axis=1, keepdims=True),)

    return Tensor._from_op(out, (a,), backward)


def concat_channels(tensors) -> Tensor:
    tensors = list(tensors)
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError("concat_channels: non-channel extents differ")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return tuple(np.split(g, bounds, axis=1))

    return Tensor._from_op(out, tuple(tensors), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx].copy()

    def backward(g):
        full = np.zeros(a.shape, a.dtype)
        full[idx] = g
        return (full,)

    return Tensor._from_op(out, (a,), backward)


def sum_frames(tensors) -> Tensor:
    """Elementwise sum of same-shape tensors, independent of list order.

    Addends are sorted per element before reduction so that permuting the
    inputs is bit-exact; the gradient to every input is the output gradient.
    """
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("sum_frames: empty input list")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError("sum_frames: frame shapes differ")
    if len(tensors) == 1:
        t = tensors[0]
        return Tensor._from_op(t.data.copy(), (t,), lambda g: (g,))
    stacked = np.stack([t.data for t in tensors], axis=0)
    stacked = np.sort(stacked, axis=0)
    out = stacked[0]
    for k in range(1, stacked.shape[0]):
        out = out + stacked[k]

    def backward(g):
        return tuple(g for _ in tensors)

    return Tensor._from_op(out, tuple(tensors), backward)


# -- convolution --------------------------------------------------------------


def _conv_windows(x_pad: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
                  out_h: int, out_w: int) -> np.ndarray:
    n, c, _, _ = x_pad.shape
    sn, sc, sh, sw = x_pad.strides
    return np.lib.stride_tricks.as_strided(
        x_pad,
        shape=(n, c, kh, kw, out_h, out_w),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D convolution (cross-correlation) of NCHW input with OIHW weights.

    Zero padding; out-of-bounds taps read 0. Output extents follow
    floor((H + 2p - d*(k-1) - 1)/s) + 1 and must be positive.
    """
    n, c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    if c_in != c_in_w:
        raise ShapeError(
            f"conv2d: input has {c_in} channels but weight expects {c_in_w}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    out_h = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    out_w = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} (dilation {dilation}) does not fit input {h}x{w} with padding {padding}")

    if padding > 0:
        x_pad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        x_pad = x.data
    windows = _conv_windows(x_pad, kh, kw, stride, dilation, out_h, out_w)
    out = np.tensordot(weight.data, windows, axes=([1, 2, 3], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 4, 5]))
        gx_pad = np.zeros_like(x_pad)
        wd = weight.data
        for ky in range(kh):
            ys = slice(ky * dilation, ky * dilation + stride * out_h, stride)
            for kx in range(kw):
                xs = slice(kx * dilation, kx * dilation + stride * out_w, stride)
                contrib = np.tensordot(g, wd[:, :, ky, kx], axes=([1], [0]))
                gx_pad[:, :, ys, xs] += contrib.transpose(0, 3, 1, 2)
        if padding > 0:
            gx = gx_pad[:, :, padding:padding + h, padding:padding + w]
        else:
            gx = gx_pad
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._from_op(out, parents, backward)


# -- bilinear resize ----------------------------------------------------------


def _resize_axis_coords(n_in: int, n_out: int):
    # half-pixel centers, edge clamped
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    i0, i1, frac = _resize_axis_coords(n_in, n_out)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample with half-pixel centers and edge clamping.

    Interpolation is evaluated as a + f*(b - a) so constant inputs are
    reproduced exactly at any target size.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: target {out_h}x{out_w} must be positive")
    n, c, h, w = x.shape
    y0, y1, fy = _resize_axis_coords(h, out_h)
    x0, x1, fx = _resize_axis_coords(w, out_w)
    fy_c = fy.astype(x.dtype)[:, None]
    fx_c = fx.astype(x.dtype)

    rows_a = x.data[:, :, y0, :]
    rows_b = x.data[:, :, y1, :]
    rows = rows_a + fy_c * (rows_b - rows_a)
    cols_a = rows[:, :, :, x0]
    cols_b = rows[:, :, :, x1]
    out = cols_a + fx_c * (cols_b - cols_a)

    def backward(g):
        ah = _resize_matrix(h, out_h, g.dtype)
        aw = _resize_matrix(w, out_w, g.dtype)
        t = np.tensordot(g, aw, axes=([3], [0]))          # (n, c, out_h, w)
        gx = np.tensordot(t, ah, axes=([2], [0]))         # (n, c, w, h)
        return (np.ascontiguousarray(gx.transpose(0, 1, 3, 2)),)

    return Tensor._from_op(out, (x,), backward)


# -- windowed sums ------------------------------------------------------------


def _box_sum_axis(arr: np.ndarray, radius: int, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    csum = np.cumsum(arr, axis=axis)
    hi = np.minimum(np.arange(n) + radius, n - 1)
    upper = np.take(csum, hi, axis=axis)
    lo = np.arange(n) - radius - 1
    valid = lo >= 0
    lower = np.take(csum, np.maximum(lo, 0), axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = n
    lower = lower * valid.reshape(shape)
    return upper - lower


def box_sum_raw(arr: np.ndarray, radius: int) -> np.ndarray:
    """Windowed sum over (2r+1)^2 windows clipped at the borders (plain numpy)."""
    return _box_sum_axis(_box_sum_axis(arr, radius, 2), radius, 3)


def box_counts(h: int, w: int, radius: int, dtype=np.float32) -> np.ndarray:
    """Per-pixel count of in-bounds taps of the clipped box window."""
    ones = np.ones((1, 1, h, w), dtype=dtype)
    return box_sum_raw(ones, radius)


def box_sum(x: Tensor, radius: int) -> Tensor:
    """Differentiable clipped-window box sum; the window is self-adjoint."""
    if radius <= 0:
        raise ValueError(f"box_sum: radius must be positive, got {radius}")
    out = box_sum_raw(x.data, radius)

    def backward(g):
        return (box_sum_raw(g, radius),)

    return Tensor._from_op(out, (x,), backward)


def region_mean(x: Tensor, size: int) -> Tensor:
    """Mean over size x size blocks; trailing blocks are truncated at the edge."""
    if size < 1:
        raise ValueError(f"region_mean: size must be >= 1, got {size}")
    n, c, h, w = x.shape
    hb = np.arange(0, h, size)
    wb = np.arange(0, w, size)
    block_h = np.diff(np.append(hb, h))
    block_w = np.diff(np.append(wb, w))
    counts = (block_h[:, None] * block_w[None, :]).astype(x.dtype)
    sums = np.add.reduceat(np.add.reduceat(x.data, hb, axis=2), wb, axis=3)
    out = sums / counts

    def backward(g):
        per = g / counts
        per = np.repeat(per, block_h, axis=2)
        return (np.repeat(per, block_w, axis=3),)

    return Tensor._from_op(out, (x,), backward)


# -- softmax across a frame list ----------------------------------------------


def softmax_frames(logits) -> list:
    """Per-element softmax across a list of same-shape tensors.

    The shift by the elementwise maximum is treated as a constant, which is
    exact for softmax. A single frame yields weights identically 1.
    """
    logits = list(logits)
    if not logits:
        raise ShapeError("softmax_frames: empty input list")
    m = logits[0].data
    for t in logits[1:]:
        m = np.maximum(m, t.data)
    exps = [exp_(sub_const(t, m)) for t in logits]
    denom = sum_frames(exps)
    return [div(e, denom) for e in exps]
