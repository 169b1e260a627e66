"""Gaussian/Laplacian pyramids and the learned base-detail composition.

The fixed analysis/synthesis pair uses the 5-tap binomial kernel
[1,4,6,4,1]/16 with reflect-101 borders and ceil-halving decimation. Both the
blur and the expansion are evaluated in difference form (center + weighted
neighbor differences), so constant images pass through bit-exactly and detail
levels of constants are exactly zero.

The fixed expansion used inside decomposition/reconstruction is distinct from
the learned upsampler applied between block levels; the two are never shared.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import kaiming_init
from .tensor import Parameter, ShapeError, Tensor


def ceil_half(n: int) -> int:
    return (n + 1) // 2


def level_extents(h: int, w: int, n: int) -> list[tuple[int, int]]:
    """Extents of levels 1..n (index 0 is the full-resolution level)."""
    out = [(h, w)]
    for _ in range(n - 1):
        h, w = ceil_half(h), ceil_half(w)
        out.append((h, w))
    return out


# -- 1-D building blocks (operate on axis 0, arbitrary trailing axes) ----------


def _blur_decimate_1d(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    if n == 1:
        return a.copy()
    pad = np.pad(a, [(2, 2)] + [(0, 0)] * (a.ndim - 1), mode="reflect")
    c = pad[2:2 + n]
    sixteenth = a.dtype.type(1.0 / 16.0)
    four = a.dtype.type(4.0)
    diffs = (pad[0:n] - c) + (pad[4:4 + n] - c) + four * ((pad[1:1 + n] - c) + (pad[3:3 + n] - c))
    return (c + diffs * sixteenth)[::2].copy()


def _expand_1d(a: np.ndarray, n_out: int) -> np.ndarray:
    n = a.shape[0]
    if ceil_half(n_out) != n:
        raise ShapeError(f"expand: cannot expand extent {n} to {n_out}")
    if n == 1:
        reps = (n_out,) + (1,) * (a.ndim - 1)
        return np.tile(a, reps)
    pad = np.pad(a, [(1, 1)] + [(0, 0)] * (a.ndim - 1), mode="reflect")
    eighth = a.dtype.type(1.0 / 8.0)
    half = a.dtype.type(0.5)
    nxt = pad[2:2 + n]
    even = a + ((pad[0:n] - a) + (nxt - a)) * eighth
    odd = a + (nxt - a) * half
    out = np.empty((n_out,) + a.shape[1:], a.dtype)
    out[0::2] = even[: (n_out + 1) // 2]
    out[1::2] = odd[: n_out // 2]
    return out


_matrix_cache: dict[tuple, np.ndarray] = {}


def _op_matrix(kind: str, n: int, n_out: int) -> np.ndarray:
    key = (kind, n, n_out)
    m = _matrix_cache.get(key)
    if m is None:
        eye = np.eye(n, dtype=np.float64)
        m = _blur_decimate_1d(eye) if kind == "blur" else _expand_1d(eye, n_out)
        _matrix_cache[key] = m
    return m


def _apply_hw(data: np.ndarray, fn_h, fn_w) -> np.ndarray:
    tmp = np.moveaxis(fn_h(np.moveaxis(data, 2, 0)), 0, 2)
    return np.moveaxis(fn_w(np.moveaxis(tmp, 3, 0)), 0, 3)


def _backward_hw(g: np.ndarray, mat_h: np.ndarray, mat_w: np.ndarray) -> np.ndarray:
    t = np.tensordot(g, mat_w.astype(g.dtype), axes=([3], [0]))   # (n,c,oh,w_in)
    gx = np.tensordot(t, mat_h.astype(g.dtype), axes=([2], [0]))  # (n,c,w_in,h_in)
    return np.ascontiguousarray(gx.transpose(0, 1, 3, 2))


def blur_downsample(x: Tensor) -> Tensor:
    """Binomial blur then 2x decimation with ceil extents; constants are exact."""
    n, c, h, w = x.shape
    out = _apply_hw(x.data, _blur_decimate_1d, _blur_decimate_1d)

    def backward(g):
        return (_backward_hw(g, _op_matrix("blur", h, ceil_half(h)),
                             _op_matrix("blur", w, ceil_half(w))),)

    return Tensor._from_op(out, (x,), backward)


def pyr_expand(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Fixed synthesis expansion to the recorded parent extents."""
    n, c, h, w = x.shape
    out = _apply_hw(x.data, lambda a: _expand_1d(a, out_h), lambda a: _expand_1d(a, out_w))

    def backward(g):
        return (_backward_hw(g, _op_matrix("expand", h, out_h),
                             _op_matrix("expand", w, out_w)),)

    return Tensor._from_op(out, (x,), backward)


# -- pyramid types and operations ----------------------------------------------


@dataclass
class LaplacianStack:
    """Detail maps (finest first) plus the low-frequency base."""

    details: list  # n-1 Tensors, details[i] at level i+1 extents
    base: Tensor

    @property
    def depth(self) -> int:
        return len(self.details) + 1


@dataclass
class PyramidTarget:
    """Gaussian pyramid of the ground truth; levels[0] is the image itself."""

    levels: list

    @property
    def depth(self) -> int:
        return len(self.levels)


def _check_depth(h: int, w: int, n: int):
    if n < 1:
        raise ValueError(f"pyramid depth must be >= 1, got {n}")
    if h < 2 ** (n - 1) or w < 2 ** (n - 1):
        raise ShapeError(f"extents {h}x{w} too small for pyramid depth {n}")


def lp_decompose(image: Tensor, n: int) -> LaplacianStack:
    """Split an image into n-1 band-pass detail levels plus a base."""
    _, _, h, w = image.shape
    _check_depth(h, w, n)
    details = []
    current = image
    for _ in range(n - 1):
        down = blur_downsample(current)
        up = pyr_expand(down, current.shape[2], current.shape[3])
        details.append(T.sub(current, up))
        current = down
    return LaplacianStack(details=details, base=current)


def lp_reconstruct(stack: LaplacianStack) -> Tensor:
    """Invert lp_decompose by recursive expand-and-add."""
    current = stack.base
    for detail in reversed(stack.details):
        th, tw = detail.shape[2], detail.shape[3]
        if ceil_half(th) != current.shape[2] or ceil_half(tw) != current.shape[3]:
            raise ShapeError(
                f"reconstruct: base extents {current.shape[2:]} do not match detail extents {detail.shape[2:]}")
        current = T.add(pyr_expand(current, th, tw), detail)
    return current


def gaussian_pyramid(image: Tensor, n: int) -> PyramidTarget:
    _, _, h, w = image.shape
    _check_depth(h, w, n)
    levels = [image]
    for _ in range(n - 1):
        levels.append(blur_downsample(levels[-1]))
    return PyramidTarget(levels=levels)


class LearnedUpsampler:
    """Bilinear x2 followed by a 3x3 conv; one instance per level transition."""

    def __init__(self, name: str, rng: np.random.Generator, channels: int = 3):
        fan_in = channels * 9
        self.weight = Parameter(kaiming_init((channels, channels, 3, 3), fan_in, rng), f"{name}.conv.weight")
        self.bias = Parameter(np.zeros(channels, np.float32), f"{name}.conv.bias")

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def set_identity(self):
        w = np.zeros(self.weight.shape, np.float32)
        for c in range(w.shape[0]):
            w[c, c, 1, 1] = 1.0
        self.weight.data = w
        self.bias.data = np.zeros(self.bias.shape, np.float32)

    def __call__(self, x: Tensor, out_h: int, out_w: int) -> Tensor:
        up = T.bilinear_resize(x, out_h, out_w)
        return T.conv2d(up, self.weight, self.bias, stride=1, padding=1)


def compose_base(output: Tensor, details_next: list, upsampler: LearnedUpsampler) -> list:
    """Form the next level's base sequence from a corrected output.

    The upsampled output is computed once and shared across frames; gradients
    flow into the upsampler parameters and onward through the output.
    """
    if not details_next:
        raise ShapeError("compose_base: empty detail sequence")
    th, tw = details_next[0].shape[2], details_next[0].shape[3]
    for d in details_next:
        if d.shape[2] != th or d.shape[3] != tw:
            raise ShapeError("compose_base: detail extents differ across frames")
    up = upsampler(output, th, tw)
    if up.shape != details_next[0].shape:
        raise ShapeError(
            f"compose_base: upsampled extents {up.shape} do not match details {details_next[0].shape}")
    return [T.add(up, d) for d in details_next]
