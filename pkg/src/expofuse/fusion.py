"""Fusion stage: low-resolution weight prediction, guided joint upsampling of
the predicted maps, and the weighted sum of the frame sequence.

Weight prediction runs at a reduced resolution (Downsample-Execute-Upsample):
the base frames are bilinearly shrunk, a small dilated-conv net predicts
3-channel logit maps per frame with shared parameters, the maps are restored
to full resolution by a fast guided filter against each frame's luminance,
and a per-pixel softmax across frames turns them into convex weights. The
softmax keeps every fused value inside the hull of its inputs and makes the
single-frame case an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .optim import kaiming_init
from .tensor import Parameter, ShapeError, Tensor


@dataclass
class FusionConfig:
    m: int = 1                      # intermediate dilated conv layers
    channels: int = 24
    downsample_factor: int = 4      # low-res extents = extents / factor
    lowres_min: int = 16            # never shrink below this (or the input size)
    guided_radius: int = 2
    guided_eps: float = 1e-4

    def __post_init__(self):
        if self.m < 0:
            raise ValueError(f"fusion m must be >= 0, got {self.m}")
        if self.downsample_factor < 1:
            raise ValueError(f"downsample_factor must be >= 1, got {self.downsample_factor}")


def lowres_extent(extent: int, cfg: FusionConfig) -> int:
    floor = min(extent, cfg.lowres_min)
    return max(-(-extent // cfg.downsample_factor), floor)


class WeightPredictor:
    """Dilated-conv logit net applied independently to each frame.

    Layer stack: 3x3 conv 3->C, m intermediate 3x3 convs C->C with dilation
    and padding 2l for the l-th, a 3x3 conv C->C, and a linear 1x1 conv C->3.
    Hidden activations are LeakyReLU(0.1); extents are preserved throughout.
    """

    LEAKY_SLOPE = 0.1

    def __init__(self, name: str, cfg: FusionConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.channels
        self.layers = []  # (weight, bias, padding, dilation)
        self._add(name, 0, rng, 3, c, k=3, padding=1, dilation=1)
        for layer in range(1, cfg.m + 1):
            self._add(name, layer, rng, c, c, k=3, padding=2 * layer, dilation=2 * layer)
        self._add(name, cfg.m + 1, rng, c, c, k=3, padding=1, dilation=1)
        self._add(name, cfg.m + 2, rng, c, 3, k=1, padding=0, dilation=1)

    def _add(self, name, idx, rng, c_in, c_out, k, padding, dilation):
        w = Parameter(kaiming_init((c_out, c_in, k, k), c_in * k * k, rng), f"{name}.conv{idx}.weight")
        b = Parameter(np.zeros(c_out, np.float32), f"{name}.conv{idx}.bias")
        self.layers.append((w, b, padding, dilation))

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b, _, _ in self.layers:
            out.extend([w, b])
        return out

    def receptive_radius(self) -> int:
        r = 0
        for w, _, _, dilation in self.layers:
            r += dilation * (w.shape[2] - 1) // 2
        return r

    def __call__(self, frame: Tensor) -> Tensor:
        if frame.shape[1] != 3:
            raise ShapeError(f"weight predictor expects 3-channel frames, got {frame.shape[1]}")
        x = frame
        last = len(self.layers) - 1
        for i, (w, b, padding, dilation) in enumerate(self.layers):
            x = T.conv2d(x, w, b, stride=1, padding=padding, dilation=dilation)
            if i != last:
                x = T.leaky_relu(x, self.LEAKY_SLOPE)
        return x


def predict_weights_lowres(net: WeightPredictor, frames_lowres: list) -> list:
    """Apply the shared logit net to every low-resolution frame."""
    if not frames_lowres:
        raise ShapeError("predict_weights_lowres: empty frame sequence")
    shape = frames_lowres[0].shape
    for f in frames_lowres[1:]:
        if f.shape != shape:
            raise ShapeError("predict_weights_lowres: frame extents differ")
    return [net(f) for f in frames_lowres]


def guided_upsample(lowres_map: Tensor, guide_low: Tensor, guide_full: Tensor,
                    radius: int, eps: float) -> Tensor:
    """Fast guided filter: solve a local linear model per channel at low
    resolution, bilinearly upsample the coefficients, and apply them to the
    full-resolution guide.

    Windows are (2r+1)^2 boxes clipped at the borders. The guide is a single
    channel; each channel of the map gets its own a, b fields.
    """
    if radius <= 0:
        raise ValueError(f"guided_upsample: radius must be positive, got {radius}")
    if eps <= 0:
        raise ValueError(f"guided_upsample: eps must be positive, got {eps}")
    if guide_low.shape[1] != 1 or guide_full.shape[1] != 1:
        raise ShapeError("guided_upsample: guides must be single-channel")
    if lowres_map.shape[2:] != guide_low.shape[2:]:
        raise ShapeError(
            f"guided_upsample: map extents {lowres_map.shape[2:]} != low guide {guide_low.shape[2:]}")

    _, channels, lh, lw = lowres_map.shape
    _, _, fh, fw = guide_full.shape
    counts = T.box_counts(lh, lw, radius, lowres_map.dtype)
    inv_counts = 1.0 / counts

    def window_mean(t):
        return T.Tensor._from_op(
            T.box_sum_raw(t.data, radius) * inv_counts, (t,),
            lambda g: (T.box_sum_raw(g * inv_counts, radius),))

    guide_c = T.expand_channels(guide_low, channels) if channels > 1 else guide_low
    mean_i = window_mean(guide_c)
    mean_p = window_mean(lowres_map)
    corr_ip = window_mean(T.mul(guide_c, lowres_map))
    corr_ii = window_mean(T.mul(guide_c, guide_c))
    cov_ip = T.sub(corr_ip, T.mul(mean_i, mean_p))
    var_i = T.sub(corr_ii, T.mul(mean_i, mean_i))
    a = T.div(cov_ip, T.add_scalar(var_i, eps))
    b = T.sub(mean_p, T.mul(a, mean_i))

    a_full = T.bilinear_resize(a, fh, fw)
    b_full = T.bilinear_resize(b, fh, fw)
    guide_rep = T.expand_channels(guide_full, channels) if channels > 1 else guide_full
    return T.add(T.mul(a_full, guide_rep), b_full)


def normalize_weights(upsampled_logits: list) -> list:
    """Per-pixel, per-channel softmax across the frame axis."""
    return T.softmax_frames(upsampled_logits)


def fuse(frames: list, weights: list) -> Tensor:
    """Convex per-pixel combination of the frames under normalized weights."""
    if len(frames) != len(weights):
        raise ShapeError(f"fuse: {len(frames)} frames but {len(weights)} weight maps")
    if not frames:
        raise ShapeError("fuse: empty sequence")
    for f, w in zip(frames, weights):
        if f.shape != w.shape:
            raise ShapeError(f"fuse: frame shape {f.shape} != weight shape {w.shape}")
    return T.sum_frames([T.mul(w, f) for f, w in zip(frames, weights)])


class FusionBlock:
    """One level's fusion stage: predict, guided-upsample, normalize, fuse."""

    def __init__(self, name: str, cfg: FusionConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.net = WeightPredictor(name, cfg, rng)

    def parameters(self) -> list[Parameter]:
        return self.net.parameters()

    def weight_maps(self, frames: list) -> list:
        """Normalized full-resolution weight maps for the frame sequence."""
        if not frames:
            raise ShapeError("fusion: empty frame sequence")
        _, _, h, w = frames[0].shape
        lh, lw = lowres_extent(h, self.cfg), lowres_extent(w, self.cfg)
        guides = [T.mean_channels(f) for f in frames]
        upsampled = []
        for frame, guide in zip(frames, guides):
            low = T.bilinear_resize(frame, lh, lw) if (lh, lw) != (h, w) else frame
            logits = self.net(low)
            guide_low = T.mean_channels(low)
            upsampled.append(guided_upsample(
                logits, guide_low, guide, self.cfg.guided_radius, self.cfg.guided_eps))
        return normalize_weights(upsampled)

    def __call__(self, frames: list) -> Tensor:
        return fuse(frames, self.weight_maps(frames))
