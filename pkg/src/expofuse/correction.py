"""Correction stage: one UNet-style enhancement block per pyramid level.

Each encoder stage applies two 3x3 convs at its resolution; a stride-2 3x3
conv moves between stages and the channel count doubles in the first conv of
the lower-resolution stage. The decoder mirrors this with bilinear resizing
to the recorded encoder extents, a 3x3 conv that halves channels, a skip
concatenation with the matching encoder feature, and a 3x3 merge conv. A
final linear 3x3 conv maps back to 3 channels and, with the global residual
enabled, the block computes input + net(input). Outputs are not clamped;
clamping happens only at image export and in metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import kaiming_init
from .tensor import Parameter, ShapeError, Tensor

LEAKY_SLOPE = 0.1


@dataclass
class CorrectionConfig:
    levels: int = 4           # encoder depth (resolution stages)
    base_channels: int = 24   # channels of the first encoder conv
    global_residual: bool = True

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"correction levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError(f"correction base_channels must be >= 1, got {self.base_channels}")


def build_correction_schedule(n: int) -> list[CorrectionConfig]:
    """Per-level configs ordered bottom (coarsest) level first.

    Depth four uses (4,24),(4,16),(3,16),(3,16); shallower pyramids keep the
    leading entries of that list.
    """
    if n < 1:
        raise ValueError(f"schedule depth must be >= 1, got {n}")
    full = [(4, 24), (4, 16), (3, 16), (3, 16)]
    return [CorrectionConfig(levels=lv, base_channels=ch) for lv, ch in full[:n]]


class _Conv:
    def __init__(self, name, rng, c_in, c_out, stride=1):
        self.weight = Parameter(kaiming_init((c_out, c_in, 3, 3), c_in * 9, rng), f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out, np.float32), f"{name}.bias")
        self.stride = stride

    def __call__(self, x, activate=True):
        out = T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=1)
        return T.leaky_relu(out, LEAKY_SLOPE) if activate else out


class CorrectionBlock:
    """UNet-like enhancer preserving the input extents."""

    def __init__(self, name: str, cfg: CorrectionConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.base_channels
        self.enc_convs = []   # per stage: [conv, conv]
        self.down_convs = []  # between stages
        stage_channels = [c * (2 ** s) for s in range(cfg.levels)]
        self.stage_channels = stage_channels
        self.enc_convs.append([
            _Conv(f"{name}.enc0.conv0", rng, 3, c),
            _Conv(f"{name}.enc0.conv1", rng, c, c),
        ])
        for s in range(1, cfg.levels):
            prev, cur = stage_channels[s - 1], stage_channels[s]
            self.down_convs.append(_Conv(f"{name}.down{s}", rng, prev, prev, stride=2))
            self.enc_convs.append([
                _Conv(f"{name}.enc{s}.conv0", rng, prev, cur),
                _Conv(f"{name}.enc{s}.conv1", rng, cur, cur),
            ])
        self.dec_up = []
        self.dec_merge = []
        for s in range(cfg.levels - 1, 0, -1):
            cur, prev = stage_channels[s], stage_channels[s - 1]
            self.dec_up.append(_Conv(f"{name}.dec{s}.up", rng, cur, prev))
            self.dec_merge.append(_Conv(f"{name}.dec{s}.merge", rng, 2 * prev, prev))
        self.final = _Conv(f"{name}.final", rng, c, 3)

    def parameters(self) -> list[Parameter]:
        convs = []
        for pair in self.enc_convs:
            convs.extend(pair)
        convs.extend(self.down_convs)
        convs.extend(self.dec_up)
        convs.extend(self.dec_merge)
        convs.append(self.final)
        out = []
        for conv in convs:
            out.extend([conv.weight, conv.bias])
        return out

    def min_extent(self) -> int:
        return 2 ** (self.cfg.levels - 1)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != 3:
            raise ShapeError(f"correction expects 3-channel input, got {x.shape[1]}")
        h, w = x.shape[2], x.shape[3]
        if h < self.min_extent() or w < self.min_extent():
            raise ShapeError(
                f"correction input {h}x{w} too small for depth {self.cfg.levels}")

        feats = []
        extents = []
        cur = x
        for s, pair in enumerate(self.enc_convs):
            if s > 0:
                cur = self.down_convs[s - 1](cur)
            cur = pair[1](pair[0](cur))
            feats.append(cur)
            extents.append((cur.shape[2], cur.shape[3]))

        for i, s in enumerate(range(self.cfg.levels - 1, 0, -1)):
            th, tw = extents[s - 1]
            cur = T.bilinear_resize(cur, th, tw)
            cur = self.dec_up[i](cur)
            cur = T.concat_channels([cur, feats[s - 1]])
            cur = self.dec_merge[i](cur)

        out = self.final(cur, activate=False)
        if self.cfg.global_residual:
            out = T.add(x, out)
        return out
