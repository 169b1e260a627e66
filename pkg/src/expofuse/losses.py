"""Training losses: L1 reconstruction of the final output, weighted L1 over
the per-level outputs against a Gaussian pyramid of the ground truth, and a
spatial consistency term that matches neighboring-region intensity
differences at every level.

All three are sums, not means, and the spatial weight defaults to 4000 under
that convention.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .pyramid import PyramidTarget
from .tensor import ShapeError, Tensor

LOSS_TERM_PRESETS = ("r", "r+pr", "r+pr+s", "r+pr+ps")


@dataclass
class LossConfig:
    lambda_ps: float = 4000.0
    region_size: int = 4
    terms: str = "r+pr+ps"

    def __post_init__(self):
        if self.terms not in LOSS_TERM_PRESETS:
            raise ValueError(f"unknown loss terms preset {self.terms!r}; choose from {LOSS_TERM_PRESETS}")
        if self.region_size < 1:
            raise ValueError(f"region_size must be >= 1, got {self.region_size}")
        if self.lambda_ps < 0:
            raise ValueError(f"lambda_ps must be >= 0, got {self.lambda_ps}")


def pr_level_weights(n: int) -> dict[int, float]:
    """Weights 2^(i-2) of the per-level reconstruction terms, i = 2..n."""
    return {i: float(2 ** (i - 2)) for i in range(2, n + 1)}


def ps_level_weights(n: int) -> dict[int, float]:
    """Weights 4^(n-i) of the spatial consistency terms, i = 1..n."""
    return {i: float(4 ** (n - i)) for i in range(1, n + 1)}


def loss_r(o1: Tensor, g: Tensor) -> Tensor:
    """Summed L1 gap between the final output and the ground truth."""
    if o1.shape != g.shape:
        raise ShapeError(f"loss_r: output shape {o1.shape} != target shape {g.shape}")
    return T.sum_all(T.abs_(T.sub(o1, g)))


def loss_pr(outputs: dict[int, Tensor], target: PyramidTarget) -> Tensor:
    """Weighted L1 over intermediate outputs of levels 2..n."""
    n = target.depth
    total = None
    for i, weight in pr_level_weights(n).items():
        o, g = outputs[i], target.levels[i - 1]
        if o.shape != g.shape:
            raise ShapeError(f"loss_pr: level {i} output {o.shape} != target {g.shape}")
        term = T.mul_scalar(T.sum_all(T.abs_(T.sub(o, g))), weight)
        total = term if total is None else T.add(total, term)
    if total is None:
        return T.Tensor(0.0)
    return total


def _region_intensity(x: Tensor, size: int) -> Tensor:
    """Per-region scalar: mean over channels, then mean over the region pixels."""
    return T.region_mean(T.mean_channels(x), size)


def _spatial_term(o: Tensor, g: Tensor, size: int) -> Tensor:
    """Mean over regions of the squared mismatch of neighbor differences.

    Every region is compared against each of its existing 4-neighbors, so
    each adjacency is counted once from either side.
    """
    if o.shape != g.shape:
        raise ShapeError(f"spatial loss: output {o.shape} != target {g.shape}")
    ro = _region_intensity(o, size)
    rg = _region_intensity(g, size)
    gh, gw = ro.shape[2], ro.shape[3]
    if gh < 1 or gw < 1:
        raise ShapeError("spatial loss: empty region grid")
    m = gh * gw
    total = None
    if gh > 1:
        do = T.abs_(T.sub(T.narrow(ro, 2, 1, gh - 1), T.narrow(ro, 2, 0, gh - 1)))
        dg = T.abs_(T.sub(T.narrow(rg, 2, 1, gh - 1), T.narrow(rg, 2, 0, gh - 1)))
        total = T.sum_all(T.square(T.sub(do, dg)))
    if gw > 1:
        do = T.abs_(T.sub(T.narrow(ro, 3, 1, gw - 1), T.narrow(ro, 3, 0, gw - 1)))
        dg = T.abs_(T.sub(T.narrow(rg, 3, 1, gw - 1), T.narrow(rg, 3, 0, gw - 1)))
        term = T.sum_all(T.square(T.sub(do, dg)))
        total = term if total is None else T.add(total, term)
    if total is None:
        return T.Tensor(0.0)
    # x2: |a-b| equals |b-a|, so the directed neighbor sum doubles each pair
    return T.mul_scalar(total, 2.0 / m)


def loss_ps(outputs: dict[int, Tensor], target: PyramidTarget,
            cfg: LossConfig, final_only: bool = False) -> Tensor:
    """Pyramid spatial consistency; ``final_only`` restricts the sum to the
    full-resolution level (the plain spatial consistency variant)."""
    n = target.depth
    weights = ps_level_weights(n)
    levels = [1] if final_only else list(range(1, n + 1))
    total = None
    for i in levels:
        term = T.mul_scalar(_spatial_term(outputs[i], target.levels[i - 1], cfg.region_size), weights[i])
        total = term if total is None else T.add(total, term)
    return total


def total_loss(outputs: dict[int, Tensor], target: PyramidTarget,
               cfg: LossConfig) -> tuple[Tensor, dict[str, float]]:
    """Combined objective under the configured term subset.

    Returns the scalar tensor plus float values of the individual terms for
    logging (zero for disabled terms).
    """
    lr_term = loss_r(outputs[1], target.levels[0])
    total = lr_term
    parts = {"loss_r": lr_term.item(), "loss_pr": 0.0, "loss_ps": 0.0}
    if cfg.terms in ("r+pr", "r+pr+s", "r+pr+ps"):
        pr = loss_pr(outputs, target)
        parts["loss_pr"] = pr.item()
        total = T.add(total, pr)
    if cfg.terms in ("r+pr+s", "r+pr+ps"):
        ps = loss_ps(outputs, target, cfg, final_only=(cfg.terms == "r+pr+s"))
        parts["loss_ps"] = ps.item()
        total = T.add(total, T.mul_scalar(ps, cfg.lambda_ps))
    parts["total"] = total.item()
    return total, parts
