"""Training objective: focal loss + water-obstacle separation + L2.

The separation term pushes encoder features of obstacle pixels away from
the water feature distribution: per channel it takes the ratio of water
spread around the water mean to obstacle spread around that same mean, so
minimizing it tightens water features while repelling obstacle features.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .labels import OBSTACLE, UNKNOWN, WATER, check_label_map, nn_downsample
from .tensor import (
    Tensor,
    add,
    div,
    gather_cols,
    log,
    maximum_scalar,
    mul,
    power,
    sub,
    take_flat,
    tmean,
    tsum,
)


@dataclass(frozen=True)
class RegionIndex:
    water_pixels: np.ndarray  # flat indices into the feature grid
    obstacle_pixels: np.ndarray

    @property
    def n_water(self):
        return len(self.water_pixels)

    @property
    def n_obstacle(self):
        return len(self.obstacle_pixels)


@dataclass(frozen=True)
class WaterStats:
    mu: np.ndarray  # per-channel water means
    sigma2: np.ndarray  # per-channel water variances (diagnostic only)

    @property
    def channel_count(self):
        return len(self.mu)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.01  # separation weight
    lambda2: float = 1e-6  # L2 weight
    gamma: float = 2.0  # focal exponent

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.gamma < 0:
            raise ContractViolation(f"loss weights must be >= 0, got {self}")


def build_region_index(labels, feature_dims):
    """Map a full-resolution label grid to water/obstacle pixel sets at
    feature resolution. Sky and unknown pixels land in neither set."""
    labels = check_label_map(labels)
    h, w = labels.shape
    hf, wf = feature_dims
    if h % hf or w % wf:
        raise ContractViolation(
            f"feature dims {feature_dims} do not divide label dims ({h}, {w})"
        )
    small = nn_downsample(labels, (hf, wf)).reshape(-1)
    return RegionIndex(
        water_pixels=np.flatnonzero(small == WATER),
        obstacle_pixels=np.flatnonzero(small == OBSTACLE),
    )


def water_stats(features, regions):
    """Per-channel water feature statistics (values only, no graph)."""
    flat = features.data.reshape(features.shape[0], -1)
    xw = flat[:, regions.water_pixels]
    if xw.shape[1] == 0:
        zeros = np.zeros(features.shape[0])
        return WaterStats(mu=zeros, sigma2=zeros.copy())
    return WaterStats(mu=xw.mean(axis=1), sigma2=xw.var(axis=1))


def water_separation_loss(features, regions, eps=1e-8, through_mu=True):
    """(N_O / (N_C N_W)) * sum_c [ water spread / obstacle spread ] around
    the per-channel water mean. Zero (and gradient-free) on frames missing
    either region."""
    n_w, n_o = regions.n_water, regions.n_obstacle
    if n_w == 0 or n_o == 0:
        return Tensor(0.0)
    n_c = features.shape[0]
    flat = features.reshape((n_c, -1))
    xw = gather_cols(flat, regions.water_pixels)
    xo = gather_cols(flat, regions.obstacle_pixels)
    mu = tmean(xw, axis=1, keepdims=True)
    if not through_mu:
        mu = mu.detach()
    dw = sub(xw, mu)
    do = sub(xo, mu)
    num = tsum(mul(dw, dw), axis=1)
    den = maximum_scalar(tsum(mul(do, do), axis=1), eps)
    return mul(tsum(div(num, den)), n_o / (n_c * n_w))


def focal_loss(probs, labels, gamma=2.0):
    """Mean of -(1 - p_t)^gamma ln(p_t) over pixels not labeled unknown."""
    labels = check_label_map(labels)
    c, h, w = probs.shape
    if labels.shape != (h, w):
        raise ContractViolation(
            f"labels shape {labels.shape} does not match probs grid ({h}, {w})"
        )
    flat_labels = labels.reshape(-1)
    keep = np.flatnonzero(flat_labels != UNKNOWN)
    if keep.size == 0:
        return Tensor(0.0)
    classes = flat_labels[keep].astype(np.int64)
    if classes.max() >= c:
        raise ContractViolation(
            f"label {classes.max()} exceeds class count {c}"
        )
    pt = take_flat(probs, classes * (h * w) + keep)
    pt = maximum_scalar(pt, 1e-12)
    per_pixel = mul(power(sub(1.0, pt), gamma), log(pt))
    return mul(tmean(per_pixel), -1.0)


def l2_reg(params):
    """Half the squared magnitude of every conv weight; biases and
    normalization scales/shifts are not penalized."""
    total = Tensor(0.0)
    for name, tensor in params.items():
        if name.endswith(".weight"):
            total = add(total, tsum(mul(tensor, tensor)))
    return mul(total, 0.5)


def total_loss(foc, ws, l2, weights):
    """Weighted sum; also returns each addend's value for logging."""
    total = add(foc, add(mul(ws, weights.lambda1), mul(l2, weights.lambda2)))
    parts = {
        "focal": float(foc.data),
        "ws": float(ws.data),
        "l2": float(l2.data),
        "total": float(total.data),
    }
    return total, parts
