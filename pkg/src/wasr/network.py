"""WaSR network: atrous residual encoder plus an IMU-fusing decoder.

The encoder downsamples to 1/8 resolution, switching the last two stages
from stride to dilation so they keep spatial extent while growing the
receptive field. The decoder re-weights encoder features against the
below-horizon mask (ARM blocks), merges skip features (FFM), and maps the
result to class probabilities with a multi-rate conv pyramid (ASPP) at 1/4
resolution, upsampled x4 to the input size.

Normalization always uses the current sample's statistics: training runs
one image per step, so there is no meaningful batch to average over, and
keeping the same rule at inference makes the forward pass a pure function
of (image, mask, params).
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .params import ParamStore
from .tensor import (
    Tensor,
    add,
    batch_norm,
    concat_channels,
    conv2d,
    global_avg_pool,
    max_pool2d,
    mul,
    relu,
    resize_bilinear,
    same_padding,
    sigmoid,
    softmax_channels,
    upsample_bilinear,
)

# residual units per encoder stage (res2..res5); desk-scale depth
STAGE_UNITS = (1, 1, 1, 1)


@dataclass(frozen=True)
class NetConfig:
    input_size: tuple = (96, 128)  # (h, w), divisible by 8
    class_count: int = 3  # water, sky, obstacle
    encoder_channels: tuple = (16, 32, 48, 64)  # res2..res5
    aspp_rates: tuple = (1, 2, 4, 6)
    use_imu: bool = True
    seed: int = 0

    def __post_init__(self):
        h, w = self.input_size
        if h % 8 or w % 8:
            raise ContractViolation(f"input_size {self.input_size} not divisible by 8")
        if self.class_count < 2:
            raise ContractViolation(f"class_count must be >= 2, got {self.class_count}")
        if len(self.encoder_channels) != 4 or any(c <= 0 for c in self.encoder_channels):
            raise ContractViolation(f"bad encoder_channels {self.encoder_channels}")
        rates = tuple(self.aspp_rates)
        if not rates or any(r <= 0 for r in rates) or len(set(rates)) != len(rates):
            raise ContractViolation(f"aspp_rates must be positive and distinct, got {rates}")


@dataclass
class SegOutput:
    probs: Tensor  # [class_count, h, w]
    internal_probs: Tensor  # [class_count, h/4, w/4]
    taps: dict = None  # encoder stages the separation loss can attach to


# -- parameter creation ---------------------------------------------------------

def _init_conv(store, rng, name, out_c, in_c, k):
    fan_in = in_c * k * k
    fan_out = out_c * k * k
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    weight = rng.uniform(-limit, limit, size=(out_c, in_c, k, k))
    store.add(name + ".weight", Tensor(weight, requires_grad=True))
    store.add(name + ".bias", Tensor(np.zeros(out_c), requires_grad=True))


def _init_bn(store, name, channels):
    store.add(name + ".scale", Tensor(np.ones(channels), requires_grad=True))
    store.add(name + ".shift", Tensor(np.zeros(channels), requires_grad=True))


def init_arm1(store, rng, prefix, cat_channels):
    """cat_channels counts the concatenated input (features + mask)."""
    _init_conv(store, rng, prefix + ".att", cat_channels, cat_channels, 1)
    _init_bn(store, prefix + ".bn", cat_channels)


def init_arm2(store, rng, prefix, deep_channels, res3_channels):
    init_arm1(store, rng, prefix + ".arm", deep_channels + 1)
    _init_conv(store, rng, prefix + ".proj", res3_channels, deep_channels + 1, 1)


def init_ffm(store, rng, prefix, deep_channels, skip_channels):
    cat = deep_channels + skip_channels + 1
    out_c = (cat + 1) // 2
    mid = max(out_c // 4, 4)
    _init_conv(store, rng, prefix + ".conv", out_c, cat, 3)
    _init_bn(store, prefix + ".bn", out_c)
    _init_conv(store, rng, prefix + ".att1", mid, out_c, 1)
    _init_conv(store, rng, prefix + ".att2", out_c, mid, 1)
    return out_c


def init_aspp(store, rng, prefix, in_channels, rates, class_count):
    for rate in rates:
        _init_conv(store, rng, f"{prefix}.r{rate}", class_count, in_channels, 3)


def _stage_plan(cfg):
    c2, c3, c4, c5 = cfg.encoder_channels
    # name, in_c, out_c, stride, dilation
    return [
        ("res2", c2, c2, 1, 1),
        ("res3", c2, c3, 2, 1),
        ("res4", c3, c4, 1, 2),
        ("res5", c4, c5, 1, 4),
    ]


def build_network(cfg):
    """Create every parameter, Xavier conv weights, zero biases/shifts, unit scales.

    Creation order is fixed, so one seed always yields bit-identical stores.
    """
    rng = np.random.default_rng(cfg.seed)
    store = ParamStore()
    c2, c3, c4, c5 = cfg.encoder_channels

    _init_conv(store, rng, "stem.conv", c2, 3, 3)
    _init_bn(store, "stem.bn", c2)

    for (name, in_c, out_c, stride, dilation), units in zip(_stage_plan(cfg), STAGE_UNITS):
        for u in range(units):
            p = f"{name}.{u}"
            unit_in = in_c if u == 0 else out_c
            unit_stride = stride if u == 0 else 1
            _init_conv(store, rng, p + ".conv1", out_c, unit_in, 3)
            _init_bn(store, p + ".bn1", out_c)
            _init_conv(store, rng, p + ".conv2", out_c, out_c, 3)
            _init_bn(store, p + ".bn2", out_c)
            if unit_in != out_c or unit_stride != 1:
                _init_conv(store, rng, p + ".shortcut", out_c, unit_in, 1)
                _init_bn(store, p + ".bn_sc", out_c)

    init_arm1(store, rng, "arm1", c5 + 1)
    init_arm2(store, rng, "arm2", c5 + 1, c3)
    ffm_out = init_ffm(store, rng, "ffm", c3, c2)
    init_aspp(store, rng, "aspp", ffm_out, cfg.aspp_rates, cfg.class_count)
    return store


# -- forward passes ---------------------------------------------------------------

def _conv(store, name, x, stride=1, dilation=1):
    w = store[name + ".weight"]
    pad = same_padding(w.shape[2], dilation)
    return conv2d(x, w, store[name + ".bias"], stride=stride, dilation=dilation, padding=pad)


def _bn(store, name, x):
    return batch_norm(x, store[name + ".scale"], store[name + ".shift"])


def _res_unit(store, prefix, x, stride, dilation, project):
    y = relu(_bn(store, prefix + ".bn1", _conv(store, prefix + ".conv1", x, stride, dilation)))
    y = _bn(store, prefix + ".bn2", _conv(store, prefix + ".conv2", y, 1, dilation))
    if project:
        shortcut = _bn(store, prefix + ".bn_sc", _conv(store, prefix + ".shortcut", x, stride))
    else:
        shortcut = x
    return relu(add(y, shortcut))


def encoder_taps(image, params, cfg):
    """Run the encoder and return every stage output keyed by stage name."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim != 3 or x.shape[0] != 3:
        raise ContractViolation(f"expected [3,h,w] image, got shape {x.shape}")
    _, h, w = x.shape
    if h % 8 or w % 8:
        raise ContractViolation(f"image dims {h}x{w} not divisible by 8")

    x = relu(_bn(params, "stem.bn", _conv(params, "stem.conv", x, stride=2)))
    x = max_pool2d(x, 2, 2)

    taps = {}
    for (name, in_c, out_c, stride, dilation), units in zip(_stage_plan(cfg), STAGE_UNITS):
        for u in range(units):
            unit_in = in_c if u == 0 else out_c
            unit_stride = stride if u == 0 else 1
            project = unit_in != out_c or unit_stride != 1
            x = _res_unit(params, f"{name}.{u}", x, unit_stride, dilation, project)
        taps[name] = x
    return taps


def encoder_forward(image, params, cfg):
    taps = encoder_taps(image, params, cfg)
    return taps["res2"], taps["res3"], taps["res5"]


def arm1(features, imu, store, prefix="arm1"):
    """Attention re-weighting of features concatenated with the mask channel."""
    if features.shape[1:] != imu.shape[1:]:
        raise ContractViolation(
            f"arm1 spatial mismatch: features {features.shape}, mask {imu.shape}"
        )
    x = concat_channels([features, imu])
    w = sigmoid(_bn(store, prefix + ".bn", _conv(store, prefix + ".att", global_avg_pool(x))))
    return mul(x, w)


def arm2(deep, res3, imu, store, prefix="arm2"):
    """Fuse deep decoder features with the mask, project, and add res3."""
    y = _conv(store, prefix + ".proj", arm1(deep, imu, store, prefix + ".arm"))
    if y.shape != res3.shape:
        raise ContractViolation(
            f"arm2 projection produced {y.shape}, res3 has {res3.shape}"
        )
    return add(y, res3)


def ffm(deep, res2, imu, store, prefix="ffm"):
    """Halve the depth of the concatenated features, then residually re-weight."""
    if deep.shape[1:] != res2.shape[1:] or deep.shape[1:] != imu.shape[1:]:
        raise ContractViolation(
            f"ffm spatial mismatch: {deep.shape}, {res2.shape}, {imu.shape}"
        )
    x = relu(_bn(store, prefix + ".bn", _conv(store, prefix + ".conv", concat_channels([deep, res2, imu]))))
    w = sigmoid(_conv(store, prefix + ".att2", relu(_conv(store, prefix + ".att1", global_avg_pool(x)))))
    return add(x, mul(x, w))


def aspp(features, store, rates, class_count, prefix="aspp"):
    """Sum of parallel dilated 3x3 convs, each mapping straight to class logits."""
    out = None
    for rate in rates:
        branch = _conv(store, f"{prefix}.r{rate}", features, dilation=rate)
        out = branch if out is None else add(out, branch)
    return out


def _mask_channel(imu_fullres, cfg, h, w):
    if not cfg.use_imu:
        return Tensor(np.full((1, h, w), 0.5))
    m = imu_fullres if isinstance(imu_fullres, Tensor) else Tensor(imu_fullres)
    if m.shape[1:] == (h, w):
        return m
    return resize_bilinear(m, h, w)


def wasr_forward(image, imu_mask_fullres, params, cfg):
    """Full forward pass; returns (SegOutput, res5 features).

    res5 features come back so the caller can attach the water-obstacle
    separation loss at the encoder output.
    """
    if cfg.use_imu and imu_mask_fullres is None:
        raise ContractViolation("cfg.use_imu is set but no mask was provided")
    taps = encoder_taps(image, params, cfg)
    res2, res3, res5 = taps["res2"], taps["res3"], taps["res5"]
    _, h8, w8 = res5.shape
    _, h4, w4 = res2.shape
    imu8 = _mask_channel(imu_mask_fullres, cfg, h8, w8)
    imu4 = _mask_channel(imu_mask_fullres, cfg, h4, w4)

    x = arm1(res5, imu8, params, "arm1")
    x = arm2(x, res3, imu8, params, "arm2")
    x = upsample_bilinear(x, 2)
    x = ffm(x, res2, imu4, params, "ffm")
    logits = aspp(x, params, cfg.aspp_rates, cfg.class_count, "aspp")
    internal = softmax_channels(logits)
    probs = upsample_bilinear(internal, 4)
    out = SegOutput(
        probs=probs,
        internal_probs=internal,
        taps={"res4": taps["res4"], "res5": res5},
    )
    return out, res5
