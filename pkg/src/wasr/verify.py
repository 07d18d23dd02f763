"""Central finite-difference verification of every differentiable op.

Each registry entry perturbs the inputs of exactly one op (or one composite
block) and compares the analytic gradient against a numeric one. The
negative control flips the sign of an analytic gradient and must be caught,
proving the comparison itself has teeth.
"""

from dataclasses import dataclass

import numpy as np

from .losses import (
    LossWeights,
    RegionIndex,
    focal_loss,
    l2_reg,
    total_loss,
    water_separation_loss,
)
from .network import (
    NetConfig,
    arm1,
    arm2,
    aspp,
    build_network,
    encoder_forward,
    ffm,
    init_arm1,
    init_arm2,
    init_aspp,
    init_ffm,
    wasr_forward,
)
from .params import ParamStore
from .tensor import (
    Tensor,
    add,
    backward,
    batch_norm,
    concat_channels,
    conv2d,
    div,
    exp,
    finite_diff_grad,
    gather_cols,
    global_avg_pool,
    log,
    max_pool2d,
    max_rel_error,
    maximum_scalar,
    mul,
    power,
    relu,
    reshape,
    resize_bilinear,
    sigmoid,
    slice_channels,
    softmax_channels,
    sqrt,
    sub,
    take_flat,
    tmean,
    tsum,
    upsample_bilinear,
)

DEFAULT_TOL = 1e-5
END_TO_END_TOL = 1e-4
SEPARATION_TOL = 1e-6
FD_STEP = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_err: float
    threshold: float

    @property
    def ok(self):
        return self.max_err <= self.threshold


REGISTRY = []


def _register(name, threshold=DEFAULT_TOL):
    def deco(fn):
        REGISTRY.append((name, threshold, fn))
        return fn
    return deco


def _weighted(out):
    """Reduce any output to a scalar through fixed non-degenerate weights.

    The weights are a pure function of the output shape, so repeated calls
    inside a finite-difference sweep all evaluate the same functional.
    """
    n = out.data.size
    coef = np.cos(np.arange(1.0, n + 1.0)).reshape(out.shape)
    return tsum(mul(out, Tensor(coef)))


def _grad_err(f, x):
    x.grad = None
    backward(f(x))
    analytic = x.grad
    numeric = finite_diff_grad(f, x, h=FD_STEP)
    return max_rel_error(analytic, numeric)


def _off_kinks(rng, shape, lo=-1.0, hi=1.0, avoid=(0.0,), gap=0.1):
    data = rng.uniform(lo, hi, size=shape)
    for value in avoid:
        close = np.abs(data - value) < gap
        data = np.where(close, value + gap * np.sign(data - value + 1e-9), data)
    return Tensor(data, requires_grad=True)


@_register("add")
def _check_add():
    rng = np.random.default_rng(101)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 4)), requires_grad=True)  # broadcast path
    errs = [_grad_err(lambda t: _weighted(add(t, b)), a),
            _grad_err(lambda t: _weighted(add(a, t)), b)]
    return max(errs)


@_register("sub")
def _check_sub():
    rng = np.random.default_rng(102)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    errs = [_grad_err(lambda t: _weighted(sub(t, b)), a),
            _grad_err(lambda t: _weighted(sub(a, t)), b)]
    return max(errs)


@_register("mul")
def _check_mul():
    rng = np.random.default_rng(103)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
    errs = [_grad_err(lambda t: _weighted(mul(t, b)), a),
            _grad_err(lambda t: _weighted(mul(a, t)), b)]
    return max(errs)


@_register("div")
def _check_div():
    rng = np.random.default_rng(104)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = _off_kinks(rng, (3, 4), lo=0.5, hi=2.0)
    errs = [_grad_err(lambda t: _weighted(div(t, b)), a),
            _grad_err(lambda t: _weighted(div(a, t)), b)]
    return max(errs)


@_register("power")
def _check_power():
    rng = np.random.default_rng(105)
    x = Tensor(rng.uniform(0.3, 2.0, size=(3, 4)), requires_grad=True)
    return _grad_err(lambda t: _weighted(power(t, 1.7)), x)


@_register("sqrt")
def _check_sqrt():
    rng = np.random.default_rng(106)
    x = Tensor(rng.uniform(0.2, 3.0, size=(3, 4)), requires_grad=True)
    return _grad_err(lambda t: _weighted(sqrt(t)), x)


@_register("exp")
def _check_exp():
    rng = np.random.default_rng(107)
    x = Tensor(rng.uniform(-1.0, 1.0, size=(3, 4)), requires_grad=True)
    return _grad_err(lambda t: _weighted(exp(t)), x)


@_register("log")
def _check_log():
    rng = np.random.default_rng(108)
    x = Tensor(rng.uniform(0.3, 3.0, size=(3, 4)), requires_grad=True)
    return _grad_err(lambda t: _weighted(log(t)), x)


@_register("maximum_scalar")
def _check_maximum_scalar():
    rng = np.random.default_rng(109)
    x = _off_kinks(rng, (4, 4), lo=-1.0, hi=1.0, avoid=(0.3,))
    return _grad_err(lambda t: _weighted(maximum_scalar(t, 0.3)), x)


@_register("sum")
def _check_sum():
    rng = np.random.default_rng(110)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    errs = [_grad_err(lambda t: tsum(t), x),
            _grad_err(lambda t: _weighted(tsum(t, axis=0, keepdims=True)), x)]
    return max(errs)


@_register("mean")
def _check_mean():
    rng = np.random.default_rng(111)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    return _grad_err(lambda t: _weighted(tmean(t, axis=1, keepdims=True)), x)


@_register("reshape")
def _check_reshape():
    rng = np.random.default_rng(112)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    return _grad_err(lambda t: _weighted(reshape(t, (2, 6))), x)


@_register("relu")
def _check_relu():
    rng = np.random.default_rng(113)
    x = _off_kinks(rng, (4, 5))
    return _grad_err(lambda t: _weighted(relu(t)), x)


@_register("sigmoid")
def _check_sigmoid():
    rng = np.random.default_rng(114)
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    return _grad_err(lambda t: _weighted(sigmoid(t)), x)


@_register("softmax")
def _check_softmax():
    rng = np.random.default_rng(115)
    x = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
    return _grad_err(lambda t: _weighted(softmax_channels(t)), x)


@_register("take_flat")
def _check_take_flat():
    rng = np.random.default_rng(116)
    x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    idx = np.array([0, 7, 7, 19, 3])  # repeated index exercises accumulation
    return _grad_err(lambda t: _weighted(take_flat(t, idx)), x)


@_register("gather_cols")
def _check_gather_cols():
    rng = np.random.default_rng(117)
    x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    idx = np.array([1, 4, 4])
    return _grad_err(lambda t: _weighted(gather_cols(t, idx)), x)


@_register("concat_channels")
def _check_concat():
    rng = np.random.default_rng(118)
    a = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 3, 3)), requires_grad=True)
    c = Tensor(rng.normal(size=(2, 3, 3)))
    errs = [_grad_err(lambda t: _weighted(concat_channels([t, b, c])), a),
            _grad_err(lambda t: _weighted(concat_channels([a, t, c])), b)]
    return max(errs)


@_register("slice_channels")
def _check_slice():
    rng = np.random.default_rng(119)
    x = Tensor(rng.normal(size=(5, 3, 3)), requires_grad=True)
    return _grad_err(lambda t: _weighted(slice_channels(t, 1, 4)), x)


@_register("conv2d")
def _check_conv2d():
    rng = np.random.default_rng(120)
    x = Tensor(rng.normal(size=(2, 8, 8)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)

    def run(t_x, t_w, t_b):
        return _weighted(
            conv2d(t_x, t_w, t_b, stride=2, dilation=2, padding=2)
        )

    errs = [_grad_err(lambda t: run(t, w, b), x),
            _grad_err(lambda t: run(x, t, b), w),
            _grad_err(lambda t: run(x, w, t), b)]
    return max(errs)


@_register("max_pool2d")
def _check_max_pool():
    rng = np.random.default_rng(121)
    base = np.arange(2 * 8 * 8, dtype=np.float64).reshape(2, 8, 8)
    x = Tensor(base[:, rng.permutation(8)][:, :, rng.permutation(8)],
               requires_grad=True)  # distinct values keep the argmax stable
    return _grad_err(lambda t: _weighted(max_pool2d(t, 2, 2)), x)


@_register("resize_bilinear")
def _check_resize():
    rng = np.random.default_rng(122)
    x = Tensor(rng.normal(size=(2, 5, 7)), requires_grad=True)
    errs = [_grad_err(lambda t: _weighted(resize_bilinear(t, 3, 4)), x),
            _grad_err(lambda t: _weighted(resize_bilinear(t, 9, 11)), x)]
    return max(errs)


@_register("upsample_bilinear")
def _check_upsample():
    rng = np.random.default_rng(123)
    x = Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)
    return _grad_err(lambda t: _weighted(upsample_bilinear(t, 2)), x)


@_register("global_avg_pool")
def _check_gap():
    rng = np.random.default_rng(124)
    x = Tensor(rng.normal(size=(3, 4, 5)), requires_grad=True)
    return _grad_err(lambda t: _weighted(global_avg_pool(t)), x)


@_register("batch_norm")
def _check_batch_norm():
    rng = np.random.default_rng(125)
    x = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    scale = Tensor(rng.uniform(0.5, 1.5, size=2), requires_grad=True)
    shift = Tensor(rng.normal(size=2), requires_grad=True)

    def run(t_x, t_s, t_b):
        return _weighted(batch_norm(t_x, t_s, t_b))

    errs = [_grad_err(lambda t: run(t, scale, shift), x),
            _grad_err(lambda t: run(x, t, shift), scale),
            _grad_err(lambda t: run(x, scale, t), shift)]
    return max(errs)


@_register("arm1")
def _check_arm1():
    rng = np.random.default_rng(126)
    store = ParamStore()
    init_arm1(store, rng, "a", 5)
    feats = Tensor(rng.normal(size=(4, 4, 4)), requires_grad=True)
    imu = Tensor(rng.uniform(0, 1, size=(1, 4, 4)))
    return _grad_err(lambda t: _weighted(arm1(t, imu, store, "a")), feats)


@_register("arm2")
def _check_arm2():
    rng = np.random.default_rng(127)
    store = ParamStore()
    init_arm2(store, rng, "a", 4, 3)
    deep = Tensor(rng.normal(size=(4, 4, 4)), requires_grad=True)
    res3 = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
    imu = Tensor(rng.uniform(0, 1, size=(1, 4, 4)))
    errs = [_grad_err(lambda t: _weighted(arm2(t, res3, imu, store, "a")), deep),
            _grad_err(lambda t: _weighted(arm2(deep, t, imu, store, "a")), res3)]
    return max(errs)


@_register("ffm")
def _check_ffm():
    rng = np.random.default_rng(128)
    store = ParamStore()
    init_ffm(store, rng, "f", 4, 3)
    deep = Tensor(rng.normal(size=(4, 4, 4)), requires_grad=True)
    res2 = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
    imu = Tensor(rng.uniform(0, 1, size=(1, 4, 4)))
    return _grad_err(lambda t: _weighted(ffm(t, res2, imu, store, "f")), deep)


@_register("aspp")
def _check_aspp():
    rng = np.random.default_rng(129)
    store = ParamStore()
    init_aspp(store, rng, "p", 4, (1, 2), 3)
    feats = Tensor(rng.normal(size=(4, 6, 6)), requires_grad=True)
    return _grad_err(lambda t: _weighted(aspp(t, store, (1, 2), 3, "p")), feats)


@_register("encoder")
def _check_encoder():
    rng = np.random.default_rng(130)
    cfg = NetConfig(input_size=(16, 16), encoder_channels=(2, 4, 6, 8),
                    aspp_rates=(1, 2), seed=130)
    store = build_network(cfg)
    image = Tensor(rng.uniform(0, 1, size=(3, 16, 16)), requires_grad=True)

    def run(t):
        res2, res3, res5 = encoder_forward(t, store, cfg)
        return add(_weighted(res5), add(_weighted(res2), _weighted(res3)))

    return _grad_err(run, image)


@_register("wasr_forward", threshold=END_TO_END_TOL)
def _check_wasr_forward():
    rng = np.random.default_rng(131)
    cfg = NetConfig(input_size=(16, 16), encoder_channels=(2, 4, 6, 8),
                    aspp_rates=(1, 2), seed=131)
    store = build_network(cfg)
    image = Tensor(rng.uniform(0, 1, size=(3, 16, 16)), requires_grad=True)
    mask = (rng.uniform(size=(1, 16, 16)) > 0.5).astype(np.float64)

    def run(t):
        seg, _ = wasr_forward(t, mask, store, cfg)
        return _weighted(seg.probs)

    errs = [_grad_err(run, image)]
    for name in ("stem.conv.weight", "aspp.r1.weight", "ffm.bn.scale"):
        tensor = store[name]
        saved = tensor.data.copy()

        def run_param(t, live=tensor):
            live.data[...] = t.data  # route the probe values into the store
            seg, _ = wasr_forward(image, mask, store, cfg)
            return _weighted(seg.probs)

        errs.append(_grad_err(run_param, tensor))
        tensor.data[...] = saved
    return max(errs)


@_register("water_separation_loss", threshold=SEPARATION_TOL)
def _check_separation():
    rng = np.random.default_rng(132)
    feats = Tensor(rng.normal(size=(4, 8, 8)), requires_grad=True)
    flat = rng.permutation(64)
    regions = RegionIndex(water_pixels=np.sort(flat[:20]),
                          obstacle_pixels=np.sort(flat[20:30]))
    return _grad_err(lambda t: water_separation_loss(t, regions), feats)


@_register("focal_loss")
def _check_focal():
    rng = np.random.default_rng(133)
    probs = Tensor(rng.uniform(0.1, 0.9, size=(3, 4, 4)), requires_grad=True)
    labels = rng.integers(0, 3, size=(4, 4)).astype(np.uint8)
    labels[0, 0] = 255  # unknown pixels must not contribute
    return _grad_err(lambda t: focal_loss(t, labels, gamma=2.0), probs)


@_register("l2_reg")
def _check_l2():
    rng = np.random.default_rng(134)
    store = ParamStore()
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    store.add("c.weight", w)
    store.add("c.bias", Tensor(rng.normal(size=3), requires_grad=True))

    def run(t):
        w.data[...] = t.data  # route the probe values into the store
        return l2_reg(store)

    return _grad_err(run, w)


@_register("total_loss")
def _check_total():
    rng = np.random.default_rng(135)
    ws = Tensor(2.0)
    l2 = Tensor(3.0)
    weights = LossWeights(lambda1=0.5, lambda2=0.1)
    foc = Tensor(1.0, requires_grad=True)
    return _grad_err(lambda t: total_loss(t, ws, l2, weights)[0], foc)


def negative_control():
    """Sign-flipped analytic gradient: the comparison must reject it."""
    rng = np.random.default_rng(999)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

    def f(t):
        return _weighted(mul(t, t))

    backward(f(x))
    flipped = -x.grad
    numeric = finite_diff_grad(f, x, h=FD_STEP)
    return CheckResult("negative_control(sign-flip)",
                       max_rel_error(flipped, numeric), DEFAULT_TOL)


def run_all():
    """Every registered check, in registration order, one entry per op."""
    return [CheckResult(name, float(fn()), threshold)
            for name, threshold, fn in REGISTRY]


def format_report(results):
    width = max(len(r.name) for r in results)
    lines = [f"{'op':<{width}}  {'max rel err':>12}  {'threshold':>10}  status"]
    for r in results:
        status = "ok" if r.ok else "FAIL"
        lines.append(
            f"{r.name:<{width}}  {r.max_err:>12.3e}  {r.threshold:>10.0e}  {status}"
        )
    good = sum(r.ok for r in results)
    lines.append(f"{good}/{len(results)} checks passed")
    return "\n".join(lines)
