"""Single-image training loop with a decaying square-average optimizer.

Every run is a pure function of its seed: parameter init, the per-epoch
visit order, and the optimizer math are all deterministic, so repeated
runs produce bit-identical checkpoints and a checkpointed run can resume
into the exact trajectory of an uninterrupted one.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DataError, NumericFailure
from .horizon import imu_mask
from .losses import (
    LossWeights,
    build_region_index,
    focal_loss,
    l2_reg,
    total_loss,
    water_separation_loss,
)
from .network import build_network, wasr_forward
from .params import OPT_MAGIC, read_tensor_file, write_tensor_file
from .tensor import Tensor, backward

RMS_DECAY = 0.9  # decay of the squared-gradient average
MOMENTUM = 0.9
OPT_EPS = 1e-8


def poly_lr(step, max_steps, lr0=1e-4, power=0.9):
    """Polynomial decay from lr0 to zero over max_steps."""
    if max_steps <= 0:
        raise ContractViolation(f"max_steps must be positive, got {max_steps}")
    if not 0 <= step <= max_steps:
        raise ContractViolation(f"step {step} outside [0, {max_steps}]")
    return lr0 * (1.0 - step / max_steps) ** power


@dataclass
class OptimState:
    square: dict  # name -> running average of g^2
    momentum: dict  # name -> running update direction
    step: int = 0
    max_steps: int = 1
    lr0: float = 1e-4
    power: float = 0.9


def make_optim_state(store, max_steps, lr0=1e-4, power=0.9):
    return OptimState(
        square={n: np.zeros_like(t.data) for n, t in store.items()},
        momentum={n: np.zeros_like(t.data) for n, t in store.items()},
        max_steps=max_steps,
        lr0=lr0,
        power=power,
    )


def rmsprop_step(store, state):
    """One in-place update; a missing gradient counts as zero.

    square <- 0.9 square + 0.1 g^2
    momentum <- 0.9 momentum + g / sqrt(square + 1e-8)
    param <- param - lr momentum
    """
    lr = poly_lr(state.step, state.max_steps, state.lr0, state.power)
    for name, t in store.items():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        elif g.shape != t.data.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} != param shape {t.data.shape} for {name!r}"
            )
        s = state.square[name]
        m = state.momentum[name]
        s *= RMS_DECAY
        s += (1.0 - RMS_DECAY) * g * g
        m *= MOMENTUM
        m += g / np.sqrt(s + OPT_EPS)
        t.data -= lr * m
    store.zero_grads()
    state.step += 1
    return lr


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(out_dir, tag, store, state, epoch, seed):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store.save(out / f"{tag}.params")
    opt_entries = []
    for name in store.names():
        opt_entries.append((name + ".sq", state.square[name]))
        opt_entries.append((name + ".mo", state.momentum[name]))
    write_tensor_file(out / f"{tag}.optim", opt_entries, magic=OPT_MAGIC)
    manifest = {
        "step": state.step,
        "max_steps": state.max_steps,
        "epoch": epoch,  # epochs fully completed
        "lr0": state.lr0,
        "power": state.power,
        "rng": {"kind": "per-epoch-permutation", "seed": seed},
    }
    (out / f"{tag}.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(out_dir, tag, store):
    """Restore params into `store` and return (OptimState, manifest)."""
    out = Path(out_dir)
    store.load(out / f"{tag}.params")
    try:
        manifest = json.loads((out / f"{tag}.json").read_text())
    except FileNotFoundError:
        raise DataError(f"{out / f'{tag}.json'}: missing checkpoint manifest") from None
    loaded = dict(read_tensor_file(out / f"{tag}.optim", magic=OPT_MAGIC))
    expected = set()
    for name in store.names():
        expected.add(name + ".sq")
        expected.add(name + ".mo")
    if set(loaded) != expected:
        raise DataError(f"{out / f'{tag}.optim'}: optimizer entries do not match store")
    state = OptimState(
        square={n: loaded[n + ".sq"].copy() for n in store.names()},
        momentum={n: loaded[n + ".mo"].copy() for n in store.names()},
        step=manifest["step"],
        max_steps=manifest["max_steps"],
        lr0=manifest["lr0"],
        power=manifest["power"],
    )
    return state, manifest


# -- the loop --------------------------------------------------------------------

def _first_bad_part(parts):
    for key in ("focal", "ws", "l2", "total"):
        if not np.isfinite(parts[key]):
            return key
    return None


def train(samples, cam, cfg, *, epochs=5, weights=None, out_dir=None,
          lr0=1e-4, power=0.9, ws_stage="res5", through_mu=True,
          resume_tag=None, log_fn=None):
    """Train on one sample at a time; returns (ParamStore, per-step log).

    ws_stage picks the encoder stage the separation loss attaches to.
    With out_dir set, a checkpoint is written after every epoch; resume_tag
    restarts from one of those and reproduces the uninterrupted run exactly.
    """
    if not samples:
        raise ContractViolation("training needs at least one sample")
    if ws_stage not in ("res5", "res4"):
        raise ContractViolation(f"unknown separation stage {ws_stage!r}")
    weights = weights if weights is not None else LossWeights()

    store = build_network(cfg)
    max_steps = epochs * len(samples)
    state = make_optim_state(store, max_steps, lr0=lr0, power=power)
    start_epoch = 0
    if resume_tag is not None:
        state, manifest = load_checkpoint(out_dir, resume_tag, store)
        start_epoch = manifest["epoch"]
        if state.max_steps != max_steps:
            raise DataError(
                f"checkpoint ran with max_steps {state.max_steps}, this run has {max_steps}"
            )

    masks = {}
    if cfg.use_imu:
        for i, s in enumerate(samples):
            masks[i] = imu_mask(s.imu, cam).data

    log = []
    for epoch in range(start_epoch, epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        for idx in order:
            s = samples[int(idx)]
            mask = masks.get(int(idx))
            seg, res5 = wasr_forward(Tensor(s.image), mask, store, cfg)
            foc = focal_loss(seg.probs, s.labels, weights.gamma)
            if weights.lambda1 > 0:
                ws_feats = seg.taps[ws_stage]
                regions = build_region_index(s.labels, ws_feats.shape[1:])
                ws = water_separation_loss(ws_feats, regions, through_mu=through_mu)
            else:
                ws = Tensor(0.0)
            l2 = l2_reg(store)
            total, parts = total_loss(foc, ws, l2, weights)

            bad = _first_bad_part(parts)
            if bad is not None:
                raise NumericFailure(
                    f"non-finite {bad} loss at step {state.step}"
                    f" (epoch {epoch}, frame {s.frame}); last checkpoint kept"
                )
            backward(total)
            lr = rmsprop_step(store, state)
            parts.update(step=state.step, epoch=epoch, frame=s.frame, lr=lr)
            log.append(parts)
            if log_fn:
                log_fn(parts)
        if out_dir is not None:
            save_checkpoint(out_dir, f"epoch_{epoch + 1:03d}", store, state,
                            epoch + 1, cfg.seed)
    return store, log
