"""Shared-seed ablation: the full model against its two switched-off variants.

Three networks start from bit-identical weights and see the identical
sample order; each run flips exactly one switch. "nows" drops the
water-obstacle separation term (lambda1 = 0), "noimu" replaces the horizon
prior channel with a constant. Every variant is then scored on a held-out
split: detection F, water-edge error, and the mean separation value of its
encoder features, so both switch effects stay directly measurable.
"""

from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ContractViolation
from .horizon import imu_mask
from .losses import LossWeights, build_region_index, water_separation_loss
from .metrics import evaluate
from .network import wasr_forward
from .postprocess import labels_from_probs, postprocess_frame
from .synth import SceneParams
from .tensor import Tensor, no_grad
from .train import train

VARIANTS = ("full", "nows", "noimu")

# Experiment defaults. Short training keeps the variants from all converging
# to the same solution; the heavy veil and wide pose ranges keep the horizon
# prior informative; several mid-size obstacles per scene keep the per-frame
# separation value away from its degenerate near-empty-region regime.
PROTOCOL_TRAIN_COUNT = 120
PROTOCOL_HELD_COUNT = 60
PROTOCOL_EPOCHS = 3
PROTOCOL_LAMBDA1 = 0.05


def protocol_params(seed):
    """Scene settings for the ablation experiment (see module docstring)."""
    return SceneParams(
        roll_range=(-0.2, 0.2),
        pitch_range=(-0.16, 0.16),
        haze_strength=0.85,
        obstacle_count_range=(2, 4),
        obstacle_size_range=(14, 24),
        seed=seed,
    )


@dataclass(frozen=True)
class AblationRow:
    name: str
    f: float  # None when no detection was attempted
    mu_edg: float
    sep_mean: float
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class AblationResult:
    rows: tuple  # one AblationRow per variant, VARIANTS order
    separation_lower: bool  # full's held-out separation below nows's
    edge_not_worse: bool  # full's edge error at most noimu's
    config_notes: tuple  # human-readable per-variant switch descriptions

    def row(self, name):
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def _diff_notes(name, base, other):
    notes = []
    for f in fields(base):
        a, b = getattr(base, f.name), getattr(other, f.name)
        if a != b:
            notes.append(f"{name}: {f.name} {a} -> {b}")
    return notes


def _variant_setups(cfg, weights):
    return (
        ("full", cfg, weights),
        ("nows", cfg, replace(weights, lambda1=0.0)),
        ("noimu", replace(cfg, use_imu=False), weights),
    )


def _score(held_out, cam, cfg, store, ws_stage):
    records, seps = [], []
    for s in held_out:
        mask = imu_mask(s.imu, cam).data if cfg.use_imu else None
        with no_grad():
            seg, _ = wasr_forward(Tensor(s.image), mask, store, cfg)
        pred = labels_from_probs(seg.probs)
        region, edge, detections = postprocess_frame(pred)
        if s.imu.roll != 0.0 and s.imu.pitch != 0.0:
            records.append(
                (s.seq, [d.bbox for d in detections], edge, s.frame_gt())
            )
        feats = seg.taps[ws_stage]
        regions = build_region_index(s.labels, feats.shape[1:])
        seps.append(float(water_separation_loss(feats, regions).data))
    rep = evaluate(records)
    return rep.overall, float(np.mean(seps))


def run_ablation(train_set, held_out, cam, cfg, weights=None, *,
                 epochs=PROTOCOL_EPOCHS, ws_stage="res5", log_fn=None):
    """Train and score all three variants; returns an AblationResult.

    The variants share cfg.seed, so initial weights and the per-epoch visit
    order are identical across them; each differs from the full model by
    exactly one switch (enforced here, not assumed).
    """
    if not held_out:
        raise ContractViolation("ablation needs a non-empty held-out split")
    weights = weights if weights is not None else LossWeights(lambda1=PROTOCOL_LAMBDA1)

    rows, notes = [], []
    for name, cfg_v, weights_v in _variant_setups(cfg, weights):
        diff = _diff_notes(name, cfg, cfg_v) + _diff_notes(name, weights, weights_v)
        if name != "full" and len(diff) != 1:
            raise ContractViolation(
                f"variant {name!r} must differ by exactly one switch, got {diff!r}"
            )
        notes.extend(diff)
        if log_fn:
            log_fn(f"training variant {name}")
        store, _ = train(train_set, cam, cfg_v, epochs=epochs,
                         weights=weights_v, ws_stage=ws_stage)
        stats, sep_mean = _score(held_out, cam, cfg_v, store, ws_stage)
        rows.append(AblationRow(
            name=name, f=stats.f, mu_edg=stats.mu_edg, sep_mean=sep_mean,
            tp=stats.tp, fp=stats.fp, fn=stats.fn,
        ))

    full, nows, noimu = rows
    edge_ok = (full.mu_edg is not None and noimu.mu_edg is not None
               and full.mu_edg <= noimu.mu_edg)
    return AblationResult(
        rows=tuple(rows),
        separation_lower=full.sep_mean < nows.sep_mean,
        edge_not_worse=edge_ok,
        config_notes=tuple(notes),
    )


def _fmt(value, pattern="{:.2f}"):
    return "-" if value is None else pattern.format(value)


def format_ablation(result):
    lines = [f"{'variant':<8} {'F':>7} {'mu_edg':>8} {'sep':>10} "
             f"{'TP':>5} {'FP':>5} {'FN':>5}"]
    for r in result.rows:
        lines.append(
            f"{r.name:<8} {_fmt(r.f, '{:.1f}'):>7} {_fmt(r.mu_edg):>8} "
            f"{r.sep_mean:>10.3f} {r.tp:>5} {r.fp:>5} {r.fn:>5}"
        )
    lines.append("separation value lower with the loss on: "
                 + ("yes" if result.separation_lower else "no"))
    lines.append("edge error not worse with the horizon prior: "
                 + ("yes" if result.edge_not_worse else "no"))
    lines.append("switches:")
    for note in result.config_notes:
        lines.append(f"  {note}")
    return "\n".join(lines)


def ablation_json(result):
    return {
        "rows": [
            {"variant": r.name, "f": r.f, "mu_edg": r.mu_edg,
             "sep_mean": r.sep_mean, "tp": r.tp, "fp": r.fp, "fn": r.fn}
            for r in result.rows
        ],
        "separation_lower": result.separation_lower,
        "edge_not_worse": result.edge_not_worse,
        "switches": list(result.config_notes),
    }
