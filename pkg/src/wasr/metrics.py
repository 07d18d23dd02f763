"""Evaluation protocol: water-edge RMSE, greedy box matching, F-measure.

Edge accuracy is the per-frame RMSE between the predicted edge and the
rasterized ground-truth polyline, aggregated as mean (std) across frames.
Detections match ground truth greedily by descending IoU with a permissive
0.3 default threshold, suiting small-obstacle evaluation.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .postprocess import EDGE_SENTINEL, Detection


@dataclass(frozen=True)
class FrameGT:
    gt_boxes: tuple  # of (x1, y1, x2, y2), inclusive
    gt_edge: tuple  # polyline vertices (x, y), x strictly increasing

    def __post_init__(self):
        xs = [x for x, _ in self.gt_edge]
        if any(a >= b for a, b in zip(xs, xs[1:])):
            raise ContractViolation("gt_edge x coordinates must strictly increase")
        for box in self.gt_boxes:
            x1, y1, x2, y2 = box
            if x1 > x2 or y1 > y2:
                raise ContractViolation(f"invalid gt box {box}")


def rasterize_edge(polyline, width):
    """Per-column rows from a vertex polyline, NaN outside its x span."""
    out = np.full(width, np.nan)
    if len(polyline) == 0:
        return out
    xs = np.array([x for x, _ in polyline], dtype=float)
    ys = np.array([y for _, y in polyline], dtype=float)
    cols = np.arange(width, dtype=float)
    inside = (cols >= xs[0]) & (cols <= xs[-1])
    if len(polyline) == 1:
        out[inside] = ys[0]
        return out
    out[inside] = np.interp(cols[inside], xs, ys)
    return out


def edge_error(pred_edge, gt_polyline):
    """Per-frame RMSE over columns where both edges are defined.

    Returns None when no column qualifies (the caller counts a skip).
    """
    pred = np.asarray(pred_edge, dtype=float)
    gt = rasterize_edge(gt_polyline, len(pred))
    both = (pred != EDGE_SENTINEL) & ~np.isnan(gt)
    if not both.any():
        return None
    diff = pred[both] - gt[both]
    return float(np.sqrt(np.mean(diff**2)))


def _iou(a, b):
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1) + 1
    ih = min(ay2, by2) - max(ay1, by1) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (ax2 - ax1 + 1) * (ay2 - ay1 + 1)
    area_b = (bx2 - bx1 + 1) * (by2 - by1 + 1)
    return inter / (area_a + area_b - inter)


def _boxes(items):
    return [d.bbox if isinstance(d, Detection) else tuple(d) for d in items]


def match_detections(pred, gt_boxes, iou_threshold=0.3):
    """Greedy one-to-one matching by descending IoU; returns (TP, FP, FN)."""
    preds = _boxes(pred)
    gts = _boxes(gt_boxes)
    pairs = []
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            iou = _iou(p, g)
            if iou >= iou_threshold:
                pairs.append((iou, i, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_p, used_g = set(), set()
    tp = 0
    for _, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        tp += 1
    return tp, len(preds) - tp, len(gts) - tp


def f_measure(tp, fp, fn):
    """Percent F-measure 200*TP/(2TP+FP+FN).

    None when precision or recall is undefined, which happens with no
    predictions at all (TP+FP = 0) or no ground truth at all (TP+FN = 0).
    """
    if tp + fp == 0 or tp + fn == 0:
        return None
    return 200.0 * tp / (2 * tp + fp + fn)


@dataclass
class SeqStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    edge_rmses: list = field(default_factory=list)
    frames: int = 0
    skipped_edges: int = 0  # frames whose edges had no comparable columns

    def add_frame(self, tp, fp, fn, rmse):
        self.frames += 1
        self.tp += tp
        self.fp += fp
        self.fn += fn
        if rmse is None:
            self.skipped_edges += 1
        else:
            self.edge_rmses.append(rmse)

    def merge(self, other):
        self.frames += other.frames
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.edge_rmses.extend(other.edge_rmses)
        self.skipped_edges += other.skipped_edges

    @property
    def f(self):
        return f_measure(self.tp, self.fp, self.fn)

    @property
    def mu_edg(self):
        return float(np.mean(self.edge_rmses)) if self.edge_rmses else None

    @property
    def std_edg(self):
        return float(np.std(self.edge_rmses)) if self.edge_rmses else None


@dataclass
class EvalReport:
    overall: SeqStats
    per_sequence: dict
    missing_gt: int = 0


def evaluate(records, iou_threshold=0.3):
    """records: iterable of (seq_id, pred_boxes, pred_edge, FrameGT or None)."""
    per_seq = {}
    missing = 0
    for seq_id, pred_boxes, pred_edge, gt in records:
        if gt is None:
            missing += 1
            continue
        stats = per_seq.setdefault(seq_id, SeqStats())
        tp, fp, fn = match_detections(pred_boxes, gt.gt_boxes, iou_threshold)
        stats.add_frame(tp, fp, fn, edge_error(pred_edge, gt.gt_edge))
    overall = SeqStats()
    for seq_id in sorted(per_seq):
        overall.merge(per_seq[seq_id])
    return EvalReport(overall=overall, per_sequence=per_seq, missing_gt=missing)


def _fmt(value, pattern="{:.1f}"):
    return "-" if value is None else pattern.format(value)


def report_text(report):
    lines = []
    header = f"{'sequence':<12} {'frames':>6} {'mu_edg':>8} {'std':>6} {'TP':>6} {'FP':>6} {'FN':>6} {'F':>6}"
    lines.append(header)
    rows = [(str(k), v) for k, v in sorted(report.per_sequence.items())]
    rows.append(("overall", report.overall))
    for name, s in rows:
        lines.append(
            f"{name:<12} {s.frames:>6} {_fmt(s.mu_edg, '{:.2f}'):>8} "
            f"{_fmt(s.std_edg, '{:.2f}'):>6} {s.tp:>6} {s.fp:>6} {s.fn:>6} {_fmt(s.f):>6}"
        )
    if report.missing_gt:
        lines.append(f"warning: {report.missing_gt} frame(s) without ground truth excluded")
    return "\n".join(lines)


def _stats_json(s):
    return {
        "frames": s.frames,
        "mu_edg": s.mu_edg,
        "std_edg": s.std_edg,
        "tp": s.tp,
        "fp": s.fp,
        "fn": s.fn,
        "f": s.f,
        "skipped_edges": s.skipped_edges,
    }


def report_json(report):
    return {
        "overall": _stats_json(report.overall),
        "per_sequence": {str(k): _stats_json(v) for k, v in sorted(report.per_sequence.items())},
        "missing_gt": report.missing_gt,
    }
