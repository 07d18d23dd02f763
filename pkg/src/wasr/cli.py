"""Command line front end: synth, train, infer, eval, gradcheck, ablate.

Every subcommand reads the same flat key=value config (--config FILE plus
--key value overrides) and echoes the effective settings into its output
directory, so any run can be reproduced from the artifacts it leaves behind.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import verify
from .ablate import ablation_json, format_ablation, run_ablation
from .config import load_config
from .errors import ContractViolation, DataError, NumericFailure, UsageError
from .horizon import imu_mask
from .labels import OBSTACLE, SKY, WATER
from .metrics import (evaluate, f_measure, rasterize_edge,
                      report_json, report_text)
from .network import build_network, wasr_forward
from .postprocess import EDGE_SENTINEL, labels_from_probs, postprocess_frame
from .synth import make_dataset, read_dataset, write_dataset
from .tensor import Tensor, no_grad
from .train import load_checkpoint, train


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; route through UsageError
    # instead so every usage problem lands on exit code 1.
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="wasr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", default=None, help="override the seed key")

    p = sub.add_parser("synth", help="generate a labeled scene dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("dataset", help="dataset directory from `synth`")
    common(p)
    p.add_argument("--epochs", default=None, help="override the epochs key")
    p.add_argument("--lambda1", default=None, help="override the lambda1 key")
    p.add_argument("--lambda2", default=None, help="override the lambda2 key")
    p.add_argument("--no-imu", action="store_true",
                   help="replace the horizon prior with a constant channel")
    p.add_argument("--resume", default=None, metavar="TAG",
                   help="checkpoint tag to continue from (e.g. epoch_002)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint over a dataset")
    p.add_argument("checkpoint", help="checkpoint prefix (DIR/epoch_NNN)")
    p.add_argument("dataset", help="dataset directory")
    common(p)
    p.add_argument("--no-imu", action="store_true",
                   help="replace the horizon prior with a constant channel")
    p.add_argument("--overlay", action="store_true",
                   help="also write color overlays with boxes and edge")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("predictions", nargs="?", default=None,
                   help="`infer` output directory (or a dataset directory)")
    p.add_argument("gt", nargs="?", default=None, help="dataset directory")
    common(p, out_required=False)
    p.add_argument("--counts", default=None, metavar="TP,FP,FN",
                   help="arithmetic mode: compute F from detection counts")
    p.add_argument("--iou-threshold", default=None,
                   help="override the iou_threshold key")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check every op")
    common(p, out_required=False)
    p.add_argument("--negative-control", action="store_true",
                   help="also verify that a planted sign error is caught")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train full/nows/noimu and compare")
    p.add_argument("dataset", help="dataset directory (last third held out)")
    common(p)
    p.add_argument("--epochs", default=None, help="override the epochs key")
    p.add_argument("--lambda1", default=None, help="override the lambda1 key")
    p.set_defaults(func=cmd_ablate)

    return parser


def _collect_overrides(args, extra):
    """Fold declared flags and trailing --key value pairs into one dict."""
    overrides = {}
    for flag, key in (("seed", "seed"), ("epochs", "epochs"),
                      ("lambda1", "lambda1"), ("lambda2", "lambda2"),
                      ("iou_threshold", "iou_threshold")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "no_imu", False):
        overrides["use_imu"] = "false"

    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or token == "--":
            raise UsageError(f"unexpected argument {token!r}")
        key = token[2:].replace("-", "_")
        if "=" in key:
            key, _, value = key.partition("=")
        else:
            i += 1
            if i == len(extra):
                raise UsageError(f"missing value for {token}")
            value = extra[i]
        if key in overrides:
            raise UsageError(f"duplicate override {token}")
        overrides[key] = value
        i += 1
    return overrides


def _load(args, extra):
    return load_config(args.config, _collect_overrides(args, extra))


def _check_resolution(samples, cfg):
    h, w = cfg.input_size
    for s in samples:
        if s.image.shape[1:] != (h, w):
            raise DataError(
                f"frame {s.frame} is {s.image.shape[1]}x{s.image.shape[2]},"
                f" the network expects {h}x{w}"
            )


# -- synth -------------------------------------------------------------------


def cmd_synth(args, extra):
    cfg = _load(args, extra)
    if cfg.count < 1:
        raise UsageError(f"count must be at least 1, got {cfg.count}")
    # the effective config participates in the dataset content hash, so it
    # is written first; regenerating into the same directory stays stable
    cfg.save_effective(args.out)
    samples = make_dataset(cfg.scene_params(), cfg.count)
    manifest = write_dataset(samples, args.out, cfg.scene_params())
    print(f"wrote {cfg.count} frames to {args.out}")
    print(f"content hash {manifest['content_hash']}")
    return 0


# -- train -------------------------------------------------------------------


def cmd_train(args, extra):
    cfg = _load(args, extra)
    samples, params, cam = read_dataset(args.dataset)
    net_cfg = cfg.net_config()
    _check_resolution(samples, net_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save_effective(out)

    # stream the per-step curve so an abort still leaves the rows so far
    with open(out / "losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "frame", "lr",
                         "focal", "ws", "l2", "total"])

        def log_fn(parts):
            writer.writerow([parts["step"], parts["epoch"], parts["frame"],
                             repr(parts["lr"]), repr(parts["focal"]),
                             repr(parts["ws"]), repr(parts["l2"]),
                             repr(parts["total"])])

        store, log = train(
            samples, cam, net_cfg,
            epochs=cfg.epochs,
            weights=cfg.loss_weights(),
            out_dir=out,
            lr0=cfg.lr0,
            power=cfg.poly_power,
            ws_stage=cfg.ws_stage,
            through_mu=cfg.ws_through_mu,
            resume_tag=args.resume,
            log_fn=log_fn,
        )
    print(f"trained {cfg.epochs} epoch(s), {len(log)} step(s) this run")
    if log:
        last = log[-1]
        print(f"final losses: focal {last['focal']:.6f} ws {last['ws']:.6f} "
              f"l2 {last['l2']:.6f} total {last['total']:.6f}")
    print(f"checkpoints in {out}")
    return 0


# -- infer -------------------------------------------------------------------

_OVERLAY_TINT = {
    WATER: np.array([40, 90, 220]),
    SKY: np.array([140, 200, 255]),
    OBSTACLE: np.array([230, 70, 40]),
}


def _overlay_image(image, pred, edge, detections):
    rgb = (image.transpose(1, 2, 0) * 255.0).astype(np.float64)
    for label, tint in _OVERLAY_TINT.items():
        sel = pred == label
        rgb[sel] = 0.55 * rgb[sel] + 0.45 * tint
    h, w = pred.shape
    cols = np.flatnonzero(edge != EDGE_SENTINEL)
    rows = np.clip(edge[cols], 0, h - 1)
    rgb[rows, cols] = (255, 235, 60)
    for det in detections:
        x1, y1, x2, y2 = det.bbox
        rgb[y1, x1:x2 + 1] = rgb[y2, x1:x2 + 1] = (255, 255, 255)
        rgb[y1:y2 + 1, x1] = rgb[y1:y2 + 1, x2] = (255, 255, 255)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def cmd_infer(args, extra):
    cfg = _load(args, extra)
    samples, params, cam = read_dataset(args.dataset)
    net_cfg = cfg.net_config()
    _check_resolution(samples, net_cfg)

    ckpt = Path(args.checkpoint)
    tag = ckpt.name
    for suffix in (".params", ".optim", ".json"):
        if tag.endswith(suffix):
            tag = tag[: -len(suffix)]
    store = build_network(net_cfg)
    load_checkpoint(ckpt.parent, tag, store)

    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    if args.overlay:
        (out / "overlays").mkdir(exist_ok=True)
    cfg.save_effective(out)
    min_area = cfg.min_area if cfg.min_area > 0 else None

    det_lines, edge_lines = [], []
    for s in samples:
        mask = imu_mask(s.imu, cam).data if net_cfg.use_imu else None
        with no_grad():
            seg, _ = wasr_forward(Tensor(s.image), mask, store, net_cfg)
        pred = labels_from_probs(seg.probs)
        region, edge, detections = postprocess_frame(pred, min_area)
        Image.fromarray(pred, "L").save(out / "masks" / f"{s.frame:04d}.png")
        det_lines.append(json.dumps({
            "frame": s.frame,
            "detections": [
                {"bbox": [int(v) for v in d.bbox], "area": int(d.area)}
                for d in detections
            ],
        }))
        edge_lines.append(json.dumps({
            "frame": s.frame,
            "edge": [None if v == EDGE_SENTINEL else int(v) for v in edge],
        }))
        if args.overlay:
            Image.fromarray(
                _overlay_image(s.image, pred, edge, detections), "RGB"
            ).save(out / "overlays" / f"{s.frame:04d}.png")

    (out / "detections.jsonl").write_text("\n".join(det_lines) + "\n")
    (out / "edge.jsonl").write_text("\n".join(edge_lines) + "\n")
    print(f"wrote predictions for {len(samples)} frame(s) to {out}")
    return 0


# -- eval --------------------------------------------------------------------


def _read_jsonl_by_frame(path):
    out = {}
    if not path.exists():
        return out
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                frame = obj["frame"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: bad record ({exc})") from None
            if frame in out:
                raise DataError(f"{path}:{lineno}: duplicate frame {frame}")
            out[frame] = obj
    return out


def _load_predictions(pred_dir, width):
    """Accept an `infer` output directory, or a dataset directory whose
    ground truth then plays the role of perfect predictions."""
    pred_dir = Path(pred_dir)
    if (pred_dir / "detections.jsonl").exists():
        dets = _read_jsonl_by_frame(pred_dir / "detections.jsonl")
        edges = _read_jsonl_by_frame(pred_dir / "edge.jsonl")
        boxes, pred_edges = {}, {}
        for frame, obj in dets.items():
            try:
                boxes[frame] = [tuple(d["bbox"]) for d in obj["detections"]]
            except (KeyError, TypeError) as exc:
                raise DataError(
                    f"{pred_dir / 'detections.jsonl'}: frame {frame}: {exc}"
                ) from None
        for frame, obj in edges.items():
            edge = np.array(
                [EDGE_SENTINEL if v is None else int(v) for v in obj["edge"]]
            )
            pred_edges[frame] = edge
        return boxes, pred_edges
    if (pred_dir / "gt_boxes.jsonl").exists():
        samples, params, _ = read_dataset(pred_dir)
        boxes = {s.frame: list(s.gt_boxes) for s in samples}
        pred_edges = {}
        for s in samples:
            rast = rasterize_edge(s.gt_edge, width)
            edge = np.where(np.isnan(rast), EDGE_SENTINEL,
                            np.round(rast)).astype(int)
            pred_edges[s.frame] = edge
        return boxes, pred_edges
    raise DataError(f"{pred_dir}: neither detections.jsonl nor gt_boxes.jsonl found")


def _eval_counts(args):
    parts = args.counts.split(",")
    if len(parts) != 3:
        raise UsageError(f"--counts wants TP,FP,FN, got {args.counts!r}")
    try:
        tp, fp, fn = (int(p) for p in parts)
    except ValueError:
        raise UsageError(f"--counts wants three integers, got {args.counts!r}") from None
    if min(tp, fp, fn) < 0:
        raise UsageError("--counts values must be non-negative")
    f = f_measure(tp, fp, fn)
    shown = "-" if f is None else f"{f:.1f}"
    print(f"TP={tp} FP={fp} FN={fn} F={shown}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(
            {"tp": tp, "fp": fp, "fn": fn, "f": f}, indent=2) + "\n")
    return 0


def cmd_eval(args, extra):
    if args.counts is not None:
        if args.predictions is not None or args.gt is not None:
            raise UsageError("--counts takes no prediction/gt directories")
        _collect_overrides(args, extra)  # still reject unknown flags
        return _eval_counts(args)
    if args.predictions is None or args.gt is None:
        raise UsageError("eval wants PREDICTIONS and GT directories (or --counts)")
    cfg = _load(args, extra)

    gt_samples, params, _ = read_dataset(args.gt)
    width = params.image_size[1]
    gt = {s.frame: s.frame_gt() for s in gt_samples}
    boxes, pred_edges = _load_predictions(args.predictions, width)

    pred_frames = set(boxes) | set(pred_edges)
    if pred_frames and pred_frames != set(gt):
        only_pred = sorted(pred_frames - set(gt))
        only_gt = sorted(set(gt) - pred_frames)
        raise DataError(
            "frame ids do not line up:"
            f" only in predictions {only_pred[:10]},"
            f" only in ground truth {only_gt[:10]}"
        )

    empty_edge = np.full(width, EDGE_SENTINEL)
    records = []
    for frame in sorted(gt):
        records.append((
            "synth",
            boxes.get(frame, []),
            pred_edges.get(frame, empty_edge),
            gt[frame],
        ))
    report = evaluate(records, iou_threshold=cfg.iou_threshold)
    print(report_text(report))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save_effective(out)
        (out / "report.json").write_text(
            json.dumps(report_json(report), indent=2) + "\n")
    return 0


# -- gradcheck ---------------------------------------------------------------


def cmd_gradcheck(args, extra):
    _load(args, extra)  # nothing configurable yet; still validates overrides
    results = verify.run_all()
    text = verify.format_report(results)
    print(text)
    status = 0 if all(r.ok for r in results) else 3
    if args.negative_control:
        control = verify.negative_control()
        if control.ok:
            print("negative control PASSED A PLANTED SIGN ERROR; "
                  "the checker itself is broken")
            status = 3
        else:
            print(f"negative control rejected as expected "
                  f"(error {control.max_err:.2e})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(text + "\n")
    return status


# -- ablate ------------------------------------------------------------------


def cmd_ablate(args, extra):
    cfg = _load(args, extra)
    samples, params, cam = read_dataset(args.dataset)
    net_cfg = cfg.net_config()
    _check_resolution(samples, net_cfg)
    if len(samples) < 3:
        raise UsageError("ablation needs at least 3 frames to split")
    held = max(1, len(samples) // 3)
    train_set, held_out = samples[:-held], samples[-held:]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save_effective(out)
    result = run_ablation(
        train_set, held_out, cam, net_cfg, cfg.loss_weights(),
        epochs=cfg.epochs, ws_stage=cfg.ws_stage, log_fn=print,
    )
    text = format_ablation(result)
    print(text)
    (out / "ablation.txt").write_text(text + "\n")
    (out / "ablation.json").write_text(
        json.dumps(ablation_json(result), indent=2) + "\n")
    return 0


# -- entry point ---------------------------------------------------------------


def main(argv=None):
    parser = _build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("a command is required (see --help)")
        return args.func(args, extra)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ContractViolation as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
