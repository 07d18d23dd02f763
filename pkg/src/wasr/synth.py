"""Procedural marine scenes with exact ground truth, and the dataset format.

Every scene is built from one sampled IMU reading: the horizon geometry
paints sky above and textured water below, obstacles are convex blobs
either floating on the water or protruding through the edge, and the
distractors the real domain suffers from (specular glitter, mirrored
reflections) are painted into water pixels without touching the labels.
Labels, boxes and the edge polyline all come from the same geometry, so
the ground truth is exact by construction.

The label map written to disk follows the annotation convention of masking
every boundary with a one-pixel unknown band on each side; the pre-band
(analytic) labels ride along in memory for generator self-checks.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractViolation, DataError
from .horizon import (
    CameraIntrinsics,
    ImuSample,
    horizon_line,
    load_imu_csv,
    load_intrinsics,
    save_imu_csv,
    save_intrinsics,
)
from .labels import OBSTACLE, SKY, UNKNOWN, WATER
from .metrics import FrameGT
from .postprocess import connected_components, scaled_min_area


@dataclass(frozen=True)
class SceneParams:
    image_size: tuple = (96, 128)  # (h, w)
    roll_range: tuple = (-0.12, 0.12)  # radians
    pitch_range: tuple = (-0.10, 0.10)
    water_amplitude: float = 0.06
    glitter_prob: float = 0.35
    reflection_strength: float = 0.5
    obstacle_count_range: tuple = (1, 3)
    obstacle_size_range: tuple = (12, 24)  # bbox extent in px
    distractor_count_range: tuple = (0, 2)  # sub-threshold 1-px specks
    haze_strength: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("roll_range", "pitch_range", "obstacle_count_range",
                     "obstacle_size_range", "distractor_count_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ContractViolation(f"{name} is degenerate: ({lo}, {hi})")
        h, w = self.image_size
        if h % 8 or w % 8:
            raise ContractViolation(f"image_size {self.image_size} not divisible by 8")
        if self.obstacle_size_range[0] < 6:
            raise ContractViolation(
                "detectable obstacles need extent >= 6 px to survive boundary banding"
            )
        if self.obstacle_size_range[0] ** 2 < 4 * scaled_min_area(self.image_size):
            raise ContractViolation(
                "obstacle_size_range minimum falls under the detection area filter"
            )


@dataclass
class SceneSample:
    image: np.ndarray  # [3, h, w] floats in [0,1], 8-bit quantized
    labels: np.ndarray  # banded label map written to disk
    imu: ImuSample
    gt_boxes: tuple  # (x1, y1, x2, y2) inclusive, detectable obstacles only
    gt_edge: tuple  # dense per-column (x, row) vertices
    frame: int = 0
    seq: str = "synth"
    ideal_labels: np.ndarray = None  # pre-band analytic labels, not persisted

    def frame_gt(self):
        return FrameGT(gt_boxes=self.gt_boxes, gt_edge=self.gt_edge)


def default_camera(image_size):
    h, w = image_size
    return CameraIntrinsics(
        focal_px=float(h), principal_point=(w / 2.0, h / 2.0), image_size=(w, h)
    )


def _convex_blob(rng, sh, sw):
    """Boolean mask of a random convex shape filling an sh x sw box."""
    rr, cc = np.mgrid[0:sh, 0:sw]
    y = (rr - (sh - 1) / 2.0) / (sh / 2.0)
    x = (cc - (sw - 1) / 2.0) / (sw / 2.0)
    if rng.random() < 0.5:
        return x**2 + y**2 <= 1.0
    k = int(rng.integers(4, 7))
    ang = np.sort(rng.uniform(0, 2 * np.pi, k))
    rad = rng.uniform(0.8, 1.0, k)
    vx, vy = rad * np.cos(ang), rad * np.sin(ang)
    inside = np.ones((sh, sw), dtype=bool)
    cx0, cy0 = vx.mean(), vy.mean()
    for i in range(k):
        x1, y1 = vx[i], vy[i]
        x2, y2 = vx[(i + 1) % k], vy[(i + 1) % k]
        cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
        center_side = (x2 - x1) * (cy0 - y1) - (y2 - y1) * (cx0 - x1)
        sign = 1.0 if center_side >= 0 else -1.0
        inside &= sign * cross >= -1e-12
    if not inside.any():
        return x**2 + y**2 <= 1.0
    return inside


def _band_unknown(labels):
    """Mark every pixel with a differently-labeled 4-neighbor as unknown."""
    out = labels.copy()
    diff = np.zeros(labels.shape, dtype=bool)
    diff[1:, :] |= labels[1:, :] != labels[:-1, :]
    diff[:-1, :] |= labels[:-1, :] != labels[1:, :]
    diff[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    diff[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    out[diff] = UNKNOWN
    return out


def _place_box(rng, occupied, h, w, sh, sw, row_lo, row_hi, margin=3):
    """Find a top-left corner whose padded box avoids occupied cells."""
    row_hi = min(row_hi, h - sh)
    if row_hi < row_lo:
        return None
    for _ in range(40):
        r0 = int(rng.integers(row_lo, row_hi + 1))
        c0 = int(rng.integers(0, w - sw + 1))
        rs = slice(max(0, r0 - margin), min(h, r0 + sh + margin))
        cs = slice(max(0, c0 - margin), min(w, c0 + sw + margin))
        if not occupied[rs, cs].any():
            return r0, c0
    return None


def generate_scene(params, seed, frame=0, seq="synth"):
    rng = np.random.default_rng([params.seed, seed])
    h, w = params.image_size
    cam = default_camera(params.image_size)

    imu = ImuSample(
        roll=float(rng.uniform(*params.roll_range)),
        pitch=float(rng.uniform(*params.pitch_range)),
    )
    line = horizon_line(imu, cam)
    cols = np.arange(w, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)[:, None]
    boundary = line.slope * (cols - cam.cx) + line.intercept_row
    water = rows > boundary[None, :]

    ideal = np.where(water, WATER, SKY).astype(np.uint8)
    edge_row = water.argmax(axis=0)  # first water row per column

    # -- obstacles ------------------------------------------------------------
    occupied = np.zeros((h, w), dtype=bool)
    gt_boxes = []
    count = int(rng.integers(params.obstacle_count_range[0],
                             params.obstacle_count_range[1] + 1))
    blobs = []
    for _ in range(count):
        sh = int(rng.integers(params.obstacle_size_range[0],
                              params.obstacle_size_range[1] + 1))
        sw = int(rng.integers(params.obstacle_size_range[0],
                              params.obstacle_size_range[1] + 1))
        protruding = rng.random() < 0.5
        local_edge = int(edge_row.mean())
        if protruding:
            # straddle the waterline: top above it, bottom in the water
            row_lo = max(0, local_edge - sh + 4)
            row_hi = max(row_lo, local_edge - 3)
        else:
            row_lo = local_edge + 2
            row_hi = h - sh - 3
        spot = _place_box(rng, occupied, h, w, sh, sw, row_lo, row_hi)
        if spot is None:
            continue
        r0, c0 = spot
        blob = _convex_blob(rng, sh, sw)
        if not protruding:
            # keep fully below the (sloped) local waterline
            local = boundary[c0:c0 + sw]
            keep_rows = (np.arange(r0, r0 + sh)[:, None] > local[None, :] + 1)
            blob = blob & keep_rows
        comps = connected_components(blob)
        if not comps:
            continue
        blob = np.zeros_like(blob)
        blob[comps[0].pixels[:, 0], comps[0].pixels[:, 1]] = True  # drop corner crumbs
        if blob.sum() < 4 * scaled_min_area(params.image_size):
            continue
        keep_r, keep_c = np.nonzero(blob)
        if np.ptp(keep_r) < 5 or np.ptp(keep_c) < 5:
            continue  # waterline clipping can leave unlearnable slivers
        if not np.any(r0 + keep_r > boundary[c0 + keep_c]):
            continue  # drifted fully above the sloped waterline: not in the water
        ideal[r0:r0 + sh, c0:c0 + sw][blob] = OBSTACLE
        occupied[r0:r0 + sh, c0:c0 + sw] |= blob
        blobs.append((r0, c0, blob))
        br, bc = np.nonzero(blob)
        gt_boxes.append((
            int(c0 + bc.min()), int(r0 + br.min()),
            int(c0 + bc.max()), int(r0 + br.max()),
        ))

    # -- sub-threshold distractors (labeled obstacle, no ground-truth box) ----
    n_distract = int(rng.integers(params.distractor_count_range[0],
                                  params.distractor_count_range[1] + 1))
    for _ in range(n_distract):
        spot = _place_box(rng, occupied, h, w, 1, 1, int(edge_row.max()) + 4, h - 3)
        if spot is None:
            continue
        r0, c0 = spot
        ideal[r0, c0] = OBSTACLE
        occupied[r0, c0] = True

    # the water edge: top of the sea reachable from the bottom of the frame.
    # Water pockets sealed off behind straddling obstacles are not sea, so
    # the edge drops below such obstacles instead of tracing the pocket.
    water_now = ideal == WATER
    sea = np.zeros_like(water_now)
    sea[-1] = water_now[-1]  # the generator keeps the bottom rows clear
    while True:
        grown = sea.copy()
        grown[:-1] |= sea[1:]
        grown[1:] |= sea[:-1]
        grown[:, :-1] |= sea[:, 1:]
        grown[:, 1:] |= sea[:, :-1]
        grown &= water_now
        if (grown == sea).all():
            break
        sea = grown
    gt_edge_rows = sea.argmax(axis=0)
    gt_edge = tuple((int(c), int(gt_edge_rows[c])) for c in range(w))

    image = _render_image(rng, params, ideal, boundary, blobs, edge_row)
    labels = _band_unknown(ideal)
    return SceneSample(
        image=image,
        labels=labels,
        imu=imu,
        gt_boxes=tuple(gt_boxes),
        gt_edge=gt_edge,
        frame=frame,
        seq=seq,
        ideal_labels=ideal,
    )


def _render_image(rng, params, ideal, boundary, blobs, edge_row):
    h, w = ideal.shape
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    img = np.zeros((3, h, w))

    # sky: vertical gradient toward a bright horizon
    top = np.array([0.50, 0.62, 0.84]) + rng.uniform(-0.05, 0.05, 3)
    hor = np.array([0.80, 0.84, 0.90]) + rng.uniform(-0.03, 0.03, 3)
    t = np.clip(rows / np.maximum(boundary[None, :], 1.0), 0.0, 1.0)
    for ch in range(3):
        img[ch] = top[ch] + (hor[ch] - top[ch]) * t

    # water: dark base, sinusoidal ripple plus noise, lighter near the horizon
    base = np.array([0.10, 0.22, 0.35]) + rng.uniform(-0.03, 0.03, 3)
    f1, f2 = rng.uniform(0.25, 0.65), rng.uniform(0.05, 0.25)
    phase = rng.uniform(0, 2 * np.pi)
    ripple = params.water_amplitude * np.sin(2 * np.pi * (rows * f1 + cols * f2) + phase)
    ripple = ripple + rng.normal(0.0, params.water_amplitude / 2.5, size=(h, w))
    depth = np.clip((rows - boundary[None, :]) / h, 0.0, 1.0)
    fade = 0.12 * (1.0 - depth)  # brighter right below the horizon
    water_mask = ideal != SKY  # obstacles get painted over afterwards
    for ch in range(3):
        img[ch] = np.where(water_mask, base[ch] + ripple + fade, img[ch])

    # haze: a veil of sky color spilling across the waterline. Its reach on
    # each side is drawn per scene, so the visible transition sits at an
    # unpredictable offset from the true boundary and appearance alone
    # cannot pin the waterline down.
    if params.haze_strength > 0:
        d_down = rng.uniform(4.0, 20.0)
        d_up = rng.uniform(2.0, 8.0)
        dist = rows - boundary[None, :]
        fall = np.where(dist >= 0.0, dist / d_down, -dist / d_up)
        band = np.exp(-fall) * params.haze_strength
        for ch in range(3):
            img[ch] = img[ch] * (1 - band) + hor[ch] * band

    # obstacles: saturated distinct bodies with a bit of shading
    obstacle_colors = []
    water_ref = np.array([0.10 + 0.12, 0.22 + 0.12, 0.35 + 0.12])
    for r0, c0, blob in blobs:
        for _ in range(20):
            color = rng.uniform(0.05, 0.55, 3)
            if np.abs(color - water_ref).sum() > 0.6:
                break
        obstacle_colors.append(color)
        shade = rng.normal(0.0, 0.02, size=blob.shape)
        sub = img[:, r0:r0 + blob.shape[0], c0:c0 + blob.shape[1]]
        for ch in range(3):
            sub[ch][blob] = color[ch] + shade[blob]

    # reflections: mirrored obstacle bodies painted on water pixels only
    if params.reflection_strength > 0:
        water_only = ideal == WATER
        for (r0, c0, blob), color in zip(blobs, obstacle_colors):
            br, bc = np.nonzero(blob)
            bottom = r0 + br.max()
            depth_px = bottom - (r0 + br)  # 0 at the waterline row
            tr = bottom + 1 + depth_px
            tc = c0 + bc + np.round(
                1.5 * np.sin(tr / 2.0 + rng.uniform(0, 2 * np.pi))
            ).astype(int)
            ok = (tr < h) & (tc >= 0) & (tc < w)
            tr, tc = tr[ok], tc[ok]
            keep = water_only[tr, tc]
            tr, tc = tr[keep], tc[keep]
            alpha = 0.35 * params.reflection_strength * np.exp(
                -depth_px[ok][keep] / max(blob.shape[0], 1)
            )
            for ch in range(3):
                img[ch, tr, tc] = (1 - alpha) * img[ch, tr, tc] + alpha * color[ch]

    # glitter: bright specks sprinkled on water near the horizon
    if rng.random() < params.glitter_prob:
        n = int(rng.integers(25, 70))
        gr = rng.integers(0, h, size=n)
        gc = rng.integers(0, w, size=n)
        near = gr > edge_row[gc] + 1
        near &= gr < edge_row[gc] + 18
        gr, gc = gr[near], gc[near]
        on_water = ideal[gr, gc] == WATER
        gr, gc = gr[on_water], gc[on_water]
        sparkle = rng.uniform(0.5, 0.95, size=len(gr))
        for ch, bright in enumerate((0.95, 0.97, 1.0)):
            img[ch, gr, gc] = (1 - sparkle) * img[ch, gr, gc] + sparkle * bright

    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0) / 255.0  # 8-bit quantized for lossless PNG


# -- dataset directory format ---------------------------------------------------

def _boxes_line(frame, boxes):
    return json.dumps({"frame": frame, "boxes": [list(b) for b in boxes]})


def _edge_line(frame, vertices):
    return json.dumps({"frame": frame, "vertices": [list(v) for v in vertices]})


def write_dataset(samples, out_dir, params):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    cam = default_camera(params.image_size)

    imu_rows = {}
    box_lines, edge_lines = [], []
    for s in samples:
        arr = np.round(s.image * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr, "RGB").save(out / "images" / f"{s.frame:04d}.png")
        Image.fromarray(s.labels.astype(np.uint8), "L").save(
            out / "masks" / f"{s.frame:04d}.png"
        )
        imu_rows[s.frame] = s.imu
        box_lines.append(_boxes_line(s.frame, s.gt_boxes))
        edge_lines.append(_edge_line(s.frame, s.gt_edge))

    save_imu_csv(out / "imu.csv", imu_rows)
    (out / "gt_boxes.jsonl").write_text("\n".join(box_lines) + "\n")
    (out / "gt_edge.jsonl").write_text("\n".join(edge_lines) + "\n")
    save_intrinsics(out / "intrinsics.txt", cam)

    manifest = {
        "seed": params.seed,
        "params": asdict(params),
        "count": len(samples),
        "content_hash": _content_hash(out),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def _content_hash(root):
    root = Path(root)
    digest = hashlib.sha256()
    names = [p for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"]
    for p in names:
        digest.update(str(p.relative_to(root)).encode())
        digest.update(p.read_bytes())
    return digest.hexdigest()


def _read_jsonl(path, key):
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                frame = obj["frame"]
                value = obj[key]
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: bad record ({exc})") from None
            if frame in out:
                raise DataError(f"{path}:{lineno}: duplicate frame {frame}")
            out[frame] = value
    return out


def read_manifest(dataset_dir):
    path = Path(dataset_dir) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: missing manifest") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: unreadable manifest ({exc})") from None
    params_dict = {
        k: tuple(v) if isinstance(v, list) else v
        for k, v in manifest["params"].items()
    }
    return manifest, SceneParams(**params_dict)


def read_dataset(dataset_dir):
    """Load a dataset directory back into (samples, params, camera)."""
    root = Path(dataset_dir)
    manifest, params = read_manifest(root)
    cam = load_intrinsics(root / "intrinsics.txt")
    imu = load_imu_csv(root / "imu.csv")
    boxes = _read_jsonl(root / "gt_boxes.jsonl", "boxes")
    edges = _read_jsonl(root / "gt_edge.jsonl", "vertices")

    samples = []
    for img_path in sorted((root / "images").glob("*.png")):
        frame = int(img_path.stem)
        mask_path = root / "masks" / img_path.name
        if not mask_path.exists():
            raise DataError(f"{mask_path}: missing mask for frame {frame}")
        if frame not in imu:
            raise DataError(f"{root / 'imu.csv'}: no row for frame {frame}")
        if frame not in boxes:
            raise DataError(f"{root / 'gt_boxes.jsonl'}: no record for frame {frame}")
        if frame not in edges:
            raise DataError(f"{root / 'gt_edge.jsonl'}: no record for frame {frame}")
        rgb = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64)
        image = rgb.transpose(2, 0, 1) / 255.0
        labels = np.asarray(Image.open(mask_path), dtype=np.uint8)
        samples.append(
            SceneSample(
                image=image,
                labels=labels,
                imu=imu[frame],
                gt_boxes=tuple(tuple(int(v) for v in b) for b in boxes[frame]),
                gt_edge=tuple(tuple(v) for v in edges[frame]),
                frame=frame,
                seq="synth",
            )
        )
    if len(samples) != manifest["count"]:
        raise DataError(
            f"{root}: manifest says {manifest['count']} frames, found {len(samples)}"
        )
    return samples, params, cam


def make_dataset(params, count, start_frame=0):
    """Generate `count` scenes with per-frame seeds derived from params.seed."""
    return [
        generate_scene(params, start_frame + i, frame=start_frame + i)
        for i in range(count)
    ]
