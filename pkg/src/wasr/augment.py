"""Label-preserving training-set expansion.

All transforms keep the annotation consistent with the warped pixels:
mirroring flips boxes and negates roll, rotation re-derives boxes as
hulls of rotated corners and bumps roll by the rotation angle, the
elastic warp only ever touches water pixels, and color transfer moves
global statistics without moving any geometry.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolation
from .labels import UNKNOWN, WATER


@dataclass(frozen=True)
class AugSpec:
    mirror: bool = True
    rotations_deg: tuple = (-15.0, -5.0, 5.0, 15.0)
    elastic_step: int = 16  # 0 disables the elastic variants
    elastic_disp: float = 3.0
    color_refs: int = 1
    seed: int = 0

    def __post_init__(self):
        for deg in self.rotations_deg:
            if abs(deg) > 45.0:
                raise ContractViolation(f"rotation {deg} exceeds the 45 degree cap")
        if self.elastic_step:
            if self.elastic_step < 2:
                raise ContractViolation("elastic_step must be at least 2 px")
            if not self.elastic_disp < self.elastic_step:
                raise ContractViolation(
                    "elastic_disp must stay below elastic_step to keep the warp local"
                )
        if self.color_refs < 0:
            raise ContractViolation("color_refs must be non-negative")

    def variants_per_source(self):
        n = 2 if self.mirror else 1
        n *= 1 + len(self.rotations_deg)
        n *= 2 if self.elastic_step else 1
        n *= 1 + self.color_refs
        return n


def mirror_sample(s):
    """Horizontal flip; box coordinates are inclusive so x maps to w-1-x."""
    w = s.image.shape[2]
    boxes = tuple(
        (w - 1 - x2, y1, w - 1 - x1, y2) for (x1, y1, x2, y2) in s.gt_boxes
    )
    edge = tuple((w - 1 - x, y) for (x, y) in reversed(s.gt_edge))
    return replace(
        s,
        image=s.image[:, :, ::-1].copy(),
        labels=s.labels[:, ::-1].copy(),
        imu=replace(s.imu, roll=-s.imu.roll),
        gt_boxes=boxes,
        gt_edge=edge,
        ideal_labels=None if s.ideal_labels is None else s.ideal_labels[:, ::-1].copy(),
    )


def _bilinear_sample(img, rr, cc):
    """Sample [C,h,w] planes at float coords with clamp-to-edge borders."""
    _, h, w = img.shape
    r0 = np.clip(np.floor(rr).astype(int), 0, h - 1)
    c0 = np.clip(np.floor(cc).astype(int), 0, w - 1)
    r1 = np.clip(r0 + 1, 0, h - 1)
    c1 = np.clip(c0 + 1, 0, w - 1)
    fr = np.clip(rr - r0, 0.0, 1.0)
    fc = np.clip(cc - c0, 0.0, 1.0)
    out = np.empty((img.shape[0],) + rr.shape)
    for ch in range(img.shape[0]):
        p = img[ch]
        top = p[r0, c0] * (1 - fc) + p[r0, c1] * fc
        bot = p[r1, c0] * (1 - fc) + p[r1, c1] * fc
        out[ch] = top * (1 - fr) + bot * fr
    return out


def _rotation_points(points_rc, theta, center):
    """Forward map of (row, col) points under the image rotation."""
    cr, cc = center
    u = points_rc[:, 0] - cr
    v = points_rc[:, 1] - cc
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    return np.stack(
        [cr + u * cos_t + v * sin_t, cc - u * sin_t + v * cos_t], axis=1
    )


def rotate_sample(s, deg):
    """Rotate the frame contents about the image center.

    The label map uses nearest-neighbor lookup with out-of-frame pixels set
    to unknown; boxes become axis-aligned hulls of their rotated corners and
    the roll reading absorbs the rotation angle.
    """
    if abs(deg) > 45.0:
        raise ContractViolation(f"rotation {deg} exceeds the 45 degree cap")
    if deg == 0:
        return replace(s)
    theta = math.radians(deg)
    _, h, w = s.image.shape
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w]
    u = rows - cr
    v = cols - cc
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    src_r = cr + u * cos_t - v * sin_t
    src_c = cc + u * sin_t + v * cos_t

    image = _bilinear_sample(s.image, src_r, src_c)

    near_r = np.round(src_r).astype(int)
    near_c = np.round(src_c).astype(int)
    valid = (near_r >= 0) & (near_r < h) & (near_c >= 0) & (near_c < w)
    labels = np.full((h, w), UNKNOWN, dtype=s.labels.dtype)
    labels[valid] = s.labels[near_r[valid], near_c[valid]]

    boxes = []
    for x1, y1, x2, y2 in s.gt_boxes:
        corners = np.array(
            [[y1, x1], [y1, x2], [y2, x1], [y2, x2]], dtype=np.float64
        )
        rot = _rotation_points(corners, theta, (cr, cc))
        bx1 = int(np.clip(np.floor(rot[:, 1].min()), 0, w - 1))
        bx2 = int(np.clip(np.ceil(rot[:, 1].max()), 0, w - 1))
        by1 = int(np.clip(np.floor(rot[:, 0].min()), 0, h - 1))
        by2 = int(np.clip(np.ceil(rot[:, 0].max()), 0, h - 1))
        if rot[:, 1].max() < 0 or rot[:, 1].min() > w - 1:
            continue
        if rot[:, 0].max() < 0 or rot[:, 0].min() > h - 1:
            continue
        boxes.append((bx1, by1, bx2, by2))

    edge = _rotate_edge(s.gt_edge, theta, (cr, cc), w)
    return replace(
        s,
        image=image,
        labels=labels,
        imu=replace(s.imu, roll=s.imu.roll + theta),
        gt_boxes=tuple(boxes),
        gt_edge=edge,
        ideal_labels=None,
    )


def _rotate_edge(edge, theta, center, width):
    """Rotate the polyline and re-extract a per-column topmost profile."""
    if not edge:
        return ()
    pts = np.array([[y, x] for (x, y) in edge], dtype=np.float64)
    rot = _rotation_points(pts, theta, center)
    best = {}
    for i in range(len(rot) - 1):
        (r1, c1), (r2, c2) = rot[i], rot[i + 1]
        if c2 < c1:
            (r1, c1), (r2, c2) = (r2, c2), (r1, c1)
        lo = int(math.ceil(c1))
        hi = int(math.floor(c2))
        for x in range(max(lo, 0), min(hi, width - 1) + 1):
            t = 0.0 if c2 == c1 else (x - c1) / (c2 - c1)
            y = r1 + t * (r2 - r1)
            if x not in best or y < best[x]:
                best[x] = y
    return tuple((x, best[x]) for x in sorted(best))


def elastic_water_deform(s, grid_step, max_disp, rng):
    """Resample water pixels through a smooth random offset field.

    Every non-water pixel is returned bit-identical; the annotation does
    not move because the warp never crosses the labeled water boundary
    further than the sub-grid displacement cap.
    """
    if not max_disp < grid_step:
        raise ContractViolation("displacement must stay below the grid step")
    _, h, w = s.image.shape
    gh = h // grid_step + 2
    gw = w // grid_step + 2
    nodes = rng.uniform(-max_disp, max_disp, size=(2, gh, gw))

    rows, cols = np.mgrid[0:h, 0:w]
    gr = rows / grid_step
    gc = cols / grid_step
    field = _bilinear_sample(nodes, gr, gc)

    src_r = np.clip(rows + field[0], 0, h - 1)
    src_c = np.clip(cols + field[1], 0, w - 1)
    warped = _bilinear_sample(s.image, src_r, src_c)

    water = s.labels == WATER
    image = s.image.copy()
    image[:, water] = warped[:, water]
    return replace(s, image=image, ideal_labels=s.ideal_labels)


def color_transfer(s, reference):
    """Match per-channel global mean and deviation to the reference image."""
    image = s.image.copy()
    for ch in range(3):
        mu_in = image[ch].mean()
        sd_in = image[ch].std()
        mu_ref = reference[ch].mean()
        sd_ref = reference[ch].std()
        scale = 1.0 if sd_in == 0 else sd_ref / sd_in
        image[ch] = (image[ch] - mu_in) * scale + mu_ref
    return replace(s, image=np.clip(image, 0.0, 1.0))


def expand_dataset(samples, spec):
    """Deterministic product expansion of a sample list.

    Variant order per source: mirror state (off first), rotation (0 first,
    then the configured angles), elastic (off first), color reference (none
    first). Defaults give 2 x 5 x 2 x 2 = 40 samples per source.
    """
    mirrors = (False, True) if spec.mirror else (False,)
    rotations = (0.0,) + tuple(spec.rotations_deg)
    elastics = (False, True) if spec.elastic_step else (False,)

    out = []
    nv = spec.variants_per_source()
    for i, s in enumerate(samples):
        pick = np.random.default_rng([spec.seed, i, 0])
        if len(samples) > 1 and spec.color_refs:
            pool = [j for j in range(len(samples)) if j != i]
            chosen = pick.choice(len(pool), size=min(spec.color_refs, len(pool)),
                                 replace=False)
            refs = [samples[pool[int(k)]].image for k in chosen]
        elif spec.color_refs:
            refs = [s.image] * spec.color_refs
        else:
            refs = []

        v = 0
        for mirrored in mirrors:
            for deg in rotations:
                for elastic in elastics:
                    for ref in (None, *refs):
                        rng = np.random.default_rng([spec.seed, i, v + 1])
                        t = mirror_sample(s) if mirrored else replace(s)
                        if deg:
                            t = rotate_sample(t, deg)
                        if elastic:
                            t = elastic_water_deform(
                                t, spec.elastic_step, spec.elastic_disp, rng
                            )
                        if ref is not None:
                            t = color_transfer(t, ref)
                        out.append(replace(t, frame=i * nv + v))
                        v += 1
    return out
