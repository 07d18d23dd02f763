"""Horizon prior from IMU readings.

A pinhole model turns a roll/pitch sample into an image-space horizon line:
slope comes from roll, vertical offset from pitch (yaw never moves an
infinite horizon). Positive pitch lowers the line in the image; positive
roll rotates it clockwise. The rendered mask marks everything strictly
below the line, which the network consumes as a water-location prior.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DataError
from .tensor import Tensor, resize_bilinear


@dataclass(frozen=True)
class ImuSample:
    roll: float
    pitch: float

    def __post_init__(self):
        if not (abs(self.roll) < math.pi / 2 and abs(self.pitch) < math.pi / 2):
            raise ContractViolation(
                f"roll/pitch must lie in (-pi/2, pi/2), got ({self.roll}, {self.pitch})"
            )


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_px: float
    principal_point: tuple  # (cx, cy)
    image_size: tuple  # (width, height)

    def __post_init__(self):
        if self.focal_px <= 0:
            raise ContractViolation(f"focal_px must be positive, got {self.focal_px}")
        cx, cy = self.principal_point
        w, h = self.image_size
        if not (0 <= cx < w and 0 <= cy < h):
            raise ContractViolation(
                f"principal point ({cx}, {cy}) outside {w}x{h} image"
            )

    @property
    def cx(self):
        return self.principal_point[0]

    @property
    def cy(self):
        return self.principal_point[1]

    @property
    def width(self):
        return self.image_size[0]

    @property
    def height(self):
        return self.image_size[1]


@dataclass(frozen=True)
class HorizonLine:
    slope: float  # rows per column
    intercept_row: float  # row at the reference column (cx)


def horizon_line(imu, cam):
    return HorizonLine(
        slope=math.tan(imu.roll),
        intercept_row=cam.cy + cam.focal_px * math.tan(imu.pitch),
    )


def render_imu_mask(line, width, height, cx):
    """Binary mask, 1 strictly below the horizon line.

    The horizon row itself lands on the 0 side. cx anchors intercept_row,
    which is defined at that column.
    """
    if width <= 0 or height <= 0:
        raise ContractViolation(f"mask dims must be positive, got {width}x{height}")
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    boundary = line.slope * (cols - cx) + line.intercept_row
    return Tensor((rows > boundary).astype(np.float64)[None])


def imu_mask(imu, cam):
    """Full-resolution below-horizon mask for one IMU sample."""
    line = horizon_line(imu, cam)
    return render_imu_mask(line, cam.width, cam.height, cam.cx)


def resize_mask(mask, target):
    """Bilinear downsample of a mask; fractional boundary values are kept."""
    h, w = target
    _, src_h, src_w = mask.shape
    if h > src_h or w > src_w:
        raise ContractViolation(
            f"resize_mask target {target} exceeds source ({src_h}, {src_w})"
        )
    return resize_bilinear(mask, h, w)


# -- file formats ------------------------------------------------------------

IMU_HEADER = ["frame", "roll_rad", "pitch_rad"]
INTRINSICS_KEYS = ("focal_px", "cx", "cy", "width", "height")


def save_imu_csv(path, samples):
    """samples: {frame: ImuSample}, written sorted by frame."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(IMU_HEADER)
        for frame in sorted(samples):
            s = samples[frame]
            writer.writerow([frame, repr(s.roll), repr(s.pitch)])


def load_imu_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty IMU file") from None
        if header != IMU_HEADER:
            raise DataError(f"{path}: bad IMU header {header!r}")
        out = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                frame = int(row[0])
                sample = ImuSample(float(row[1]), float(row[2]))
            except (IndexError, ValueError, ContractViolation) as exc:
                raise DataError(f"{path}:{lineno}: bad IMU row {row!r} ({exc})") from None
            if frame in out:
                raise DataError(f"{path}:{lineno}: duplicate frame {frame}")
            out[frame] = sample
    return out


def save_intrinsics(path, cam):
    with open(path, "w") as fh:
        fh.write(f"focal_px={cam.focal_px!r}\n")
        fh.write(f"cx={cam.cx!r}\ncy={cam.cy!r}\n")
        fh.write(f"width={cam.width}\nheight={cam.height}\n")


def load_intrinsics(path):
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or key not in INTRINSICS_KEYS:
                raise DataError(f"{path}:{lineno}: bad intrinsics line {line!r}")
            if key in values:
                raise DataError(f"{path}:{lineno}: duplicate key {key!r}")
            try:
                values[key] = float(value)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value {value!r}") from None
    missing = [k for k in INTRINSICS_KEYS if k not in values]
    if missing:
        raise DataError(f"{path}: missing intrinsics keys {missing}")
    return CameraIntrinsics(
        focal_px=values["focal_px"],
        principal_point=(values["cx"], values["cy"]),
        image_size=(int(values["width"]), int(values["height"])),
    )
