"""Segmentation mask to navigable water, water edge, and obstacle boxes.

The largest connected water component is the navigable region; its topmost
pixel per column traces the water edge; obstacle-labeled blobs that touch
the region (or sit inside its row span) become detections, with a minimum
area that scales with image resolution.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .labels import OBSTACLE, WATER, check_label_map
from .tensor import Tensor

EDGE_SENTINEL = -1

# detections below 5x5 px are noise at the 512x384 working resolution;
# scale that area with the pixel count elsewhere
BASE_MIN_AREA = 25
BASE_RESOLUTION = 384 * 512


@dataclass(frozen=True)
class Component:
    pixels: np.ndarray  # (n, 2) array of (row, col)
    bbox: tuple  # (x1, y1, x2, y2) inclusive

    @property
    def area(self):
        return len(self.pixels)


@dataclass(frozen=True)
class Detection:
    bbox: tuple  # (x1, y1, x2, y2) inclusive
    area: int

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        if x1 > x2 or y1 > y2:
            raise ContractViolation(f"degenerate bbox {self.bbox}")
        if self.area > (x2 - x1 + 1) * (y2 - y1 + 1):
            raise ContractViolation(
                f"area {self.area} exceeds bbox capacity of {self.bbox}"
            )


def connected_components(mask):
    """4-connected components, largest first; ties broken by the first
    pixel in raster order."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    seen = np.zeros((h, w), dtype=bool)
    components = []
    for sr in range(h):
        for sc in range(w):
            if not mask[sr, sc] or seen[sr, sc]:
                continue
            queue = deque([(sr, sc)])
            seen[sr, sc] = True
            pixels = []
            while queue:
                r, c = queue.popleft()
                pixels.append((r, c))
                for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        queue.append((nr, nc))
            arr = np.array(pixels)
            bbox = (
                int(arr[:, 1].min()),
                int(arr[:, 0].min()),
                int(arr[:, 1].max()),
                int(arr[:, 0].max()),
            )
            components.append(Component(pixels=arr, bbox=bbox))
    components.sort(
        key=lambda comp: (-comp.area, comp.pixels[0][0], comp.pixels[0][1])
    )
    return components


def water_region(seg):
    """Binary mask of the largest connected water component."""
    seg = check_label_map(seg)
    components = connected_components(seg == WATER)
    region = np.zeros(seg.shape, dtype=bool)
    if components:
        largest = components[0]
        region[largest.pixels[:, 0], largest.pixels[:, 1]] = True
    return region


def water_edge(region):
    """Per-column topmost region row; EDGE_SENTINEL where the column is empty."""
    region = np.asarray(region, dtype=bool)
    has_water = region.any(axis=0)
    return np.where(has_water, region.argmax(axis=0), EDGE_SENTINEL).astype(int)


def scaled_min_area(shape):
    h, w = shape
    return max(1, round(BASE_MIN_AREA * (h * w) / BASE_RESOLUTION))


def _region_reach(region):
    """Region pixels plus their 4-neighbors: the blob contact zone."""
    reach = region.copy()
    reach[1:, :] |= region[:-1, :]
    reach[:-1, :] |= region[1:, :]
    reach[:, 1:] |= region[:, :-1]
    reach[:, :-1] |= region[:, 1:]
    return reach


def extract_obstacles(seg, region, min_area_px=None):
    """Obstacle blobs gated by the water region.

    A blob counts when its row span intersects the region's row span and at
    least one of its pixels is inside or 4-adjacent to the region, which
    admits obstacles protruding above the water edge.
    """
    seg = check_label_map(seg)
    region = np.asarray(region, dtype=bool)
    if min_area_px is None:
        min_area_px = scaled_min_area(seg.shape)
    region_rows = np.flatnonzero(region.any(axis=1))
    if region_rows.size == 0:
        return []
    row_lo, row_hi = region_rows[0], region_rows[-1]
    reach = _region_reach(region)

    detections = []
    for comp in connected_components(seg == OBSTACLE):
        if comp.area < min_area_px:
            continue
        x1, y1, x2, y2 = comp.bbox
        if y2 < row_lo or y1 > row_hi:
            continue
        if not reach[comp.pixels[:, 0], comp.pixels[:, 1]].any():
            continue
        detections.append(Detection(bbox=comp.bbox, area=comp.area))
    detections.sort(key=lambda d: (-d.area, d.bbox[1], d.bbox[0]))
    return detections


def labels_from_probs(probs):
    """Argmax class map; predictions never contain the unknown label."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return data.argmax(axis=0).astype(np.uint8)


def postprocess_frame(seg, min_area_px=None):
    """Full conversion: label map -> (navigable region, edge, detections)."""
    region = water_region(seg)
    return region, water_edge(region), extract_obstacles(seg, region, min_area_px)
