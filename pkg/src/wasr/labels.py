"""Segmentation label conventions shared across the pipeline."""

import numpy as np

from .errors import ContractViolation

WATER = 0
SKY = 1
OBSTACLE = 2
UNKNOWN = 255

VALID_LABELS = frozenset({WATER, SKY, OBSTACLE, UNKNOWN})


def check_label_map(labels):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ContractViolation(f"label map must be 2-d, got shape {labels.shape}")
    bad = set(np.unique(labels)) - VALID_LABELS
    if bad:
        raise ContractViolation(f"label map contains invalid values {sorted(bad)}")
    return labels


def nn_downsample(labels, target):
    """Nearest-neighbor resample of categorical data; source pixel is the
    one whose center is nearest the target pixel's center."""
    labels = np.asarray(labels)
    h, w = labels.shape
    th, tw = target
    rows = np.minimum((np.arange(th) + 0.5) * (h / th), h - 1).astype(int)
    cols = np.minimum((np.arange(tw) + 0.5) * (w / tw), w - 1).astype(int)
    return labels[np.ix_(rows, cols)]
