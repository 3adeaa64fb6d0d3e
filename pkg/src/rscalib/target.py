"""Planar calibration-target landmark layout (Aprilgrid convention).

Tags sit in the z=0 plane of the target frame. Tag (r, c) has its origin at
(c * pitch, r * pitch, 0) with pitch = tag_size * (1 + spacing_ratio), and
contributes four corner landmarks ordered counterclockwise starting at the
origin corner: id = 4 * (r * cols + c) + corner_index.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TargetSpec:
    rows: int
    cols: int
    tag_size: float
    spacing_ratio: float = 0.3

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one tag per axis")
        if self.tag_size <= 0:
            raise ValueError("tag size must be positive")
        if not 0 <= self.spacing_ratio < 1:
            raise ValueError("spacing ratio must be in [0, 1)")

    @property
    def num_landmarks(self):
        return 4 * self.rows * self.cols


_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def landmarks(spec: TargetSpec):
    """(ids, points) for all tag corners; ids are dense 0..4*rows*cols-1."""
    pitch = spec.tag_size * (1.0 + spec.spacing_ratio)
    pts = np.zeros((spec.num_landmarks, 3))
    for r in range(spec.rows):
        for c in range(spec.cols):
            tag = r * spec.cols + c
            origin = np.array([c * pitch, r * pitch])
            pts[4 * tag:4 * tag + 4, :2] = origin + spec.tag_size * _CORNERS
    return np.arange(spec.num_landmarks), pts


def lookup(spec: TargetSpec, landmark_id: int):
    """Coordinates of one landmark id."""
    if not 0 <= landmark_id < spec.num_landmarks:
        raise IndexError(f"landmark id {landmark_id} out of range")
    tag, corner = divmod(landmark_id, 4)
    r, c = divmod(tag, spec.cols)
    pitch = spec.tag_size * (1.0 + spec.spacing_ratio)
    pt = np.zeros(3)
    pt[:2] = np.array([c * pitch, r * pitch]) + spec.tag_size * _CORNERS[corner]
    return pt
