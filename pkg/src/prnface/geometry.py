"""Landmark geometry: face alignment and ROI projection onto feature-map cells.

Coordinates are (x, y) in pixels with y pointing down. Feature-map cells are
(row, col) pairs, row from y and col from x.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DegenerateLandmarks, OutOfBounds, ShapeMismatch

NUM_LANDMARKS = 68

# Standard 68-point annotation ranges, half-open.
REGIONS: Mapping[str, tuple[int, int]] = {
    "left_eye": (36, 42),
    "right_eye": (42, 48),
    "mouth": (48, 68),
    "leftmost": (0, 1),
    "rightmost": (16, 17),
}

EYE_ROW_FRACTION = 0.30
MOUTH_FROM_BOTTOM_FRACTION = 0.35


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray
    region_index: Mapping[str, tuple[int, int]] = field(default_factory=lambda: dict(REGIONS))

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.shape != (NUM_LANDMARKS, 2):
            raise ShapeMismatch(f"expected {NUM_LANDMARKS} (x, y) points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DegenerateLandmarks("landmark coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def region(self, name: str) -> np.ndarray:
        lo, hi = self.region_index[name]
        return self.points[lo:hi]

    def centroid(self, *names: str) -> np.ndarray:
        return np.concatenate([self.region(n) for n in names]).mean(axis=0)


@dataclass(frozen=True)
class SimilarityTransform:
    """p' = scale * R(rotation) @ p + translation."""

    rotation: float
    scale: float
    translation: tuple[float, float]
    output_size: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not self.output_size > 0:
            raise ValueError("output_size must be positive")

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix.T + np.asarray(self.translation)

    def invert(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64) - np.asarray(self.translation)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        rot_t = np.array([[c, s], [-s, c]])
        return (pts @ rot_t.T) / self.scale

    def record(self) -> str:
        dx, dy = self.translation
        return " ".join(repr(float(v)) for v in (self.rotation, self.scale, dx, dy))


@dataclass(frozen=True)
class RoiSpec:
    input_size: int = 140
    fmap_size: int = 9
    region_image: int = 16
    region_fmap: int = 1

    def __post_init__(self):
        if not (self.input_size >= self.fmap_size >= 1):
            raise ValueError("need input_size >= fmap_size >= 1")
        if self.region_fmap < 1:
            raise ValueError("region_fmap must be >= 1")


def align_face(lm: LandmarkSet, output_size: int = 140) -> tuple[SimilarityTransform, LandmarkSet]:
    """Upright, center and scale a face into an ``output_size`` square.

    The eye line is rotated horizontal, the midpoint of the leftmost and
    rightmost landmarks goes to the horizontal center, the eye centroid to
    30% of the height and the mouth centroid to 35% from the bottom.
    """
    left_eye = lm.centroid("left_eye")
    right_eye = lm.centroid("right_eye")
    eye_vec = right_eye - left_eye
    if np.hypot(*eye_vec) == 0.0:
        raise DegenerateLandmarks("eye centroids coincide")
    rotation = -math.atan2(eye_vec[1], eye_vec[0])

    upright = SimilarityTransform(rotation, 1.0, (0.0, 0.0), output_size).apply(lm.points)
    upright_lm = LandmarkSet(upright, lm.region_index)
    center_x = 0.5 * (upright_lm.region("leftmost").mean(axis=0)[0]
                      + upright_lm.region("rightmost").mean(axis=0)[0])
    eye_y = upright_lm.centroid("left_eye", "right_eye")[1]
    mouth_y = upright_lm.centroid("mouth")[1]
    gap = mouth_y - eye_y
    if not gap > 0.0:
        raise DegenerateLandmarks(f"eye-to-mouth vertical gap is {gap!r} after rotation")

    eye_row = EYE_ROW_FRACTION * output_size
    mouth_row = output_size - MOUTH_FROM_BOTTOM_FRACTION * output_size
    scale = (mouth_row - eye_row) / gap
    translation = (float(output_size / 2.0 - scale * center_x), float(eye_row - scale * eye_y))
    transform = SimilarityTransform(rotation, float(scale), translation, output_size)
    return transform, LandmarkSet(transform.apply(lm.points), lm.region_index)


def roi_project(point, spec: RoiSpec) -> tuple[int, int]:
    x, y = float(point[0]), float(point[1])
    if not (0.0 <= x < spec.input_size and 0.0 <= y < spec.input_size):
        raise OutOfBounds(f"point ({x}, {y}) outside [0, {spec.input_size})")
    top = spec.fmap_size - 1
    row = min(max(math.floor(y * spec.fmap_size / spec.input_size), 0), top)
    col = min(max(math.floor(x * spec.fmap_size / spec.input_size), 0), top)
    return row, col


def landmark_cells(points, spec: RoiSpec) -> np.ndarray:
    """Vectorised projection for arrays of shape (..., 2) -> int (..., 2) (row, col).

    Points outside the frame are clamped to the border cells instead of
    rejected, since aligned crops may cut off a few jaw points.
    """
    pts = np.asarray(points, dtype=np.float64)
    cells = np.floor(pts[..., ::-1] * spec.fmap_size / spec.input_size)
    return np.clip(cells, 0, spec.fmap_size - 1).astype(np.int64)


def window_offsets(region_fmap: int) -> np.ndarray:
    lo = -((region_fmap - 1) // 2)
    r = np.arange(lo, lo + region_fmap)
    return np.stack(np.meshgrid(r, r, indexing="ij"), axis=-1).reshape(-1, 2)


@dataclass(frozen=True)
class LocalFeatureSet:
    features: np.ndarray  # (N, C) in landmark order

    def __post_init__(self):
        feats = np.asarray(self.features)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ShapeMismatch(f"local features must be (N, C), got {feats.shape}")
        object.__setattr__(self, "features", feats)

    def __len__(self):
        return self.features.shape[0]


def extract_local_features(fmap, lm: LandmarkSet, spec: RoiSpec) -> LocalFeatureSet:
    """Per-landmark feature vectors from an (H, W, C) map, in landmark order (68, C)."""
    fmap = np.asarray(fmap)
    if fmap.ndim != 3 or fmap.shape[:2] != (spec.fmap_size, spec.fmap_size):
        raise ShapeMismatch(f"feature map {fmap.shape} does not match fmap_size {spec.fmap_size}")
    cells = landmark_cells(lm.points, spec)
    top = spec.fmap_size - 1
    if spec.region_fmap == 1:
        return LocalFeatureSet(fmap[cells[:, 0], cells[:, 1]].copy())
    out = np.zeros((len(cells), fmap.shape[2]), dtype=fmap.dtype)
    offsets = window_offsets(spec.region_fmap)
    for dr, dc in offsets:
        out += fmap[np.clip(cells[:, 0] + dr, 0, top), np.clip(cells[:, 1] + dc, 0, top)]
    return LocalFeatureSet(out / len(offsets))


def read_landmarks(path) -> LandmarkSet:
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    return LandmarkSet(pts)


def write_landmarks(path, lm: LandmarkSet) -> None:
    lines = [f"{float(x)!r} {float(y)!r}" for x, y in lm.points]
    Path(path).write_text("\n".join(lines) + "\n")
