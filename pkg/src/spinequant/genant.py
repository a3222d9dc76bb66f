"""Vertebral body heights, Genant index and severity grading.

A vertebra is annotated with six keypoints on its mid-sagittal plane:
anterior, middle and posterior superior/inferior pairs.  The three heights
are the 3D Euclidean distances of the pairs, and the Genant index is the
smallest height divided by the largest.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Canonical keypoint order used for (6, k) arrays everywhere in the package.
KEYPOINT_KEYS = ("as", "ai", "ms", "mi", "ps", "pi")

GRADES = ("normal", "mild", "moderate", "severe")

DEFAULT_MILD_CUT = 0.8
DEFAULT_MODERATE_CUT = 0.74
# The severe cut below is the conventional grading boundary; it is a
# configurable default, not a measured constant.
DEFAULT_SEVERE_CUT = 0.6


@dataclass(frozen=True)
class VertebraKeypoints:
    """Six labeled keypoints of one vertebra, world mm.

    Field names follow the anatomical pairs: anterior/middle/posterior
    (a/m/p) crossed with superior/inferior (s/i).
    """

    anterior_superior: np.ndarray
    anterior_inferior: np.ndarray
    middle_superior: np.ndarray
    middle_inferior: np.ndarray
    posterior_superior: np.ndarray
    posterior_inferior: np.ndarray
    label: str | None = None

    def __post_init__(self):
        for name in ("anterior_superior", "anterior_inferior", "middle_superior",
                     "middle_inferior", "posterior_superior", "posterior_inferior"):
            p = np.asarray(getattr(self, name), dtype=float)
            if p.shape != (3,) or not np.all(np.isfinite(p)):
                raise ValueError(f"{name} must be a finite 3D point, got {p!r}")
            p.flags.writeable = False
            object.__setattr__(self, name, p)

    @classmethod
    def from_array(cls, pts, label: str | None = None) -> "VertebraKeypoints":
        """Build from a (6, 3) array in canonical (as, ai, ms, mi, ps, pi) order."""
        pts = np.asarray(pts, dtype=float)
        if pts.shape != (6, 3):
            raise ValueError(f"expected shape (6, 3), got {pts.shape}")
        return cls(*pts, label=label)

    def as_array(self) -> np.ndarray:
        """(6, 3) array in canonical keypoint order."""
        return np.stack([self.anterior_superior, self.anterior_inferior,
                         self.middle_superior, self.middle_inferior,
                         self.posterior_superior, self.posterior_inferior])

    def center(self) -> np.ndarray:
        """Vertebral body center: midpoint of the middle height endpoints."""
        return (self.middle_superior + self.middle_inferior) / 2


def heights(kps: VertebraKeypoints) -> tuple[float, float, float]:
    """Anterior, middle and posterior body heights in mm.

    Each height is the Euclidean distance between the superior and inferior
    keypoint of its pair.  A zero distance signals a degenerate annotation.
    """
    pts = kps.as_array()
    h = np.linalg.norm(pts[0::2] - pts[1::2], axis=1)
    if np.any(h <= 0):
        raise ValueError(f"degenerate annotation: zero height in {tuple(h)}")
    return float(h[0]), float(h[1]), float(h[2])


def genant_index(h_a: float, h_m: float, h_p: float) -> float:
    """Ratio of the smallest to the largest of the three heights."""
    h = (h_a, h_m, h_p)
    if any(not np.isfinite(v) or v <= 0 for v in h):
        raise ValueError(f"heights must be positive, got {h}")
    return min(h) / max(h)


def grade(g: float, mild_cut: float = DEFAULT_MILD_CUT,
          moderate_cut: float = DEFAULT_MODERATE_CUT,
          severe_cut: float = DEFAULT_SEVERE_CUT) -> str:
    """Severity grade for a Genant index; boundaries are inclusive (<= cut)."""
    if g <= severe_cut:
        return "severe"
    if g <= moderate_cut:
        return "moderate"
    if g <= mild_cut:
        return "mild"
    return "normal"


def patient_score(indices, **grade_cuts) -> tuple[float, str]:
    """Patient-level score: the minimum Genant index and its grade."""
    indices = list(indices)
    if not indices:
        raise ValueError("patient score requires at least one vertebra")
    g = min(float(v) for v in indices)
    return g, grade(g, **grade_cuts)


@dataclass(frozen=True)
class GenantMeasurement:
    """Heights, index and severity grade of one vertebra."""

    h_a: float
    h_m: float
    h_p: float
    genant: float
    grade: str


def measure(kps: VertebraKeypoints, **grade_cuts) -> GenantMeasurement:
    """Measure one annotated vertebra: heights, Genant index, grade."""
    h_a, h_m, h_p = heights(kps)
    g = genant_index(h_a, h_m, h_p)
    return GenantMeasurement(h_a, h_m, h_p, g, grade(g, **grade_cuts))
