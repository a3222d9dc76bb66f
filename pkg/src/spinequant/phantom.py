"""Synthetic spine phantom and oracle predictions for end-to-end testing.

The phantom stacks bright box-shaped vertebral bodies along a straight or
sinusoidally curved centerline inside an air background.  Each body is
oriented orthogonal to the local centerline tangent and its height profile
runs piecewise-linearly from the anterior to the posterior edge through the
middle, so the planted anterior/middle/posterior heights are realized
exactly and the six keypoints are known in closed form.  Oracle builders
replace the two networks: per-slice Gaussian heatmaps centered on the
centerline target, and detection maps filled with the assigned targets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Volume3D
from .detection import AnchorGrid, DetectionTargets, assign_targets
from .genant import VertebraKeypoints, genant_index
from .localization import centerline_target
from .straighten import StraightenTransform

BODY_INTENSITY = 400.0
BACKGROUND_INTENSITY = -1000.0

# Planted height triples (h_a, h_m, h_p) for the default 12-vertebra phantom.
# The pattern spans normal through severe grades with comfortable gaps around
# the 0.8 and 0.74 grading cuts.
DEFAULT_HEIGHTS = (
    (20.0, 20.0, 20.0),   # G = 1.00
    (19.0, 20.0, 20.0),   # G = 0.95
    (18.0, 20.0, 20.0),   # G = 0.90
    (17.2, 20.0, 20.0),   # G = 0.86
    (16.4, 20.0, 20.0),   # G = 0.82
    (20.0, 20.0, 20.0),   # G = 1.00
    (15.2, 20.0, 20.0),   # G = 0.76
    (15.2, 20.0, 20.0),   # G = 0.76
    (14.4, 20.0, 20.0),   # G = 0.72
    (20.0, 13.2, 20.0),   # G = 0.66 (biconcave)
    (12.0, 20.0, 20.0),   # G = 0.60
    (10.0, 20.0, 20.0),   # G = 0.50
)


@dataclass(frozen=True)
class PhantomConfig:
    """Deterministic description of a synthetic spine volume."""

    n_vertebrae: int = 12
    shape: tuple[int, int, int] = (128, 128, 256)
    spacing: tuple[float, float, float] = (1.25, 1.25, 1.25)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scoliosis_amplitude_mm: float = 10.0
    scoliosis_wavelength_mm: float = 400.0
    pitch_mm: float = 24.0
    body_width_mm: float = 30.0
    body_depth_mm: float = 25.0
    heights_mm: tuple[tuple[float, float, float], ...] | None = None
    noise_sigma: float = 0.0
    seed: int = 0

    def resolved_heights(self) -> list[tuple[float, float, float]]:
        """Per-vertebra height triples, cycling the default pattern if unset."""
        base = self.heights_mm if self.heights_mm is not None else DEFAULT_HEIGHTS
        base = [tuple(float(h) for h in trip) for trip in base]
        return [base[k % len(base)] for k in range(self.n_vertebrae)]

    def validate(self) -> None:
        if self.n_vertebrae < 2:
            raise ValueError("need at least two vertebrae")
        if any(n < 8 for n in self.shape):
            raise ValueError(f"volume too small: {self.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")
        if self.pitch_mm <= 0 or self.body_width_mm <= 0 or self.body_depth_mm <= 0:
            raise ValueError("phantom dimensions must be positive")
        if self.scoliosis_wavelength_mm <= 0:
            raise ValueError("wavelength must be positive")
        heights = self.resolved_heights()
        for trip in heights:
            if len(trip) != 3 or any(h <= 0 for h in trip):
                raise ValueError(f"heights must be positive triples, got {trip}")
        tallest = [max(trip) for trip in heights]
        for a, b in zip(tallest[:-1], tallest[1:]):
            if (a + b) / 2 >= self.pitch_mm:
                raise ValueError(
                    f"bodies overlap: heights {a} and {b} exceed pitch {self.pitch_mm}")

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomConfig":
        kwargs = dict(doc)
        for key in ("shape", "spacing", "origin"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if kwargs.get("heights_mm") is not None:
            kwargs["heights_mm"] = tuple(tuple(t) for t in kwargs["heights_mm"])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        doc = {
            "n_vertebrae": self.n_vertebrae,
            "shape": list(self.shape),
            "spacing": list(self.spacing),
            "origin": list(self.origin),
            "scoliosis_amplitude_mm": self.scoliosis_amplitude_mm,
            "scoliosis_wavelength_mm": self.scoliosis_wavelength_mm,
            "pitch_mm": self.pitch_mm,
            "body_width_mm": self.body_width_mm,
            "body_depth_mm": self.body_depth_mm,
            "heights_mm": None if self.heights_mm is None
            else [list(t) for t in self.heights_mm],
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }
        return doc


def _centerline_xy(cfg: PhantomConfig, z_world: np.ndarray,
                   x0: float, y0: float, z0: float) -> tuple[np.ndarray, np.ndarray]:
    """Lateral (x) scoliosis offset and constant y of the planted centerline."""
    phase = 2 * np.pi * (z_world - z0) / cfg.scoliosis_wavelength_mm
    return x0 + cfg.scoliosis_amplitude_mm * np.sin(phase), np.full_like(z_world, y0)


def generate_phantom(cfg: PhantomConfig) -> tuple[Volume3D, list[VertebraKeypoints], list[float]]:
    """Render the phantom volume with its exact annotations and Genant indices."""
    cfg.validate()
    heights = cfg.resolved_heights()
    extent = [(n - 1) * s for n, s in zip(cfg.shape, cfg.spacing)]
    span = (cfg.n_vertebrae - 1) * cfg.pitch_mm
    margin_z = (extent[2] - span) / 2
    if margin_z < max(max(t) for t in heights) / 2 + 2:
        raise ValueError("volume too short for the configured spine")
    x0 = cfg.origin[0] + extent[0] / 2
    y0 = cfg.origin[1] + extent[1] / 2
    z_first = cfg.origin[2] + margin_z
    if (cfg.scoliosis_amplitude_mm + cfg.body_width_mm / 2) > extent[0] / 2 - 2 or \
            cfg.body_depth_mm / 2 > extent[1] / 2 - 2:
        raise ValueError("spine does not fit inside the volume cross-section")

    values = np.full(cfg.shape, BACKGROUND_INTENSITY, dtype=np.float32)
    annotations: list[VertebraKeypoints] = []
    indices: list[float] = []

    for k in range(cfg.n_vertebrae):
        zc = z_first + k * cfg.pitch_mm
        cx, cy = _centerline_xy(cfg, np.array([zc]), x0, y0, z_first)
        center = np.array([cx[0], cy[0], zc])
        # Tangent of the sinusoidal centerline at the body center.
        slope = cfg.scoliosis_amplitude_mm * 2 * np.pi / cfg.scoliosis_wavelength_mm \
            * np.cos(2 * np.pi * (zc - z_first) / cfg.scoliosis_wavelength_mm)
        axis_up = np.array([slope, 0.0, 1.0])
        axis_up /= np.linalg.norm(axis_up)
        axis_ap = np.array([0.0, 1.0, 0.0])
        axis_lr = np.cross(axis_ap, axis_up)

        h_a, h_m, h_p = heights[k]
        annotations.append(_keypoints_for_body(center, axis_ap, axis_up,
                                               cfg.body_depth_mm, h_a, h_m, h_p,
                                               label=f"V{k + 1}"))
        indices.append(genant_index(h_a, h_m, h_p))
        _fill_body(values, cfg, center, axis_lr, axis_ap, axis_up,
                   cfg.body_width_mm, cfg.body_depth_mm, (h_a, h_m, h_p))

    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(cfg.seed)
        values += rng.normal(0.0, cfg.noise_sigma, size=values.shape).astype(np.float32)

    return Volume3D(values, cfg.spacing, cfg.origin), annotations, indices


def _keypoints_for_body(center, axis_ap, axis_up, depth, h_a, h_m, h_p,
                        label=None) -> VertebraKeypoints:
    half = depth / 2
    pts = []
    for offset, h in ((-half, h_a), (0.0, h_m), (half, h_p)):
        base = center + offset * axis_ap
        pts.append(base + (h / 2) * axis_up)
        pts.append(base - (h / 2) * axis_up)
    return VertebraKeypoints.from_array(np.asarray(pts), label=label)


def _fill_body(values, cfg: PhantomConfig, center, axis_lr, axis_ap, axis_up,
               width, depth, heights_trip) -> None:
    """Rasterize one body: inside test in its local frame on a bounding subgrid."""
    h_a, h_m, h_p = heights_trip
    radius = np.sqrt(width ** 2 + depth ** 2 + max(heights_trip) ** 2) / 2
    spacing = np.asarray(cfg.spacing)
    origin = np.asarray(cfg.origin)
    lo = np.maximum(np.floor((center - radius - origin) / spacing).astype(int), 0)
    hi = np.minimum(np.ceil((center + radius - origin) / spacing).astype(int) + 1,
                    cfg.shape)
    if np.any(lo >= hi):
        return
    grid = np.meshgrid(*(np.arange(a, b) for a, b in zip(lo, hi)), indexing="ij")
    pts = origin + np.stack(grid, axis=-1) * spacing - center
    local_lr = pts @ axis_lr
    local_ap = pts @ axis_ap
    local_up = pts @ axis_up
    # Height profile: piecewise linear anterior -> middle -> posterior.
    half_depth = depth / 2
    frac = np.clip(local_ap / half_depth, -1.0, 1.0)
    h = np.where(frac <= 0, h_a + (h_m - h_a) * (1 + frac), h_m + (h_p - h_m) * frac)
    inside = (np.abs(local_lr) <= width / 2) & (np.abs(local_ap) <= half_depth) \
        & (np.abs(local_up) <= h / 2)
    values[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]][inside] = BODY_INTENSITY


def oracle_heatmaps(annotations: list[VertebraKeypoints], vol: Volume3D,
                    sigma_vox: float = 2.0,
                    z_range: tuple[int, int] | None = None
                    ) -> tuple[Volume3D, np.ndarray]:
    """Per-slice Gaussian heatmaps centered on the centerline target.

    The returned stack covers the annotated span of ``vol`` (or the explicit
    slice range), each valid slice holding an isotropic Gaussian normalized
    to unit mass.  Slices outside the annotated span are uniform maps and
    flagged invalid in the returned boolean mask.
    """
    target = centerline_target(annotations, vol.slice_z_world())
    z_world = vol.slice_z_world()
    k_inside = np.nonzero((z_world >= target.z[0] - 1e-9)
                          & (z_world <= target.z[-1] + 1e-9))[0]
    if z_range is None:
        k0, k1 = int(k_inside[0]), int(k_inside[-1]) + 1
    else:
        k0, k1 = int(z_range[0]), int(z_range[1])
        if not 0 <= k0 < k1 <= vol.shape[2]:
            raise ValueError(f"slice range {z_range} outside the volume")
    nx, ny = vol.shape[:2]
    maps = np.empty((nx, ny, k1 - k0), dtype=np.float32)
    valid = np.zeros(k1 - k0, dtype=bool)
    gx = np.arange(nx)[:, None]
    gy = np.arange(ny)[None, :]
    target_by_k = {int(k): i for i, k in enumerate(
        np.searchsorted(z_world, target.z))}
    centers_vox = vol.world_to_voxel(target.points())
    for i, k in enumerate(range(k0, k1)):
        if k in target_by_k:
            cx, cy = centers_vox[target_by_k[k], :2]
            m = np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * sigma_vox ** 2))
            maps[:, :, i] = m / m.sum()
            valid[i] = True
        else:
            maps[:, :, i] = 1.0 / (nx * ny)
    stack = Volume3D(maps, vol.spacing,
                     (vol.origin[0], vol.origin[1], vol.origin[2] + k0 * vol.spacing[2]))
    return stack, valid


def project_annotations(annotations: list[VertebraKeypoints],
                        transform: StraightenTransform) -> list[np.ndarray]:
    """World keypoints projected onto the straightened image, (6, 2) pixels each."""
    return [transform.world_to_pixel(kps.as_array()) for kps in annotations]


def oracle_predictions(annotations_2d, genant_indices, anchors: AnchorGrid,
                       iou_threshold: float = 0.5
                       ) -> tuple[np.ndarray, np.ndarray, DetectionTargets]:
    """Ideal detector output: targets echoed back as prediction maps.

    Returns (objectness map, offsets map, targets).  Feeding the maps into
    ``detect`` recovers every annotated vertebra exactly.
    """
    gt = list(zip(annotations_2d, genant_indices))
    targets = assign_targets(anchors, gt, iou_threshold=iou_threshold)
    return targets.objectness.copy(), targets.offsets.copy(), targets
