"""End-to-end wiring of the two-step pipeline over in-memory objects.

Stage functions here are what the command-line layer and the demo scripts
call: straightening (centerline to mid-sagittal image), scoring (detections
to Genant grades in world space), target generation and evaluation.  All
tunables live in one PipelineConfig that is echoed into every emitted JSON
document for reproducibility.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import detection, genant, localization, straighten
from .core import (DEFAULT_FILL, GeometryError, Volume3D, bbox_from_keypoints,
                   resample_volume)
from .detection import AnchorGrid, Detection, DetectionTargets
from .genant import VertebraKeypoints
from .localization import CenterlinePolyline
from .phantom import PhantomConfig, generate_phantom, oracle_heatmaps, project_annotations
from .straighten import SpineCurve, StraightenedImage, StraightenTransform

N_COORDS = 2 * detection.N_KEYPOINTS  # encoded coordinates per anchor


@dataclass(frozen=True)
class PipelineConfig:
    """Fully-resolved tunables of the pipeline; defaults match the method."""

    working_spacing_mm: float = 3.0
    delta_mm: float = 1.0
    half_extent_mm: tuple[float, float] = (60.0, 60.0)
    smoothing_lambda: float = 10.0
    curve_pad_mm: float = 15.0
    anchor_scales_mm: tuple[float, ...] = detection.DEFAULT_SCALES_MM
    anchor_ratios: tuple[float, ...] = detection.DEFAULT_RATIOS
    objectness_threshold: float = detection.DEFAULT_OBJECTNESS_THRESHOLD
    nms_iou: float = detection.DEFAULT_NMS_IOU
    assign_iou: float = detection.DEFAULT_ASSIGN_IOU
    match_iou: float = 0.5
    mild_cut: float = genant.DEFAULT_MILD_CUT
    moderate_cut: float = genant.DEFAULT_MODERATE_CUT
    severe_cut: float = genant.DEFAULT_SEVERE_CUT
    softargmax_mode: str = "probabilities"
    softargmax_temperature: float = 1.0
    fill: float = DEFAULT_FILL
    seed: int = 0

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["half_extent_mm"] = list(self.half_extent_mm)
        doc["anchor_scales_mm"] = list(self.anchor_scales_mm)
        doc["anchor_ratios"] = list(self.anchor_ratios)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        doc = dict(doc)
        for key in ("half_extent_mm", "anchor_scales_mm", "anchor_ratios"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def grade_cuts(self) -> dict:
        return {"mild_cut": self.mild_cut, "moderate_cut": self.moderate_cut,
                "severe_cut": self.severe_cut}


@dataclass(frozen=True)
class StraightenResult:
    curve: SpineCurve
    straightened: Volume3D
    transform: StraightenTransform
    sagittal: StraightenedImage


def extract_centerline(vol: Volume3D, cfg: PipelineConfig,
                       heatmaps: Volume3D | None = None,
                       annotations: list[VertebraKeypoints] | None = None
                       ) -> CenterlinePolyline:
    """World-frame centerline at the original slice resolution.

    Either decodes per-slice probability maps (which must live on the working
    grid of ``vol``) with the soft-argmax, or interpolates the annotated
    middle keypoints; the coarse curve is then linearly upsampled onto the
    volume's own slice positions.
    """
    if (heatmaps is None) == (annotations is None):
        raise ValueError("provide exactly one of heatmaps or annotations")
    working = resample_volume(vol, (cfg.working_spacing_mm,) * 3, fill=cfg.fill)
    if heatmaps is not None:
        if heatmaps.shape[:2] != working.shape[:2]:
            raise GeometryError(
                f"heatmap grid {heatmaps.shape[:2]} does not match the working "
                f"grid {working.shape[:2]}")
        if not np.allclose(heatmaps.spacing, working.spacing, atol=1e-6) or \
                not np.allclose(heatmaps.origin[:2], working.origin[:2], atol=1e-6):
            raise GeometryError("heatmap volume is not on the working grid")
        coarse = localization.slicewise_centerline(
            heatmaps, mode=cfg.softargmax_mode,
            temperature=cfg.softargmax_temperature).to_world(heatmaps)
    else:
        coarse = localization.centerline_target(annotations, working.slice_z_world())
    z_fine = vol.slice_z_world()
    z_fine = z_fine[(z_fine >= coarse.z[0] - 1e-9) & (z_fine <= coarse.z[-1] + 1e-9)]
    if len(z_fine) < 4:
        raise GeometryError("centerline spans fewer than four output slices")
    return localization.upsample_curve(coarse, z_fine)


def straighten_stage(vol: Volume3D, cfg: PipelineConfig,
                     heatmaps: Volume3D | None = None,
                     annotations: list[VertebraKeypoints] | None = None,
                     workers: int = 1) -> StraightenResult:
    """Resample the volume along its centerline and take the mid-sagittal plane."""
    polyline = extract_centerline(vol, cfg, heatmaps=heatmaps, annotations=annotations)
    curve = straighten.build_spine_curve(polyline, step=cfg.delta_mm,
                                         smoothing=cfg.smoothing_lambda,
                                         pad_mm=cfg.curve_pad_mm)
    straightened, transform = straighten.straighten_volume(
        vol, curve, delta=cfg.delta_mm, half_extent=cfg.half_extent_mm,
        fill=cfg.fill, workers=workers)
    sagittal = straighten.mid_sagittal_slice(straightened, transform)
    return StraightenResult(curve, straightened, transform, sagittal)


def image_anchors(image: StraightenedImage, cfg: PipelineConfig) -> AnchorGrid:
    return detection.generate_anchors(image.values.shape, image.delta,
                                      scales_mm=cfg.anchor_scales_mm,
                                      ratios=cfg.anchor_ratios)


@dataclass(frozen=True)
class VertebraResult:
    """One scored vertebra with image- and world-space keypoints."""

    score: float | None
    keypoints_px: np.ndarray | None   # (6, 2)
    keypoints_mm: np.ndarray          # (6, 3)
    measurement: genant.GenantMeasurement
    label: str | None = None

    def to_dict(self) -> dict:
        m = self.measurement
        return {
            "score": self.score,
            "label": self.label,
            "keypoints": None if self.keypoints_px is None
            else [[float(c) for c in row] for row in self.keypoints_px],
            "keypoints_world": [[float(c) for c in row] for row in self.keypoints_mm],
            "heights_mm": [m.h_a, m.h_m, m.h_p],
            "genant": m.genant,
            "grade": m.grade,
            "center_mm": [float(c) for c in
                          (self.keypoints_mm[2] + self.keypoints_mm[3]) / 2],
        }


def score_detections(detections_2d: list[Detection], transform: StraightenTransform,
                     cfg: PipelineConfig) -> list[VertebraResult]:
    """Map detections back to 3D and grade them."""
    out = []
    for det in detections_2d:
        kps_mm = transform.pixel_to_world(det.keypoints)
        kps = VertebraKeypoints.from_array(kps_mm)
        out.append(VertebraResult(det.score, det.keypoints, kps_mm,
                                  genant.measure(kps, **cfg.grade_cuts())))
    return out


def score_stage(sagittal: StraightenedImage, cfg: PipelineConfig,
                objectness_map: np.ndarray | None = None,
                offsets_map: np.ndarray | None = None,
                annotations: list[VertebraKeypoints] | None = None
                ) -> list[VertebraResult]:
    """Score either prediction maps (detect, then grade) or raw annotations."""
    if annotations is not None:
        out = []
        for kps in annotations:
            px = sagittal.transform.world_to_pixel(kps.as_array())
            out.append(VertebraResult(None, px, kps.as_array(),
                                      genant.measure(kps, **cfg.grade_cuts()),
                                      label=kps.label))
        return out
    if objectness_map is None or offsets_map is None:
        raise ValueError("need prediction maps or annotations")
    anchors = image_anchors(sagittal, cfg)
    dets = detection.detect(objectness_map, offsets_map, anchors,
                            score_threshold=cfg.objectness_threshold,
                            iou_threshold=cfg.nms_iou)
    return score_detections(dets, sagittal.transform, cfg)


def patient_summary(results: list[VertebraResult], cfg: PipelineConfig) -> dict | None:
    if not results:
        return None
    g, grd = genant.patient_score([r.measurement.genant for r in results],
                                  **cfg.grade_cuts())
    return {"genant": g, "grade": grd}


def targets_stage(sagittal: StraightenedImage, annotations: list[VertebraKeypoints],
                  cfg: PipelineConfig) -> tuple[AnchorGrid, DetectionTargets]:
    """Project annotations onto the image and assign detection targets."""
    anchors = image_anchors(sagittal, cfg)
    gt = []
    for kps in annotations:
        g = genant.measure(kps, **cfg.grade_cuts()).genant
        gt.append((sagittal.transform.world_to_pixel(kps.as_array()), g))
    return anchors, detection.assign_targets(anchors, gt, iou_threshold=cfg.assign_iou)


# ---------------------------------------------------------------------------
# Prediction/target raster packing (the VG1 plane layout)
# ---------------------------------------------------------------------------

def pack_prediction_planes(objectness: np.ndarray, offsets: np.ndarray,
                           genant_weights: np.ndarray | None = None) -> np.ndarray:
    """Stack detection maps into the (nx, ny, planes) raster layout.

    Plane order for A anchor types: planes [0, A) hold objectness per type;
    planes [A, 13A) hold the 12 offset coordinates per type (keypoint-major:
    coordinate c = 2 * keypoint + axis); optional planes [13A, 14A) hold the
    per-anchor Genant weights of targets.
    """
    nx, ny, a = objectness.shape
    offsets = np.asarray(offsets).reshape(nx, ny, a * N_COORDS)
    out = np.concatenate([objectness, offsets], axis=2)
    if genant_weights is not None:
        out = np.concatenate([out, genant_weights], axis=2)
    return np.ascontiguousarray(out, dtype=np.float32)


def unpack_prediction_planes(values: np.ndarray, n_types: int
                             ) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Inverse of pack_prediction_planes; accepts 13A or 14A planes."""
    nx, ny, planes = values.shape
    a = n_types
    if planes not in (13 * a, 14 * a):
        raise GeometryError(
            f"prediction raster has {planes} planes, expected {13 * a} or {14 * a}")
    objectness = np.asarray(values[:, :, :a], dtype=float)
    offsets = np.asarray(values[:, :, a:13 * a], dtype=float).reshape(
        nx, ny, a, detection.N_KEYPOINTS, 2)
    weights = None
    if planes == 14 * a:
        weights = np.asarray(values[:, :, 13 * a:], dtype=float)
    return objectness, offsets, weights


# ---------------------------------------------------------------------------
# Phantom-driven end-to-end chain (used by demos, tests and the CLI)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainResult:
    """Everything the full oracle-driven pipeline produces for one phantom."""

    volume: Volume3D
    annotations: list[VertebraKeypoints]
    planted_genant: list[float]
    heatmaps: Volume3D
    straighten: StraightenResult
    anchors: AnchorGrid
    targets: DetectionTargets
    detections: list[Detection]
    results: list[VertebraResult]

    def study_for_evaluation(self, cfg: PipelineConfig,
                             results: list | None = None) -> dict:
        """Pred/gt entries in the form evaluate_study_set consumes."""
        gt_entries = []
        for kps, g in zip(self.annotations, self.planted_genant):
            gt_entries.append({
                "box": sagittal_plane_box(kps.as_array()),
                "center_mm": kps.center().tolist(),
                "genant": g,
            })
        det_entries = []
        for r in (self.results if results is None else results):
            det_entries.append({
                "box": sagittal_plane_box(r.keypoints_mm),
                "score": 1.0 if r.score is None else r.score,
                "center_mm": ((r.keypoints_mm[2] + r.keypoints_mm[3]) / 2).tolist(),
                "genant": r.measurement.genant,
            })
        return {"detections": det_entries, "ground_truth": gt_entries}


def sagittal_plane_box(kps_mm: np.ndarray) -> list[float]:
    """Tight box of world keypoints in the (anterior-posterior, cranio-caudal) plane.

    Used when matching detections against ground truth from world-space
    keypoints alone, without access to the straightening transform.
    """
    box = bbox_from_keypoints(np.asarray(kps_mm)[:, 1:])
    return [box.cx, box.cy, box.w, box.h]


def run_phantom_chain(phantom_cfg: PhantomConfig, cfg: PipelineConfig,
                      keypoint_noise_mm: float = 0.0,
                      noise_seed: int = 0,
                      workers: int = 1) -> ChainResult:
    """Phantom -> oracle heatmaps -> straightening -> oracle detection -> grading.

    ``keypoint_noise_mm`` adds Gaussian noise of that magnitude to every
    regressed keypoint coordinate of the positive anchors, emulating an
    imperfect regression head.
    """
    volume, annotations, planted = generate_phantom(phantom_cfg)
    working = resample_volume(volume, (cfg.working_spacing_mm,) * 3, fill=cfg.fill)
    heatmaps, _ = oracle_heatmaps(annotations, working)
    result = straighten_stage(volume, cfg, heatmaps=heatmaps, workers=workers)

    anchors = image_anchors(result.sagittal, cfg)
    kps_px = project_annotations(annotations, result.transform)
    targets = detection.assign_targets(anchors, list(zip(kps_px, planted)),
                                       iou_threshold=cfg.assign_iou)
    chain = ChainResult(volume, annotations, planted, heatmaps, result,
                        anchors, targets, [], [])
    dets, results = rescore_chain(chain, cfg, keypoint_noise_mm=keypoint_noise_mm,
                                  noise_seed=noise_seed)
    return ChainResult(volume, annotations, planted, heatmaps, result,
                       anchors, targets, dets, results)


def rescore_chain(chain: ChainResult, cfg: PipelineConfig,
                  keypoint_noise_mm: float = 0.0, noise_seed: int = 0
                  ) -> tuple[list[Detection], list[VertebraResult]]:
    """Detect and grade from a chain's oracle maps, optionally noised.

    Keypoint noise (mm std per regressed coordinate) is injected into the
    offsets of the positive anchors, scaled by the anchor side so decoded
    pixel positions carry exactly that magnitude.
    """
    targets = chain.targets
    anchors = chain.anchors
    objectness = np.asarray(targets.objectness, dtype=float)
    offsets = np.array(targets.offsets, dtype=float)
    if keypoint_noise_mm > 0:
        rng = np.random.default_rng(noise_seed)
        pos = targets.objectness == 1
        sigma_px = keypoint_noise_mm / chain.straighten.sagittal.delta
        noise = rng.normal(0.0, sigma_px,
                           size=(int(pos.sum()), detection.N_KEYPOINTS, 2))
        n_cells = anchors.image_shape[0] * anchors.image_shape[1]
        wh = np.stack([np.tile(anchors.widths_px, n_cells),
                       np.tile(anchors.heights_px, n_cells)],
                      axis=1).reshape(targets.objectness.shape + (2,))
        offsets[pos] += noise / wh[pos][:, None, :]
    dets = detection.detect(objectness, offsets, anchors,
                            score_threshold=cfg.objectness_threshold,
                            iou_threshold=cfg.nms_iou)
    return dets, score_detections(dets, chain.straighten.transform, cfg)
