"""Anchor-based six-keypoint vertebra detection machinery.

Anchors live at every pixel of the straightened mid-sagittal image with a
fixed set of scales (mm) and height/width ratios.  Keypoints are regressed
relative to the matched anchor with the shift- and scale-invariant offsets

    ex = (gx - ax) / aw,   ey = (gy - ay) / ah,

and the training loss combines binary cross-entropy on objectness with a
regression term on the offsets weighted by the inverse Genant index of the
matched vertebra, so strongly compressed vertebrae weigh more.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Box2D, bbox_from_keypoints, iou_matrix

DEFAULT_SCALES_MM = (17.0, 23.0, 28.0, 35.0)
DEFAULT_RATIOS = (0.8, 1.1, 1.3, 2.0)
DEFAULT_OBJECTNESS_THRESHOLD = 0.5
DEFAULT_NMS_IOU = 0.45
DEFAULT_ASSIGN_IOU = 0.5
BCE_EPS = 1e-7

N_KEYPOINTS = 6


@dataclass(frozen=True)
class AnchorGrid:
    """One anchor per (pixel, scale, ratio) on the detection image.

    ``ratio`` is height/width and ``scale`` the box side in mm at ratio one,
    so width = scale / sqrt(ratio) and height = scale * sqrt(ratio); both are
    stored in pixels.  Anchor type index t runs scale-major:
    t = scale_index * len(ratios) + ratio_index.
    """

    image_shape: tuple[int, int]
    pixel_spacing: float
    scales_mm: tuple[float, ...]
    ratios: tuple[float, ...]
    widths_px: np.ndarray   # (A,)
    heights_px: np.ndarray  # (A,)

    @property
    def n_types(self) -> int:
        return len(self.widths_px)

    @property
    def n_anchors(self) -> int:
        return self.image_shape[0] * self.image_shape[1] * self.n_types

    def box(self, ix: int, iy: int, t: int) -> Box2D:
        return Box2D(float(ix), float(iy),
                     float(self.widths_px[t]), float(self.heights_px[t]))

    def boxes_flat(self) -> np.ndarray:
        """(N, 4) array of (cx, cy, w, h) rows in C order over (ix, iy, t)."""
        nx, ny = self.image_shape
        a = self.n_types
        cx = np.repeat(np.arange(nx, dtype=float), ny * a)
        cy = np.tile(np.repeat(np.arange(ny, dtype=float), a), nx)
        w = np.tile(self.widths_px, nx * ny)
        h = np.tile(self.heights_px, nx * ny)
        return np.column_stack([cx, cy, w, h])


def generate_anchors(image_shape, pixel_spacing: float,
                     scales_mm=DEFAULT_SCALES_MM,
                     ratios=DEFAULT_RATIOS) -> AnchorGrid:
    """Anchor grid over every pixel center of a ``(nx, ny)`` image."""
    if pixel_spacing <= 0:
        raise ValueError("pixel spacing must be positive")
    scales_mm = tuple(float(s) for s in scales_mm)
    ratios = tuple(float(r) for r in ratios)
    if any(s <= 0 for s in scales_mm) or any(r <= 0 for r in ratios):
        raise ValueError("scales and ratios must be positive")
    w = np.array([s / np.sqrt(r) for s in scales_mm for r in ratios]) / pixel_spacing
    h = np.array([s * np.sqrt(r) for s in scales_mm for r in ratios]) / pixel_spacing
    w.flags.writeable = False
    h.flags.writeable = False
    return AnchorGrid((int(image_shape[0]), int(image_shape[1])),
                      float(pixel_spacing), scales_mm, ratios, w, h)


def encode_keypoints(keypoints: np.ndarray, anchor: Box2D) -> np.ndarray:
    """Anchor-relative offsets of keypoints: (k - center) / side, shape (6, 2)."""
    keypoints = np.asarray(keypoints, dtype=float)
    return (keypoints - [anchor.cx, anchor.cy]) / [anchor.w, anchor.h]


def decode_keypoints(offsets: np.ndarray, anchor: Box2D) -> np.ndarray:
    """Inverse of encode_keypoints: offsets * side + center."""
    offsets = np.asarray(offsets, dtype=float)
    return offsets * [anchor.w, anchor.h] + [anchor.cx, anchor.cy]


@dataclass(frozen=True)
class DetectionTargets:
    """Per-anchor training targets on an (nx, ny, A) anchor grid.

    Positive anchors carry the encoded keypoints, the Genant weight of the
    matched vertebra and its index; negative anchors have matched == -1.
    """

    objectness: np.ndarray      # (nx, ny, A) float, 0 or 1
    offsets: np.ndarray         # (nx, ny, A, 6, 2)
    genant_weights: np.ndarray  # (nx, ny, A), defined where objectness == 1
    matched: np.ndarray         # (nx, ny, A) int, ground-truth index or -1

    @property
    def n_positive(self) -> int:
        return int(self.objectness.sum())


def assign_targets(anchors: AnchorGrid, ground_truth,
                   iou_threshold: float = DEFAULT_ASSIGN_IOU) -> DetectionTargets:
    """Match anchors to annotated vertebrae and build training targets.

    ``ground_truth`` is a sequence of (keypoints_px (6, 2), genant_index)
    pairs.  An anchor is positive when its IoU with a ground-truth box
    exceeds ``iou_threshold`` (matched to the highest-IoU vertebra); in
    addition the best anchor of every vertebra is forced positive even below
    the threshold, so no vertebra is left without a trainable anchor.  An
    empty ground-truth list yields all-negative targets.
    """
    nx, ny = anchors.image_shape
    a = anchors.n_types
    shape = (nx, ny, a)
    objectness = np.zeros(shape)
    offsets = np.zeros(shape + (N_KEYPOINTS, 2))
    weights = np.zeros(shape)
    matched = np.full(shape, -1, dtype=int)
    gt = list(ground_truth)
    if not gt:
        return DetectionTargets(objectness, offsets, weights, matched)

    gt_boxes = []
    for kps, g in gt:
        if not 0 < g <= 1:
            raise ValueError(f"Genant weight must be in (0, 1], got {g}")
        gt_boxes.append(bbox_from_keypoints(kps).as_array())
    overlaps = iou_matrix(anchors.boxes_flat(), np.asarray(gt_boxes))  # (N, M)

    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(len(overlaps)), best_gt]
    match_flat = np.where(best_iou > iou_threshold, best_gt, -1)

    # Force the best remaining anchor of every vertebra positive, most
    # confident vertebra first, so two vertebrae never claim one anchor.
    # Stable sorts keep ties at the lowest flat anchor index (determinism).
    claimed = set()
    for m in np.argsort(-overlaps.max(axis=0), kind="stable"):
        ranked = np.argsort(-overlaps[:, m], kind="stable")
        for flat in ranked:
            if flat not in claimed:
                claimed.add(int(flat))
                match_flat[flat] = m
                break

    match_flat = match_flat.reshape(shape)
    pos = match_flat >= 0
    objectness[pos] = 1.0
    matched[:] = match_flat
    anchor_wh = np.stack([np.tile(anchors.widths_px, nx * ny),
                          np.tile(anchors.heights_px, nx * ny)], axis=1).reshape(shape + (2,))
    anchor_cxy = np.stack(np.meshgrid(np.arange(nx, dtype=float),
                                      np.arange(ny, dtype=float),
                                      np.zeros(a), indexing="ij"), axis=-1)[..., :2]
    for m, (kps, g) in enumerate(gt):
        sel = match_flat == m
        if not np.any(sel):
            continue
        kps = np.asarray(kps, dtype=float)
        rel = kps[None, :, :] - anchor_cxy[sel][:, None, :]
        offsets[sel] = rel / anchor_wh[sel][:, None, :]
        weights[sel] = g
    return DetectionTargets(objectness, offsets, weights, matched)


def _check_prediction_shapes(pred_objectness, pred_offsets, targets: DetectionTargets):
    pred_objectness = np.asarray(pred_objectness, dtype=float)
    pred_offsets = np.asarray(pred_offsets, dtype=float)
    shape = targets.objectness.shape
    if pred_objectness.shape != shape:
        raise ValueError(f"objectness shape {pred_objectness.shape} != {shape}")
    if pred_offsets.shape == shape + (2 * N_KEYPOINTS,):
        pred_offsets = pred_offsets.reshape(shape + (N_KEYPOINTS, 2))
    if pred_offsets.shape != shape + (N_KEYPOINTS, 2):
        raise ValueError(f"offsets shape {pred_offsets.shape} incompatible with {shape}")
    return pred_objectness, pred_offsets


def detection_loss_terms(pred_objectness, pred_offsets,
                         targets: DetectionTargets,
                         eps: float = BCE_EPS) -> tuple[float, float]:
    """(bce, regression) parts of the detection loss.

    bce is the mean binary cross-entropy over all anchors with predictions
    clipped to [eps, 1-eps].  The regression part averages, over positive
    anchors, the mean absolute offset error of the matched vertebra's 12
    encoded coordinates divided by its Genant index; it is zero when there
    is no positive anchor.
    """
    pred_o, pred_e = _check_prediction_shapes(pred_objectness, pred_offsets, targets)
    o = targets.objectness
    p = np.clip(pred_o, eps, 1 - eps)
    bce = float(-np.mean(o * np.log(p) + (1 - o) * np.log1p(-p)))

    pos = o == 1
    n_pos = int(pos.sum())
    if n_pos == 0:
        return bce, 0.0
    err = np.abs(pred_e[pos] - targets.offsets[pos]).mean(axis=(1, 2))
    reg = float(np.sum(err / targets.genant_weights[pos]) / n_pos)
    return bce, reg


def detection_loss(pred_objectness, pred_offsets, targets: DetectionTargets,
                   eps: float = BCE_EPS) -> float:
    """Objectness BCE plus Genant-weighted keypoint regression error."""
    bce, reg = detection_loss_terms(pred_objectness, pred_offsets, targets, eps=eps)
    return bce + reg


def detection_loss_grad(pred_objectness, pred_offsets,
                        targets: DetectionTargets,
                        eps: float = BCE_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of detection_loss w.r.t. both prediction arrays.

    The BCE gradient is zero where the prediction is saturated past the
    clipping range; the regression gradient uses sign(error), i.e. zero at
    the (non-differentiable) exact match.
    """
    pred_o, pred_e = _check_prediction_shapes(pred_objectness, pred_offsets, targets)
    o = targets.objectness
    n = o.size
    inside = (pred_o > eps) & (pred_o < 1 - eps)
    p = np.clip(pred_o, eps, 1 - eps)
    grad_o = np.where(inside, (-o / p + (1 - o) / (1 - p)) / n, 0.0)

    grad_e = np.zeros_like(pred_e)
    pos = o == 1
    n_pos = int(pos.sum())
    if n_pos:
        scale = 1.0 / (targets.genant_weights[pos] * n_pos * 2 * N_KEYPOINTS)
        grad_e[pos] = np.sign(pred_e[pos] - targets.offsets[pos]) * scale[:, None, None]
    return grad_o, grad_e


@dataclass(frozen=True)
class Detection:
    """One decoded vertebra candidate on the straightened image (pixels)."""

    score: float
    box: Box2D
    keypoints: np.ndarray  # (6, 2)

    def __post_init__(self):
        kps = np.asarray(self.keypoints, dtype=float)
        if kps.shape != (N_KEYPOINTS, 2):
            raise ValueError(f"keypoints must be (6, 2), got {kps.shape}")
        kps.flags.writeable = False
        object.__setattr__(self, "keypoints", kps)
        object.__setattr__(self, "score", float(self.score))


def nms(candidates: list[Detection], iou_threshold: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Greedy non-maximum suppression, highest score first.

    Ties are broken deterministically by keeping the earlier candidate
    (stable sort on descending score).
    """
    if not candidates:
        return []
    order = sorted(range(len(candidates)), key=lambda i: -candidates[i].score)
    boxes = np.array([candidates[i].box.as_array() for i in order])
    keep: list[int] = []
    for row, i in enumerate(order):
        if keep and np.any(iou_matrix(boxes[row:row + 1], boxes[keep])[0] > iou_threshold):
            continue
        keep.append(row)
    return [candidates[order[row]] for row in keep]


def detect(objectness_map, offsets_map, anchors: AnchorGrid,
           score_threshold: float = DEFAULT_OBJECTNESS_THRESHOLD,
           iou_threshold: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Decode prediction maps into non-overlapping vertebra detections.

    Anchors scoring above ``score_threshold`` are decoded (keypoints from the
    offset planes, box as the tight box of the keypoints) and reduced with
    greedy NMS.  Candidate order, and therefore tie-breaking, is the flat
    anchor order.
    """
    obj = np.asarray(objectness_map, dtype=float)
    nx, ny = anchors.image_shape
    a = anchors.n_types
    if obj.shape != (nx, ny, a):
        raise ValueError(f"objectness shape {obj.shape} != {(nx, ny, a)}")
    off = np.asarray(offsets_map, dtype=float)
    if off.shape == (nx, ny, a, 2 * N_KEYPOINTS):
        off = off.reshape(nx, ny, a, N_KEYPOINTS, 2)
    if off.shape != (nx, ny, a, N_KEYPOINTS, 2):
        raise ValueError(f"offsets shape {off.shape} incompatible with {(nx, ny, a)}")

    candidates = []
    for ix, iy, t in zip(*np.nonzero(obj > score_threshold)):
        anchor = anchors.box(int(ix), int(iy), int(t))
        kps = decode_keypoints(off[ix, iy, t], anchor)
        candidates.append(Detection(float(obj[ix, iy, t]), bbox_from_keypoints(kps), kps))
    return nms(candidates, iou_threshold)
