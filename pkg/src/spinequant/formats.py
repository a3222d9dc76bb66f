"""On-disk formats: VG1 volumes and VA1 annotation files.

VG1 is a JSON header next to a raw little-endian float32 blob in x-fastest
(Fortran) order: byte ``4*k`` holds voxel ``(k % nx, (k // nx) % ny,
k // (nx*ny))``.  The header is::

    {"shape": [nx, ny, nz], "spacing": [sx, sy, sz],
     "origin": [ox, oy, oz], "dtype": "f32", "data": "<relative path>"}

VA1 is a JSON annotation file::

    {"vertebrae": [{"label": ..., "keypoints_mm":
        {"as": [x, y, z], "ai": ..., "ms": ..., "mi": ..., "ps": ..., "pi": ...}}]}

with all coordinates in world mm.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import Volume3D
from .genant import KEYPOINT_KEYS, VertebraKeypoints


class FormatError(ValueError):
    """Malformed or inconsistent input file."""


def _load_json(path: Path) -> dict:
    if not path.exists():
        raise FormatError(f"no such file: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def write_json(path, obj) -> None:
    """Deterministic JSON writer used for every emitted artifact."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_vg1(path, vol: Volume3D) -> Path:
    """Write a volume as a VG1 header plus its raw data file."""
    path = Path(path)
    data_name = path.name + ".raw"
    header = {
        "shape": list(vol.shape),
        "spacing": [float(s) for s in vol.spacing],
        "origin": [float(o) for o in vol.origin],
        "dtype": "f32",
        "data": data_name,
    }
    with open(path.with_name(data_name), "wb") as fh:
        fh.write(np.ascontiguousarray(vol.values, dtype="<f4").tobytes(order="F"))
    write_json(path, header)
    return path


def read_vg1(path) -> Volume3D:
    """Read a VG1 volume; validates the header and the blob size."""
    path = Path(path)
    header = _load_json(path)
    for key in ("shape", "spacing", "origin", "dtype", "data"):
        if key not in header:
            raise FormatError(f"{path}: missing '{key}'")
    if header["dtype"] != "f32":
        raise FormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    shape = tuple(int(n) for n in header["shape"])
    if len(shape) != 3 or any(n <= 0 for n in shape):
        raise FormatError(f"{path}: bad shape {shape}")
    data_path = path.parent / header["data"]
    if not data_path.exists():
        raise FormatError(f"{path}: data file not found: {data_path}")
    raw = np.fromfile(data_path, dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise FormatError(
            f"{path}: data size {raw.size} does not match shape {shape}")
    values = raw.reshape(shape, order="F")
    try:
        return Volume3D(values, tuple(header["spacing"]), tuple(header["origin"]))
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_va1(path, vertebrae: list[VertebraKeypoints], extra: dict | None = None) -> Path:
    """Write annotations as VA1; ``extra`` top-level keys are merged in."""
    path = Path(path)
    doc = dict(extra or {})
    doc["vertebrae"] = [
        {
            "label": kps.label,
            "keypoints_mm": {
                key: [float(c) for c in pt]
                for key, pt in zip(KEYPOINT_KEYS, kps.as_array())
            },
        }
        for kps in vertebrae
    ]
    write_json(path, doc)
    return path


def read_va1(path) -> list[VertebraKeypoints]:
    """Read a VA1 annotation file into keypoint sets."""
    path = Path(path)
    doc = _load_json(path)
    if "vertebrae" not in doc or not isinstance(doc["vertebrae"], list):
        raise FormatError(f"{path}: missing 'vertebrae' list")
    out = []
    for i, entry in enumerate(doc["vertebrae"]):
        kp = entry.get("keypoints_mm")
        if not isinstance(kp, dict):
            raise FormatError(f"{path}: vertebra {i} lacks 'keypoints_mm'")
        try:
            pts = np.array([kp[key] for key in KEYPOINT_KEYS], dtype=float)
        except KeyError as exc:
            raise FormatError(f"{path}: vertebra {i} lacks keypoint {exc}") from exc
        if pts.shape != (6, 3) or not np.all(np.isfinite(pts)):
            raise FormatError(f"{path}: vertebra {i} has malformed keypoints")
        out.append(VertebraKeypoints.from_array(pts, label=entry.get("label")))
    return out
