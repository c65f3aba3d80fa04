"""JSON file formats: observations, ray databases, camera files, reports, configs.

One human-readable JSON format covers everything except benchmark output,
which is CSV.  World coordinates are millimetres and image coordinates are
pixels throughout; every file carries a schema version.  Writing is
deterministic (sorted keys, shortest-roundtrip floats), so identical data
produces byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import __version__
from .core_geom import (
    CameraIntrinsics,
    Distortion,
    ImagePoints,
    ObservationSet,
    PlanarTarget,
    Rotation,
)
from .single_calib import RayDatabase
from .synth import SyntheticConfig, TargetGrid

SCHEMA_VERSION = 1


class FileFormatError(ValueError):
    """Malformed or semantically invalid input file."""


@dataclass(frozen=True)
class GroundTruth:
    intrinsics: CameraIntrinsics
    distortion: Distortion
    t_cp: np.ndarray
    rotations: tuple  # per-image axis-angle vectors


@dataclass(frozen=True)
class ObservationFile:
    observations: ObservationSet
    image_names: tuple
    image_size: tuple | None
    ground_truth: GroundTruth | None


def _dump(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON at line {exc.lineno}, "
                              f"column {exc.colno}: {exc.msg}") from exc


def _require(payload, key, path):
    if key not in payload:
        raise FileFormatError(f"{path}: missing required key '{key}'")
    return payload[key]


def _check_schema(payload, path) -> None:
    version = _require(payload, "schema_version", path)
    if version != SCHEMA_VERSION:
        raise FileFormatError(f"{path}: unsupported schema version {version!r}")


def _intrinsics_payload(intr: CameraIntrinsics) -> dict:
    return {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
            "gamma": intr.gamma}


def _intrinsics_from(payload, path) -> CameraIntrinsics:
    try:
        return CameraIntrinsics(fx=float(payload["fx"]), fy=float(payload["fy"]),
                                cx=float(payload["cx"]), cy=float(payload["cy"]),
                                gamma=float(payload.get("gamma", 0.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"{path}: bad intrinsics block: {exc}") from exc


# ---------------------------------------------------------------------------
# observation files
# ---------------------------------------------------------------------------

def write_observation_file(path, observations: ObservationSet, *,
                           image_names=None, image_size=None,
                           ground_truth: GroundTruth | None = None) -> None:
    names = list(image_names) if image_names is not None else [
        f"image_{k:03d}" for k in range(len(observations))]
    if len(names) != len(observations):
        raise ValueError("image_names length must match the image count")
    payload = {
        "schema_version": SCHEMA_VERSION,
        "units": {"world": "mm", "image": "pixel"},
        "target": {"points": [[int(i), float(x), float(y)]
                              for i, (x, y) in zip(observations.target.ids,
                                                   observations.target.xy)]},
        "images": [{"name": name,
                    "points": [[int(i), float(u), float(v)]
                               for i, (u, v) in zip(im.ids, im.uv)]}
                   for name, im in zip(names, observations.images)],
    }
    if image_size is not None:
        payload["image_size"] = [int(image_size[0]), int(image_size[1])]
    if ground_truth is not None:
        payload["ground_truth"] = {
            "intrinsics": _intrinsics_payload(ground_truth.intrinsics),
            "distortion": [ground_truth.distortion.d1, ground_truth.distortion.d2],
            "t_cp": [float(v) for v in ground_truth.t_cp],
            "rotations_axis_angle": [[float(v) for v in aa]
                                     for aa in ground_truth.rotations],
        }
    _dump(path, payload)


def read_observation_file(path) -> ObservationFile:
    payload = _load(path)
    _check_schema(payload, path)
    target_block = _require(payload, "target", path)
    points = _require(target_block, "points", path)
    try:
        target = PlanarTarget(ids=[int(p[0]) for p in points],
                              xy=[[float(p[1]), float(p[2])] for p in points])
    except (ValueError, TypeError, IndexError) as exc:
        raise FileFormatError(f"{path}: bad target block: {exc}") from exc

    images, names = [], []
    for k, block in enumerate(_require(payload, "images", path)):
        names.append(str(block.get("name", f"image_{k:03d}")))
        pts = _require(block, "points", path)
        try:
            images.append(ImagePoints(ids=[int(p[0]) for p in pts],
                                      uv=[[float(p[1]), float(p[2])] for p in pts]))
        except (ValueError, TypeError, IndexError) as exc:
            raise FileFormatError(f"{path}: bad points in image {k}: {exc}") from exc
    try:
        observations = ObservationSet(target=target, images=tuple(images))
    except (ValueError, TypeError) as exc:
        raise FileFormatError(f"{path}: {exc}") from exc

    image_size = None
    if "image_size" in payload:
        image_size = (int(payload["image_size"][0]), int(payload["image_size"][1]))

    ground_truth = None
    if "ground_truth" in payload:
        block = payload["ground_truth"]
        d = block.get("distortion", [0.0, 0.0])
        ground_truth = GroundTruth(
            intrinsics=_intrinsics_from(_require(block, "intrinsics", path), path),
            distortion=Distortion(float(d[0]), float(d[1])),
            t_cp=np.array([float(v) for v in _require(block, "t_cp", path)]),
            rotations=tuple(np.array([float(v) for v in aa])
                            for aa in block.get("rotations_axis_angle", [])))
    return ObservationFile(observations=observations, image_names=tuple(names),
                           image_size=image_size, ground_truth=ground_truth)


# ---------------------------------------------------------------------------
# camera and ray-database files
# ---------------------------------------------------------------------------

def write_camera_file(path, intrinsics: CameraIntrinsics, distortion: Distortion) -> None:
    _dump(path, {"schema_version": SCHEMA_VERSION,
                 "intrinsics": _intrinsics_payload(intrinsics),
                 "distortion": [distortion.d1, distortion.d2]})


def read_camera_file(path):
    payload = _load(path)
    _check_schema(payload, path)
    intr = _intrinsics_from(_require(payload, "intrinsics", path), path)
    d = payload.get("distortion", [0.0, 0.0])
    if not isinstance(d, list) or len(d) != 2:
        raise FileFormatError(f"{path}: distortion must be a two-element list")
    return intr, Distortion(float(d[0]), float(d[1]))


def write_ray_database(path, database: RayDatabase) -> None:
    _dump(path, {
        "schema_version": SCHEMA_VERSION,
        "provenance": {
            "intrinsics": _intrinsics_payload(database.ref_intrinsics),
            "distortion": [database.ref_distortion.d1, database.ref_distortion.d2],
        },
        "rays": [[int(i), float(x), float(y), float(z)]
                 for i, (x, y, z) in zip(database.ids, database.rays)],
    })


def read_ray_database(path) -> RayDatabase:
    payload = _load(path)
    _check_schema(payload, path)
    provenance = _require(payload, "provenance", path)
    intr = _intrinsics_from(_require(provenance, "intrinsics", path), path)
    d = provenance.get("distortion", [0.0, 0.0])
    rays = _require(payload, "rays", path)
    try:
        return RayDatabase(ids=[int(r[0]) for r in rays],
                           rays=[[float(r[1]), float(r[2]), float(r[3])] for r in rays],
                           ref_intrinsics=intr,
                           ref_distortion=Distortion(float(d[0]), float(d[1])))
    except (ValueError, TypeError, IndexError) as exc:
        raise FileFormatError(f"{path}: bad ray database: {exc}") from exc


# ---------------------------------------------------------------------------
# synthetic configuration files
# ---------------------------------------------------------------------------

def read_synthetic_config(path) -> SyntheticConfig:
    payload = _load(path)
    _check_schema(payload, path)
    kwargs = {}
    if "intrinsics" in payload:
        kwargs["intrinsics"] = _intrinsics_from(payload["intrinsics"], path)
    if "distortion" in payload:
        d = payload["distortion"]
        kwargs["distortion"] = Distortion(float(d[0]), float(d[1]))
    if "image_size" in payload:
        kwargs["image_size"] = (int(payload["image_size"][0]),
                                int(payload["image_size"][1]))
    if "target" in payload:
        t = payload["target"]
        kwargs["target"] = TargetGrid(rows=int(t.get("rows", 8)),
                                      cols=int(t.get("cols", 11)),
                                      spacing=float(t.get("spacing_mm", 30.0)))
    if "target_offset" in payload:
        kwargs["target_offset"] = (float(payload["target_offset"][0]),
                                   float(payload["target_offset"][1]))
    for key in ("radius", "pixel_noise_sigma", "spherical_noise_sigma"):
        if key in payload:
            kwargs[key] = float(payload[key])
    for key in ("image_count", "trial_count", "rng_seed"):
        if key in payload:
            kwargs[key] = int(payload[key])
    try:
        return SyntheticConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        raise FileFormatError(f"{path}: invalid configuration: {exc}") from exc


def read_sweep_values(path, sweep: str):
    payload = _load(path)
    custom = payload.get("sweep_values", {})
    if sweep in custom:
        return [float(v) for v in custom[sweep]]
    defaults = {
        "noise": [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
        "images": [3, 5, 10, 15, 20, 25, 30],
        "spherical": [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
    }
    return defaults[sweep]


# ---------------------------------------------------------------------------
# calibration reports
# ---------------------------------------------------------------------------

def rotation_payload(rot: Rotation):
    return [float(v) for v in rot.axis_angle()]


def write_report(path, report: dict) -> None:
    payload = dict(report)
    payload["schema_version"] = SCHEMA_VERSION
    payload["tool_version"] = __version__
    _dump(path, payload)
