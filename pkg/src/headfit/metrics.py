"""Evaluation metrics: Chamfer distance, reprojection RMS, ratios, consistency.

Distances are computed on float64 vertex arrays. Normalized metrics divide by
the head width of the aligned mesh, measured between its left-most and
right-most top-region vertices, so reports stay comparable across capture
scales.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .camera import (
    DEPTH_EPS,
    PerspectiveCamera,
    SimilarityTransform,
    project,
    project_points,
    umeyama_fit,
)
from .errors import BehindCameraError, InvalidInputError
from .shape_model import HeadMesh, MorphableModel

# Reference head width used to express normalized distances in millimeters.
DEFAULT_HEAD_WIDTH_MM = 160.0

# Landmark ids starting with this prefix form the jawline subsets.
JAWLINE_PREFIX = "jaw"

REPROJECTION_SUBSETS = ("all", "no_jawline", "jawline_only")


@dataclass(frozen=True)
class MetricReport:
    """One scalar evaluation result with its units and sample count."""

    metric: str
    value: float
    units: str
    subset: str = "all"
    count: int = 0

    def __post_init__(self):
        if not self.metric:
            raise InvalidInputError("report needs a metric name")
        if not self.units:
            raise InvalidInputError(f"report {self.metric!r} declares no units")
        if int(self.count) <= 0:
            raise InvalidInputError(
                f"report {self.metric!r} needs a positive sample count, got {self.count}"
            )
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "count", int(self.count))

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "value": self.value,
            "units": self.units,
            "subset": self.subset,
            "count": self.count,
        }


def _vertices_of(obj) -> np.ndarray:
    verts = obj.vertices if isinstance(obj, HeadMesh) else obj
    verts = np.asarray(verts, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 3:
        raise InvalidInputError(f"expected (N, 3) vertices, got shape {verts.shape}")
    return verts


def aligned_head_width(vertices, top_region) -> float:
    """Distance between the left-most and right-most top-region vertices."""
    verts = _vertices_of(vertices)
    idx = np.asarray(top_region, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise InvalidInputError("head width needs a non-empty top region")
    if idx.min() < 0 or idx.max() >= len(verts):
        raise InvalidInputError("top region indexes outside the vertex array")
    top = verts[idx]
    width = float(np.linalg.norm(top[np.argmax(top[:, 0])] - top[np.argmin(top[:, 0])]))
    if width <= 0.0:
        raise InvalidInputError("aligned head width is zero")
    return width


def chamfer_scalp(
    fitted,
    reference,
    top_region,
    head_width_mm: float = DEFAULT_HEAD_WIDTH_MM,
    symmetric: bool = False,
) -> float:
    """Scalp-region Chamfer distance in millimeters of reference head width.

    Both vertex sets must live in the same (SfM world) coordinate frame. The
    mean distance from each top-region vertex of ``fitted`` to its nearest
    ``reference`` vertex is divided by the aligned head width and scaled to a
    reference head ``head_width_mm`` wide.

    With ``symmetric=True`` the reverse direction (every reference vertex to
    its nearest top-region vertex) is averaged in; pass a reference restricted
    to the head for that variant, since stray background geometry would
    dominate the reverse mean.

    Raises:
        InvalidInputError: empty reference or top region, or zero head width.
    """
    fitted_verts = _vertices_of(fitted)
    ref_verts = _vertices_of(reference)
    if ref_verts.shape[0] == 0:
        raise InvalidInputError("chamfer reference has no vertices")
    if head_width_mm <= 0.0:
        raise InvalidInputError(f"head_width_mm must be positive, got {head_width_mm}")
    width = aligned_head_width(fitted_verts, top_region)
    top = fitted_verts[np.asarray(top_region, dtype=np.int64).reshape(-1)]
    forward, _ = cKDTree(ref_verts).query(top)
    mean_dist = float(np.mean(forward))
    if symmetric:
        backward, _ = cKDTree(top).query(ref_verts)
        mean_dist = 0.5 * (mean_dist + float(np.mean(backward)))
    return mean_dist / width * head_width_mm


def _subset_ids(ids, subset: str) -> list[str]:
    if subset not in REPROJECTION_SUBSETS:
        raise InvalidInputError(
            f"unknown subset {subset!r}, expected one of {REPROJECTION_SUBSETS}"
        )
    if subset == "no_jawline":
        return [k for k in ids if not k.startswith(JAWLINE_PREFIX)]
    if subset == "jawline_only":
        return [k for k in ids if k.startswith(JAWLINE_PREFIX)]
    return list(ids)


def rms_reprojection(
    model: MorphableModel,
    mesh: HeadMesh,
    alignment: SimilarityTransform,
    cameras: dict[str, PerspectiveCamera],
    keypoints: dict[str, dict[str, np.ndarray]],
    subset: str = "all",
) -> float:
    """RMS pixel error between projected model landmarks and detections.

    ``keypoints`` holds the evaluation detections per frame (typically the
    held-out frames), keyed by landmark id. The fitted canonical mesh is
    mapped to world by ``alignment``, each observed landmark is projected into
    its frame, and the root mean square of the per-observation pixel norms is
    returned.

    Raises:
        InvalidInputError: unknown landmark id, missing camera, empty subset.
        BehindCameraError: a landmark falls behind an evaluating camera.
    """
    world = alignment.apply(mesh.vertices)
    sq_sum = 0.0
    count = 0
    for fid in sorted(keypoints):
        if fid not in cameras:
            raise InvalidInputError(f"keypoint frame {fid!r} has no camera")
        camera = cameras[fid]
        frame_kps = keypoints[fid]
        for kid in _subset_ids(sorted(frame_kps), subset):
            if kid not in model.landmark_table:
                raise InvalidInputError(f"keypoint id {kid!r} not in the landmark table")
            point = world[model.landmark_table[kid]]
            uv = project(camera, point, frame_id=fid, keypoint_id=kid)
            diff = uv - np.asarray(frame_kps[kid], dtype=np.float64).reshape(2)
            sq_sum += float(diff @ diff)
            count += 1
    if count == 0:
        raise InvalidInputError(f"subset {subset!r} has no observations")
    return float(np.sqrt(sq_sum / count))


def reprojection_observation_count(
    keypoints: dict[str, dict[str, np.ndarray]], subset: str = "all"
) -> int:
    """Number of (frame, keypoint) pairs a subset covers."""
    return sum(len(_subset_ids(kps, subset)) for kps in keypoints.values())


def _projected_extents(camera: PerspectiveCamera, verts: np.ndarray, what: str):
    uv, depth = project_points(camera, verts)
    if np.any(depth < DEPTH_EPS):
        raise BehindCameraError(
            f"{what} view: {int(np.sum(depth < DEPTH_EPS))} vertices behind the camera",
            frame_id=camera.frame_id,
        )
    extent_u = float(np.ptp(uv[:, 0]))
    extent_v = float(np.ptp(uv[:, 1]))
    if extent_u <= 0.0 or extent_v <= 0.0:
        raise InvalidInputError(f"{what} view: projected head has zero extent")
    return extent_u, extent_v


def anthropometric_ratios(
    mesh,
    portrait_camera: PerspectiveCamera,
    lateral_camera: PerspectiveCamera,
    alignment: SimilarityTransform | None = None,
) -> tuple[float, float]:
    """Projected head height/width and height/length.

    The portrait view supplies width (u extent) and height (v extent); the
    lateral view supplies length (u extent) and its own height. Pass
    ``alignment`` when the mesh is canonical and the cameras live in world
    coordinates.

    Raises:
        BehindCameraError: any vertex at non-positive depth in either view.
    """
    verts = _vertices_of(mesh)
    if alignment is not None:
        verts = alignment.apply(verts)
    width, height = _projected_extents(portrait_camera, verts, "portrait")
    length, height_lat = _projected_extents(lateral_camera, verts, "lateral")
    return height / width, height_lat / length


def vertex_displacement_consistency(
    model: MorphableModel,
    mesh_a: HeadMesh,
    mesh_b: HeadMesh,
    regions: dict[str, np.ndarray] | None = None,
) -> dict[str, float]:
    """Mean per-vertex displacement between two fits, as percent of head width.

    The meshes are aligned with a similarity transform over all vertices
    before measuring, so fits from different capture sessions compare
    directly. Both alignment directions are measured and averaged, which makes
    the metric symmetric in its arguments. Default regions are the whole head,
    the face region, and the scalp (top) region.

    Raises:
        InvalidInputError: vertex counts differ from each other or the model,
            or a requested region is empty.
    """
    va = _vertices_of(mesh_a)
    vb = _vertices_of(mesh_b)
    if va.shape != vb.shape or len(va) != model.num_vertices:
        raise InvalidInputError(
            f"topology mismatch: {len(va)} vs {len(vb)} vertices for a "
            f"{model.num_vertices}-vertex model"
        )
    if regions is None:
        regions = {
            "head": np.arange(model.num_vertices),
            "face": model.face_region,
            "scalp": model.top_region,
        }

    def one_way(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
        sim = umeyama_fit(src, dst)
        disp = np.linalg.norm(sim.apply(src) - dst, axis=1)
        return disp / aligned_head_width(dst, model.top_region) * 100.0

    percent = 0.5 * (one_way(vb, va) + one_way(va, vb))
    out = {}
    for name, indices in regions.items():
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size == 0:
            raise InvalidInputError(f"region {name!r} is empty")
        out[name] = float(np.mean(percent[idx]))
    return out
