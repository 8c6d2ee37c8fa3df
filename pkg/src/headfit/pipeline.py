"""Two-stage fitting pipeline.

Stage 1 fits shape and alignment to detector keypoints on frontal frames.
Stage 2 re-fits from scratch over a ring of sampled poses, reusing the
frontal result to predict facial landmarks on frames without detections and
adding silhouette scalp features that are re-derived every iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import (
    DEPTH_EPS,
    PerspectiveCamera,
    RigidTransform,
    SimilarityTransform,
    camera_head_angles,
    compose_alignment,
    project_points,
)
from .config import ProjectConfig
from .errors import InvalidInputError, UnfittableSceneError
from .shape_model import HeadMesh, MorphableModel, synthesize
from .shape_solver import FittingContext, SolveObservations, iterate_fit
from .silhouette import extract_scalp_features, filter_reconstruction, rasterize_silhouette

log = logging.getLogger(__name__)


@dataclass
class SceneInput:
    """A capture session: cameras, per-frame keypoints, dense reconstruction."""

    cameras: dict[str, PerspectiveCamera]
    keypoints: dict[str, dict[str, np.ndarray]]
    dense_mesh: HeadMesh
    frontal_frame_id: str
    _filtered: dict = field(default_factory=dict, repr=False, compare=False)
    _masks: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.frontal_frame_id not in self.cameras:
            raise InvalidInputError(
                f"frontal frame {self.frontal_frame_id!r} has no camera"
            )
        frontal_kps = self.keypoints.get(self.frontal_frame_id) or {}
        if len(frontal_kps) < 6:
            raise InvalidInputError(
                f"frontal frame {self.frontal_frame_id!r} has {len(frontal_kps)} "
                "keypoint(s), need at least 6"
            )
        for fid in self.keypoints:
            if fid not in self.cameras:
                raise InvalidInputError(f"keypoint frame {fid!r} has no camera")

    def filtered_mesh(self, edge_factor: float) -> HeadMesh:
        key = float(edge_factor)
        if key not in self._filtered:
            self._filtered[key] = filter_reconstruction(self.dense_mesh, edge_factor)
        return self._filtered[key]

    def silhouette(self, frame_id: str, edge_factor: float):
        key = (frame_id, float(edge_factor))
        if key not in self._masks:
            self._masks[key] = rasterize_silhouette(
                self.filtered_mesh(edge_factor), self.cameras[frame_id], frame_id
            )
        return self._masks[key]


@dataclass
class StageResult:
    alpha: np.ndarray
    similarity: SimilarityTransform
    rigid: RigidTransform
    trace: list[dict]
    frames: list[str]

    @property
    def alignment(self) -> SimilarityTransform:
        return compose_alignment(self.similarity, self.rigid)


@dataclass
class FitResult:
    """Everything a fit run produces besides the mesh files themselves."""

    alpha_frontal: np.ndarray
    alpha_final: np.ndarray
    stage1: StageResult
    stage2: StageResult
    fit_frames: list[str]
    held_out_frames: list[str]
    stage2_frames: list[str]
    frontal_frame_id: str
    pose_angles: dict[str, tuple[float, float]]
    config: ProjectConfig

    def mesh_mean(self, model: MorphableModel) -> HeadMesh:
        return synthesize(model, np.zeros(model.num_components))

    def mesh_frontal(self, model: MorphableModel) -> HeadMesh:
        return synthesize(model, self.alpha_frontal)

    def mesh_final(self, model: MorphableModel) -> HeadMesh:
        return synthesize(model, self.alpha_final)

    def to_dict(self) -> dict:
        def transform_dict(stage: StageResult) -> dict:
            return {
                "similarity": {
                    "scale": stage.similarity.scale,
                    "rotation": stage.similarity.rotation.reshape(-1).tolist(),
                    "translation": stage.similarity.translation.tolist(),
                },
                "rigid": {
                    "rotation": stage.rigid.rotation.reshape(-1).tolist(),
                    "translation": stage.rigid.translation.tolist(),
                },
            }

        return {
            "alpha_frontal": self.alpha_frontal.tolist(),
            "alpha_final": self.alpha_final.tolist(),
            "stage1": transform_dict(self.stage1),
            "stage2": transform_dict(self.stage2),
            "fit_frames": self.fit_frames,
            "held_out_frames": self.held_out_frames,
            "stage2_frames": self.stage2_frames,
            "frontal_frame_id": self.frontal_frame_id,
            "held_out_audit": sorted(
                set(self.held_out_frames) & set(self.stage2_frames + self.fit_frames)
            ),
            "pose_angles": {
                fid: [az, el] for fid, (az, el) in sorted(self.pose_angles.items())
            },
            "config": self.config.to_dict(),
        }


def select_frontal_frames(scene: SceneInput) -> tuple[list[str], list[str]]:
    """Split keypointed frames 50/50 by alternating their sorted order.

    Even positions (0th, 2nd, ...) go to the fit set, odd positions are held
    out for evaluation and never enter any solve.
    """
    frames = sorted(fid for fid, kps in scene.keypoints.items() if kps)
    if not frames:
        raise UnfittableSceneError("no frames with keypoints")
    fit = frames[0::2]
    held_out = frames[1::2]
    if not held_out:
        log.warning("only %d keypointed frame(s); held-out set is empty", len(frames))
    return fit, held_out


def _keypoint_observations(scene: SceneInput, model: MorphableModel,
                           frame_id: str,
                           restrict: set[str] | None = None) -> SolveObservations:
    """Detector keypoints of one frame as solver observations, ids sorted."""
    kps = scene.keypoints[frame_id]
    ids = sorted(kps if restrict is None else (set(kps) & restrict))
    return SolveObservations(
        camera=scene.cameras[frame_id],
        keypoint_ids=ids,
        vertex_indices=np.array([model.landmark_table[k] for k in ids], dtype=np.int64),
        pixels=np.array([kps[k] for k in ids], dtype=np.float64),
    )


def determine_mesh_anchors(
    scene: SceneInput, model: MorphableModel, edge_factor: float
) -> tuple[np.ndarray, np.ndarray]:
    """Locate the frontal-frame facial keypoints on the filtered dense mesh.

    Only facial landmarks are used: they face the frontal camera, so their
    nearest-projection dense vertex lies on the correct surface patch. For
    each one, the dense-mesh vertex whose projection lies nearest the
    observed pixel is picked; among vertices within half a pixel of that
    distance the one closest to the camera wins, which keeps back-of-head
    vertices from being selected.

    Returns:
        (model vertex indices, dense-mesh world positions), paired per id.
    """
    mesh = scene.filtered_mesh(edge_factor)
    camera = scene.cameras[scene.frontal_frame_id]
    uv, depth = project_points(camera, mesh.vertices)
    visible = depth >= DEPTH_EPS
    if not np.any(visible):
        raise UnfittableSceneError("dense mesh entirely behind the frontal camera")
    kps = scene.keypoints[scene.frontal_frame_id]
    facial = set(model.facial_landmark_ids())
    ids = sorted(k for k in kps if k in facial)
    if len(ids) < 3:
        raise UnfittableSceneError(
            f"frontal frame has {len(ids)} facial keypoints, need at least 3"
        )
    rows = []
    points = []
    for kid in ids:
        d = np.linalg.norm(uv - np.asarray(kps[kid], dtype=np.float64), axis=1)
        d[~visible] = np.inf
        near = d <= d.min() + 0.5
        candidates = np.flatnonzero(near)
        vi = int(candidates[np.argmin(depth[candidates])])
        rows.append(model.landmark_table[kid])
        points.append(mesh.vertices[vi])
    return np.asarray(rows, dtype=np.int64), np.asarray(points, dtype=np.float64)


def stage1_frontal_fit(
    scene: SceneInput, model: MorphableModel, config: ProjectConfig
) -> tuple[StageResult, list[str]]:
    """Fit shape and alignment to detector keypoints on the frontal fit half."""
    fit_frames, held_out = select_frontal_frames(scene)
    anchor_rows, anchor_points = determine_mesh_anchors(scene, model, config.edge_factor)
    facial = set(model.facial_landmark_ids())
    frames = [
        _keypoint_observations(scene, model, fid, restrict=facial)
        for fid in fit_frames
    ]
    context = FittingContext(
        model=model,
        frames=frames,
        anchor_rows=anchor_rows,
        anchor_points=anchor_points,
        lam=config.lam,
        lm_settings=config.lm,
    )
    trace = iterate_fit(context, config.iterations)
    for row in trace:
        row["stage"] = 1
    return (
        StageResult(
            alpha=context.alpha,
            similarity=context.similarity,
            rigid=context.rigid,
            trace=trace,
            frames=fit_frames,
        ),
        held_out,
    )


def _circular_distance(a: float, b: float) -> float:
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def sample_pose_ring(
    angles: dict[str, tuple[float, float]],
    azimuth_step: float,
    elevation_limit: float,
    exclude: set[str] = frozenset(),
) -> list[str]:
    """One frame per azimuth bin, nearest the bin center.

    Bins tile [0, 360) with the given step. A frame qualifies for a bin when
    its elevation magnitude is within the limit and its azimuth lies within
    half a step of the bin center. Empty bins are skipped; ties resolve to the
    lexicographically smaller frame id.

    Raises:
        UnfittableSceneError: every bin is empty.
    """
    n_bins = int(round(360.0 / azimuth_step))
    selected: list[str] = []
    for k in range(n_bins):
        center = (k + 0.5) * azimuth_step
        best = None
        for fid in sorted(angles):
            if fid in exclude:
                continue
            az, el = angles[fid]
            if abs(el) > elevation_limit:
                continue
            dist = _circular_distance(az, center)
            if dist <= azimuth_step / 2.0 and (best is None or dist < best[0]):
                best = (dist, fid)
        if best is not None and best[1] not in selected:
            selected.append(best[1])
    if not selected:
        raise UnfittableSceneError("no frames qualify for any azimuth bin")
    return selected


def compute_pose_angles(
    scene: SceneInput, alignment: SimilarityTransform, frontal_frame_id: str
) -> dict[str, tuple[float, float]]:
    """Azimuth/elevation per frame, with azimuth 0 at the frontal frame."""
    raw = {
        fid: camera_head_angles(cam, alignment) for fid, cam in scene.cameras.items()
    }
    offset = raw[frontal_frame_id][0]
    return {fid: ((az - offset) % 360.0, el) for fid, (az, el) in raw.items()}


def _estimated_observations(
    scene: SceneInput,
    model: MorphableModel,
    frame_id: str,
    mesh_frontal: HeadMesh,
    alignment: SimilarityTransform,
    vocabulary: list[str],
) -> SolveObservations | None:
    """Project frontal-fit landmarks into a frame lacking detections."""
    camera = scene.cameras[frame_id]
    rows = np.array([model.landmark_table[k] for k in vocabulary], dtype=np.int64)
    uv, depth = project_points(camera, alignment.apply(mesh_frontal.vertices[rows]))
    ok = depth >= DEPTH_EPS
    if not np.any(ok):
        return None
    return SolveObservations(
        camera=camera,
        keypoint_ids=[k for k, o in zip(vocabulary, ok) if o],
        vertex_indices=rows[ok],
        pixels=uv[ok],
    )


def stage2_allpose_fit(
    scene: SceneInput,
    model: MorphableModel,
    config: ProjectConfig,
    stage1: StageResult,
    held_out: list[str],
    frames_override: list[str] | None = None,
    use_scalp: bool = True,
) -> tuple[StageResult, dict[str, tuple[float, float]]]:
    """Re-fit over a ring of poses with scalp features, warm-started.

    Detector keypoints take precedence on frames that have them; other frames
    get landmark estimates projected from the stage-1 shape. Scalp features
    pair silhouette extrema with projected model extrema and are re-derived
    from the current alignment at the start of every iteration.
    """
    angles = compute_pose_angles(scene, stage1.alignment, scene.frontal_frame_id)
    if frames_override is None:
        sampled = sample_pose_ring(
            angles, config.azimuth_step, config.elevation_limit, exclude=set(held_out)
        )
    else:
        overlap = set(frames_override) & set(held_out)
        if overlap:
            raise InvalidInputError(f"held-out frames in stage-2 override: {sorted(overlap)}")
        sampled = list(frames_override)

    mesh_frontal = synthesize(model, stage1.alpha)
    vocabulary = model.facial_landmark_ids()
    frames: list[SolveObservations] = []
    frame_ids: list[str] = []
    for fid in sampled:
        if scene.keypoints.get(fid):
            obs = _keypoint_observations(scene, model, fid)
        else:
            obs = _estimated_observations(
                scene, model, fid, mesh_frontal, stage1.alignment, vocabulary
            )
        if obs is not None:
            frames.append(obs)
            frame_ids.append(fid)
    if not frames:
        raise UnfittableSceneError("stage 2 has no usable frames")

    anchor_rows, anchor_points = determine_mesh_anchors(scene, model, config.edge_factor)

    provider = None
    if use_scalp and config.scalp_weight > 0.0:
        masks = [scene.silhouette(fid, config.edge_factor) for fid in frame_ids]

        def provider(mesh, similarity, rigid):
            alignment = compose_alignment(similarity, rigid)
            extras = []
            for frame, mask in zip(frames, masks):
                feats = extract_scalp_features(
                    mesh, model, mask, frame.camera, alignment
                )
                if not feats:
                    extras.append(None)
                    continue
                extras.append(
                    SolveObservations(
                        camera=frame.camera,
                        keypoint_ids=[f"scalp:{f.direction}" for f in feats],
                        vertex_indices=np.array(
                            [f.vertex_index for f in feats], dtype=np.int64
                        ),
                        pixels=np.array([f.pixel for f in feats]),
                        weights=np.full(len(feats), config.scalp_weight),
                    )
                )
            return extras

    context = FittingContext(
        model=model,
        frames=frames,
        anchor_rows=anchor_rows,
        anchor_points=anchor_points,
        lam=config.lam,
        lm_settings=config.lm,
        alpha=stage1.alpha.copy(),
    )
    trace = iterate_fit(context, config.iterations, extra_provider=provider)
    for row in trace:
        row["stage"] = 2
    result = StageResult(
        alpha=context.alpha,
        similarity=context.similarity,
        rigid=context.rigid,
        trace=trace,
        frames=frame_ids,
    )
    return result, angles


def run_pipeline(
    scene: SceneInput, model: MorphableModel, config: ProjectConfig | None = None
) -> FitResult:
    """Run both stages and collect the result; fully deterministic."""
    config = config or ProjectConfig()
    stage1, held_out = stage1_frontal_fit(scene, model, config)
    stage2, angles = stage2_allpose_fit(scene, model, config, stage1, held_out)
    leaked = set(held_out) & (set(stage1.frames) | set(stage2.frames))
    if leaked:
        raise UnfittableSceneError(
            f"held-out frames leaked into a solve: {sorted(leaked)}"
        )
    final_angles = compute_pose_angles(scene, stage2.alignment, scene.frontal_frame_id)
    return FitResult(
        alpha_frontal=stage1.alpha,
        alpha_final=stage2.alpha,
        stage1=stage1,
        stage2=stage2,
        fit_frames=stage1.frames,
        held_out_frames=held_out,
        stage2_frames=stage2.frames,
        frontal_frame_id=scene.frontal_frame_id,
        pose_angles={fid: (az, el) for fid, (az, el) in final_angles.items()},
        config=config,
    )
