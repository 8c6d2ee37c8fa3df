"""Linearized shape solve and the align/refine/solve iteration loop.

Each iteration re-aligns the current shape to dense-mesh anchor points with a
similarity transform, refines a rigid correction by Levenberg-Marquardt,
lifts the observed pixels to 3D targets using the aligned model's depth, and
solves a regularized linear system for new shape coefficients. The linear
solve runs in the canonical model frame (targets are mapped back through the
inverse alignment) so the eigenvalue prior keeps its statistical meaning
regardless of scene scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .camera import (
    DEPTH_EPS,
    PerspectiveCamera,
    RigidTransform,
    SimilarityTransform,
    compose_alignment,
    umeyama_fit,
)
from .errors import IllPosedSolveError, InvalidInputError, UnfittableSceneError
from .pose_refine import FrameObservations, LMSettings, PoseProblem, refine_pose
from .shape_model import HeadMesh, MorphableModel, synthesize

log = logging.getLogger(__name__)

MIN_FRAME_KEYPOINTS = 4


@dataclass
class SolveObservations:
    """Pixel observations of one frame, tied to model vertex indices."""

    camera: PerspectiveCamera
    keypoint_ids: list[str]
    vertex_indices: np.ndarray
    pixels: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.vertex_indices = np.asarray(self.vertex_indices, dtype=np.int64).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        n = len(self.vertex_indices)
        if len(self.pixels) != n or len(self.keypoint_ids) != n:
            raise InvalidInputError("ids, vertex indices and pixels must have equal length")
        if self.weights is None:
            self.weights = np.ones(n)
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if len(self.weights) != n:
                raise InvalidInputError("weights length mismatch")

    def merged_with(self, other: "SolveObservations") -> "SolveObservations":
        if other.camera is not self.camera and other.camera.frame_id != self.camera.frame_id:
            raise InvalidInputError("cannot merge observations of different frames")
        return SolveObservations(
            camera=self.camera,
            keypoint_ids=self.keypoint_ids + other.keypoint_ids,
            vertex_indices=np.concatenate([self.vertex_indices, other.vertex_indices]),
            pixels=np.vstack([self.pixels, other.pixels]),
            weights=np.concatenate([self.weights, other.weights]),
        )


@dataclass
class FittingContext:
    """Mutable state threaded through the fit iterations."""

    model: MorphableModel
    frames: list[SolveObservations]
    anchor_rows: np.ndarray       # model vertex indices used for re-alignment
    anchor_points: np.ndarray     # (n_anchors, 3) matching dense-mesh positions
    lam: float
    lm_settings: LMSettings = field(default_factory=LMSettings)
    similarity: SimilarityTransform = field(default_factory=SimilarityTransform.identity)
    rigid: RigidTransform = field(default_factory=RigidTransform.identity)
    alpha: np.ndarray = None
    eigenvalue_floor: float = 1e-8
    condition_limit: float = 1e10

    def __post_init__(self):
        self.anchor_rows = np.asarray(self.anchor_rows, dtype=np.int64).reshape(-1)
        self.anchor_points = np.asarray(self.anchor_points, dtype=np.float64).reshape(-1, 3)
        if len(self.anchor_rows) != len(self.anchor_points):
            raise InvalidInputError("anchor rows and points must pair up")
        if self.lam < 0.0:
            raise InvalidInputError(f"regularization weight must be >= 0, got {self.lam}")
        if self.alpha is None:
            self.alpha = np.zeros(self.model.num_components)
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        if self.alpha.shape[0] != self.model.num_components:
            raise InvalidInputError("alpha length does not match the model")


def backproject_keypoints(
    mesh: HeadMesh,
    frames: list[SolveObservations],
    alignment: SimilarityTransform,
):
    """Lift observed pixels to world-frame 3D targets at model depth.

    For each observation the depth is taken from the aligned model vertex it
    corresponds to, so a pixel perturbation moves the target parallel to the
    image plane at that depth.

    Returns:
        (targets, warnings): per-frame (K, 3) world arrays, None where the
        frame was dropped; warnings are dicts naming the frame and reason
        ("behind_camera" or "few_keypoints").
    """
    targets: list[np.ndarray | None] = []
    warnings: list[dict] = []
    for frame in frames:
        cam = frame.camera
        if len(frame.vertex_indices) < MIN_FRAME_KEYPOINTS:
            targets.append(None)
            warnings.append(
                {"frame_id": cam.frame_id, "reason": "few_keypoints",
                 "count": int(len(frame.vertex_indices))}
            )
            continue
        world = alignment.apply(mesh.vertices[frame.vertex_indices])
        p = cam.to_camera(world)
        z = p[:, 2]
        if np.any(z < DEPTH_EPS):
            k = int(np.argmax(z < DEPTH_EPS))
            targets.append(None)
            warnings.append(
                {"frame_id": cam.frame_id, "reason": "behind_camera",
                 "keypoint_id": frame.keypoint_ids[k]}
            )
            continue
        cam_pts = np.empty_like(world)
        cam_pts[:, 0] = (frame.pixels[:, 0] - cam.cx) * z / cam.fx
        cam_pts[:, 1] = (frame.pixels[:, 1] - cam.cy) * z / cam.fy
        cam_pts[:, 2] = z
        targets.append(cam.to_world(cam_pts))
    for warning in warnings:
        log.warning("frame %s dropped from solve: %s", warning["frame_id"], warning["reason"])
    return targets, warnings


@dataclass
class SolveInfo:
    condition: float
    num_observations: int
    frames_used: int
    warnings: list[dict] = field(default_factory=list)


def solve_shape_step(
    model: MorphableModel,
    frames: list[SolveObservations],
    targets: list[np.ndarray | None],
    alignment: SimilarityTransform,
    lam: float,
    eigenvalue_floor: float = 1e-8,
    condition_limit: float = 1e10,
) -> tuple[np.ndarray, SolveInfo]:
    """One regularized linear solve for the shape coefficients.

    Normal equations accumulate frame by frame in input order. Eigenvalues are
    clamped below at ``eigenvalue_floor`` times the largest before inversion;
    the condition number of the regularized system is estimated and logged
    when it exceeds ``condition_limit``.
    """
    n = model.num_components
    A = np.zeros((n, n))
    b = np.zeros(n)
    inverse = alignment.inverse()
    num_obs = 0
    frames_used = 0
    for frame, target in zip(frames, targets):
        if target is None:
            continue
        local = inverse.apply(target)
        rows = (3 * frame.vertex_indices[:, None] + np.arange(3)).reshape(-1)
        U = model.components[rows]
        mu = model.mean_shape[rows]
        w = np.repeat(frame.weights, 3)
        A += U.T @ (U * w[:, None])
        b += U.T @ (w * (local.reshape(-1) - mu))
        num_obs += len(frame.vertex_indices)
        frames_used += 1
    if num_obs == 0:
        raise UnfittableSceneError("no usable frames in shape solve")

    ev = np.maximum(model.eigenvalues, eigenvalue_floor * model.eigenvalues.max())
    system = A + lam * np.diag(1.0 / ev)
    condition = float(np.linalg.cond(system))
    if condition > condition_limit:
        log.warning("shape solve poorly conditioned: cond=%.3g", condition)
    try:
        alpha = cho_solve(cho_factor(system), b)
    except np.linalg.LinAlgError as exc:
        raise IllPosedSolveError(
            f"shape normal equations not SPD (cond={condition:.3g})", condition=condition
        ) from exc
    return alpha, SolveInfo(condition=condition, num_observations=num_obs,
                            frames_used=frames_used)


def _shape_objective(
    model: MorphableModel,
    mesh: HeadMesh,
    frames: list[SolveObservations],
    targets: list[np.ndarray | None],
    alignment: SimilarityTransform,
    alpha: np.ndarray,
    lam: float,
    eigenvalue_floor: float,
) -> float:
    """Regularized 3D objective in canonical units, for tracing."""
    inverse = alignment.inverse()
    total = 0.0
    for frame, target in zip(frames, targets):
        if target is None:
            continue
        d = mesh.vertices[frame.vertex_indices] - inverse.apply(target)
        total += float((frame.weights * (d * d).sum(axis=1)).sum())
    ev = np.maximum(model.eigenvalues, eigenvalue_floor * model.eigenvalues.max())
    return total + float(lam * (alpha * alpha / ev).sum())


def iterate_fit(
    context: FittingContext,
    n_iterations: int,
    extra_provider=None,
) -> list[dict]:
    """Run align / pose-refine / backproject / solve cycles.

    Args:
        context: updated in place; ``alpha``, ``similarity`` and ``rigid``
            hold the final state afterwards.
        n_iterations: number of full cycles.
        extra_provider: optional callable ``(mesh, similarity, rigid) ->
            list[SolveObservations | None]`` aligned with ``context.frames``,
            re-derived every iteration (used for scalp features).

    Returns:
        One trace dict per iteration with the pose objective, the regularized
        shape objective, the coefficient norm and any dropped-frame warnings.
    """
    if n_iterations < 1:
        raise InvalidInputError("n_iterations must be at least 1")
    trace = []
    for iteration in range(n_iterations):
        mesh = synthesize(context.model, context.alpha)
        context.similarity = _umeyama_from_anchors(context, mesh)

        frames = context.frames
        if extra_provider is not None:
            extras = extra_provider(mesh, context.similarity, context.rigid)
            frames = [
                f if e is None else f.merged_with(e) for f, e in zip(frames, extras)
            ]

        problem = PoseProblem(
            frames=[
                FrameObservations(
                    camera=f.camera,
                    keypoint_ids=f.keypoint_ids,
                    model_points=mesh.vertices[f.vertex_indices],
                    pixels=f.pixels,
                    weights=f.weights,
                )
                for f in frames
            ],
            base=context.similarity,
        )
        context.rigid, pose_report = refine_pose(
            problem, RigidTransform.identity(), context.lm_settings
        )

        alignment = compose_alignment(context.similarity, context.rigid)
        targets, warnings = backproject_keypoints(mesh, frames, alignment)
        context.alpha, info = solve_shape_step(
            context.model, frames, targets, alignment, context.lam,
            context.eigenvalue_floor, context.condition_limit,
        )
        new_mesh = synthesize(context.model, context.alpha)
        row = {
            "iteration": iteration,
            "pose_objective": pose_report.final_objective,
            "shape_objective": _shape_objective(
                context.model, new_mesh, frames, targets, alignment,
                context.alpha, context.lam, context.eigenvalue_floor,
            ),
            "alpha_norm": float(np.linalg.norm(context.alpha)),
            "num_observations": info.num_observations,
            "frames_used": info.frames_used,
            "condition": info.condition,
            "warnings": warnings,
        }
        trace.append(row)
    return trace


def _umeyama_from_anchors(context: FittingContext, mesh: HeadMesh) -> SimilarityTransform:
    return umeyama_fit(mesh.vertices[context.anchor_rows], context.anchor_points)
