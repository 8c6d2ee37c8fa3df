"""Rigid pose correction by Levenberg-Marquardt on pixel reprojection error.

The optimized transform acts in world space on top of a fixed similarity
alignment: a model point X lands at ``rigid(similarity(X))`` before being
projected. Parameters are a 6-vector (axis-angle rotation, translation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import (
    DEPTH_EPS,
    PerspectiveCamera,
    RigidTransform,
    SimilarityTransform,
    axis_angle_to_matrix,
    so3_right_jacobian,
)
from .errors import BehindCameraError, InvalidInputError


@dataclass
class FrameObservations:
    """Keypoint observations of one frame, paired with canonical model points."""

    camera: PerspectiveCamera
    keypoint_ids: list[str]
    model_points: np.ndarray
    pixels: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.model_points = np.asarray(self.model_points, dtype=np.float64).reshape(-1, 3)
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        n = len(self.model_points)
        if len(self.pixels) != n or len(self.keypoint_ids) != n:
            raise InvalidInputError("ids, model points and pixels must have equal length")
        if self.weights is None:
            self.weights = np.ones(n)
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if len(self.weights) != n:
                raise InvalidInputError("weights length mismatch")
            if np.any(self.weights < 0.0):
                raise InvalidInputError("weights must be non-negative")


@dataclass
class PoseProblem:
    """All observations entering one rigid refinement."""

    frames: list[FrameObservations]
    base: SimilarityTransform

    def __post_init__(self):
        if not self.frames or all(len(f.pixels) == 0 for f in self.frames):
            raise InvalidInputError("pose problem has no observations")

    def num_residuals(self) -> int:
        return 2 * sum(len(f.pixels) for f in self.frames)


@dataclass
class LMSettings:
    max_iterations: int = 100
    initial_damping: float = 1e-3
    damping_increase: float = 10.0
    damping_decrease: float = 10.0
    gradient_tolerance: float = 1e-10
    step_tolerance: float = 1e-12
    jacobian: str = "fd"  # "fd" (central differences) or "analytic"
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.jacobian not in ("fd", "analytic"):
            raise InvalidInputError(f"unknown jacobian mode {self.jacobian!r}")


@dataclass
class ConvergenceReport:
    iterations: int
    initial_objective: float
    final_objective: float
    termination: str
    objectives: list[float] = field(default_factory=list)
    gradient_norm: float = float("nan")


class _PackedProblem:
    """Observations of all frames flattened into row arrays.

    The similarity base is applied to the model points once here; residual and
    Jacobian evaluations then run as single vectorized passes over all rows.
    Row order is frame order, so packed results match per-frame concatenation.
    """

    def __init__(self, problem: PoseProblem):
        frames = problem.frames
        counts = [len(f.pixels) for f in frames]
        self.frames = frames
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        self.fidx = np.repeat(np.arange(len(frames)), counts)
        self.q = np.concatenate(
            [problem.base.apply(f.model_points) for f in frames]
        ).reshape(-1, 3)
        self.pixels = np.concatenate([f.pixels for f in frames]).reshape(-1, 2)
        self.sqrt_w = np.concatenate([np.sqrt(f.weights) for f in frames])
        self.cam_rot = np.stack([f.camera.rotation for f in frames])
        self.cam_trans = np.stack([f.camera.translation for f in frames])
        intrinsics = np.array(
            [[f.camera.fx, f.camera.fy, f.camera.cx, f.camera.cy] for f in frames]
        )
        self.fx, self.fy, self.cx, self.cy = intrinsics[self.fidx].T

    def _raise_behind(self, z: np.ndarray, bad: np.ndarray, check: bool):
        if not check:
            raise BehindCameraError("behind camera during trial step")
        k = int(np.argmax(bad))
        f = int(self.fidx[k])
        frame = self.frames[f]
        kp = frame.keypoint_ids[k - int(self.offsets[f])]
        raise BehindCameraError(
            f"keypoint {kp!r} at depth {z[k]:.3g} in frame "
            f"{frame.camera.frame_id!r}",
            frame_id=frame.camera.frame_id,
            keypoint_id=kp,
        )

    def residuals(self, params: np.ndarray, check: bool):
        """Weighted pixel residuals (flat) plus camera-frame points."""
        rotation = axis_angle_to_matrix(params[:3])
        # einsum keeps reductions off BLAS so results do not vary with threads
        A = np.einsum("fab,bc->fac", self.cam_rot, rotation)
        b = np.einsum("fab,b->fa", self.cam_rot, params[3:]) + self.cam_trans
        p = np.einsum("nab,nb->na", A[self.fidx], self.q) + b[self.fidx]
        z = p[:, 2]
        bad = z < DEPTH_EPS
        if np.any(bad):
            self._raise_behind(z, bad, check)
        uv = np.empty_like(self.pixels)
        uv[:, 0] = self.fx * p[:, 0] / z + self.cx
        uv[:, 1] = self.fy * p[:, 1] / z + self.cy
        res = (uv - self.pixels) * self.sqrt_w[:, None]
        return res.reshape(-1), p

    def fd_jacobian(self, params: np.ndarray, step: float):
        res0, _ = self.residuals(params, True)
        J = np.empty((res0.size, 6))
        for i in range(6):
            h = step * max(1.0, abs(params[i]))
            lo = params.copy()
            hi = params.copy()
            lo[i] -= h
            hi[i] += h
            J[:, i] = (self.residuals(hi, False)[0] - self.residuals(lo, False)[0]) / (
                2.0 * h
            )
        return res0, J

    def analytic_jacobian(self, params: np.ndarray):
        w = params[:3]
        rotation = axis_angle_to_matrix(w)
        jr = so3_right_jacobian(w)
        res, p = self.residuals(params, True)
        z = p[:, 2]
        n = len(self.q)
        duv = np.zeros((n, 2, 3))
        duv[:, 0, 0] = self.fx / z
        duv[:, 0, 2] = -self.fx * p[:, 0] / (z * z)
        duv[:, 1, 1] = self.fy / z
        duv[:, 1, 2] = -self.fy * p[:, 1] / (z * z)
        duv *= self.sqrt_w[:, None, None]
        # d(R(w) q)/dw = -R(w) [q]x Jr(w); premultiplied by the camera rotation
        hats = np.zeros((n, 3, 3))
        hats[:, 0, 1] = -self.q[:, 2]
        hats[:, 0, 2] = self.q[:, 1]
        hats[:, 1, 0] = self.q[:, 2]
        hats[:, 1, 2] = -self.q[:, 0]
        hats[:, 2, 0] = -self.q[:, 1]
        hats[:, 2, 1] = self.q[:, 0]
        CR = np.einsum("fab,bc->fac", self.cam_rot, rotation)
        dpc_dw = np.einsum("nab,nbc->nac", -CR[self.fidx], hats) @ jr
        jw = np.einsum("nab,nbc->nac", duv, dpc_dw)
        jt = np.einsum("nab,nbc->nac", duv, self.cam_rot[self.fidx])
        J = np.concatenate([jw, jt], axis=2).reshape(-1, 6)
        return res, J

    def jacobian(self, params: np.ndarray, settings: LMSettings):
        if settings.jacobian == "analytic":
            return self.analytic_jacobian(params)
        return self.fd_jacobian(params, settings.fd_step)


def _residual_vector(problem: PoseProblem, params: np.ndarray, check: bool = True) -> np.ndarray:
    return _PackedProblem(problem).residuals(params, check)[0]


def pose_objective(problem: PoseProblem, rigid: RigidTransform) -> float:
    """Sum of weighted squared pixel reprojection errors.

    Raises:
        BehindCameraError: some transformed keypoint has non-positive depth;
            the error names the frame and keypoint.
    """
    r = _residual_vector(problem, rigid.params(), check=True)
    return float(r @ r)


def pose_jacobian(problem: PoseProblem, rigid: RigidTransform,
                  mode: str = "fd", fd_step: float = 1e-6) -> np.ndarray:
    """Stacked residual Jacobian at the given pose, for either backend."""
    packed = _PackedProblem(problem)
    if mode == "analytic":
        return packed.analytic_jacobian(rigid.params())[1]
    if mode == "fd":
        return packed.fd_jacobian(rigid.params(), fd_step)[1]
    raise InvalidInputError(f"unknown jacobian mode {mode!r}")


def refine_pose(
    problem: PoseProblem,
    initial: RigidTransform | None = None,
    settings: LMSettings | None = None,
) -> tuple[RigidTransform, ConvergenceReport]:
    """Minimize the reprojection objective over the rigid correction.

    Accepted steps never increase the objective; a trial step that pushes any
    keypoint behind a camera counts as infinitely bad and is rejected. Normal
    equations are reduced with einsum in fixed row order, so results do not
    depend on BLAS thread count.

    Returns:
        The refined transform and a convergence report whose ``objectives``
        lists the accepted objective values (monotone non-increasing).
    """
    settings = settings or LMSettings()
    params = (initial or RigidTransform.identity()).params()
    packed = _PackedProblem(problem)

    r, _ = packed.residuals(params, True)
    objective = float(r @ r)
    report = ConvergenceReport(
        iterations=0,
        initial_objective=objective,
        final_objective=objective,
        termination="max_iterations",
        objectives=[objective],
    )
    damping = settings.initial_damping
    for it in range(settings.max_iterations):
        res, J = packed.jacobian(params, settings)
        H = np.einsum("ni,nj->ij", J, J)
        g = np.einsum("ni,n->i", J, res)
        report.gradient_norm = float(np.abs(g).max())
        report.iterations = it
        if report.gradient_norm < settings.gradient_tolerance:
            report.termination = "gradient"
            break

        accepted = False
        step = np.zeros(6)
        while damping < 1e16:
            try:
                step = np.linalg.solve(H + damping * np.eye(6), -g)
                trial = params + step
                rt, _ = packed.residuals(trial, False)
                trial_objective = float(rt @ rt)
            except (np.linalg.LinAlgError, BehindCameraError):
                trial_objective = np.inf
            if trial_objective < objective:
                params = trial
                objective = trial_objective
                damping = max(damping / settings.damping_decrease, 1e-15)
                accepted = True
                report.objectives.append(objective)
                break
            damping *= settings.damping_increase
        if not accepted:
            report.termination = "stalled"
            break
        report.iterations = it + 1
        if np.linalg.norm(step) < settings.step_tolerance * (
            np.linalg.norm(params) + settings.step_tolerance
        ):
            report.termination = "step_size"
            break

    report.final_objective = objective
    return RigidTransform.from_params(params), report
