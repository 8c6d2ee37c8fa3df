"""Two-stage morphable head fitting from keypoints, poses and dense geometry.

Public names are re-exported lazily: the CLI must be able to export thread
caps before the numerics stack loads, so importing this package on its own
pulls in nothing heavy.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    # shape model
    "HeadMesh": ".shape_model",
    "MorphableModel": ".shape_model",
    "synthesize": ".shape_model",
    "sample_random_shape": ".shape_model",
    "shape_distance": ".shape_model",
    "param_cosine_similarity": ".shape_model",
    "model_head_width": ".shape_model",
    "landmark_positions": ".shape_model",
    # cameras and transforms
    "PerspectiveCamera": ".camera",
    "RigidTransform": ".camera",
    "SimilarityTransform": ".camera",
    "umeyama_fit": ".camera",
    "project": ".camera",
    "project_points": ".camera",
    "backproject": ".camera",
    "compose_alignment": ".camera",
    "camera_head_angles": ".camera",
    # errors
    "HeadFitError": ".errors",
    "InvalidInputError": ".errors",
    "BehindCameraError": ".errors",
    "DegenerateGeometryError": ".errors",
    "IllPosedSolveError": ".errors",
    "OverFilteredError": ".errors",
    "UnfittableSceneError": ".errors",
    "FormatError": ".errors",
    # pose refinement
    "LMSettings": ".pose_refine",
    "PoseProblem": ".pose_refine",
    "FrameObservations": ".pose_refine",
    "ConvergenceReport": ".pose_refine",
    "refine_pose": ".pose_refine",
    "pose_objective": ".pose_refine",
    "pose_jacobian": ".pose_refine",
    # shape solving
    "SolveObservations": ".shape_solver",
    "FittingContext": ".shape_solver",
    "iterate_fit": ".shape_solver",
    "solve_shape_step": ".shape_solver",
    "backproject_keypoints": ".shape_solver",
    # silhouettes
    "SilhouetteMask": ".silhouette",
    "ScalpCorrespondence": ".silhouette",
    "filter_reconstruction": ".silhouette",
    "rasterize_silhouette": ".silhouette",
    "model_scalp_extrema": ".silhouette",
    "silhouette_scalp_extrema": ".silhouette",
    "extract_scalp_features": ".silhouette",
    # pipeline
    "SceneInput": ".pipeline",
    "StageResult": ".pipeline",
    "FitResult": ".pipeline",
    "run_pipeline": ".pipeline",
    "stage1_frontal_fit": ".pipeline",
    "stage2_allpose_fit": ".pipeline",
    "select_frontal_frames": ".pipeline",
    "sample_pose_ring": ".pipeline",
    "compute_pose_angles": ".pipeline",
    # synthetic scenes and sweeps
    "SceneSpec": ".synth",
    "SyntheticScene": ".synth",
    "generate_scene": ".synth",
    "lambda_sweep": ".synth",
    "sample_scene_shape": ".synth",
    "scalp_benchmark_spec": ".synth",
    "DEFAULT_LAMBDAS": ".synth",
    # synthetic model
    "build_synthetic_head_model": ".synthetic_model",
    "max_components": ".synthetic_model",
    # metrics
    "MetricReport": ".metrics",
    "chamfer_scalp": ".metrics",
    "rms_reprojection": ".metrics",
    "anthropometric_ratios": ".metrics",
    "vertex_displacement_consistency": ".metrics",
    "aligned_head_width": ".metrics",
    # configuration and IO
    "ProjectConfig": ".config",
    "save_model": ".archive",
    "load_model": ".archive",
    "write_ply": ".meshio",
    "read_ply": ".meshio",
    "read_obj": ".meshio",
    "load_mesh": ".meshio",
    "write_pgm": ".meshio",
    "load_scene": ".sceneio",
    "load_cameras": ".sceneio",
    "load_keypoints": ".sceneio",
    "load_config": ".sceneio",
    "select_frontal_frame": ".sceneio",
    "save_scene": ".sceneio",
    "save_result": ".sceneio",
    "load_result_dict": ".sceneio",
    "result_alignment": ".sceneio",
    "result_mesh": ".sceneio",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        value = getattr(import_module(_EXPORTS[name], __name__), name)
        globals()[name] = value
        return value
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
