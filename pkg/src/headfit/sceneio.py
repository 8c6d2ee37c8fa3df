"""Scene file loading, validation and result writing.

A capture scene on disk is a cameras JSON file, a directory of per-frame
keypoint JSON files, and a dense reconstruction mesh (PLY or OBJ). Loaders
validate everything before any object is constructed, so a scene is either
fully usable or rejected with a diagnostic naming the offending file.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .camera import (
    PerspectiveCamera,
    RigidTransform,
    SimilarityTransform,
    compose_alignment,
)
from .config import ProjectConfig
from .errors import FormatError, InvalidInputError, UnfittableSceneError
from .meshio import load_mesh, write_ply
from .pipeline import FitResult, SceneInput
from .shape_model import MorphableModel, synthesize
from .synth import SceneSpec, SyntheticScene

log = logging.getLogger(__name__)

_CAMERA_KEYS = {"frame_id", "fx", "fy", "cx", "cy", "R", "t", "width", "height"}
_POINT_KEYS = {"id", "u", "v"}

MANIFEST_NAME = "manifest.json"


def _read_json(path: Path):
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read: {exc}", path=str(path)) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(
            f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
            path=str(path),
        ) from exc


def _dump_json(data, path: Path) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _finite_float(value, what: str, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FormatError(f"{what} must be a number, got {value!r}", path=path)
    out = float(value)
    if not np.isfinite(out):
        raise FormatError(f"{what} must be finite, got {out}", path=path)
    return out


def load_cameras(path) -> dict[str, PerspectiveCamera]:
    """Read a cameras JSON list; every entry must validate.

    Each entry holds frame_id, fx, fy, cx, cy, R (row-major 9), t (3), width
    and height, with world-to-camera extrinsics. Reflections (det R = -1) and
    non-orthonormal rotations are rejected.
    """
    path = Path(path)
    data = _read_json(path)
    if not isinstance(data, list):
        raise FormatError("cameras file must be a JSON list", path=str(path))
    if not data:
        raise FormatError("cameras file lists no cameras", path=str(path))
    cameras: dict[str, PerspectiveCamera] = {}
    for i, entry in enumerate(data):
        where = f"camera entry {i}"
        if not isinstance(entry, dict):
            raise FormatError(f"{where}: expected an object", path=str(path))
        missing = _CAMERA_KEYS - set(entry)
        if missing:
            raise FormatError(
                f"{where}: missing keys {sorted(missing)}", path=str(path)
            )
        unknown = set(entry) - _CAMERA_KEYS
        if unknown:
            raise FormatError(
                f"{where}: unknown keys {sorted(unknown)}", path=str(path)
            )
        fid = entry["frame_id"]
        if not isinstance(fid, str) or not fid:
            raise FormatError(
                f"{where}: frame_id must be a non-empty string", path=str(path)
            )
        if fid in cameras:
            raise FormatError(f"duplicate frame id {fid!r}", path=str(path))
        where = f"camera {fid!r}"
        rot = np.asarray(entry["R"], dtype=np.float64).reshape(-1)
        if rot.shape != (9,):
            raise FormatError(
                f"{where}: R must hold 9 numbers, got {rot.shape[0]}", path=str(path)
            )
        trans = np.asarray(entry["t"], dtype=np.float64).reshape(-1)
        if trans.shape != (3,):
            raise FormatError(
                f"{where}: t must hold 3 numbers, got {trans.shape[0]}", path=str(path)
            )
        try:
            cameras[fid] = PerspectiveCamera(
                fx=_finite_float(entry["fx"], f"{where}: fx", str(path)),
                fy=_finite_float(entry["fy"], f"{where}: fy", str(path)),
                cx=_finite_float(entry["cx"], f"{where}: cx", str(path)),
                cy=_finite_float(entry["cy"], f"{where}: cy", str(path)),
                rotation=rot.reshape(3, 3),
                translation=trans,
                width=int(entry["width"]),
                height=int(entry["height"]),
                frame_id=fid,
            )
        except InvalidInputError as exc:
            raise FormatError(f"{where}: {exc}", path=str(path)) from exc
    return cameras


def _load_keypoint_file(path: Path, model: MorphableModel | None):
    data = _read_json(path)
    if not isinstance(data, dict):
        raise FormatError("keypoint file must be a JSON object", path=str(path))
    unknown = set(data) - {"frame_id", "points"}
    if unknown:
        raise FormatError(f"unknown keys {sorted(unknown)}", path=str(path))
    fid = data.get("frame_id")
    if not isinstance(fid, str) or not fid:
        raise FormatError("frame_id must be a non-empty string", path=str(path))
    points = data.get("points")
    if not isinstance(points, list):
        raise FormatError("points must be a JSON list", path=str(path))
    frame: dict[str, np.ndarray] = {}
    for i, pt in enumerate(points):
        where = f"point {i}"
        if not isinstance(pt, dict):
            raise FormatError(f"{where}: expected an object", path=str(path))
        missing = _POINT_KEYS - set(pt)
        if missing:
            raise FormatError(f"{where}: missing keys {sorted(missing)}", path=str(path))
        unknown = set(pt) - _POINT_KEYS
        if unknown:
            raise FormatError(f"{where}: unknown keys {sorted(unknown)}", path=str(path))
        kid = pt["id"]
        if not isinstance(kid, str) or not kid:
            raise FormatError(f"{where}: id must be a non-empty string", path=str(path))
        if kid in frame:
            raise FormatError(f"duplicate keypoint id {kid!r}", path=str(path))
        if model is not None and kid not in model.landmark_table:
            raise FormatError(
                f"keypoint id {kid!r} not in the model landmark table", path=str(path)
            )
        frame[kid] = np.array(
            [
                _finite_float(pt["u"], f"{where}: u", str(path)),
                _finite_float(pt["v"], f"{where}: v", str(path)),
            ]
        )
    return fid, frame


def load_keypoints(
    dir_path, model: MorphableModel | None = None
) -> dict[str, dict[str, np.ndarray]]:
    """Read every ``*.json`` file in a keypoint directory.

    Files are independent; each carries its own frame_id, so file names do
    not matter. When a model is given, every keypoint id must appear in its
    landmark table.
    """
    dir_path = Path(dir_path)
    if not dir_path.is_dir():
        raise FormatError("keypoint path is not a directory", path=str(dir_path))
    files = sorted(dir_path.glob("*.json"))
    if not files:
        raise FormatError("keypoint directory has no *.json files", path=str(dir_path))
    keypoints: dict[str, dict[str, np.ndarray]] = {}
    for file in files:
        fid, frame = _load_keypoint_file(file, model)
        if fid in keypoints:
            raise FormatError(f"frame {fid!r} appears in more than one file", path=str(file))
        keypoints[fid] = frame
    return keypoints


def load_config(path) -> ProjectConfig:
    """Read a run configuration JSON; unknown keys are rejected."""
    path = Path(path)
    data = _read_json(path)
    try:
        return ProjectConfig.from_dict(data)
    except FormatError as exc:
        if exc.path is None:
            raise FormatError(str(exc), path=str(path)) from exc
        raise


def select_frontal_frame(
    keypoints: dict[str, dict[str, np.ndarray]], model: MorphableModel
) -> str:
    """Pick the frame with the most facial keypoints, ties to the smallest id."""
    facial = set(model.facial_landmark_ids())
    best = None
    for fid in sorted(keypoints):
        n = len(facial & set(keypoints[fid]))
        if best is None or n > best[0]:
            best = (n, fid)
    if best is None or best[0] < 6:
        found = 0 if best is None else best[0]
        raise UnfittableSceneError(
            f"no usable frontal frame: best candidate has {found} facial "
            "keypoints, need at least 6"
        )
    return best[1]


def load_scene(
    cameras_path,
    keypoints_dir,
    mesh_path,
    model: MorphableModel,
    frontal: str | None = None,
) -> SceneInput:
    """Load and cross-validate a capture scene.

    All three inputs are read and checked against each other and the model
    before the scene object is constructed. ``frontal`` overrides the
    automatic frontal-frame choice.

    Raises:
        FormatError: a file fails to parse or cross-reference.
        UnfittableSceneError: inputs are well-formed but no frame qualifies
            as the frontal frame.
    """
    cameras = load_cameras(cameras_path)
    keypoints = load_keypoints(keypoints_dir, model)
    mesh = load_mesh(mesh_path)
    for fid in sorted(keypoints):
        if fid not in cameras:
            raise FormatError(
                f"keypoint frame {fid!r} has no camera", path=str(Path(cameras_path))
            )
    if frontal is None:
        frontal = select_frontal_frame(keypoints, model)
    else:
        if frontal not in cameras:
            raise UnfittableSceneError(f"frontal frame {frontal!r} has no camera")
        facial = set(model.facial_landmark_ids())
        n = len(facial & set(keypoints.get(frontal, {})))
        if n < 6:
            raise UnfittableSceneError(
                f"frontal frame {frontal!r} has {n} facial keypoints, need at least 6"
            )
    log.info(
        "scene: %d cameras, %d keypoint frames, %d mesh vertices, frontal %r",
        len(cameras), len(keypoints), mesh.num_vertices, frontal,
    )
    return SceneInput(
        cameras=cameras,
        keypoints=keypoints,
        dense_mesh=mesh,
        frontal_frame_id=frontal,
    )


def scene_spec_from_dict(data: dict) -> SceneSpec:
    """Build a SceneSpec from parsed JSON; unknown keys are rejected."""
    if not isinstance(data, dict):
        raise FormatError("scene spec must be a JSON object")
    known = {f.name for f in fields(SceneSpec)}
    unknown = set(data) - known
    if unknown:
        raise FormatError(f"unknown scene spec keys: {sorted(unknown)}")
    try:
        return SceneSpec(**data)
    except (TypeError, InvalidInputError) as exc:
        raise FormatError(f"invalid scene spec: {exc}") from exc


def _camera_entry(camera: PerspectiveCamera) -> dict:
    return {
        "frame_id": camera.frame_id,
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
        "R": camera.rotation.reshape(-1).tolist(),
        "t": camera.translation.tolist(),
        "width": camera.width,
        "height": camera.height,
    }


def save_scene(synthetic: SyntheticScene, out_dir) -> None:
    """Write a synthetic capture as a loadable scene directory.

    Layout: ``cameras.json``, ``keypoints/<frame>.json``, ``mesh.ply`` and a
    ``truth.json`` holding the ground-truth coefficients and placement.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = synthetic.scene
    _dump_json(
        [_camera_entry(scene.cameras[fid]) for fid in sorted(scene.cameras)],
        out_dir / "cameras.json",
    )
    kp_dir = out_dir / "keypoints"
    kp_dir.mkdir(exist_ok=True)
    for fid in sorted(scene.keypoints):
        points = [
            {"id": kid, "u": float(uv[0]), "v": float(uv[1])}
            for kid, uv in sorted(scene.keypoints[fid].items())
        ]
        _dump_json({"frame_id": fid, "points": points}, kp_dir / f"{fid}.json")
    write_ply(scene.dense_mesh, out_dir / "mesh.ply")
    truth = {
        "alpha_true": synthetic.alpha_true.tolist(),
        "world_from_model": {
            "scale": synthetic.world_from_model.scale,
            "rotation": synthetic.world_from_model.rotation.reshape(-1).tolist(),
            "translation": synthetic.world_from_model.translation.tolist(),
        },
        "seed": synthetic.seed,
        "spec": asdict(synthetic.spec),
        "frontal_frame_id": scene.frontal_frame_id,
    }
    _dump_json(truth, out_dir / "truth.json")


def _json_default(obj):
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_result(result: FitResult, model: MorphableModel, out_dir) -> dict:
    """Write fit outputs and return the content-hash manifest.

    Outputs: ``mean.ply``, ``front.ply``, ``final.ply`` (canonical meshes),
    ``result.json`` (coefficients, transforms, frame sets, config),
    ``trace.jsonl`` (one iteration record per line, stage 1 then stage 2) and
    ``manifest.json`` with a SHA-256 per output file. Identical fits produce
    byte-identical files and therefore identical manifests.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_ply(result.mesh_mean(model), out_dir / "mean.ply")
        write_ply(result.mesh_frontal(model), out_dir / "front.ply")
        write_ply(result.mesh_final(model), out_dir / "final.ply")
        _dump_json(result.to_dict(), out_dir / "result.json")
        with open(out_dir / "trace.jsonl", "w") as fh:
            for row in result.stage1.trace + result.stage2.trace:
                fh.write(json.dumps(row, sort_keys=True, default=_json_default) + "\n")
    except OSError as exc:
        raise FormatError(f"cannot write output: {exc}", path=str(out_dir)) from exc
    names = ["mean.ply", "front.ply", "final.ply", "result.json", "trace.jsonl"]
    manifest = {
        "algorithm": "sha256",
        "files": {name: _sha256(out_dir / name) for name in names},
    }
    _dump_json(manifest, out_dir / MANIFEST_NAME)
    return manifest


def load_result_dict(path) -> dict:
    """Read a ``result.json`` written by save_result."""
    path = Path(path)
    if path.is_dir():
        path = path / "result.json"
    data = _read_json(path)
    if not isinstance(data, dict) or "alpha_final" not in data:
        raise FormatError("not a fit result file", path=str(path))
    return data


def result_alignment(data: dict, stage: str) -> SimilarityTransform:
    """Model-to-world alignment of a saved stage ("stage1" or "stage2")."""
    if stage not in data:
        raise FormatError(f"result has no {stage!r} entry")
    entry = data[stage]
    try:
        sim = SimilarityTransform(
            scale=float(entry["similarity"]["scale"]),
            rotation=np.asarray(entry["similarity"]["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(entry["similarity"]["translation"], dtype=np.float64),
        )
        rigid = RigidTransform(
            rotation=np.asarray(entry["rigid"]["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(entry["rigid"]["translation"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError, InvalidInputError) as exc:
        raise FormatError(f"malformed {stage} transforms: {exc!r}") from exc
    return compose_alignment(sim, rigid)


def result_mesh(data: dict, model: MorphableModel, which: str):
    """Rebuild a canonical result mesh: "mean", "front" or "final"."""
    if which == "mean":
        alpha = np.zeros(model.num_components)
    elif which == "front":
        alpha = np.asarray(data["alpha_frontal"], dtype=np.float64)
    elif which == "final":
        alpha = np.asarray(data["alpha_final"], dtype=np.float64)
    else:
        raise InvalidInputError(f"unknown result mesh {which!r}")
    return synthesize(model, alpha)
