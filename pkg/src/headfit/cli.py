"""Command line entry point.

Subcommands: fit, synth, sweep, eval, validate, model-build. Exit codes are
0 on success, 2 when the scene cannot be fitted, 3 on IO or format errors.
The HEADFIT_LOG environment variable sets the log level name.

Heavy imports happen inside the handlers: thread caps requested with
``--threads`` must be exported before the numerics libraries initialize
their pools, so this module keeps its import-time footprint stdlib-only.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger(__name__)

_THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _setup_logging() -> None:
    level_name = os.environ.get("HEADFIT_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _apply_thread_cap(threads: int | None) -> None:
    if threads is None:
        return
    for var in _THREAD_ENV_VARS:
        os.environ[var] = str(threads)


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master random seed")
    common.add_argument(
        "--threads", type=int, default=None,
        help="cap numeric library thread pools (results do not depend on it)",
    )
    common.add_argument("--config", default=None, help="run configuration JSON")
    return common


def _resolve_config(args):
    from .config import ProjectConfig
    from .sceneio import load_config

    config = load_config(args.config) if args.config else ProjectConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    return config.replace(**overrides) if overrides else config


def _load_model(path):
    from .archive import load_model

    return load_model(path)


def _write_reports(reports, out_prefix) -> None:
    rows = [r.to_dict() for r in reports]
    print(json.dumps(rows, indent=2))
    if out_prefix is None:
        return
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    prefix.with_suffix(".json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    with open(prefix.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["metric", "value", "units", "subset", "count"])
        writer.writeheader()
        writer.writerows(rows)


def cmd_model_build(args) -> int:
    from .archive import save_model
    from .synthetic_model import build_synthetic_head_model

    model = build_synthetic_head_model(
        num_components=args.components,
        lat_rings=args.lat_rings,
        lon_segments=args.lon_segments,
        name=args.name,
    )
    save_model(model, args.out)
    print(
        f"wrote {args.out}: {model.num_vertices} vertices, "
        f"{model.num_components} components, {len(model.landmark_table)} landmarks"
    )
    return 0


def cmd_validate(args) -> int:
    from .sceneio import load_scene

    model = _load_model(args.model)
    print(
        f"model ok: {model.name!r}, {model.num_vertices} vertices, "
        f"{model.num_components} components, {len(model.landmark_table)} landmarks"
    )
    scene_flags = (args.cameras, args.keypoints, args.mesh)
    if any(v is not None for v in scene_flags):
        if None in scene_flags:
            raise SystemExit("validate: --cameras, --keypoints and --mesh go together")
        scene = load_scene(args.cameras, args.keypoints, args.mesh, model,
                           frontal=args.frontal)
        print(
            f"scene ok: {len(scene.cameras)} cameras, {len(scene.keypoints)} "
            f"keypoint frames, {scene.dense_mesh.num_vertices} mesh vertices, "
            f"frontal {scene.frontal_frame_id!r}"
        )
    return 0


def cmd_fit(args) -> int:
    from .meshio import write_pgm
    from .pipeline import run_pipeline
    from .sceneio import load_scene, save_result

    model = _load_model(args.model)
    config = _resolve_config(args)
    scene = load_scene(args.cameras, args.keypoints, args.mesh, model,
                       frontal=args.frontal)
    result = run_pipeline(scene, model, config)
    manifest = save_result(result, model, args.out)
    if args.dump_masks:
        mask_dir = Path(args.out) / "masks"
        mask_dir.mkdir(exist_ok=True)
        for fid in result.stage2_frames:
            silhouette = scene.silhouette(fid, config.edge_factor)
            write_pgm(silhouette.mask, mask_dir / f"{fid}.pgm")
    def final_rms(trace: list) -> float:
        row = trace[-1]
        return (row["pose_objective"] / max(row["num_observations"], 1)) ** 0.5

    print(
        f"fit ok: stage1 {len(result.fit_frames)} frames "
        f"rms {final_rms(result.stage1.trace):.3f} px, "
        f"stage2 {len(result.stage2_frames)} frames "
        f"rms {final_rms(result.stage2.trace):.3f} px, "
        f"{len(manifest['files'])} files in {args.out}"
    )
    return 0


def cmd_synth(args) -> int:
    from .sceneio import _read_json, save_scene, scene_spec_from_dict
    from .synth import SceneSpec, generate_scene

    model = _load_model(args.model)
    if args.spec is not None:
        spec = scene_spec_from_dict(_read_json(Path(args.spec)))
    else:
        spec = SceneSpec()
    seed = args.seed if args.seed is not None else 0
    synthetic = generate_scene(model, spec, seed=seed)
    save_scene(synthetic, args.out)
    scene = synthetic.scene
    print(
        f"synth ok: seed {seed}, {len(scene.cameras)} frames, "
        f"{len(scene.keypoints)} with keypoints, wrote {args.out}"
    )
    return 0


def cmd_sweep(args) -> int:
    from .sceneio import _dump_json, _read_json, scene_spec_from_dict
    from .synth import DEFAULT_LAMBDAS, lambda_sweep

    model = _load_model(args.model)
    config = _resolve_config(args)
    if args.lambdas:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    else:
        lambdas = list(DEFAULT_LAMBDAS)
    spec = scene_spec_from_dict(_read_json(Path(args.spec))) if args.spec else None
    data = lambda_sweep(
        model, lambdas, n_heads=args.heads, seed=config.seed, spec=spec, config=config
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(data, out_dir / "sweep.json")
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["head", "lambda", "cosine", "delta_s"])
        writer.writeheader()
        writer.writerows(data["rows"])
    for entry in data["summary"]:
        print(
            f"lambda {entry['lambda']:>8g}: mean delta_s {entry['mean_delta_s']:.6g}, "
            f"mean cosine {entry['mean_cosine']:.4f}"
        )
    best = min(data["summary"], key=lambda e: e["mean_delta_s"])
    print(f"best lambda {best['lambda']:g}, wrote {out_dir}/sweep.json and sweep.csv")
    return 0


def _eval_chamfer(args, model) -> list:
    from .meshio import load_mesh
    from .metrics import MetricReport, chamfer_scalp
    from .sceneio import load_result_dict, result_alignment, result_mesh
    from .silhouette import filter_reconstruction

    data = load_result_dict(args.fit)
    reference = load_mesh(args.mesh)
    if args.filter_reference:
        reference = filter_reconstruction(reference)
    stage = "stage1" if args.which == "front" else "stage2"
    alignment = result_alignment(data, stage)
    mesh = result_mesh(data, model, args.which)
    value = chamfer_scalp(
        alignment.apply(mesh.vertices),
        reference.vertices,
        model.top_region,
        head_width_mm=args.head_width_mm,
        symmetric=args.symmetric,
    )
    return [
        MetricReport(
            metric="chamfer_scalp",
            value=value,
            units="mm",
            subset=args.which,
            count=len(model.top_region),
        )
    ]


def _eval_rms(args, model) -> list:
    from .metrics import (
        MetricReport,
        reprojection_observation_count,
        rms_reprojection,
    )
    from .sceneio import load_cameras, load_keypoints, load_result_dict, result_alignment, result_mesh

    data = load_result_dict(args.fit)
    cameras = load_cameras(args.cameras)
    keypoints = load_keypoints(args.keypoints, model)
    if not args.all_frames:
        held_out = set(data.get("held_out_frames", []))
        keypoints = {fid: kps for fid, kps in keypoints.items() if fid in held_out}
    alignment = result_alignment(data, "stage2")
    mesh = result_mesh(data, model, "final")
    reports = []
    for subset in ("all", "no_jawline", "jawline_only"):
        count = reprojection_observation_count(keypoints, subset)
        if count == 0:
            log.warning("subset %r has no observations, skipping", subset)
            continue
        value = rms_reprojection(model, mesh, alignment, cameras, keypoints, subset)
        reports.append(
            MetricReport(
                metric="rms_reprojection", value=value, units="px",
                subset=subset, count=count,
            )
        )
    return reports


def _pick_view_frames(pose_angles: dict) -> tuple[str, str]:
    """Frames nearest the frontal and profile directions, by recorded angles."""

    def wrap(az: float) -> float:
        return min(az % 360.0, 360.0 - az % 360.0)

    portrait = min(sorted(pose_angles), key=lambda f: wrap(pose_angles[f][0]))
    lateral = min(
        sorted(pose_angles),
        key=lambda f: abs(wrap(pose_angles[f][0]) - 90.0),
    )
    return portrait, lateral


def _eval_ratios(args, model) -> list:
    from .metrics import MetricReport, anthropometric_ratios
    from .sceneio import load_cameras, load_result_dict, result_alignment, result_mesh

    data = load_result_dict(args.fit)
    cameras = load_cameras(args.cameras)
    portrait, lateral = args.portrait, args.lateral
    if portrait is None or lateral is None:
        auto_portrait, auto_lateral = _pick_view_frames(data["pose_angles"])
        portrait = portrait or auto_portrait
        lateral = lateral or auto_lateral
    for fid in (portrait, lateral):
        if fid not in cameras:
            raise SystemExit(f"eval ratios: no camera for frame {fid!r}")
    alignment = result_alignment(data, "stage2")
    mesh = result_mesh(data, model, args.which)
    hw, hl = anthropometric_ratios(
        mesh, cameras[portrait], cameras[lateral], alignment=alignment
    )
    count = model.num_vertices
    return [
        MetricReport("height_width", hw, "ratio", f"portrait={portrait}", count),
        MetricReport("height_length", hl, "ratio", f"lateral={lateral}", count),
    ]


def _eval_consistency(args, model) -> list:
    from .metrics import MetricReport, vertex_displacement_consistency
    from .sceneio import load_result_dict, result_mesh

    mesh_a = result_mesh(load_result_dict(args.fit_a), model, "final")
    mesh_b = result_mesh(load_result_dict(args.fit_b), model, "final")
    values = vertex_displacement_consistency(model, mesh_a, mesh_b)
    counts = {
        "head": model.num_vertices,
        "face": len(model.face_region),
        "scalp": len(model.top_region),
    }
    return [
        MetricReport("vertex_displacement_consistency", values[name], "percent",
                     name, counts[name])
        for name in ("head", "face", "scalp")
    ]


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    handler = {
        "chamfer": _eval_chamfer,
        "rms": _eval_rms,
        "ratios": _eval_ratios,
        "consistency": _eval_consistency,
    }[args.metric]
    reports = handler(args, model)
    _write_reports(reports, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(
        prog="headfit",
        description="Two-stage head model fitting from multi-view keypoints, "
        "camera poses and a dense reconstruction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("model-build", parents=[common],
                       help="generate and save a synthetic head model archive")
    p.add_argument("--out", required=True, help="output .mfm path")
    p.add_argument("--components", type=int, default=12)
    p.add_argument("--lat-rings", type=int, default=23)
    p.add_argument("--lon-segments", type=int, default=32)
    p.add_argument("--name", default="synthetic-head")
    p.set_defaults(func=cmd_model_build)

    p = sub.add_parser("validate", parents=[common],
                       help="check a model archive and optionally a scene")
    p.add_argument("--model", required=True)
    p.add_argument("--cameras")
    p.add_argument("--keypoints")
    p.add_argument("--mesh")
    p.add_argument("--frontal", help="override the frontal frame id")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("fit", parents=[common], help="run the two-stage fit")
    p.add_argument("--model", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--keypoints", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frontal", help="override the frontal frame id")
    p.add_argument("--dump-masks", action="store_true",
                   help="also write stage-2 silhouette masks as PGM")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic capture scene")
    p.add_argument("--model", required=True)
    p.add_argument("--spec", help="scene spec JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep", parents=[common],
                       help="fit synthetic heads across a regularization grid")
    p.add_argument("--model", required=True)
    p.add_argument("--lambdas", help="comma separated values, e.g. 0.1,5,100")
    p.add_argument("--heads", type=int, default=10)
    p.add_argument("--spec", help="scene spec JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate saved fits")
    eval_sub = p.add_subparsers(dest="metric", required=True)

    q = eval_sub.add_parser("chamfer", parents=[common])
    q.add_argument("--model", required=True)
    q.add_argument("--fit", required=True, help="fit output directory")
    q.add_argument("--mesh", required=True, help="reference reconstruction")
    q.add_argument("--which", choices=("mean", "front", "final"), default="final")
    q.add_argument("--head-width-mm", type=float, default=160.0)
    q.add_argument("--symmetric", action="store_true")
    q.add_argument("--filter-reference", action="store_true",
                   help="drop background components from the reference first")
    q.add_argument("--out", help="report path prefix (.json/.csv)")
    q.set_defaults(func=cmd_eval)

    q = eval_sub.add_parser("rms", parents=[common])
    q.add_argument("--model", required=True)
    q.add_argument("--fit", required=True)
    q.add_argument("--cameras", required=True)
    q.add_argument("--keypoints", required=True)
    q.add_argument("--all-frames", action="store_true",
                   help="use every keypoint frame, not just the held-out set")
    q.add_argument("--out")
    q.set_defaults(func=cmd_eval)

    q = eval_sub.add_parser("ratios", parents=[common])
    q.add_argument("--model", required=True)
    q.add_argument("--fit", required=True)
    q.add_argument("--cameras", required=True)
    q.add_argument("--which", choices=("mean", "front", "final"), default="final")
    q.add_argument("--portrait", help="portrait frame id")
    q.add_argument("--lateral", help="lateral frame id")
    q.add_argument("--out")
    q.set_defaults(func=cmd_eval)

    q = eval_sub.add_parser("consistency", parents=[common])
    q.add_argument("--model", required=True)
    q.add_argument("--fit-a", required=True)
    q.add_argument("--fit-b", required=True)
    q.add_argument("--out")
    q.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    _apply_thread_cap(args.threads if hasattr(args, "threads") else None)

    from .errors import FormatError, HeadFitError, UnfittableSceneError

    try:
        return args.func(args)
    except UnfittableSceneError as exc:
        print(f"error: unfittable scene: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except HeadFitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
