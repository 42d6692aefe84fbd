"""Stage orchestration: simulate -> compensate -> calibrate -> evaluate.

Each stage reads its inputs from and writes its outputs to the run directory,
so any stage can be rerun on its own against persisted artifacts.
"""

from __future__ import annotations

import logging
import time
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import __version__
from . import io as fileio
from .compense import MisalignmentMap, estimate_misalignment_homography, run_compensation_session
from .decode import extract_correspondences
from .errors import EmbedCalError, NotVisible, StageFailure
from .evalkit import (
    alignment_error,
    ambient_probe,
    content_placement,
    mtf_sweep,
    pattern_count,
    projector_board_homography,
    reprojection_report,
    true_board_maps,
)
from .geomcore import Extrinsics, Intrinsics
from .rigsim import capture_stack, ground_truth_correspondence
from .scenario import Scenario
from .slcodec import build_pattern_set
from .zhang import CalibrationResult, calibrate_all

log = logging.getLogger(__name__)

STAGES = ("simulate", "compensate", "calibrate", "evaluate")

CORRESPONDENCES = "correspondences.csv"
SIMULATION = "simulation.json"
MAPS = "maps.json"
CALIBRATION = "calibration.json"
EVALUATION = "evaluation.json"
REPORT = "report.json"


# ---------------------------------------------------------------------------
# (de)serialization of stage artifacts


def result_to_dict(res: CalibrationResult) -> dict:
    return {
        "intrinsics": res.intrinsics.as_list(),
        "poses": [{"rotation": p.rotation, "translation": p.translation} for p in res.poses],
        "pose_indices": list(res.pose_indices),
        "per_point_residuals": res.per_point_residuals,
        "per_point_pose": res.per_point_pose,
        "rms_reprojection_px": res.rms_reprojection_px,
        "iterations": res.iterations,
    }


def result_from_dict(d: dict) -> CalibrationResult:
    return CalibrationResult(
        intrinsics=Intrinsics(*d["intrinsics"]),
        poses=tuple(Extrinsics(np.array(p["rotation"]), np.array(p["translation"])) for p in d["poses"]),
        pose_indices=tuple(d["pose_indices"]),
        per_point_residuals=np.array(d["per_point_residuals"], dtype=np.float64),
        per_point_pose=np.array(d["per_point_pose"], dtype=np.int64),
        rms_reprojection_px=float(d["rms_reprojection_px"]),
        iterations=int(d["iterations"]),
    )


def _error_dict(exc: Exception) -> dict:
    return {"error": type(exc).__name__, "message": str(exc)}


# ---------------------------------------------------------------------------
# stages


def stage_simulate(sc: Scenario, out: Path) -> dict:
    rig = sc.rig
    patterns = build_pattern_set(sc.pattern_spec)
    corrs = []
    visible = 0
    for pose in range(rig.num_poses):
        for n in range(len(rig.cameras)):
            stack = capture_stack(rig, patterns, pose, n)
            if sc.outputs.rasters:
                fileio.export_raster(stack.frames.max(axis=0), out / f"capture_p{pose:02d}_c{n}.pgm")
            corrs += extract_correspondences(stack, patterns, sc.decode_params)
            for m in range(len(rig.projectors)):
                try:
                    ground_truth_correspondence(rig, pose, m, n)
                    visible += 1
                except NotVisible:
                    pass
    fileio.write_correspondences(corrs, out / CORRESPONDENCES)
    summary = {"frames": len(patterns), "visible_links": visible, "correspondences": len(corrs)}
    fileio.write_json(summary, out / SIMULATION)
    return summary


def stage_compensate(sc: Scenario, out: Path) -> dict:
    cfg = sc.compensation
    entries = []
    for n in range(len(sc.rig.cameras)):
        try:
            session = run_compensation_session(
                sc.rig,
                n,
                line_shifts=cfg.line_shifts,
                params=sc.decode_params,
                opts=cfg.measure,
                grid=cfg.grid,
                max_angle_deg=cfg.max_angle_deg,
                distance_m=cfg.distance_m,
            )
            entries.append(estimate_misalignment_homography(session, cfg.ransac).to_dict())
        except EmbedCalError as exc:
            log.warning("camera %d: compensation failed: %s", n, exc)
            entries.append({"camera": n, **_error_dict(exc)})
    fileio.write_json(entries, out / MAPS)
    return {"maps": entries}


def _load_maps(out: Path) -> dict[int, MisalignmentMap]:
    entries = fileio.read_json(out / MAPS)
    return {int(e["camera"]): MisalignmentMap.from_dict(e) for e in entries if "homography" in e}


def stage_calibrate(sc: Scenario, out: Path, use_compensation: bool) -> dict:
    if not (out / CORRESPONDENCES).exists():
        raise StageFailure("calibrate", "simulate artifacts missing")
    corrs = fileio.read_correspondences(out / CORRESPONDENCES)
    maps: dict[int, MisalignmentMap] = {}
    if use_compensation:
        if not (out / MAPS).exists():
            raise StageFailure("calibrate", "compensate artifacts missing")
        maps = _load_maps(out)
    results = calibrate_all(
        corrs,
        maps,
        use_compensation,
        sc.nominal_points_mm,
        num_projectors=len(sc.rig.projectors),
        min_poses=sc.calibration.min_poses,
        lm=sc.calibration.lm,
    )
    doc = {
        "use_compensation": use_compensation,
        "projectors": [
            result_to_dict(r) if isinstance(r, CalibrationResult) else _error_dict(r)
            for _, r in sorted(results.items())
        ],
    }
    fileio.write_json(doc, out / CALIBRATION)
    return doc


def _ground_truth_errors(sc: Scenario, results: dict[int, CalibrationResult]) -> list[dict]:
    rows = []
    for m, res in sorted(results.items()):
        true = np.array(sc.rig.projectors[m].intrinsics.as_list())
        est = np.array(res.intrinsics.as_list())
        rel = np.abs(est - true) / np.abs(true)
        rows.append({"projector": m, "estimated": est, "true": true, "relative_error": rel})
    return rows


def stage_evaluate(sc: Scenario, out: Path) -> dict:
    if not (out / CALIBRATION).exists():
        raise StageFailure("evaluate", "calibrate artifacts missing")
    doc = fileio.read_json(out / CALIBRATION)
    results = {m: result_from_dict(d) for m, d in enumerate(doc["projectors"]) if "intrinsics" in d}
    spec = sc.pattern_spec
    M, W, H, L = spec.num_projectors, spec.width, spec.height, spec.line_shifts
    ev: dict = {
        "use_compensation": doc["use_compensation"],
        "pattern_count": {
            "conventional": pattern_count("conventional", M, W, H, L),
            "proposed": pattern_count("proposed", M, W, H, L),
        },
        "reprojection": [],
        "intrinsics": _ground_truth_errors(sc, results),
        "failed_projectors": [m for m, d in enumerate(doc["projectors"]) if "intrinsics" not in d],
    }
    if results:
        ev["reprojection"] = [
            {"projector": r.projector, "rms_px": r.rms_px, "max_px": r.max_px, "per_pose_rms": r.per_pose_rms}
            for r in reprojection_report(results)
        ]
    if 0 in results and 1 in results:
        shared = sorted(set(results[0].pose_indices) & set(results[1].pose_indices))
        if shared:
            pose = shared[0]
            est = []
            for m in (0, 1):
                res = results[m]
                est.append(projector_board_homography(res.intrinsics, res.poses[res.pose_indices.index(pose)]))
            true = true_board_maps(sc.rig, pose, (0, 1))
            placed = [content_placement(true[j], est[j], est[0]) for j in (0, 1)]
            stats = alignment_error(placed[0], placed[1], sc.evaluation.alignment_grid)
            ev["alignment"] = {"pose": pose, "mean_mm": stats.mean_mm, "max_mm": stats.max_mm}
            if sc.evaluation.mtf:
                curve = mtf_sweep(est[0], est[1], sc.rig, pose=pose)
                rel = curve.relative()
                ev["mtf"] = {
                    "pose": pose,
                    "frequencies": curve.frequencies,
                    "contrast": curve.contrast,
                    "reference": curve.reference,
                    "min_relative": float(rel.min()),
                }
    if sc.evaluation.ambient_levels:
        rows = ambient_probe(sc.rig, sc.evaluation.ambient_levels, build_pattern_set(spec), sc.decode_params)
        ev["ambient"] = [
            {"ambient": r.ambient, "decode_success_rate": r.decode_success_rate, "mean_p_error_px": r.mean_p_error_px}
            for r in rows
        ]
    fileio.write_json(ev, out / EVALUATION)
    return ev


# ---------------------------------------------------------------------------
# driver


def _normalize_stages(stages: Optional[Iterable[str]]) -> list[str]:
    if stages is None:
        return list(STAGES)
    wanted = set(stages)
    unknown = wanted - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stages: {sorted(unknown)}")
    return [s for s in STAGES if s in wanted]


def run(
    sc: Scenario,
    stages: Optional[Iterable[str]] = None,
    out_dir=None,
    use_compensation: Optional[bool] = None,
) -> dict:
    """Run the requested stages in dependency order and write ``report.json``.

    The report's ``payload`` holds only numbers derived from the scenario and
    seed; wall-clock timings live next to it under ``timings``.
    """
    order = _normalize_stages(stages)
    out = Path(out_dir) if out_dir is not None else sc.outputs.directory
    out.mkdir(parents=True, exist_ok=True)
    use_comp = sc.compensation.enabled if use_compensation is None else use_compensation
    if not use_comp and "compensate" in order:
        order.remove("compensate")
    payload: dict = {}
    timings: dict = {}
    for stage in order:
        t0 = time.perf_counter()
        try:
            if stage == "simulate":
                payload["simulate"] = stage_simulate(sc, out)
            elif stage == "compensate":
                payload["compensate"] = stage_compensate(sc, out)
            elif stage == "calibrate":
                payload["calibrate"] = stage_calibrate(sc, out, use_comp)
            else:
                payload["evaluate"] = stage_evaluate(sc, out)
        except StageFailure:
            raise
        except (EmbedCalError, ValueError, OSError) as exc:
            raise StageFailure(stage, f"{type(exc).__name__}: {exc}") from exc
        timings[stage] = time.perf_counter() - t0
        log.info("stage %s done in %.2f s", stage, timings[stage])
    report = {
        "tool_version": __version__,
        "seed": sc.seed,
        "scenario_digest": sc.digest,
        "scenario": sc.resolved,
        "stages": order,
        "payload": payload,
        "timings": timings,
    }
    fileio.write_json(report, out / REPORT)
    return report


def payload_bytes(report: dict) -> bytes:
    """Canonical serialization of the deterministic part of a report."""
    return fileio.dumps_json(report["payload"]).encode()
