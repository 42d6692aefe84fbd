"""Scenario files: a YAML description of a simulated rig and pipeline settings.

Only ``schema_version`` and ``projectors`` are required. Cameras sit at the
corners of ``cameras.rect_mm`` unless ``cameras.nominal_mm`` lists them
explicitly. Defaults are filled in and the fully resolved tree is kept on the
scenario so a report can echo it.

Layout (schema_version 1)::

    schema_version: 1
    seed: 7
    board: {width_mm: 470, height_mm: 320}
    cameras:
      sensor: [640, 360]
      hfov_deg: 102
      psf_sigma: 1.5
      gain: 1.0
      falloff_half_angle_deg: [32, 40]
      rect_mm: [200, 120]          # nominal points at the rectangle corners
      offsets_mm: [[0.5, -0.3, 3], ...]
    projectors:
      - {intrinsics: [fx, fy, cx, cy], resolution: [1280, 800], position_m: [x, y, z]}
    poses: {count: 8, distance_m: 1.2, tilt_deg: 20, distance_jitter: 0.15}
    simulation: {ambient_level: 0, noise_sigma: 0, saturation_cap: 1, line_spread: 2}
    patterns: {line_shifts: 10}
    decode: {intensity_threshold: 0.1, subpixel_fit: parabola, guard_band: 0.05}
    compensation: {enabled: true, grid: 6, max_angle_deg: 25, distance_m: 0.8}
    calibration: {min_poses: 3, lm: {max_iters: 100}}
    evaluation: {mtf: true, alignment_grid: 11, ambient_levels: []}
    outputs: {directory: out, rasters: false}
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .compense import LineMeasureOptions, RansacParams
from .errors import ParseError, ValidationError
from .geomcore import Intrinsics
from .rigsim import (
    PAPER_BOARD_MM,
    PAPER_CAMERA_RECT_MM,
    PAPER_HFOV_DEG,
    EmbeddedCameraSpec,
    RigConfig,
    board_camera_layout,
    build_projector,
    generate_board_poses,
    projector_in_room,
)
from .slcodec import DecodeParams, PatternSetSpec
from .zhang import LMOptions

SCHEMA_VERSION = 1
BUNDLED = Path(__file__).with_name("scenarios") / "default.yaml"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "board": {"width_mm": PAPER_BOARD_MM[0], "height_mm": PAPER_BOARD_MM[1]},
    "cameras": {
        "sensor": [640, 360],
        "hfov_deg": PAPER_HFOV_DEG,
        "psf_sigma": 1.5,
        "gain": 1.0,
        "falloff_half_angle_deg": [32.0, 40.0],
        "rect_mm": list(PAPER_CAMERA_RECT_MM),
    },
    "poses": {"count": 8, "distance_m": 1.2, "tilt_deg": 20.0, "distance_jitter": 0.15},
    "simulation": {"ambient_level": 0.0, "noise_sigma": 0.0, "saturation_cap": 1.0, "line_spread": 2.0},
    "patterns": {"line_shifts": 10, "line_shift_half_window": None},
    "decode": {"intensity_threshold": 0.1, "subpixel_fit": "parabola", "guard_band": 0.05, "dynamic_range": 1.0},
    "compensation": {
        "enabled": True,
        "grid": 6,
        "max_angle_deg": 25.0,
        "distance_m": 0.8,
        "line_shifts": 10,
        "raster_px_per_mm": 10.0,
        "window_mm": 12.0,
        "supersample": 3,
        "ransac": {"iterations": 2000, "inlier_threshold_mm": 0.5, "min_inlier_fraction": 0.5, "seed": 0},
    },
    "calibration": {"min_poses": 3, "lm": {"max_iters": 100, "damping_init": 1e-3, "tol": 1e-15}},
    "evaluation": {"mtf": True, "alignment_grid": 11, "ambient_levels": []},
    "outputs": {"directory": "out", "rasters": False},
}


@dataclass(frozen=True)
class CompensationConfig:
    enabled: bool
    grid: int
    max_angle_deg: float
    distance_m: float
    line_shifts: int
    measure: LineMeasureOptions
    ransac: RansacParams


@dataclass(frozen=True)
class CalibrationConfig:
    min_poses: int
    lm: LMOptions


@dataclass(frozen=True)
class EvaluationConfig:
    mtf: bool
    alignment_grid: int
    ambient_levels: tuple[float, ...]


@dataclass(frozen=True)
class OutputConfig:
    directory: Path
    rasters: bool  # also write capture images as graymaps


@dataclass(frozen=True, eq=False)
class Scenario:
    rig: RigConfig
    pattern_spec: PatternSetSpec
    decode_params: DecodeParams
    compensation: CompensationConfig
    calibration: CalibrationConfig
    evaluation: EvaluationConfig
    outputs: OutputConfig
    seed: int
    resolved: dict = field(default_factory=dict)  # the input tree with defaults applied
    digest: str = ""

    @property
    def nominal_points_mm(self) -> list[tuple[float, float]]:
        return [c.nominal_mm for c in self.rig.cameras]


# ---------------------------------------------------------------------------
# parsing helpers


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _num(tree: dict, path: str, lo: Optional[float] = None, hi: Optional[float] = None, integer: bool = False):
    node: Any = tree
    for part in path.split("."):
        node = node[part]
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ValidationError(f"{path}: expected a number, got {node!r}")
    if integer and int(node) != node:
        raise ValidationError(f"{path}: expected an integer, got {node!r}")
    if lo is not None and node < lo:
        raise ValidationError(f"{path}: must be >= {lo}, got {node}")
    if hi is not None and node > hi:
        raise ValidationError(f"{path}: must be <= {hi}, got {node}")
    return int(node) if integer else float(node)


def _vector(value, path: str, length: int) -> list[float]:
    if not isinstance(value, (list, tuple)) or len(value) != length:
        raise ValidationError(f"{path}: expected a list of {length} numbers, got {value!r}")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ValidationError(f"{path}: expected numbers, got {value!r}")
    return [float(v) for v in value]


def parse_text(text: str, source: str = "<string>") -> dict:
    try:
        tree = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ParseError(f"{source}: {where}: {exc.problem}") from exc
    except yaml.YAMLError as exc:
        raise ParseError(f"{source}: {exc}") from exc
    if not isinstance(tree, dict):
        raise ParseError(f"{source}: top level must be a mapping")
    return tree


# ---------------------------------------------------------------------------
# building


def _cameras(tree: dict) -> list[EmbeddedCameraSpec]:
    c = tree["cameras"]
    sensor = _vector(c["sensor"], "cameras.sensor", 2)
    hfov = _num(tree, "cameras.hfov_deg", 1.0, 179.0)
    intr = Intrinsics.from_fov(int(sensor[0]), int(sensor[1]), hfov)
    half = _vector(c["falloff_half_angle_deg"], "cameras.falloff_half_angle_deg", 2)
    if "nominal_mm" in c:
        nominal = [tuple(_vector(v, f"cameras.nominal_mm[{i}]", 2)) for i, v in enumerate(c["nominal_mm"])]
    else:
        nominal = board_camera_layout(tuple(_vector(c["rect_mm"], "cameras.rect_mm", 2)))
    if len(nominal) < 4:
        raise ValidationError(f"cameras: N >= 4 required (got {len(nominal)})")
    offsets = c.get("offsets_mm")
    if offsets is None:
        offsets = [[0.0, 0.0, 0.0]] * len(nominal)
    if not isinstance(offsets, list):
        raise ValidationError("cameras.offsets_mm: expected a list")
    if len(offsets) != len(nominal):
        raise ValidationError(
            f"cameras.offsets_mm has {len(offsets)} entries but cameras.nominal_mm has {len(nominal)}"
        )
    out = []
    for i, (xy, off) in enumerate(zip(nominal, offsets)):
        try:
            out.append(
                EmbeddedCameraSpec(
                    nominal_mm=xy,
                    intrinsics=intr,
                    sensor_width=int(sensor[0]),
                    sensor_height=int(sensor[1]),
                    offset_mm=tuple(_vector(off, f"cameras.offsets_mm[{i}]", 3)),
                    psf_sigma=_num(tree, "cameras.psf_sigma", 0.0),
                    gain=_num(tree, "cameras.gain"),
                    falloff_half_angle_x=half[0],
                    falloff_half_angle_y=half[1],
                )
            )
        except ValueError as exc:
            raise ValidationError(f"cameras[{i}]: {exc}") from exc
    return out


def _projectors(tree: dict, board_poses) -> list:
    items = tree.get("projectors")
    if not isinstance(items, list) or not items:
        raise ValidationError("projectors: a non-empty list is required")
    out = []
    for i, p in enumerate(items):
        path = f"projectors[{i}]"
        if not isinstance(p, dict):
            raise ValidationError(f"{path}: expected a mapping")
        for key in ("intrinsics", "resolution", "position_m"):
            if key not in p:
                raise ValidationError(f"{path}.{key}: required")
        fx, fy, cx, cy = _vector(p["intrinsics"], f"{path}.intrinsics", 4)
        w, h = _vector(p["resolution"], f"{path}.resolution", 2)
        pos = _vector(p["position_m"], f"{path}.position_m", 3)
        target = _vector(p.get("target_m", [0.0, 0.0, 0.0]), f"{path}.target_m", 3)
        try:
            intr = Intrinsics(fx, fy, cx, cy)
            room = projector_in_room(pos, target)
        except ValueError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
        out.append(build_projector(intr, room, board_poses, int(w), int(h), str(p.get("name", f"P{i}"))))
    return out


def build_scenario(given: dict, source: str = "<string>", text: str = "") -> Scenario:
    if "schema_version" not in given:
        raise ValidationError("schema_version: required")
    if given["schema_version"] != SCHEMA_VERSION:
        raise ValidationError(f"schema_version: unsupported version {given['schema_version']!r}")
    tree = _merge(DEFAULTS, given)
    seed = _num(tree, "seed", 0, integer=True)

    cameras = _cameras(tree)
    rng = np.random.default_rng(seed)
    board_poses = generate_board_poses(
        _num(tree, "poses.count", 1, integer=True),
        _num(tree, "poses.distance_m", 0.0),
        rng,
        _num(tree, "poses.tilt_deg", 0.0, 89.0),
        _num(tree, "poses.distance_jitter", 0.0, 0.9),
    )
    projectors = _projectors(tree, board_poses)
    try:
        rig = RigConfig(
            board_width_mm=_num(tree, "board.width_mm", 0.0),
            board_height_mm=_num(tree, "board.height_mm", 0.0),
            cameras=cameras,
            projectors=projectors,
            board_poses=board_poses,
            ambient_level=_num(tree, "simulation.ambient_level", 0.0),
            noise_sigma=_num(tree, "simulation.noise_sigma", 0.0),
            saturation_cap=_num(tree, "simulation.saturation_cap", 0.0),
            rng_seed=seed,
            line_spread=_num(tree, "simulation.line_spread", 0.0),
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc

    pat = tree["patterns"]
    w0, h0 = projectors[0].width, projectors[0].height
    pat.setdefault("width", w0)
    pat.setdefault("height", h0)
    for i, p in enumerate(projectors):
        for key, mine in (("width", p.width), ("height", p.height)):
            idx = 0 if key == "width" else 1
            if pat[key] != mine:
                raise ValidationError(
                    f"patterns.{key} ({pat[key]}) does not match projectors[{i}].resolution[{idx}] ({mine})"
                )
    try:
        spec = PatternSetSpec(
            num_projectors=len(projectors),
            width=int(pat["width"]),
            height=int(pat["height"]),
            line_shifts=_num(tree, "patterns.line_shifts", 0, integer=True),
            line_shift_half_window=pat["line_shift_half_window"],
        )
        d = tree["decode"]
        decode = DecodeParams(
            intensity_threshold=_num(tree, "decode.intensity_threshold"),
            subpixel_fit=d["subpixel_fit"],
            guard_band=_num(tree, "decode.guard_band"),
            dynamic_range=_num(tree, "decode.dynamic_range"),
        )
    except ValueError as exc:
        raise ValidationError(f"patterns/decode: {exc}") from exc

    c = tree["compensation"]
    comp = CompensationConfig(
        enabled=bool(c["enabled"]),
        grid=_num(tree, "compensation.grid", 2, integer=True),
        max_angle_deg=_num(tree, "compensation.max_angle_deg", 0.0, 60.0),
        distance_m=_num(tree, "compensation.distance_m", 0.0),
        line_shifts=_num(tree, "compensation.line_shifts", 2, integer=True),
        measure=LineMeasureOptions(
            resolution=_num(tree, "compensation.raster_px_per_mm", 0.0),
            window_mm=_num(tree, "compensation.window_mm", 0.0),
            supersample=_num(tree, "compensation.supersample", 1, integer=True),
        ),
        ransac=RansacParams(
            iterations=_num(tree, "compensation.ransac.iterations", 1, integer=True),
            inlier_threshold_mm=_num(tree, "compensation.ransac.inlier_threshold_mm", 0.0),
            min_inlier_fraction=_num(tree, "compensation.ransac.min_inlier_fraction", 0.0, 1.0),
            seed=_num(tree, "compensation.ransac.seed", 0, integer=True),
        ),
    )
    calib = CalibrationConfig(
        min_poses=_num(tree, "calibration.min_poses", 3, integer=True),
        lm=LMOptions(
            max_iters=_num(tree, "calibration.lm.max_iters", 0, integer=True),
            damping_init=_num(tree, "calibration.lm.damping_init", 0.0),
            tol=_num(tree, "calibration.lm.tol", 0.0),
        ),
    )
    e = tree["evaluation"]
    levels = e["ambient_levels"]
    if not isinstance(levels, list):
        raise ValidationError("evaluation.ambient_levels: expected a list")
    evaluation = EvaluationConfig(
        mtf=bool(e["mtf"]),
        alignment_grid=_num(tree, "evaluation.alignment_grid", 1, integer=True),
        ambient_levels=tuple(_vector(levels, "evaluation.ambient_levels", len(levels))),
    )
    for lv in evaluation.ambient_levels:
        if not 0.0 <= lv < rig.saturation_cap:
            raise ValidationError(f"evaluation.ambient_levels: {lv} outside [0, saturation_cap)")
    o = tree["outputs"]
    outputs = OutputConfig(Path(str(o["directory"])), bool(o["rasters"]))
    digest = hashlib.sha256(text.encode()).hexdigest() if text else ""
    return Scenario(rig, spec, decode, comp, calib, evaluation, outputs, seed, tree, digest)


def load_scenario(path, seed: Optional[int] = None) -> Scenario:
    """Parse and validate a scenario file; ``seed`` overrides the file's seed."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: cannot read: {exc}") from exc
    return loads_scenario(text, str(path), seed)


def loads_scenario(text: str, source: str = "<string>", seed: Optional[int] = None) -> Scenario:
    given = parse_text(text, source)
    if seed is not None:
        given["seed"] = int(seed)
    return build_scenario(given, source, text)
