"""Evaluation metrics: pattern budgets, reprojection tables, overlap alignment
of two projectors, a contrast (MTF) sweep and an ambient-light probe."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Mapping, Optional, Sequence

import numpy as np

from .decode import extract_correspondences
from .errors import EmbedCalError, NotVisible
from .geomcore import Extrinsics, Homography2D, Intrinsics, apply_homography
from .rigsim import MM, RigConfig, capture_stack, ground_truth_correspondence
from .slcodec import DecodeParams, PatternSet, PatternSetSpec, bit_count, build_pattern_set
from .zhang import CalibrationResult

Method = Literal["conventional", "proposed"]

# paper sweep: 2/128 .. 63/128 cycles/mm in steps of 1/128
MTF_START = 2.0 / 128.0
MTF_END = 63.0 / 128.0
MTF_STEP = 1.0 / 128.0
MTF_RESOLUTION = 4.0  # raster samples per mm


# ---------------------------------------------------------------------------
# pattern economics


@dataclass(frozen=True)
class PatternBudget:
    method: str
    M: int
    W: int
    H: int
    L: int
    total_frames: int


def pattern_count(method: Method, M: int, W: int, H: int, L: int) -> int:
    """Frames needed to calibrate ``M`` projectors of ``W x H`` pixels.

    Conventional calibration runs one full sequence per projector; the
    proposed scheme runs a single shared sequence with projector-ID bits.
    """
    if min(M, W, H) < 1 or L < 0:
        raise ValueError("M, W and H must be >= 1 and L >= 0")
    per_projector = bit_count(W) + bit_count(H) + L
    if method == "conventional":
        return M * per_projector
    if method == "proposed":
        return bit_count(M) + per_projector
    raise ValueError(f"unknown method {method!r}")


def pattern_budget(method: Method, M: int, W: int, H: int, L: int) -> PatternBudget:
    return PatternBudget(method, M, W, H, L, pattern_count(method, M, W, H, L))


# ---------------------------------------------------------------------------
# reprojection


@dataclass(frozen=True)
class ReprojectionRow:
    projector: int
    rms_px: float
    max_px: float
    per_pose_rms: dict[int, float] = field(default_factory=dict)


def reprojection_report(
    results: Mapping[int, CalibrationResult | EmbedCalError] | Sequence[CalibrationResult],
) -> list[ReprojectionRow]:
    """One row per calibrated projector, ordered by projector index.

    Failed calibrations (exceptions in a result mapping) are left out.
    """
    items = results.items() if isinstance(results, Mapping) else enumerate(results)
    rows = []
    for m, res in sorted(items, key=lambda kv: kv[0]):
        if not isinstance(res, CalibrationResult):
            continue
        r = res.per_point_residuals
        per_pose = {
            int(p): float(np.sqrt(np.mean(r[res.per_point_pose == p] ** 2)))
            for p in np.unique(res.per_point_pose)
        }
        rows.append(ReprojectionRow(int(m), float(np.sqrt(np.mean(r**2))), float(r.max()), per_pose))
    if not rows:
        raise ValueError("no calibration results to report")
    return rows


# ---------------------------------------------------------------------------
# two-projector overlap


@dataclass(frozen=True)
class AlignmentStats:
    mean_mm: float
    max_mm: float


def projector_board_homography(intr: Intrinsics, extr: Extrinsics, board_scale: float = MM) -> Homography2D:
    """Projector pixel -> board point (mm) for a board -> projector pose.

    ``board_scale`` converts board millimeters into the unit of the pose
    translation (meters by default).
    """
    R, t = extr.rotation, extr.translation
    to_pixels = intr.K @ np.column_stack([R[:, 0], R[:, 1], t]) @ np.diag([board_scale, board_scale, 1.0])
    return Homography2D(to_pixels).inverse()


def content_placement(h_true: Homography2D, h_est: Homography2D, h_ref_est: Homography2D) -> Homography2D:
    """Where projector j actually puts content drawn in the reference
    projector's pixel grid: ``H_true_j . H_est_j^-1 . H_est_ref``."""
    return h_true @ h_est.inverse() @ h_ref_est


def _grid(region_mm, count: int) -> np.ndarray:
    (x0, x1), (y0, y1) = region_mm
    xs, ys = np.meshgrid(np.linspace(x0, x1, count), np.linspace(y0, y1, count))
    return np.column_stack([xs.ravel(), ys.ravel()])


def alignment_error(
    h1: Homography2D,
    h2: Homography2D,
    grid: int = 11,
    region_mm=((-100.0, 100.0), (-60.0, 60.0)),
) -> AlignmentStats:
    """Board displacement between where ``h1`` and ``h2`` place the same content.

    Content lives in projector 1's pixel grid: the board point ``b`` shown by
    projector 1 is content ``h1^-1(b)``, which projector 2 places at
    ``h2(h1^-1(b))``.
    """
    if grid < 1:
        raise ValueError("grid must be >= 1")
    b = _grid(region_mm, grid)
    moved = apply_homography(h2, apply_homography(h1.inverse(), b))
    d = np.linalg.norm(moved - b, axis=1)
    return AlignmentStats(float(d.mean()), float(d.max()))


# ---------------------------------------------------------------------------
# MTF


@dataclass(frozen=True, eq=False)
class MtfCurve:
    frequencies: np.ndarray  # cycles/mm
    contrast: np.ndarray
    reference: Optional[np.ndarray] = None  # single-projector contrast

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=np.float64)
        c = np.asarray(self.contrast, dtype=np.float64)
        if f.shape != c.shape or f.ndim != 1:
            raise ValueError("frequencies and contrast must be 1-D and of equal length")
        if np.any(np.diff(f) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        if np.any((c < 0) | (c > 1)):
            raise ValueError("contrast must lie in [0, 1]")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "contrast", c)
        if self.reference is not None:
            r = np.asarray(self.reference, dtype=np.float64)
            if r.shape != f.shape:
                raise ValueError("reference curve must match the frequencies")
            object.__setattr__(self, "reference", r)

    def relative(self) -> np.ndarray:
        if self.reference is None:
            raise ValueError("curve has no reference")
        return self.contrast / self.reference


def sweep_frequencies(start: float = MTF_START, end: float = MTF_END, step: float = MTF_STEP) -> np.ndarray:
    if step <= 0 or end < start:
        raise ValueError("need step > 0 and end >= start")
    count = int(np.floor((end - start) / step + 1e-9)) + 1
    return start + step * np.arange(count)


def michelson(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    hi, lo = float(v.max()), float(v.min())
    return 0.0 if hi + lo <= 0 else (hi - lo) / (hi + lo)


def true_board_maps(rig: RigConfig, pose: int, projectors: Sequence[int]) -> list[Homography2D]:
    """Ground-truth projector pixel -> board (mm) homographies at ``pose``."""
    out = []
    for m in projectors:
        H = rig.projectors[m].board_homography(pose) @ np.diag([MM, MM, 1.0])
        out.append(Homography2D(H).inverse())
    return out


def mtf_sweep(
    h1: Homography2D,
    h2: Homography2D,
    rig: Optional[RigConfig] = None,
    freq_start: float = MTF_START,
    freq_end: float = MTF_END,
    freq_step: float = MTF_STEP,
    *,
    truth: Optional[Sequence[Homography2D]] = None,
    pose: int = 0,
    projectors: Sequence[int] = (0, 1),
    center_mm=None,
    size_mm: float = 64.0,
    resolution: float = MTF_RESOLUTION,
) -> MtfCurve:
    """Contrast of two superimposed sine patterns versus frequency.

    ``h1`` and ``h2`` are the estimated projector -> board (mm) homographies
    used to lay the content out: each projector shows, at pixel ``p``, the
    sine value at its believed board position ``h_j(p)``. The light actually
    lands where the true homographies say, taken from ``truth`` or from
    ``rig`` (projectors ``projectors`` at ``pose``); with neither, the
    estimates are taken as exact. Contrast is Michelson over a square board
    window sampled at ``resolution`` px/mm.
    """
    if truth is None:
        truth = true_board_maps(rig, pose, projectors) if rig is not None else (h1, h2)
    t1, t2 = truth
    if center_mm is None:
        center_mm = (0.0, 0.0)
        if rig is not None:
            intr = rig.projectors[projectors[0]].intrinsics
            center_mm = tuple(apply_homography(t1, (intr.cx, intr.cy)))
    n = max(int(round(size_mm * resolution)), 2)
    offs = (np.arange(n) + 0.5) / resolution - size_mm / 2.0
    xs, ys = np.meshgrid(center_mm[0] + offs, center_mm[1] + offs)
    board = np.column_stack([xs.ravel(), ys.ravel()])
    # believed board x of the content each projector sends to every sample
    x1 = apply_homography(h1, apply_homography(t1.inverse(), board))[:, 0]
    x2 = apply_homography(h2, apply_homography(t2.inverse(), board))[:, 0]
    freqs = sweep_frequencies(freq_start, freq_end, freq_step)
    contrast = np.empty(len(freqs))
    reference = np.empty(len(freqs))
    for i, f in enumerate(freqs):
        s1 = 0.5 + 0.5 * np.cos(2.0 * np.pi * f * x1)
        s2 = 0.5 + 0.5 * np.cos(2.0 * np.pi * f * x2)
        contrast[i] = michelson(s1 + s2)
        reference[i] = michelson(s1)
    return MtfCurve(freqs, np.clip(contrast, 0.0, 1.0), np.clip(reference, 0.0, 1.0))


# ---------------------------------------------------------------------------
# ambient light


@dataclass(frozen=True)
class AmbientRow:
    ambient: float
    decode_success_rate: float
    mean_p_error_px: float  # nan when nothing decoded
    expected: int
    decoded: int


def ambient_probe(
    rig: RigConfig,
    ambient_levels: Sequence[float],
    patterns: Optional[PatternSet] = None,
    params: DecodeParams = DecodeParams(),
    poses: Optional[Sequence[int]] = None,
    cameras: Optional[Sequence[int]] = None,
) -> list[AmbientRow]:
    """Rerun capture and decode at each ambient level.

    A visible (pose, projector, camera) link counts as a success when a
    correspondence with the right projector ID comes back; the projector
    pixel error is averaged over successes.
    """
    if patterns is None:
        p0 = rig.projectors[0]
        patterns = build_pattern_set(PatternSetSpec(len(rig.projectors), p0.width, p0.height, 10))
    poses = range(rig.num_poses) if poses is None else poses
    cameras = range(len(rig.cameras)) if cameras is None else cameras
    truth = {}
    for pose in poses:
        for n in cameras:
            for m in range(len(rig.projectors)):
                try:
                    truth[(pose, m, n)] = ground_truth_correspondence(rig, pose, m, n).projector_pixel
                except NotVisible:
                    pass
    rows = []
    for level in ambient_levels:
        lit = rig.replace(ambient_level=float(level))
        errors = []
        for pose in poses:
            for n in cameras:
                for corr in extract_correspondences(capture_stack(lit, patterns, pose, n), patterns, params):
                    gt = truth.get((pose, corr.projector, n))
                    if gt is not None:
                        errors.append(float(np.linalg.norm(np.asarray(corr.projector_pixel) - gt)))
        expected = len(truth)
        rate = len(errors) / expected if expected else 0.0
        mean_err = float(np.mean(errors)) if errors else float("nan")
        rows.append(AmbientRow(float(level), rate, mean_err, expected, len(errors)))
    return rows
