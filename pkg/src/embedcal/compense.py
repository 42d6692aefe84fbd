"""Optical-center misalignment compensation.

Offline: for one embedded camera, a single projector is placed at K positions.
Each position yields the camera pixel that receives its light and, via a
vertical and a horizontal line projected through the decoded projector
pixel, the point where that ray actually crosses the board. A RANSAC
homography from camera pixels to board millimeters is fitted to the pairs.

Online: the fitted map turns each blob centroid into the board point the
projector ray really passes through.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .decode import Correspondence, extract_correspondences
from .errors import (
    AllDark,
    CameraMismatch,
    DegenerateConfiguration,
    InsufficientPoints,
    LinesParallel,
    NoLineFound,
    PointAtInfinity,
    TooFewInliers,
)
from .geomcore import Extrinsics, Homography2D, Intrinsics, apply_homography, look_at
from .rigsim import MM, RigConfig, build_projector, capture_stack, render_board_footprint
from .slcodec import LINE_X, LINE_Y, DecodeParams, PatternFrame, PatternSet, PatternSetSpec, build_pattern_set
from .zhang import any_three_collinear, estimate_homography_dlt, is_collinear, transfer_errors

log = logging.getLogger(__name__)

HOUGH_MIN_SUPPORT = 10


@dataclass(frozen=True)
class LineParams:
    """Line ``x cos(theta) + y sin(theta) = rho`` with theta in [0, pi)."""

    rho: float
    theta: float

    def distance(self, x, y):
        return np.asarray(x) * np.cos(self.theta) + np.asarray(y) * np.sin(self.theta) - self.rho


def canonical_line(rho: float, theta: float) -> LineParams:
    """Wrap theta into [0, pi), flipping the sign of rho as needed."""
    k = np.floor(theta / np.pi)
    theta = theta - k * np.pi
    if int(k) % 2:
        rho = -rho
    if theta >= np.pi:  # rounding at the upper edge
        theta -= np.pi
        rho = -rho
    return LineParams(float(rho), float(theta))


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 2000
    inlier_threshold_mm: float = 0.5
    min_inlier_fraction: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class CompensationSample:
    projector_position: tuple[float, float, float]  # X_k, board frame (m)
    camera_pixel: tuple[float, float]  # c_n(k)
    board_point_mm: tuple[float, float]  # x_n(k)
    projector_pixel: tuple[float, float] = (np.nan, np.nan)  # p_k(n)


@dataclass(frozen=True)
class CompensationSession:
    camera: int
    samples: tuple[CompensationSample, ...]

    def __len__(self):
        return len(self.samples)

    @property
    def camera_pixels(self) -> np.ndarray:
        return np.array([s.camera_pixel for s in self.samples], dtype=np.float64).reshape(-1, 2)

    @property
    def board_points(self) -> np.ndarray:
        return np.array([s.board_point_mm for s in self.samples], dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class MisalignmentMap:
    camera: int
    homography: Homography2D  # camera pixel -> board mm
    inlier_count: int
    rms_residual_mm: float
    sample_count: int = 0
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def to_dict(self) -> dict:
        return {
            "camera": self.camera,
            "homography": self.homography.normalized().matrix.tolist(),
            "inlier_count": self.inlier_count,
            "sample_count": self.sample_count,
            "rms_residual_mm": self.rms_residual_mm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MisalignmentMap":
        return cls(
            camera=int(d["camera"]),
            homography=Homography2D(np.array(d["homography"], dtype=np.float64)),
            inlier_count=int(d["inlier_count"]),
            rms_residual_mm=float(d["rms_residual_mm"]),
            sample_count=int(d.get("sample_count", 0)),
        )


# ---------------------------------------------------------------------------
# line measurement


def binarize(raster, threshold: float = 0.5) -> np.ndarray:
    img = np.asarray(raster, dtype=np.float64)
    if img.size == 0:
        raise ValueError("raster is empty")
    peak = img.max()
    if peak <= 0:
        raise AllDark("raster has no lit pixels")
    return img > threshold * peak


def hough_lines(
    binary,
    rho_resolution: float = 1.0,
    theta_resolution: float = np.radians(0.5),
    min_support: int = HOUGH_MIN_SUPPORT,
) -> LineParams:
    """Strongest line in a binary raster (x = column, y = row).

    The accumulator peak is refined by the vote-weighted centroid of its 3x3
    neighborhood; the theta axis wraps around with rho mirrored.
    """
    rows, cols = np.nonzero(np.asarray(binary, dtype=bool))
    if rows.size < 2:
        raise NoLineFound(f"only {rows.size} lit pixels")
    n_theta = int(round(np.pi / theta_resolution))
    thetas = np.arange(n_theta) * theta_resolution
    diag = float(np.hypot(*np.shape(binary)))
    n_half = int(np.ceil(diag / rho_resolution)) + 1
    n_rho = 2 * n_half + 1
    rho = np.outer(cols, np.cos(thetas)) + np.outer(rows, np.sin(thetas))
    rho_idx = np.rint(rho / rho_resolution).astype(np.int64) + n_half
    flat = rho_idx + n_rho * np.arange(n_theta)[None, :]
    acc = np.bincount(flat.ravel(), minlength=n_rho * n_theta).reshape(n_theta, n_rho)
    support = int(acc.max())
    if support < min_support:
        raise NoLineFound(f"peak support {support} < {min_support}")
    # theta wraps: the row beyond pi is row 0 with rho mirrored, and vice versa
    padded = np.vstack([acc[-1, ::-1], acc, acc[0, ::-1]]).astype(np.float64)
    padded = np.pad(padded, ((0, 0), (1, 1)))
    box = sum(
        padded[1 + dt : 1 + dt + n_theta, 1 + dr : 1 + dr + n_rho] for dt in (-1, 0, 1) for dr in (-1, 0, 1)
    )
    # among maximal cells prefer the heaviest neighborhood, then the middle of what is left
    # (short lines produce a flat run of equal cells along theta)
    score = np.where(acc == support, box, -1.0)
    tied_t, tied_r = np.nonzero(score == score.max())
    if tied_t.max() - tied_t.min() > n_theta // 2:
        # run straddles theta = 0: express the upper end as negative angles
        upper = tied_t > n_theta // 2
        tied_t = np.where(upper, tied_t - n_theta, tied_t)
        tied_r = np.where(upper, 2 * n_half - tied_r, tied_r)
    mid = np.argsort(tied_t, kind="stable")[len(tied_t) // 2]
    ti, ri = int(tied_t[mid]), int(tied_r[mid])
    if ti < 0:
        ti, ri = ti + n_theta, 2 * n_half - ri
    nb = padded[ti : ti + 3, ri : ri + 3]
    w_sum = nb.sum()
    t_sum = (nb.sum(axis=1) * (ti + np.arange(-1, 2))).sum()
    r_sum = (nb.sum(axis=0) * (ri - n_half + np.arange(-1, 2))).sum()
    theta = t_sum / w_sum * theta_resolution
    rho_val = r_sum / w_sum * rho_resolution
    return canonical_line(rho_val, theta)


def refine_line(raster, line: LineParams, band: Optional[float] = None, search: float = 20.0) -> LineParams:
    """Sub-pixel line from intensity-weighted slice centroids near ``line``.

    Near-vertical lines are sliced by row, near-horizontal ones by column; a
    weighted least-squares line through the slice centroids is returned.
    """
    img = np.asarray(raster, dtype=np.float64)
    rows, cols = np.nonzero(img > 0)
    w = img[rows, cols]
    d = np.abs(line.distance(cols, rows))
    if band is None:
        near = d <= search
        if not near.any():
            return line
        band = float(d[near & (w >= 0.5 * w.max())].max(initial=0.0)) + 2.0
    keep = d <= band
    rows, cols, w = rows[keep], cols[keep], w[keep]
    vertical = abs(np.cos(line.theta)) >= abs(np.sin(line.theta))
    along, across = (rows, cols) if vertical else (cols, rows)
    if along.size == 0:
        return line
    keys, inv = np.unique(along, return_inverse=True)
    wsum = np.bincount(inv, weights=w)
    centers = np.bincount(inv, weights=w * across) / wsum
    if keys.size < 2:
        return line
    # across = a * along + b, weighted by slice mass
    A = np.column_stack([keys, np.ones_like(keys, dtype=np.float64)]) * np.sqrt(wsum)[:, None]
    a, b = np.linalg.lstsq(A, centers * np.sqrt(wsum), rcond=None)[0]
    norm = np.hypot(1.0, a)
    if vertical:  # x - a y - b = 0
        theta = np.arctan2(-a, 1.0)
    else:  # -a x + y - b = 0
        theta = np.arctan2(1.0, -a)
    return canonical_line(b / norm, theta)


def intersect_lines(a: LineParams, b: LineParams, eps: float = 1e-9) -> np.ndarray:
    det = np.sin(b.theta - a.theta)
    if abs(det) < eps:
        raise LinesParallel("lines are parallel")
    A = np.array([[np.cos(a.theta), np.sin(a.theta)], [np.cos(b.theta), np.sin(b.theta)]])
    return np.linalg.solve(A, np.array([a.rho, b.rho]))


@dataclass(frozen=True)
class LineMeasureOptions:
    resolution: float = 10.0  # raster px per mm
    window_mm: float = 12.0  # half-size of the rendered board window
    supersample: int = 3
    binarize_threshold: float = 0.5
    rho_resolution: float = 1.0
    theta_resolution: float = np.radians(0.5)
    refine: bool = True


def _board_line(rig, pose, m, frame, center_mm, opts: LineMeasureOptions):
    x, y = center_mm
    w = opts.window_mm
    raster = render_board_footprint(
        rig, pose, m, frame, opts.resolution, (x - w, y - w, x + w, y + w), opts.supersample
    )
    line = hough_lines(binarize(raster.image, opts.binarize_threshold), opts.rho_resolution, opts.theta_resolution)
    if opts.refine:
        line = refine_line(raster.image, line)
    return line, raster


def measure_board_intersection(
    rig: RigConfig,
    pose: int,
    m: int,
    camera: int,
    patterns: PatternSet,
    params: DecodeParams = DecodeParams(),
    opts: LineMeasureOptions = LineMeasureOptions(),
) -> CompensationSample:
    """Measure (c_n(k), x_n(k)) for the projector ``m`` at board pose ``pose``.

    Decodes the projector pixel seen by the camera, then intersects the board
    footprints of a vertical line at its x and a horizontal line at its y.
    """
    stack = capture_stack(rig, patterns, pose, camera, projectors=[m])
    found = [c for c in extract_correspondences(stack, patterns, params) if c.projector == m]
    if not found:
        raise NoLineFound(f"camera {camera} did not decode projector {m} in pose {pose}")
    corr = found[0]
    u, v = corr.projector_pixel
    center = rig.cameras[camera].nominal_mm
    lx, raster = _board_line(rig, pose, m, PatternFrame(LINE_X, position=u), center, opts)
    ly, _ = _board_line(rig, pose, m, PatternFrame(LINE_Y, position=v), center, opts)
    if abs(np.sin(lx.theta - ly.theta)) < 1e-6:
        raise LinesParallel("projected vertical and horizontal lines are parallel on the board")
    x_mm = raster.to_mm(intersect_lines(lx, ly))
    X = rig.projectors[m].poses[pose].center
    return CompensationSample(tuple(X), corr.camera_pixel, (float(x_mm[0]), float(x_mm[1])), (u, v))


def session_rig(
    rig: RigConfig,
    camera: int,
    grid: int = 6,
    max_angle_deg: float = 25.0,
    distance_m: float = 0.8,
    projector_intrinsics: Intrinsics = Intrinsics(1500.0, 1500.0, 639.5, 399.5),
    width: int = 1280,
    height: int = 800,
) -> RigConfig:
    """Rig for the offline session: the board fixed at the identity pose and one
    projector visiting ``grid x grid`` directions around the camera axis.

    Each direction becomes one 'pose' index of the returned rig.
    """
    cam = rig.cameras[camera]
    target = np.array([cam.nominal_mm[0], cam.nominal_mm[1], 0.0]) * MM
    angles = np.radians(np.linspace(-max_angle_deg, max_angle_deg, grid))
    poses = []
    for ax in angles:
        for ay in angles:
            d_cam = np.array([np.tan(ay), np.tan(ax), 1.0])
            d = cam.orientation.T @ (d_cam / np.linalg.norm(d_cam))
            poses.append(look_at(target + distance_m * d, target))
    board = [Extrinsics.identity()] * len(poses)
    proj = build_projector(projector_intrinsics, Extrinsics.identity(), board, width, height, "session")
    # the board-frame poses are the look-at poses themselves
    proj = replace(proj, poses=tuple(poses))
    return replace(rig, projectors=(proj,), board_poses=tuple(board))


def run_compensation_session(
    rig: RigConfig,
    camera: int,
    line_shifts: int = 10,
    params: DecodeParams = DecodeParams(),
    opts: LineMeasureOptions = LineMeasureOptions(),
    **session_kwargs,
) -> CompensationSession:
    srig = session_rig(rig, camera, **session_kwargs)
    proj = srig.projectors[0]
    patterns = build_pattern_set(PatternSetSpec(1, proj.width, proj.height, line_shifts))
    samples = []
    for k in range(srig.num_poses):
        try:
            samples.append(measure_board_intersection(srig, k, 0, camera, patterns, params, opts))
        except (NoLineFound, LinesParallel, AllDark) as exc:
            log.info("camera %d, position %d skipped: %s", camera, k, exc)
    return CompensationSession(camera, tuple(samples))


# ---------------------------------------------------------------------------
# homography fit


def estimate_misalignment_homography(
    session: CompensationSession, ransac: RansacParams = RansacParams()
) -> MisalignmentMap:
    src = session.camera_pixels
    dst = session.board_points
    K = src.shape[0]
    if K < 4:
        raise InsufficientPoints(f"need >= 4 samples, got {K}")
    if is_collinear(dst) or is_collinear(src):
        raise DegenerateConfiguration("all samples are collinear")
    rng = np.random.default_rng(ransac.seed)
    best = None
    best_key = None
    for _ in range(ransac.iterations):
        idx = rng.choice(K, size=4, replace=False)
        if any_three_collinear(src[idx]) or any_three_collinear(dst[idx]):
            continue
        try:
            h = estimate_homography_dlt(src[idx], dst[idx])
            err = transfer_errors(h, src, dst)
        except (DegenerateConfiguration, PointAtInfinity):
            continue
        inl = err < ransac.inlier_threshold_mm
        key = (int(inl.sum()), -float(np.sum(err[inl] ** 2)))
        if best_key is None or key > best_key:
            best_key, best = key, inl
    if best is None:
        raise DegenerateConfiguration("every minimal sample was degenerate")
    need = max(4, int(np.ceil(ransac.min_inlier_fraction * K)))
    if best.sum() < need:
        raise TooFewInliers(f"{int(best.sum())} inliers < required {need}")
    h = estimate_homography_dlt(src[best], dst[best])
    err = transfer_errors(h, src, dst)
    inliers = err < ransac.inlier_threshold_mm
    if inliers.sum() >= need and not np.array_equal(inliers, best):
        h = estimate_homography_dlt(src[inliers], dst[inliers])
        err = transfer_errors(h, src, dst)
    else:
        inliers = best
    rms = float(np.sqrt(np.mean(err[inliers] ** 2)))
    return MisalignmentMap(session.camera, h.normalized(), int(inliers.sum()), rms, K, inliers)


def compensate(mp: MisalignmentMap, corr: Correspondence) -> Correspondence:
    if mp.camera != corr.camera:
        raise CameraMismatch(f"map for camera {mp.camera} applied to camera {corr.camera}")
    return corr.with_board_point(apply_homography(mp.homography, corr.camera_pixel))
