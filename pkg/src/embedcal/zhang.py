"""Planar (Zhang-style) projector calibration.

Per-pose homographies from board points to projector pixels, closed-form
skew-free intrinsics from the absolute-conic constraints, per-pose
extrinsics, and Levenberg-Marquardt refinement of the reprojection error.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    BehindBoard,
    DegenerateConfiguration,
    EmbedCalError,
    InsufficientPoints,
    InsufficientPoses,
    NotPositiveDefinite,
    PoseError,
    SingularNormalEquations,
)
from .geomcore import (
    Extrinsics,
    Homography2D,
    Intrinsics,
    apply_homography,
    nearest_rotation,
    rodrigues,
    rodrigues_inv,
    rodrigues_point_jacobian,
)

log = logging.getLogger(__name__)

COLLINEAR_TOL = 1e-9
CONDITIONING_MIN_POINTS = 6
MAX_DAMPING = 1e12


@dataclass(frozen=True, eq=False)
class PoseObservations:
    pose: int
    board_points: np.ndarray  # (N, 2), Z = 0
    projector_pixels: np.ndarray  # (N, 2)
    source: Literal["with_compensation", "without_compensation"] = "with_compensation"

    def __post_init__(self):
        b = np.asarray(self.board_points, dtype=np.float64).reshape(-1, 2)
        p = np.asarray(self.projector_pixels, dtype=np.float64).reshape(-1, 2)
        if b.shape != p.shape:
            raise ValueError("board_points and projector_pixels differ in length")
        object.__setattr__(self, "board_points", b)
        object.__setattr__(self, "projector_pixels", p)

    def __len__(self):
        return self.board_points.shape[0]


@dataclass(frozen=True, eq=False)
class LMOptions:
    max_iters: int = 100
    damping_init: float = 1e-3
    tol: float = 1e-15
    # stop once the fit is exact to this RMS (px)
    rms_floor: float = 1e-12


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    intrinsics: Intrinsics
    poses: tuple[Extrinsics, ...]
    pose_indices: tuple[int, ...]
    per_point_residuals: np.ndarray  # reprojection distance per point (px)
    per_point_pose: np.ndarray  # pose index of each residual
    rms_reprojection_px: float
    iterations: int = 0
    cost_history: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        r = np.asarray(self.per_point_residuals, dtype=np.float64)
        if r.size == 0:
            raise ValueError("a calibration result needs at least one residual")
        object.__setattr__(self, "per_point_residuals", r)
        object.__setattr__(self, "per_point_pose", np.asarray(self.per_point_pose, dtype=np.int64))
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "pose_indices", tuple(int(i) for i in self.pose_indices))


# ---------------------------------------------------------------------------
# homographies


def _normalizing_transform(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def is_collinear(pts, tol: float = COLLINEAR_TOL) -> bool:
    """True if all points lie (numerically) on one line."""
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    if p.shape[0] < 3:
        return True
    q = p - p.mean(axis=0)
    s = np.linalg.svd(q, compute_uv=False)
    return s[0] == 0 or s[1] <= tol * s[0]


def any_three_collinear(pts, tol: float = COLLINEAR_TOL) -> bool:
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    n = p.shape[0]
    scale = np.ptp(p, axis=0).max() or 1.0
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                a, b = p[j] - p[i], p[k] - p[i]
                if abs(a[0] * b[1] - a[1] * b[0]) <= tol * scale * scale:
                    return True
    return False


def estimate_homography_dlt(src, dst) -> Homography2D:
    """Normalized DLT homography mapping ``src`` (N, 2) onto ``dst`` (N, 2)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ValueError("src and dst differ in length")
    if src.shape[0] < 4:
        raise InsufficientPoints(f"homography needs >= 4 pairs, got {src.shape[0]}")
    if is_collinear(src) or is_collinear(dst):
        raise DegenerateConfiguration("source or target points are collinear")
    T1 = _normalizing_transform(src)
    T2 = _normalizing_transform(dst)
    a = src @ T1[:2, :2].T + T1[:2, 2]
    b = dst @ T2[:2, :2].T + T2[:2, 2]
    n = a.shape[0]
    A = np.zeros((2 * n, 9))
    x, y = a[:, 0], a[:, 1]
    u, v = b[:, 0], b[:, 1]
    A[0::2, 0:3] = np.column_stack([x, y, np.ones(n)])
    A[0::2, 6:9] = -u[:, None] * np.column_stack([x, y, np.ones(n)])
    A[1::2, 3:6] = np.column_stack([x, y, np.ones(n)])
    A[1::2, 6:9] = -v[:, None] * np.column_stack([x, y, np.ones(n)])
    _, s, Vt = np.linalg.svd(A)
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(T2) @ Hn @ T1
    try:
        return Homography2D(H).normalized()
    except ValueError as exc:
        raise DegenerateConfiguration(str(exc)) from exc


def transfer_errors(h: Homography2D, src, dst) -> np.ndarray:
    return np.linalg.norm(apply_homography(h, src) - np.asarray(dst, dtype=np.float64), axis=1)


# ---------------------------------------------------------------------------
# closed form


def _conic_rows(H: np.ndarray) -> np.ndarray:
    """Two constraint rows on b = (B11, B13, B22, B23, B33) for a skew-free K."""

    def v(i, j):
        hi, hj = H[:, i], H[:, j]
        return np.array(
            [
                hi[0] * hj[0],
                hi[0] * hj[2] + hi[2] * hj[0],
                hi[1] * hj[1],
                hi[1] * hj[2] + hi[2] * hj[1],
                hi[2] * hj[2],
            ]
        )

    return np.vstack([v(0, 1), v(0, 0) - v(1, 1)])


def intrinsics_from_homographies(hs: Sequence[Homography2D], min_poses: int = 3) -> Intrinsics:
    if len(hs) < min_poses:
        raise InsufficientPoses(f"need >= {min_poses} poses, got {len(hs)}")
    mats = [h.matrix if isinstance(h, Homography2D) else np.asarray(h, dtype=np.float64) for h in hs]
    # work in rescaled pixel units; K' = T K stays skew-free and upper triangular
    origins = [abs(M[:2, 2] / M[2, 2]) for M in mats]
    scale = float(np.median(np.concatenate(origins))) or 1.0
    T = np.diag([1.0 / scale, 1.0 / scale, 1.0])
    rows = []
    for M in mats:
        Hs = T @ M
        rows.append(_conic_rows(Hs / np.linalg.norm(Hs)))
    V = np.vstack(rows)
    _, s, Vt = np.linalg.svd(V)
    if s.size < 5 or s[3] <= 1e-9 * s[0]:
        raise NotPositiveDefinite("homography constraints are rank deficient (degenerate pose set)")
    B11, B13, B22, B23, B33 = Vt[-1]
    if B11 == 0 or B22 == 0:
        raise NotPositiveDefinite("recovered conic has a zero diagonal")
    cx = -B13 / B11
    cy = -B23 / B22
    lam = B33 - B13 * B13 / B11 - B23 * B23 / B22
    fx2 = lam / B11
    fy2 = lam / B22
    if not (fx2 > 0 and fy2 > 0):
        raise NotPositiveDefinite("recovered conic is not positive definite")
    return Intrinsics(
        float(np.sqrt(fx2) * scale), float(np.sqrt(fy2) * scale), float(cx * scale), float(cy * scale)
    )


def extrinsics_from_homography(intr: Intrinsics, h: Homography2D) -> Extrinsics:
    H = h.matrix if isinstance(h, Homography2D) else np.asarray(h, dtype=np.float64)
    A = intr.K_inv @ H
    lam = 1.0 / np.linalg.norm(A[:, 0])
    if A[2, 2] * lam <= 0:
        lam = -lam
    if A[2, 2] * lam <= 0:
        raise BehindBoard("board is not in front of the projector for either sign")
    r1 = lam * A[:, 0]
    r2 = lam * A[:, 1]
    t = lam * A[:, 2]
    R = nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    return Extrinsics(R, t)


# ---------------------------------------------------------------------------
# nonlinear refinement


def _pack(intr: Intrinsics, poses: Sequence[Extrinsics]) -> np.ndarray:
    parts = [np.array(intr.as_list())]
    for E in poses:
        parts.append(rodrigues_inv(E.rotation))
        parts.append(E.translation)
    return np.concatenate(parts)


def _unpack(x: np.ndarray, n_poses: int) -> tuple[Intrinsics, list[Extrinsics]]:
    intr = Intrinsics(*(float(v) for v in x[:4]))
    poses = []
    for i in range(n_poses):
        r = x[4 + 6 * i : 7 + 6 * i]
        t = x[7 + 6 * i : 10 + 6 * i]
        poses.append(Extrinsics(rodrigues(r), t))
    return intr, poses


def reprojection_residuals(x: np.ndarray, observations: Sequence[PoseObservations], jacobian: bool = False):
    """Stacked (u_pred - u_obs, v_pred - v_obs) residuals and optionally their Jacobian."""
    fx, fy, cx, cy = x[:4]
    n_pts = sum(len(o) for o in observations)
    res = np.empty(2 * n_pts)
    J = np.zeros((2 * n_pts, x.size)) if jacobian else None
    row = 0
    for i, obs in enumerate(observations):
        r = x[4 + 6 * i : 7 + 6 * i]
        t = x[7 + 6 * i : 10 + 6 * i]
        R = rodrigues(r)
        X = np.column_stack([obs.board_points, np.zeros(len(obs))])
        Xc = X @ R.T + t
        z = Xc[:, 2]
        xn, yn = Xc[:, 0] / z, Xc[:, 1] / z
        n = len(obs)
        res[row : row + 2 * n : 2] = fx * xn + cx - obs.projector_pixels[:, 0]
        res[row + 1 : row + 2 * n : 2] = fy * yn + cy - obs.projector_pixels[:, 1]
        if jacobian:
            col = 4 + 6 * i
            for k in range(n):
                ru, rv = row + 2 * k, row + 2 * k + 1
                J[ru, 0] = xn[k]
                J[ru, 2] = 1.0
                J[rv, 1] = yn[k]
                J[rv, 3] = 1.0
                du = np.array([fx / z[k], 0.0, -fx * xn[k] / z[k]])
                dv = np.array([0.0, fy / z[k], -fy * yn[k] / z[k]])
                dX_dr = rodrigues_point_jacobian(r, X[k])
                J[ru, col : col + 3] = du @ dX_dr
                J[rv, col : col + 3] = dv @ dX_dr
                J[ru, col + 3 : col + 6] = du
                J[rv, col + 3 : col + 6] = dv
        row += 2 * n
    return (res, J) if jacobian else res


def _result(x, observations, iterations=0, history=()) -> CalibrationResult:
    intr, poses = _unpack(x, len(observations))
    res = reprojection_residuals(x, observations)
    per_point = np.hypot(res[0::2], res[1::2])
    pose_of = np.concatenate([np.full(len(o), o.pose) for o in observations])
    return CalibrationResult(
        intrinsics=intr,
        poses=tuple(poses),
        pose_indices=tuple(o.pose for o in observations),
        per_point_residuals=per_point,
        per_point_pose=pose_of,
        rms_reprojection_px=float(np.sqrt(np.mean(per_point**2))),
        iterations=iterations,
        cost_history=tuple(history),
    )


def refine_lm(
    init: CalibrationResult,
    observations: Sequence[PoseObservations],
    options: LMOptions = LMOptions(),
) -> CalibrationResult:
    """Levenberg-Marquardt on intrinsics + per-pose (rotation vector, translation).

    Only cost-decreasing steps are accepted, so ``cost_history`` is
    non-increasing.
    """
    if options.max_iters <= 0:
        return init
    x = _pack(init.intrinsics, init.poses)
    res, J = reprojection_residuals(x, observations, jacobian=True)
    cost = 0.5 * float(res @ res)
    history = [cost]
    n_res = res.size // 2
    mu = options.damping_init
    it = 0
    while it < options.max_iters:
        if np.sqrt(2.0 * cost / n_res) <= options.rms_floor:
            break
        it += 1
        A = J.T @ J
        g = J.T @ res
        diag = np.maximum(np.diag(A), 1e-12 * max(np.diag(A).max(), 1.0))
        accepted = False
        while mu <= MAX_DAMPING:
            try:
                step = np.linalg.solve(A + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                step = None
            if step is None or not np.all(np.isfinite(step)):
                mu *= 10.0
                if mu > MAX_DAMPING:
                    raise SingularNormalEquations("normal equations stay singular up to damping 1e12")
                continue
            x_new = x + step
            try:
                res_new = reprojection_residuals(x_new, observations)
            except ValueError:  # e.g. non-positive focal length
                res_new = None
            cost_new = 0.5 * float(res_new @ res_new) if res_new is not None else np.inf
            if cost_new < cost:
                accepted = True
                break
            mu *= 10.0
        if not accepted:
            break  # no descent direction left: at a minimum to numerical precision
        rel = (cost - cost_new) / cost if cost > 0 else 0.0
        x, cost = x_new, cost_new
        history.append(cost)
        res, J = reprojection_residuals(x, observations, jacobian=True)
        mu = max(mu / 10.0, 1e-15)
        if rel < options.tol:
            break
    return _result(x, observations, it, history)


def initial_result(intr: Intrinsics, poses: Sequence[Extrinsics], observations: Sequence[PoseObservations]) -> CalibrationResult:
    return _result(_pack(intr, poses), observations)


def calibrate_projector(
    observations: Sequence[PoseObservations],
    min_poses: int = 3,
    lm: LMOptions = LMOptions(),
) -> CalibrationResult:
    """DLT per pose -> closed-form intrinsics -> extrinsics -> LM."""
    observations = list(observations)
    if len(observations) < min_poses:
        raise InsufficientPoses(f"need >= {min_poses} poses, got {len(observations)}")
    hs = []
    for obs in observations:
        if len(obs) < CONDITIONING_MIN_POINTS:
            log.debug("pose %d: only %d points, homography is poorly conditioned", obs.pose, len(obs))
        try:
            hs.append(estimate_homography_dlt(obs.board_points, obs.projector_pixels))
        except EmbedCalError as exc:
            raise PoseError(obs.pose, exc) from exc
    intr = intrinsics_from_homographies(hs, min_poses)
    poses = []
    for obs, h in zip(observations, hs):
        try:
            poses.append(extrinsics_from_homography(intr, h))
        except EmbedCalError as exc:
            raise PoseError(obs.pose, exc) from exc
    init = initial_result(intr, poses, observations)
    return refine_lm(init, observations, lm)


def calibrate_all(
    correspondences: Iterable,
    maps: Mapping[int, object] | Sequence[object],
    use_compensation: bool,
    nominal_points_mm: Sequence[Sequence[float]],
    num_projectors: Optional[int] = None,
    min_poses: int = 3,
    lm: LMOptions = LMOptions(),
    board_scale: float = 1e-3,
) -> dict[int, CalibrationResult | EmbedCalError]:
    """Calibrate every projector from its own correspondences.

    Board points come from the misalignment maps when ``use_compensation`` is
    set, otherwise the nominal camera position is used for every projector.
    ``board_scale`` converts board millimeters into the unit of the returned
    translations (meters by default). Failures are returned in place of a
    result so other projectors still calibrate.
    """
    from .compense import compensate  # local import: compense depends on this module

    if isinstance(maps, Mapping):
        map_by_camera = dict(maps)
    else:
        map_by_camera = {mp.camera: mp for mp in maps}
    by_projector: dict[int, dict[int, list]] = {}
    for corr in correspondences:
        if use_compensation:
            mp = map_by_camera.get(corr.camera)
            if mp is None:
                continue
            board = compensate(mp, corr).board_point_mm
        else:
            board = tuple(nominal_points_mm[corr.camera])
        by_projector.setdefault(corr.projector, {}).setdefault(corr.pose, []).append(
            (board, corr.projector_pixel)
        )
    projectors = range(num_projectors) if num_projectors is not None else sorted(by_projector)
    source = "with_compensation" if use_compensation else "without_compensation"
    out: dict[int, CalibrationResult | EmbedCalError] = {}
    for m in projectors:
        per_pose = by_projector.get(m, {})
        observations = []
        for pose in sorted(per_pose):
            pairs = per_pose[pose]
            if len(pairs) < 4:
                continue
            board = np.array([b for b, _ in pairs]) * board_scale
            pix = np.array([p for _, p in pairs])
            observations.append(PoseObservations(pose, board, pix, source))
        try:
            out[m] = calibrate_projector(observations, min_poses, lm)
        except EmbedCalError as exc:
            log.warning("projector %d: calibration failed: %s", m, exc)
            out[m] = exc
    return out
