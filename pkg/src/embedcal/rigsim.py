"""Deterministic virtual rig: a calibration board with embedded cameras lit
by several projectors at once.

Image formation follows the direct-ray model: the only light a camera
records from projector ``m`` travels along the line joining the projector's
optical center and the camera's optical center. It lands on camera pixel
``c`` (a Gaussian blob after defocus) and originates at projector pixel
``p``. Everything the pipeline estimates has a closed-form oracle here.

Frames: the board frame of the current pose is the world frame. The board
is the plane Z = 0, projectors sit on the +Z side. Board-plane coordinates
handed to callers are in millimeters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import DepthNonPositive, IntersectionBehindOrigin, NotVisible, ProjectorBehindBoard, RayParallelToPlane
from .geomcore import (
    Extrinsics,
    Intrinsics,
    Plane,
    Ray,
    look_at,
    project,
    ray_plane_intersect,
    rot_x,
    rot_y,
)
from .slcodec import (
    BINARY_KINDS,
    BLACK,
    GRAY_X,
    ID_BIT,
    LINE_X,
    LINE_Y,
    SHIFT_X,
    SHIFT_Y,
    WHITE,
    PatternFrame,
    PatternSet,
    frame_intensity,
)

MM = 1e-3
VISIBILITY_FLOOR = 0.01

# Raspberry Pi Camera Module 3 Wide: 4608 x 2592 px, 102 x 67 deg
PAPER_SENSOR = (4608, 2592)
PAPER_HFOV_DEG = 102.0
# board and camera layout of the prototype
PAPER_BOARD_MM = (470.0, 320.0)
PAPER_CAMERA_RECT_MM = (200.0, 120.0)


@dataclass(frozen=True, eq=False)
class EmbeddedCameraSpec:
    nominal_mm: tuple[float, float]
    intrinsics: Intrinsics
    sensor_width: int
    sensor_height: int
    offset_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # camera-from-board rotation; identity looks along the board normal (+Z)
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))
    psf_sigma: float = 0.0
    gain: float = 1.0
    falloff_half_angle_x: float = 32.0
    falloff_half_angle_y: float = 40.0

    def __post_init__(self):
        if self.sensor_width < 16 or self.sensor_height < 16:
            raise ValueError("sensor dimensions must be >= 16 px")
        if self.psf_sigma < 0:
            raise ValueError("psf_sigma must be >= 0")
        if not 0.0 < self.gain <= 1.0:
            raise ValueError("gain must lie in (0, 1]")
        if not (0 < self.falloff_half_angle_x < 180 and 0 < self.falloff_half_angle_y < 180):
            raise ValueError("falloff half-angles must lie in (0, 180) degrees")
        object.__setattr__(self, "nominal_mm", tuple(float(v) for v in self.nominal_mm))
        object.__setattr__(self, "offset_mm", tuple(float(v) for v in self.offset_mm))
        R = Extrinsics(self.orientation, np.zeros(3)).rotation
        object.__setattr__(self, "orientation", R)

    @property
    def center(self) -> np.ndarray:
        """True optical center in the board frame (meters)."""
        x, y = self.nominal_mm
        dx, dy, dz = self.offset_mm
        return np.array([x + dx, y + dy, dz]) * MM

    @property
    def extrinsics(self) -> Extrinsics:
        R = self.orientation
        return Extrinsics(R, -R @ self.center)


@dataclass(frozen=True, eq=False)
class ProjectorGroundTruth:
    intrinsics: Intrinsics
    poses: tuple[Extrinsics, ...]  # board frame -> projector frame, one per board pose
    width: int
    height: int
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))

    def board_homography(self, pose: int) -> np.ndarray:
        """Board (X, Y) in meters -> projector pixel."""
        E = self.poses[pose]
        return self.intrinsics.K @ np.column_stack([E.rotation[:, 0], E.rotation[:, 1], E.translation])


@dataclass(frozen=True, eq=False)
class RigConfig:
    board_width_mm: float
    board_height_mm: float
    cameras: tuple[EmbeddedCameraSpec, ...]
    projectors: tuple[ProjectorGroundTruth, ...]
    board_poses: tuple[Extrinsics, ...]  # board -> room, informational
    ambient_level: float = 0.0
    noise_sigma: float = 0.0
    saturation_cap: float = 1.0
    rng_seed: int = 0
    # half-width (projector px) of the pixel spread seen by a line-shift probe; 0 = ideal pixels
    line_spread: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "projectors", tuple(self.projectors))
        object.__setattr__(self, "board_poses", tuple(self.board_poses))
        if len(self.cameras) < 4:
            raise ValueError(f"cameras: N >= 4 required (got {len(self.cameras)})")
        if len(self.projectors) < 1:
            raise ValueError("projectors: M >= 1 required")
        hw, hh = self.board_width_mm / 2.0, self.board_height_mm / 2.0
        for i, cam in enumerate(self.cameras):
            x, y = cam.nominal_mm
            if not (-hw <= x <= hw and -hh <= y <= hh):
                raise ValueError(f"cameras[{i}]: nominal point {cam.nominal_mm} outside the board")
        for j, proj in enumerate(self.projectors):
            if len(proj.poses) != len(self.board_poses):
                raise ValueError(
                    f"projectors[{j}]: {len(proj.poses)} poses for {len(self.board_poses)} board poses"
                )
        if not 0.0 <= self.ambient_level < self.saturation_cap:
            raise ValueError("ambient_level must lie in [0, saturation_cap)")
        if self.noise_sigma < 0 or self.line_spread < 0:
            raise ValueError("noise_sigma and line_spread must be >= 0")

    @property
    def num_poses(self) -> int:
        return len(self.board_poses)

    def replace(self, **changes) -> "RigConfig":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class CaptureStack:
    camera: int
    pose: int
    frames: np.ndarray  # (num_frames, height, width)
    origin: tuple[int, int] = (0, 0)  # sensor (x, y) of frames[:, 0, 0]

    def __len__(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class GroundTruth:
    projector_pixel: np.ndarray  # subpixel p_m(n)
    camera_pixel: np.ndarray  # c_n(m)
    board_point_mm: np.ndarray  # x_n(m)
    attenuation: float
    angles_deg: tuple[float, float]


def falloff(angle_x: float, angle_y: float, spec: EmbeddedCameraSpec) -> float:
    """Brightness attenuation for light arriving at the given incident angles.

    Per axis ``((1 + cos a) / 2) ** k`` with ``k`` set so the half-angle maps
    to 0.5; the two axes multiply.
    """
    return _raised_cosine(angle_x, spec.falloff_half_angle_x) * _raised_cosine(
        angle_y, spec.falloff_half_angle_y
    )


def _raised_cosine(angle_deg: float, half_deg: float) -> float:
    a = abs(float(angle_deg))
    if a >= 180.0:
        return 0.0
    base_half = 0.5 * (1.0 + np.cos(np.radians(half_deg)))
    k = np.log(0.5) / np.log(base_half)
    return float((0.5 * (1.0 + np.cos(np.radians(a)))) ** k)


def _board_plane() -> Plane:
    return Plane.z0()


def _check_projector_faces_board(proj: ProjectorGroundTruth, pose: int, m: int) -> None:
    E = proj.poses[pose]
    axis = Ray(E.center, E.rotation[2])
    try:
        ray_plane_intersect(axis, _board_plane())
    except (RayParallelToPlane, IntersectionBehindOrigin) as exc:
        raise ProjectorBehindBoard(f"projector {m}, pose {pose}: optical axis misses the board") from exc


def _link(rig: RigConfig, pose: int, m: int, n: int):
    """Geometry of the projector-m -> camera-n ray, or None if it is not seen."""
    proj = rig.projectors[m]
    cam = rig.cameras[n]
    _check_projector_faces_board(proj, pose, m)
    E = proj.poses[pose]
    C = E.center
    O = cam.center
    if C[2] <= O[2]:
        return None  # projector is not on the lit side of the board
    try:
        p = project(proj.intrinsics, E, O)
        c = project(cam.intrinsics, cam.extrinsics, C)
    except DepthNonPositive:
        return None
    d = cam.orientation @ (C - O)
    ax = float(np.degrees(np.arctan2(d[1], d[2])))
    ay = float(np.degrees(np.arctan2(d[0], d[2])))
    att = falloff(ax, ay, cam)
    inside_p = -0.5 <= p[0] < proj.width - 0.5 and -0.5 <= p[1] < proj.height - 0.5
    inside_c = -0.5 <= c[0] < cam.sensor_width - 0.5 and -0.5 <= c[1] < cam.sensor_height - 0.5
    return p, c, att, (ax, ay), inside_p and inside_c and att >= VISIBILITY_FLOOR


def ground_truth_correspondence(rig: RigConfig, pose: int, m: int, n: int) -> GroundTruth:
    link = _link(rig, pose, m, n)
    if link is None or not link[4]:
        raise NotVisible(f"projector {m} is not visible from camera {n} in pose {pose}")
    p, c, att, angles, _ = link
    C = rig.projectors[m].poses[pose].center
    O = rig.cameras[n].center
    x = ray_plane_intersect(Ray(C, O - C), _board_plane())
    return GroundTruth(p, c, x[:2] / MM, att, angles)


def _line_profile(distance: np.ndarray | float, half_width: float):
    """Relative brightness of a 1-px projector line seen at ``distance`` px."""
    d = np.asarray(distance, dtype=np.float64) / half_width
    return np.clip(1.0 - d * d, 0.0, None)


def emitted_sequence(patterns: PatternSet, m: int, p_subpixel, line_spread: float) -> np.ndarray:
    """Per-frame brightness projector ``m`` sends along the ray through ``p``.

    Binary frames are looked up at the nearest integer pixel. Line-shift
    frames see the line's spread profile around the subpixel position when
    ``line_spread > 0``.
    """
    p = np.asarray(p_subpixel, dtype=np.float64)
    pr = np.round(p)
    out = np.empty(len(patterns))
    for i, frame in enumerate(patterns.frames):
        if line_spread > 0 and frame.kind in (SHIFT_X, SHIFT_Y):
            axis = 0 if frame.kind == SHIFT_X else 1
            out[i] = _line_profile(p[axis] - (pr[axis] + frame.index), line_spread)
        elif line_spread > 0 and frame.kind in (LINE_X, LINE_Y):
            axis = 0 if frame.kind == LINE_X else 1
            out[i] = _line_profile(p[axis] - frame.position, line_spread)
        else:
            out[i] = frame_intensity(frame, m, pr, coarse_center=pr)
    return out


def _blob(center, sigma: float, shape: tuple[int, int], origin: tuple[int, int]):
    """Gaussian PSF patch (peak 1, truncated at 3 sigma) clipped to the raster."""
    h, w = shape
    ox, oy = origin
    cx, cy = float(center[0]) - ox, float(center[1]) - oy
    if sigma == 0:
        i, j = int(round(cy)), int(round(cx))
        if 0 <= i < h and 0 <= j < w:
            return (slice(i, i + 1), slice(j, j + 1)), np.ones((1, 1))
        return None
    r = 3.0 * sigma
    x0, x1 = max(int(np.ceil(cx - r)), 0), min(int(np.floor(cx + r)), w - 1)
    y0, y1 = max(int(np.ceil(cy - r)), 0), min(int(np.floor(cy + r)), h - 1)
    if x0 > x1 or y0 > y1:
        return None
    xx, yy = np.meshgrid(np.arange(x0, x1 + 1) - cx, np.arange(y0, y1 + 1) - cy)
    r2 = xx * xx + yy * yy
    patch = np.where(r2 <= r * r, np.exp(-0.5 * r2 / sigma**2), 0.0)
    return (slice(y0, y1 + 1), slice(x0, x1 + 1)), patch


def capture_stack(
    rig: RigConfig,
    patterns: PatternSet,
    pose: int,
    camera: int,
    roi: Optional[tuple[int, int, int, int]] = None,
    projectors: Optional[Sequence[int]] = None,
) -> CaptureStack:
    """Simulate camera ``camera`` recording the full pattern sequence.

    ``roi`` = (x0, y0, width, height) restricts readout to a sensor window;
    pixel coordinates reported downstream stay in full-sensor units.
    ``projectors`` restricts which projectors are switched on (default all).
    """
    cam = rig.cameras[camera]
    if roi is None:
        roi = (0, 0, cam.sensor_width, cam.sensor_height)
    x0, y0, w, h = (int(v) for v in roi)
    if w <= 0 or h <= 0:
        raise ValueError("roi must have positive size")
    frames = np.zeros((len(patterns), h, w))
    active = range(len(rig.projectors)) if projectors is None else projectors
    for m in active:
        link = _link(rig, pose, m, camera)
        if link is None or not link[4]:
            continue
        p, c, att, _, _ = link
        blob = _blob(c, cam.psf_sigma, (h, w), (x0, y0))
        if blob is None:
            continue
        sl, patch = blob
        values = emitted_sequence(patterns, m, p, rig.line_spread) * (cam.gain * att)
        frames[:, sl[0], sl[1]] += values[:, None, None] * patch
    if rig.ambient_level:
        frames += rig.ambient_level
    if rig.noise_sigma > 0:
        for f in range(len(patterns)):
            rng = np.random.default_rng([rig.rng_seed, pose, camera, f])
            frames[f] += rng.normal(0.0, rig.noise_sigma, size=(h, w))
    np.clip(frames, 0.0, rig.saturation_cap, out=frames)
    return CaptureStack(camera, pose, frames, (x0, y0))


@dataclass(frozen=True)
class BoardRaster:
    image: np.ndarray  # (rows, cols)
    origin_mm: tuple[float, float]  # board (x, y) of pixel (0, 0)'s center
    resolution: float  # px per mm

    def to_mm(self, xy_px) -> np.ndarray:
        return np.asarray(xy_px, dtype=np.float64) / self.resolution + np.asarray(self.origin_mm)

    def to_px(self, xy_mm) -> np.ndarray:
        return (np.asarray(xy_mm, dtype=np.float64) - np.asarray(self.origin_mm)) * self.resolution


def _frame_field(frame: PatternFrame, m: int, qx: np.ndarray, qy: np.ndarray, W: int, H: int, coarse_center):
    """Projected intensity at continuous projector coordinates (qx, qy)."""
    inside = (qx >= -0.5) & (qx < W - 0.5) & (qy >= -0.5) & (qy < H - 0.5)
    kind = frame.kind
    if kind == WHITE:
        v = np.ones_like(qx)
    elif kind == BLACK:
        v = np.zeros_like(qx)
    elif kind in (LINE_X, SHIFT_X):
        u = frame.position if kind == LINE_X else round(coarse_center[0]) + frame.index
        v = (np.abs(qx - u) <= 0.5).astype(float)
    elif kind in (LINE_Y, SHIFT_Y):
        u = frame.position if kind == LINE_Y else round(coarse_center[1]) + frame.index
        v = (np.abs(qy - u) <= 0.5).astype(float)
    elif kind in BINARY_KINDS:
        ix = np.clip(np.round(qx), 0, W - 1).astype(np.int64)
        iy = np.clip(np.round(qy), 0, H - 1).astype(np.int64)
        if kind == ID_BIT:
            v = np.full_like(qx, float((m >> frame.index) & 1))
        elif kind == GRAY_X:
            v = (((ix ^ (ix >> 1)) >> frame.index) & 1).astype(float)
        else:
            v = (((iy ^ (iy >> 1)) >> frame.index) & 1).astype(float)
    else:
        raise ValueError(f"unknown frame kind {kind!r}")
    return np.where(inside, v, 0.0)


def render_board_footprint(
    rig: RigConfig,
    pose: int,
    m: int,
    frame: PatternFrame,
    resolution: float,
    region_mm: Optional[tuple[float, float, float, float]] = None,
    supersample: int = 1,
    coarse_center=None,
) -> BoardRaster:
    """Orthographic board-plane image of what projector ``m`` paints with ``frame``.

    ``region_mm`` = (x_min, y_min, x_max, y_max); defaults to the whole board.
    ``supersample`` > 1 box-filters each raster pixel with s x s samples.
    """
    proj = rig.projectors[m]
    _check_projector_faces_board(proj, pose, m)
    if region_mm is None:
        hw, hh = rig.board_width_mm / 2.0, rig.board_height_mm / 2.0
        region_mm = (-hw, -hh, hw, hh)
    xmin, ymin, xmax, ymax = region_mm
    cols = int(np.floor((xmax - xmin) * resolution)) + 1
    rows = int(np.floor((ymax - ymin) * resolution)) + 1
    s = int(supersample)
    sub = (np.arange(s) + 0.5) / s - 0.5
    xs = xmin + (np.arange(cols)[:, None] + sub[None, :]).reshape(-1) / resolution
    ys = ymin + (np.arange(rows)[:, None] + sub[None, :]).reshape(-1) / resolution
    X, Y = np.meshgrid(xs * MM, ys * MM)
    Hb = proj.board_homography(pose)
    qw = Hb[2, 0] * X + Hb[2, 1] * Y + Hb[2, 2]
    front = qw > 0
    safe = np.where(front, qw, 1.0)
    qx = (Hb[0, 0] * X + Hb[0, 1] * Y + Hb[0, 2]) / safe
    qy = (Hb[1, 0] * X + Hb[1, 1] * Y + Hb[1, 2]) / safe
    field_ = _frame_field(frame, m, qx, qy, proj.width, proj.height, coarse_center)
    field_ = np.where(front, field_, 0.0)
    image = field_.reshape(rows, s, cols, s).mean(axis=(1, 3))
    return BoardRaster(image, (float(xmin), float(ymin)), float(resolution))


# ---------------------------------------------------------------------------
# rig construction helpers


def board_camera_layout(rect_mm=PAPER_CAMERA_RECT_MM) -> list[tuple[float, float]]:
    """Nominal camera points at the corners of a centered rectangle."""
    a, b = rect_mm[0] / 2.0, rect_mm[1] / 2.0
    return [(-a, -b), (a, -b), (a, b), (-a, b)]


def desk_camera_intrinsics(width: int = 640, height: int = 360, hfov_deg: float = PAPER_HFOV_DEG) -> Intrinsics:
    return Intrinsics.from_fov(width, height, hfov_deg)


def generate_board_poses(
    count: int,
    distance_m: float,
    rng: np.random.Generator,
    tilt_deg: float = 20.0,
    distance_jitter: float = 0.15,
) -> list[Extrinsics]:
    """Board -> room poses tilted up to +-tilt_deg about x and y.

    The board moves along the room z axis by up to ``distance_jitter`` of
    the nominal projector distance.
    """
    poses = []
    for _ in range(count):
        rx, ry = np.radians(rng.uniform(-tilt_deg, tilt_deg, size=2))
        dz = distance_m * rng.uniform(-distance_jitter, distance_jitter)
        R = rot_x(rx) @ rot_y(ry)
        poses.append(Extrinsics(R, np.array([0.0, 0.0, dz])))
    return poses


def projector_in_room(position_m, target_m=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> Extrinsics:
    """Room -> projector extrinsics for a projector aimed at ``target_m``."""
    return look_at(position_m, target_m, up)


def build_projector(
    intrinsics: Intrinsics,
    room_pose: Extrinsics,
    board_poses: Sequence[Extrinsics],
    width: int,
    height: int,
    name: str = "",
) -> ProjectorGroundTruth:
    poses = tuple(room_pose.compose(bp) for bp in board_poses)
    return ProjectorGroundTruth(intrinsics, poses, width, height, name)


def default_cameras(
    offsets_mm: Sequence[Sequence[float]] = ((0.0, 0.0, 0.0),) * 4,
    sensor: tuple[int, int] = (640, 360),
    psf_sigma: float = 1.5,
    gain: float = 1.0,
) -> list[EmbeddedCameraSpec]:
    intr = desk_camera_intrinsics(*sensor)
    return [
        EmbeddedCameraSpec(
            nominal_mm=xy,
            intrinsics=intr,
            sensor_width=sensor[0],
            sensor_height=sensor[1],
            offset_mm=tuple(off),
            psf_sigma=psf_sigma,
            gain=gain,
        )
        for xy, off in zip(board_camera_layout(), offsets_mm)
    ]
