"""Pinhole geometry: projection, rays, planes, 2D homographies, rotations.

Conventions
-----------
* World -> device mapping is ``x_dev = R @ X + t``; the optical center in
  world coordinates is therefore ``-R.T @ t``.
* Device frame: +x right, +y down, +z forward (into the scene).
* 3D quantities are in meters, image quantities in pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DepthNonPositive,
    IntersectionBehindOrigin,
    PointAtInfinity,
    RayParallelToPlane,
)

DEPTH_EPS = 1e-12
PARALLEL_EPS = 1e-12
W_EPS = 1e-12
ROUNDTRIP_TOL = 1e-9
ORTHO_TOL = 1e-9
UNIT_TOL = 1e-12
HOMOGRAPHY_DET_EPS = 1e-12


def _vec(v, n: int) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != (n,):
        raise ValueError(f"expected a {n}-vector, got shape {np.shape(v)}")
    return a


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive (fx={self.fx}, fy={self.fy})")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @classmethod
    def from_matrix(cls, K) -> "Intrinsics":
        K = np.asarray(K, dtype=np.float64)
        K = K / K[2, 2]
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]))

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "Intrinsics":
        """Square-pixel intrinsics with the given horizontal field of view."""
        f = (width / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
        return cls(float(f), float(f), (width - 1) / 2.0, (height - 1) / 2.0)

    def as_list(self) -> list[float]:
        return [self.fx, self.fy, self.cx, self.cy]


@dataclass(frozen=True, eq=False)
class Extrinsics:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = _vec(self.translation, 3).copy()
        if not np.allclose(R.T @ R, np.eye(3), atol=ORTHO_TOL, rtol=0):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Extrinsics":
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        """Optical center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def matrix(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def transform(self, points) -> np.ndarray:
        """World -> device coordinates for one point (3,) or many (N, 3)."""
        P = np.asarray(points, dtype=np.float64)
        return P @ self.rotation.T + self.translation

    def compose(self, inner: "Extrinsics") -> "Extrinsics":
        """Return the mapping ``self o inner`` (apply ``inner`` first)."""
        R = self.rotation @ inner.rotation
        t = self.rotation @ inner.translation + self.translation
        return Extrinsics(_orthonormalize(R), t)

    def inverse(self) -> "Extrinsics":
        Rt = self.rotation.T
        return Extrinsics(Rt, -Rt @ self.translation)

    def __eq__(self, other):
        if not isinstance(other, Extrinsics):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __repr__(self):
        return f"Extrinsics(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = _vec(self.origin, 3).copy()
        d = _vec(self.direction, 3).copy()
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("ray direction must be nonzero")
        if abs(n - 1.0) > UNIT_TOL:
            d = d / n
        o.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def point_at(self, lam: float) -> np.ndarray:
        return self.origin + lam * self.direction


@dataclass(frozen=True, eq=False)
class Plane:
    """Points X with ``normal . X = offset``."""

    normal: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        n = _vec(self.normal, 3).copy()
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("plane normal must be nonzero")
        if abs(norm - 1.0) > UNIT_TOL:
            n = n / norm
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def z0(cls) -> "Plane":
        return cls(np.array([0.0, 0.0, 1.0]), 0.0)

    def signed_distance(self, point) -> float:
        return float(self.normal @ _vec(point, 3) - self.offset)


@dataclass(frozen=True, eq=False)
class Homography2D:
    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        H = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        scale = np.max(np.abs(H))
        if not np.isfinite(scale) or scale == 0:
            raise ValueError("homography matrix must be finite and nonzero")
        if abs(np.linalg.det(H / scale)) <= HOMOGRAPHY_DET_EPS:
            raise ValueError("homography matrix is singular")
        H.setflags(write=False)
        object.__setattr__(self, "matrix", H)

    def normalized(self) -> "Homography2D":
        """Scale so the largest-magnitude entry is +1."""
        H = self.matrix
        idx = np.unravel_index(np.argmax(np.abs(H)), H.shape)
        return Homography2D(H / H[idx])

    def inverse(self) -> "Homography2D":
        return Homography2D(np.linalg.inv(self.matrix))

    def __matmul__(self, other: "Homography2D") -> "Homography2D":
        return Homography2D(self.matrix @ other.matrix)

    def apply(self, points) -> np.ndarray:
        return apply_homography(self, points)


def project(intr: Intrinsics, extr: Extrinsics, point, depth_eps: float = DEPTH_EPS) -> np.ndarray:
    """Project a world point to pixel coordinates.

    Raises DepthNonPositive when the camera-frame depth is not positive.
    """
    xc = extr.transform(_vec(point, 3))
    if xc[2] <= depth_eps:
        raise DepthNonPositive(f"camera-frame depth {xc[2]:.3g} is not positive")
    return np.array(
        [intr.fx * xc[0] / xc[2] + intr.cx, intr.fy * xc[1] / xc[2] + intr.cy]
    )


def project_points(intr: Intrinsics, extr: Extrinsics, points, depth_eps: float = DEPTH_EPS) -> np.ndarray:
    """Vectorized :func:`project` for an (N, 3) array."""
    xc = extr.transform(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    if np.any(xc[:, 2] <= depth_eps):
        raise DepthNonPositive("at least one point has non-positive depth")
    return np.column_stack(
        [intr.fx * xc[:, 0] / xc[:, 2] + intr.cx, intr.fy * xc[:, 1] / xc[:, 2] + intr.cy]
    )


def pixel_ray(intr: Intrinsics, extr: Extrinsics, pixel) -> Ray:
    """World-frame ray leaving the optical center through ``pixel``."""
    u, v = _vec(pixel, 2)
    d_dev = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    d = extr.rotation.T @ d_dev
    return Ray(extr.center, d / np.linalg.norm(d))


def ray_plane_intersect(ray: Ray, plane: Plane, parallel_eps: float = PARALLEL_EPS) -> np.ndarray:
    denom = float(plane.normal @ ray.direction)
    if abs(denom) < parallel_eps:
        raise RayParallelToPlane("ray direction is orthogonal to the plane normal")
    lam = (plane.offset - float(plane.normal @ ray.origin)) / denom
    if lam < 0:
        raise IntersectionBehindOrigin(f"intersection lies behind the ray origin (lambda={lam:.3g})")
    return ray.origin + lam * ray.direction


def apply_homography(h: Homography2D | np.ndarray, p, w_eps: float = W_EPS) -> np.ndarray:
    """Apply a homography to one point (2,) or many points (N, 2)."""
    H = h.matrix if isinstance(h, Homography2D) else np.asarray(h, dtype=np.float64)
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    q = pts @ H[:, :2].T + H[:, 2]
    w = q[:, 2]
    # |w| is compared against the matrix scale so the check is scale invariant
    if np.any(np.abs(w) < w_eps * np.max(np.abs(H))):
        raise PointAtInfinity("point maps to infinity (w = 0)")
    out = q[:, :2] / w[:, None]
    return out[0] if single else out


def skew(v) -> np.ndarray:
    x, y, z = _vec(v, 3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(axis_angle) -> np.ndarray:
    """Axis-angle 3-vector -> rotation matrix."""
    v = _vec(axis_angle, 3)
    theta = np.linalg.norm(v)
    if theta < 1e-12:
        # second-order series keeps the result orthonormal to machine precision
        S = skew(v)
        return _orthonormalize(np.eye(3) + S + 0.5 * S @ S)
    k = v / theta
    K = skew(k)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def rodrigues_inv(R) -> np.ndarray:
    """Rotation matrix -> axis-angle 3-vector with norm in [0, pi]."""
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = np.linalg.norm(w)
    c = 0.5 * (np.trace(R) - 1.0)
    theta = np.arctan2(s, c)
    if s > 1e-7:
        return w * (theta / s)
    if c > 0:
        return w  # theta ~ 0, sin(theta) ~ theta
    # theta ~ pi: axis from the symmetric part R = 2 k k^T - I
    B = 0.5 * (R + np.eye(3))
    i = int(np.argmax(np.diag(B)))
    k = B[:, i] / np.sqrt(B[i, i])
    k /= np.linalg.norm(k)
    if w @ k < 0:
        k = -k
    return k * theta


def rodrigues_point_jacobian(axis_angle, point) -> np.ndarray:
    """d(R(v) @ X)/dv as a 3x3 matrix.

    Uses the closed form of Gallego & Yezzi (2015); reduces to -[X]x at v = 0.
    """
    v = _vec(axis_angle, 3)
    X = _vec(point, 3)
    theta2 = v @ v
    if theta2 < 1e-24:
        return -skew(X)
    R = rodrigues(v)
    return -R @ skew(X) @ (np.outer(v, v) + (R.T - np.eye(3)) @ skew(v)) / theta2


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def look_at(position, target, up=(0.0, 1.0, 0.0)) -> Extrinsics:
    """Extrinsics of a device at ``position`` whose optical axis hits ``target``.

    Image +y is aligned with ``-up`` as far as the view direction allows.
    """
    pos = _vec(position, 3)
    z = _vec(target, 3) - pos
    z /= np.linalg.norm(z)
    down = -_vec(up, 3)
    x = np.cross(down, z)
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise ValueError("view direction is parallel to the up vector")
    x /= nx
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    return Extrinsics(R, -R @ pos)


def _orthonormalize(R) -> np.ndarray:
    """Nearest rotation (orthogonal polar factor with det = +1)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


nearest_rotation = _orthonormalize
