"""Camera model, distortion, rotations and planar homographies.

Coordinate conventions used throughout the package:

    Target frame:  planar calibration pattern on Z = 0, units mm,
                   origin at the pattern's upper-left point.
    Camera frame:  right-handed, X right, Y down, Z forward; a pose
                   (R, t) maps target points to camera points as
                   x_cam = R @ P + t.
    Image frame:   pixels, origin top-left, u right, v down.

A homography maps homogeneous target-plane points (X, Y, 1) to
homogeneous pixels and factors as H = lam * K [r1 r2 t].  Estimated
homographies are scaled to Frobenius norm sqrt(3) with H[2,2] > 0,
which pins the otherwise arbitrary sign/scale of lam.

Radial distortion uses the forward (projection-side) model: normalized
coordinates are scaled by (1 + d1 r^2 + d2 r^4) before the intrinsic
map.  Undistortion is done by fixed-point iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import errors

UNDISTORT_MAX_ITERATIONS = 20
UNDISTORT_TOLERANCE = 1e-12
ROTATION_TOLERANCE = 1e-12


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal lengths, principal point and skew, in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    gamma: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, self.gamma, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        # Closed-form inverse of the upper-triangular intrinsic matrix.
        return np.array([
            [1.0 / self.fx, -self.gamma / (self.fx * self.fy),
             (self.gamma * self.cy - self.cx * self.fy) / (self.fx * self.fy)],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ])

    @classmethod
    def from_matrix(cls, K: np.ndarray) -> "CameraIntrinsics":
        K = np.asarray(K, dtype=float)
        if K.shape != (3, 3) or abs(K[2, 2]) < 1e-300:
            raise ValueError("intrinsic matrix must be 3x3 with K[2,2] != 0")
        K = K / K[2, 2]
        return cls(fx=K[0, 0], fy=K[1, 1], cx=K[0, 2], cy=K[1, 2], gamma=K[0, 1])


@dataclass(frozen=True)
class Distortion:
    """Two-coefficient radial distortion applied in normalized image coordinates.

    The forward map x -> x * (1 + d1 r^2 + d2 r^4) must stay monotone in
    radius over the working field of view; callers that know the field of
    view check this with `assert_monotone` against the image diagonal.
    """

    d1: float = 0.0
    d2: float = 0.0

    def factor(self, r2):
        return 1.0 + self.d1 * r2 + self.d2 * r2 * r2

    def is_monotone_within(self, max_radius: float, samples: int = 256) -> bool:
        # d/dr of r*(1 + d1 r^2 + d2 r^4) = 1 + 3 d1 r^2 + 5 d2 r^4
        r2 = np.linspace(0.0, max_radius, samples) ** 2
        return bool(np.all(1.0 + 3.0 * self.d1 * r2 + 5.0 * self.d2 * r2 * r2 > 0.0))


def assert_monotone_distortion(dist: Distortion, max_radius: float) -> None:
    if not dist.is_monotone_within(max_radius):
        raise ValueError(
            f"distortion ({dist.d1}, {dist.d2}) is not monotone within "
            f"normalized radius {max_radius:.4f}")


@dataclass(frozen=True)
class Rotation:
    """A proper rotation matrix, validated on construction."""

    matrix: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.matrix, dtype=float)
        if R.shape != (3, 3):
            raise ValueError("rotation must be a 3x3 matrix")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ROTATION_TOLERANCE:
            raise ValueError("matrix is not orthonormal within 1e-12")
        if abs(np.linalg.det(R) - 1.0) > ROTATION_TOLERANCE:
            raise ValueError("matrix determinant is not +1 within 1e-12")
        object.__setattr__(self, "matrix", R)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def from_axis_angle(cls, v) -> "Rotation":
        return cls(rotation_matrix_from_axis_angle(np.asarray(v, dtype=float)))

    @classmethod
    def from_matrix_orthogonalized(cls, M: np.ndarray) -> "Rotation":
        """Nearest rotation to M in the Frobenius sense, via SVD."""
        U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
        R = U @ Vt
        if np.linalg.det(R) < 0:
            R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
        return cls(R)

    def axis_angle(self) -> np.ndarray:
        return axis_angle_from_rotation_matrix(self.matrix)

    def compose(self, other: "Rotation") -> "Rotation":
        return Rotation(self.matrix @ other.matrix)

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T.copy())

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.matrix.T


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def rotation_matrix_from_axis_angle(v: np.ndarray) -> np.ndarray:
    """Rodrigues formula; v is the unit axis scaled by the angle in radians."""
    theta = float(np.linalg.norm(v))
    if theta < 1e-12:
        # Second-order expansion keeps the map smooth through zero.
        S = skew(v)
        return np.eye(3) + S + 0.5 * (S @ S)
    S = skew(v / theta)
    return np.eye(3) + np.sin(theta) * S + (1.0 - np.cos(theta)) * (S @ S)


def axis_angle_from_rotation_matrix(R: np.ndarray) -> np.ndarray:
    cos_theta = float(np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0))
    theta = float(np.arccos(cos_theta))
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-7:
        return 0.5 * w
    if abs(np.pi - theta) < 1e-7:
        # Near pi the off-diagonal difference vanishes; use the symmetric part.
        A = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        k = int(np.argmax(axis))
        axis = A[:, k] / axis[k]
        axis /= np.linalg.norm(axis)
        if np.dot(axis, w) < 0:
            axis = -axis
        return axis * theta
    return w * (theta / (2.0 * np.sin(theta)))


@dataclass(frozen=True)
class PlanarTarget:
    """Known planar pattern: integer point ids and their (X, Y) mm positions, Z = 0."""

    ids: np.ndarray
    xy: np.ndarray

    def __post_init__(self):
        ids = np.atleast_1d(np.asarray(self.ids, dtype=int))
        xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        if ids.shape[0] != xy.shape[0]:
            raise ValueError("ids and xy must have the same length")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("target point ids must be unique")
        if len(ids) < 4:
            raise ValueError("target needs at least 4 points")
        centered = xy - xy.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-9 * max(1.0, np.abs(xy).max())) < 2:
            raise ValueError("target points are collinear")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "xy", xy)

    def xy_for(self, ids: np.ndarray) -> np.ndarray:
        order = {pid: k for k, pid in enumerate(self.ids.tolist())}
        idx = np.array([order[int(i)] for i in ids], dtype=int)
        return self.xy[idx]


@dataclass(frozen=True)
class ImagePoints:
    """Observed pixels of one image, keyed by target point id."""

    ids: np.ndarray
    uv: np.ndarray

    def __post_init__(self):
        ids = np.atleast_1d(np.asarray(self.ids, dtype=int))
        uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)
        if ids.shape[0] != uv.shape[0]:
            raise ValueError("ids and uv must have the same length")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("observed point ids must be unique within an image")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "uv", uv)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class ObservationSet:
    """A planar target plus per-image pixel observations of it."""

    target: PlanarTarget
    images: tuple

    def __post_init__(self):
        images = tuple(self.images)
        known = set(self.target.ids.tolist())
        for k, im in enumerate(images):
            if not isinstance(im, ImagePoints):
                raise TypeError("images must be ImagePoints instances")
            if len(im) < 4:
                raise ValueError(f"image {k} has fewer than 4 observed points")
            unknown = set(im.ids.tolist()) - known
            if unknown:
                raise ValueError(f"image {k} observes ids not on the target: {sorted(unknown)}")
        object.__setattr__(self, "images", images)

    def __len__(self) -> int:
        return len(self.images)

    def correspondences(self, index: int):
        """Aligned (target_xy, pixel_uv) arrays for one image."""
        im = self.images[index]
        return self.target.xy_for(im.ids), im.uv


@dataclass(frozen=True)
class Homography:
    """A 3x3 projective map between target plane and image, defined up to scale."""

    matrix: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.matrix, dtype=float)
        if H.shape != (3, 3):
            raise ValueError("homography must be a 3x3 matrix")
        s = np.linalg.svd(H, compute_uv=False)
        if s[-1] / s[0] <= 1e-10:
            raise ValueError("homography is rank deficient")
        object.__setattr__(self, "matrix", H)


def _with_scale_convention(H: np.ndarray) -> np.ndarray:
    """Scale to Frobenius norm sqrt(3); pick the sign making H[2,2] positive."""
    H = H * (np.sqrt(3.0) / np.linalg.norm(H))
    anchor = H[2, 2]
    if abs(anchor) < 1e-12:
        anchor = H.flat[np.argmax(np.abs(H))]
    return H if anchor > 0 else -H


def project(intr: CameraIntrinsics, dist: Distortion, rot: Rotation, t: np.ndarray,
            points: np.ndarray) -> np.ndarray:
    """Project target-frame points (N, 3) mm to pixels (N, 2).

    Raises PointBehindCamera if any point has non-positive camera-frame depth.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    xc = P @ rot.matrix.T + np.asarray(t, dtype=float)
    if np.any(xc[:, 2] <= 0):
        raise errors.PointBehindCamera(
            f"{int(np.sum(xc[:, 2] <= 0))} point(s) at non-positive depth")
    xn = xc[:, 0] / xc[:, 2]
    yn = xc[:, 1] / xc[:, 2]
    f = dist.factor(xn * xn + yn * yn)
    xd = xn * f
    yd = yn * f
    u = intr.fx * xd + intr.gamma * yd + intr.cx
    v = intr.fy * yd + intr.cy
    out = np.column_stack([u, v])
    return out[0] if np.asarray(points).ndim == 1 else out


def undistort_normalized(dist: Distortion, xy_distorted: np.ndarray) -> np.ndarray:
    """Invert the radial map by fixed-point iteration x <- x_d / factor(|x|^2)."""
    xd = np.asarray(xy_distorted, dtype=float).reshape(-1, 2)
    if dist.d1 == 0.0 and dist.d2 == 0.0:
        return xd.copy()
    x = xd.copy()
    for _ in range(UNDISTORT_MAX_ITERATIONS):
        f = dist.factor(np.sum(x * x, axis=1))
        x_new = xd / f[:, None]
        step = np.max(np.abs(x_new - x))
        x = x_new
        if step < UNDISTORT_TOLERANCE:
            return x
    raise errors.UndistortionDiverged(
        f"fixed-point undistortion did not reach {UNDISTORT_TOLERANCE:g} "
        f"in {UNDISTORT_MAX_ITERATIONS} iterations (last step {step:.3e})")


def back_project(intr: CameraIntrinsics, dist: Distortion, pixels: np.ndarray) -> np.ndarray:
    """Unit direction(s) of the ray(s) whose projection is the given pixel(s)."""
    p = np.asarray(pixels, dtype=float).reshape(-1, 2)
    ph = np.column_stack([p, np.ones(len(p))])
    xyd = ph @ intr.inverse.T
    xy = undistort_normalized(dist, xyd[:, :2])
    rays = np.column_stack([xy, np.ones(len(xy))])
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    return rays[0] if np.asarray(pixels).ndim == 1 else rays


def angular_distance(v1: np.ndarray, v2: np.ndarray) -> float:
    """Angle in [0, pi] between two nonzero 3-vectors."""
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    n1 = np.linalg.norm(v1)
    n2 = np.linalg.norm(v2)
    if n1 == 0.0 or n2 == 0.0:
        raise ValueError("angular distance is undefined for a zero vector")
    c = np.dot(v1, v2) / (n1 * n2)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _normalization_transform(points: np.ndarray) -> np.ndarray:
    """Hartley isotropic normalization: centroid to origin, mean distance sqrt(2)."""
    pts = np.asarray(points, dtype=float)
    centroid = pts.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(pts - centroid, axis=1))
    s = np.sqrt(2.0) / mean_dist if mean_dist > 1e-12 else 1.0
    return np.array([[s, 0.0, -s * centroid[0]],
                     [0.0, s, -s * centroid[1]],
                     [0.0, 0.0, 1.0]])


def estimate_homography(target_xy: np.ndarray, pixels_uv: np.ndarray) -> Homography:
    """Normalized DLT estimate of the target-plane-to-image homography."""
    X = np.asarray(target_xy, dtype=float).reshape(-1, 2)
    U = np.asarray(pixels_uv, dtype=float).reshape(-1, 2)
    if len(X) != len(U):
        raise ValueError("correspondence lists differ in length")
    if len(X) < 4:
        raise ValueError("homography estimation needs at least 4 correspondences")

    Tx = _normalization_transform(X)
    Tu = _normalization_transform(U)
    Xn = np.column_stack([X, np.ones(len(X))]) @ Tx.T
    Un = np.column_stack([U, np.ones(len(U))]) @ Tu.T

    A = np.zeros((2 * len(X), 9))
    A[0::2, 0:3] = Xn
    A[0::2, 6:9] = -Un[:, 0:1] * Xn
    A[1::2, 3:6] = Xn
    A[1::2, 6:9] = -Un[:, 1:2] * Xn

    _, s, Vt = np.linalg.svd(A)
    # With >= 4 generic correspondences only one singular value is ~0; a
    # second vanishing one means the solution is ambiguous.
    if s[-2] <= 1e-10 * s[0]:
        raise errors.DegenerateConfiguration("homography design matrix is rank deficient")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Tu) @ Hn @ Tx
    return Homography(_with_scale_convention(H))


def homography_from_pose(intr: CameraIntrinsics, rot: Rotation, t: np.ndarray) -> Homography:
    """Exact H = K [r1 r2 t] under the package scale convention."""
    R = rot.matrix
    H = intr.matrix @ np.column_stack([R[:, 0], R[:, 1], np.asarray(t, dtype=float)])
    return Homography(_with_scale_convention(H))


def decompose_homography(H: Homography, intr: CameraIntrinsics):
    """Recover (rotation, translation, lam) from H = lam * K [r1 r2 t].

    The sign is chosen so the target origin lies in front of the camera
    (t[2] > 0) and the rotation is re-orthogonalized by SVD.
    """
    M = intr.inverse @ H.matrix
    n1 = np.linalg.norm(M[:, 0])
    n2 = np.linalg.norm(M[:, 1])
    lam = 0.5 * (n1 + n2)
    r1 = M[:, 0] / lam
    r2 = M[:, 1] / lam
    t = M[:, 2] / lam
    if t[2] < 0:
        r1, r2, t = -r1, -r2, -t
    R = Rotation.from_matrix_orthogonalized(np.column_stack([r1, r2, np.cross(r1, r2)]))
    return R, t, float(lam)
