"""Single-image calibration against a reference ray database.

Because every camera sees the collimated pattern under the same pairwise
angles, one reference image taken with a known camera fixes those angles
once and for all: back-projecting its features gives a database of unit
rays.  A new camera is then calibrated from a single image by (1) a
closed-form focal estimate from the pairwise-cosine constraints, (2) a
nonlinear refinement of all five intrinsics on the same constraints,
(3) a rotation fit between the two ray bundles, and (4) a joint
reprojection refinement that finally brings in distortion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import errors
from .core_geom import CameraIntrinsics, Distortion, Rotation, back_project
from .refine import RefinementConfig, ResidualReport, lm_minimize, single_image_ba

MAX_EXHAUSTIVE_PAIR_POINTS = 120
SUBSAMPLED_PARTNERS = 30
ANGLE_CAUCHY_SCALE = 1e-3  # cosine residual units, not pixels


@dataclass(frozen=True)
class RayDatabase:
    """Unit reference rays keyed by point id, with the camera that made them."""

    ids: np.ndarray
    rays: np.ndarray
    ref_intrinsics: CameraIntrinsics
    ref_distortion: Distortion

    def __post_init__(self):
        ids = np.atleast_1d(np.asarray(self.ids, dtype=int))
        rays = np.asarray(self.rays, dtype=float).reshape(-1, 3)
        if len(ids) != len(rays):
            raise ValueError("ids and rays must have the same length")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("database point ids must be unique")
        norms = np.linalg.norm(rays, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-12:
            raise ValueError("database rays must be unit norm within 1e-12")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "rays", rays)

    def __len__(self) -> int:
        return len(self.ids)

    def match(self, ids):
        """Indices aligning this database with the given id list (intersection)."""
        position = {int(pid): k for k, pid in enumerate(self.ids)}
        db_idx, other_idx = [], []
        for k, pid in enumerate(np.atleast_1d(ids)):
            j = position.get(int(pid))
            if j is not None:
                db_idx.append(j)
                other_idx.append(k)
        return np.array(db_idx, dtype=int), np.array(other_idx, dtype=int)


@dataclass(frozen=True)
class SingleImageResult:
    intrinsics: CameraIntrinsics
    distortion: Distortion
    rotation: Rotation
    report: ResidualReport
    n_matched: int
    n_dropped: int


def build_ray_database(ids, pixels, ref_intrinsics: CameraIntrinsics,
                       ref_distortion: Distortion) -> RayDatabase:
    """Back-project reference observations into unit rays keyed by id."""
    ids = np.atleast_1d(np.asarray(ids, dtype=int))
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(ids) < 8:
        raise ValueError(f"reference image needs >= 8 points, got {len(ids)}")
    rays = back_project(ref_intrinsics, ref_distortion, pixels)
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    return RayDatabase(ids=ids, rays=rays,
                       ref_intrinsics=ref_intrinsics, ref_distortion=ref_distortion)


def select_pairs(count: int, seed: int = 0):
    """Point-pair index sets for the cosine constraints.

    All pairs up to 120 points; beyond that each point is paired with 30
    seeded random partners, which keeps the constraint count linear.
    """
    if count <= MAX_EXHAUSTIVE_PAIR_POINTS:
        i, j = np.triu_indices(count, k=1)
        return i, j
    rng = np.random.default_rng(seed)
    ii, jj = [], []
    for i in range(count):
        partners = rng.choice(count - 1, size=SUBSAMPLED_PARTNERS, replace=False)
        partners = partners + (partners >= i)
        ii.extend([i] * SUBSAMPLED_PARTNERS)
        jj.extend(partners.tolist())
    keep = {}
    for a, b in zip(ii, jj):
        keep[(min(a, b), max(a, b))] = None
    pairs = np.array(sorted(keep), dtype=int)
    return pairs[:, 0], pairs[:, 1]


def init_focal_quartic(pixels: np.ndarray, rays: np.ndarray,
                       image_width: float, image_height: float) -> float:
    """Closed-form focal length from pairwise angle constraints.

    Assumes fx = fy = f, zero skew and the principal point at the image
    center.  Summing the per-pair constraints cos^2 = g^2 over all pairs
    gives a quadratic in (1/f)^2 which is solved exactly; with two
    admissible roots the one with smaller squared cosine error wins.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    rays = np.asarray(rays, dtype=float).reshape(-1, 3)
    if len(pixels) < 2:
        raise ValueError("focal initialization needs at least 2 correspondences")
    m = pixels - np.array([image_width / 2.0, image_height / 2.0])
    i, j = select_pairs(len(pixels))
    g = np.sum(rays[i] * rays[j], axis=1)
    alpha = np.sum(m[i] * m[j], axis=1)
    beta_i = np.sum(m[i] * m[i], axis=1)
    beta_j = np.sum(m[j] * m[j], axis=1)
    # (alpha t + 1)^2 - g^2 (beta_i t + 1)(beta_j t + 1) = 0 with t = 1/f^2
    a2 = float(np.sum(alpha * alpha - g * g * beta_i * beta_j))
    a1 = float(np.sum(2.0 * alpha - g * g * (beta_i + beta_j)))
    a0 = float(np.sum(1.0 - g * g))
    scale = max(abs(a2), abs(a1), abs(a0))
    if scale < 1e-300:
        raise errors.NoRealRoot("pairs carry no angular information")
    a2, a1, a0 = a2 / scale, a1 / scale, a0 / scale

    if abs(a2) < 1e-14:
        roots = [-a0 / a1] if abs(a1) > 1e-14 else []
    else:
        disc = a1 * a1 - 4.0 * a2 * a0
        if disc < 0:
            roots = []
        else:
            sq = np.sqrt(disc)
            roots = [(-a1 - sq) / (2.0 * a2), (-a1 + sq) / (2.0 * a2)]
    focals = [1.0 / np.sqrt(t) for t in roots if t > 0]
    if not focals:
        raise errors.NoRealRoot("no positive real focal length root")
    if len(focals) == 1:
        return float(focals[0])

    def cosine_error(f):
        q = np.column_stack([m / f, np.ones(len(m))])
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        return float(np.sum((np.sum(q[i] * q[j], axis=1) - g) ** 2))

    return float(min(focals, key=cosine_error))


def _cosine_residual_and_jacobian(pixels, g, pair_i, pair_j):
    """Closures for the pairwise-cosine cost over the 5 intrinsic parameters."""
    ph = np.column_stack([pixels, np.ones(len(pixels))])

    def unpack(x):
        fx, fy, cx, cy, gamma = x
        intr = CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, gamma=gamma)
        q = ph @ intr.inverse.T
        return intr, q

    def residual(x):
        _, q = unpack(x)
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        return np.sum(qn[pair_i] * qn[pair_j], axis=1) - g

    def jacobian(x):
        intr, q = unpack(x)
        norms = np.linalg.norm(q, axis=1)
        qn = q / norms[:, None]
        # dq = -K^-1 dK K^-1 p~ = -K^-1 dK q, for each of the five parameters
        Ki = intr.inverse
        dK = np.zeros((5, 3, 3))
        dK[0, 0, 0] = 1.0  # fx
        dK[1, 1, 1] = 1.0  # fy
        dK[2, 0, 2] = 1.0  # cx
        dK[3, 1, 2] = 1.0  # cy
        dK[4, 0, 1] = 1.0  # gamma
        dq = -np.einsum("ab,pbc,mc->mpa", Ki, dK, q)  # (m, 5, 3)
        # d(qn) = (I - qn qn^T)/|q| dq
        dqn = (dq - qn[:, None, :] * np.einsum("ma,mpa->mp", qn, dq)[:, :, None])
        dqn /= norms[:, None, None]
        return (np.einsum("ma,mpa->mp", qn[pair_j], dqn[pair_i])
                + np.einsum("ma,mpa->mp", qn[pair_i], dqn[pair_j]))

    return residual, jacobian


def refine_intrinsics_angle(pixels: np.ndarray, rays: np.ndarray,
                            initial: CameraIntrinsics,
                            config: RefinementConfig | None = None, *,
                            hold_skew: bool = False) -> CameraIntrinsics:
    """Refine all five intrinsics on the pairwise-cosine constraints.

    Distortion is deliberately absent here; it enters only at the final
    reprojection stage.  Each pair contributes one Cauchy-robustified
    residual (calibration cosine minus database cosine).
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    rays = np.asarray(rays, dtype=float).reshape(-1, 3)
    pair_i, pair_j = select_pairs(len(pixels))
    if len(pair_i) < 5:
        raise ValueError("intrinsic refinement needs at least 5 point pairs")
    g = np.sum(rays[pair_i] * rays[pair_j], axis=1)
    residual, jacobian = _cosine_residual_and_jacobian(pixels, g, pair_i, pair_j)

    if hold_skew:
        full_residual, full_jacobian = residual, jacobian
        embed = lambda x: np.concatenate([x[:4], [initial.gamma]])
        residual = lambda x: full_residual(embed(x))
        jacobian = lambda x: full_jacobian(embed(x))[:, :4]
        x0 = np.array([initial.fx, initial.fy, initial.cx, initial.cy])
    else:
        x0 = np.array([initial.fx, initial.fy, initial.cx, initial.cy, initial.gamma])

    cfg = config or RefinementConfig()
    x, report = lm_minimize(residual, jacobian, x0, cfg,
                            robust_scale=ANGLE_CAUCHY_SCALE)
    if hold_skew:
        x = np.concatenate([x, [initial.gamma]])
    return CameraIntrinsics(fx=x[0], fy=x[1], cx=x[2], cy=x[3], gamma=x[4])


def estimate_rotation_kabsch(calib_rays: np.ndarray, db_rays: np.ndarray) -> Rotation:
    """Least-squares rotation R with R @ db_rays[i] ~ calib_rays[i].

    Centroid-subtracted covariance and SVD with the determinant-sign
    correction, so the result is always a proper rotation.  The factor
    order is fixed by the alignment direction, verified by tests, not by
    symbol-pushing: B = sum(q_bar q_bar'^T), R = U diag(1,1,d) V^T.
    """
    q = np.asarray(calib_rays, dtype=float).reshape(-1, 3)
    qp = np.asarray(db_rays, dtype=float).reshape(-1, 3)
    if len(q) != len(qp):
        raise ValueError("ray lists differ in length")
    if len(q) < 3:
        raise errors.DegenerateConfiguration("rotation fit needs >= 3 ray pairs")
    qc = q - q.mean(axis=0)
    qpc = qp - qp.mean(axis=0)
    B = qc.T @ qpc
    U, s, Vt = np.linalg.svd(B)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise errors.DegenerateConfiguration("ray bundles are collinear")
    d = np.sign(np.linalg.det(U @ Vt))
    R = U @ np.diag([1.0, 1.0, d]) @ Vt
    return Rotation.from_matrix_orthogonalized(R)


def calibrate_single_image(ids, pixels, database: RayDatabase,
                           config: RefinementConfig | None = None, *,
                           image_width: float, image_height: float,
                           refine_distortion: bool = True) -> SingleImageResult:
    """Full single-image pipeline: focal init, angle refinement, rotation, BA.

    `ids`/`pixels` are the calibration image's observations; matching against
    the database is by id intersection, unmatched points are dropped and
    counted.  Stage failures carry the stage name.
    """
    ids = np.atleast_1d(np.asarray(ids, dtype=int))
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    db_idx, obs_idx = database.match(ids)
    n_matched = len(db_idx)
    n_dropped = len(ids) - n_matched
    if n_matched < 8:
        raise ValueError(f"single-image calibration needs >= 8 matched ids, "
                         f"got {n_matched}")
    rays = database.rays[db_idx]
    uv = pixels[obs_idx]

    def stage(name, fn):
        try:
            return fn()
        except errors.CalibrationError as exc:
            raise errors.PipelineStageError(name, exc) from exc

    focal = stage("init_focal_quartic",
                  lambda: init_focal_quartic(uv, rays, image_width, image_height))
    initial = CameraIntrinsics(fx=focal, fy=focal,
                               cx=image_width / 2.0, cy=image_height / 2.0, gamma=0.0)
    intr = stage("refine_intrinsics_angle",
                 lambda: refine_intrinsics_angle(uv, rays, initial, config))

    ph = np.column_stack([uv, np.ones(len(uv))])
    calib_rays = ph @ intr.inverse.T
    calib_rays /= np.linalg.norm(calib_rays, axis=1, keepdims=True)
    rot = stage("estimate_rotation_kabsch",
                lambda: estimate_rotation_kabsch(calib_rays, rays))

    if refine_distortion:
        (intr, dist, rot), report = stage(
            "single_image_ba",
            lambda: single_image_ba(rays, uv, (intr, Distortion(0.0, 0.0), rot), config))
    else:
        dist = Distortion(0.0, 0.0)
        report = ResidualReport(rms_reprojection=float("nan"), per_image_rms=(),
                                iterations_used=0, converged=True, cost_trajectory=())
    return SingleImageResult(intrinsics=intr, distortion=dist, rotation=rot,
                             report=report, n_matched=n_matched, n_dropped=n_dropped)
