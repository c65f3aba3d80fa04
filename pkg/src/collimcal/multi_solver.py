"""Initial-value solvers under the spherical motion constraint.

With the camera optical center fixed at t_cp = (x, y, -r) in the target
frame, every image pose is [R | -R t_cp] and each homography yields five
independent constraints coupling the intrinsics with (x, y, r).  Stacking
them gives a closed-form linear solve for three or more images; for
exactly two images a minimal solver treats the combined center term as a
hidden variable and reduces the system to a quadratic.

All solvers internally rescale pixels and target coordinates to O(1)
(shared similarity transforms) before assembling constraint matrices;
without this the mixed pixel/mm scales lose half the float64 mantissa to
cancellation.  Results are mapped back to the input units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import errors
from .core_geom import (
    CameraIntrinsics,
    Homography,
    ObservationSet,
    Rotation,
    decompose_homography,
    estimate_homography,
)

# Index of each entry of a symmetric 3x3 matrix in its 6-vector form
# (M11, M12, M13, M22, M23, M33).
_SYM_INDEX = {(1, 1): 0, (1, 2): 1, (1, 3): 2, (2, 2): 3, (2, 3): 4, (3, 3): 5}
_SYM_PAIRS = [(1, 1), (1, 2), (1, 3), (2, 2), (2, 3), (3, 3)]

RANK_RATIO_CUTOFF = 1e-8


@dataclass(frozen=True)
class SphericalExtrinsics:
    """Spherical-motion extrinsics: fixed optical center plus per-image rotations."""

    x: float
    y: float
    r: float
    rotations: tuple

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"spherical radius must be positive, got {self.r}")
        object.__setattr__(self, "rotations", tuple(self.rotations))

    @property
    def t_cp(self) -> np.ndarray:
        return np.array([self.x, self.y, -self.r])


@dataclass(frozen=True)
class LinearSystem:
    """Stacked constraint system D [w; a] = b with one six-row block per image."""

    d: np.ndarray
    b: np.ndarray
    lambda_ratios: tuple
    base_index: int

    def __post_init__(self):
        if self.d.shape[0] != 6 * len(self.lambda_ratios) or self.d.shape[1] != 11:
            raise ValueError("linear system must have six rows per image and 11 columns")


@dataclass(frozen=True)
class DegeneracyReport:
    """Flags for the two degenerate motions plus the rank of the stacked system."""

    pure_translation_pairs: tuple
    z_rotation_pairs: tuple
    rank: int
    singular_values: np.ndarray

    @property
    def is_degenerate(self) -> bool:
        return bool(self.pure_translation_pairs or self.z_rotation_pairs
                    or self.rank < 11)


def motion_matrix(rot: Rotation, t_cp: np.ndarray) -> np.ndarray:
    """M = [r1 r2 -R t_cp]; its determinant equals the spherical radius."""
    R = rot.matrix
    return np.column_stack([R[:, 0], R[:, 1], -R @ np.asarray(t_cp, dtype=float)])


def scale_ratio(H_i: Homography, H_base: Homography) -> float:
    """Homography scale ratio lambda_i / lambda_base.

    The motion matrix has unit determinant ratio between images, so the
    ratio is the signed real cube root of det(H_base^-1 H_i).
    """
    det_base = np.linalg.det(H_base.matrix)
    if abs(det_base) < 1e-300:
        raise errors.DegenerateConfiguration("base homography is singular")
    return float(np.cbrt(np.linalg.det(H_i.matrix) / det_base))


def _w_row(Hinv: np.ndarray, m: int, n: int):
    """Coefficients of (H^-1 W H^-T)_mn on w = (W11, W12, W13, W22, W23); W33 = 1."""
    h = Hinv
    row = np.array([
        h[m - 1, 0] * h[n - 1, 0],
        h[m - 1, 0] * h[n - 1, 1] + h[m - 1, 1] * h[n - 1, 0],
        h[m - 1, 0] * h[n - 1, 2] + h[m - 1, 2] * h[n - 1, 0],
        h[m - 1, 1] * h[n - 1, 1],
        h[m - 1, 1] * h[n - 1, 2] + h[m - 1, 2] * h[n - 1, 1],
    ])
    return row, h[m - 1, 2] * h[n - 1, 2]


def iac_constraint_vector(H: np.ndarray, m: int, n: int) -> np.ndarray:
    """u_mn with u_mn . q = h_m^T Q h_n for columns h_m, h_n of H and symmetric Q."""
    hm = H[:, m - 1]
    hn = H[:, n - 1]
    return np.array([
        hm[0] * hn[0],
        hm[0] * hn[1] + hn[0] * hm[1],
        hm[0] * hn[2] + hn[0] * hm[2],
        hm[1] * hn[1],
        hm[1] * hn[2] + hn[1] * hm[2],
        hm[2] * hn[2],
    ])


def build_linear_system(homographies, base_index: int) -> LinearSystem:
    """Stack the per-image constraint blocks around the chosen base image.

    Each image contributes six rows, one per independent entry of the
    symmetric constraint H^-1 W H^-T = mu^2 A with mu = lambda_base/lambda_i.
    The sixth (3,3) row is required: without it the A33 column is empty and
    the optical center cannot be decoded from the solution.
    """
    homographies = list(homographies)
    if not 0 <= base_index < len(homographies):
        raise ValueError("base_index out of range")
    base = homographies[base_index]
    ratios = []
    rows = []
    rhs = []
    for H in homographies:
        lam_ratio = scale_ratio(H, base)
        ratios.append(lam_ratio)
        mu2 = (1.0 / lam_ratio) ** 2
        Hinv = np.linalg.inv(H.matrix)
        for (m, n) in _SYM_PAIRS:
            w_part, w33_part = _w_row(Hinv, m, n)
            a_part = np.zeros(6)
            a_part[_SYM_INDEX[(m, n)]] = -mu2
            rows.append(np.concatenate([w_part, a_part]))
            rhs.append(-w33_part)
    return LinearSystem(d=np.array(rows), b=np.array(rhs),
                        lambda_ratios=tuple(ratios), base_index=base_index)


def decompose_iac(q: np.ndarray) -> CameraIntrinsics:
    """Intrinsics from a 6-vector IAC estimate q ~ (Q11, Q12, Q13, Q22, Q23, Q33).

    The sign is normalized so Q33 > 0; K is the inverse transpose of the
    Cholesky factor of Q, scaled to K[2,2] = 1.
    """
    q = np.asarray(q, dtype=float).reshape(6)
    if q[5] == 0.0:
        raise errors.NotPositiveDefinite("Q33 is zero")
    if q[5] < 0:
        q = -q
    Q = np.array([[q[0], q[1], q[2]],
                  [q[1], q[3], q[4]],
                  [q[2], q[4], q[5]]])
    try:
        L = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError as exc:
        raise errors.NotPositiveDefinite("IAC matrix is not positive definite") from exc
    K = np.linalg.inv(L).T
    return CameraIntrinsics.from_matrix(K / K[2, 2])


# ---------------------------------------------------------------------------
# shared normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Frame:
    """Similarity transforms taking raw pixels/target mm to O(1) solver units."""

    pixel_scale: float
    pixel_shift: np.ndarray
    target_scale: float
    target_shift: np.ndarray

    def intrinsics_to_raw(self, intr: CameraIntrinsics) -> CameraIntrinsics:
        s, m = self.pixel_scale, self.pixel_shift
        return CameraIntrinsics(fx=intr.fx * s, fy=intr.fy * s,
                                cx=intr.cx * s + m[0], cy=intr.cy * s + m[1],
                                gamma=intr.gamma * s)

    def center_to_raw(self, x: float, y: float, r: float):
        s, m = self.target_scale, self.target_shift
        return x * s + m[0], y * s + m[1], r * s


def _normalized_problem(observations: ObservationSet):
    """Per-image homographies in normalized units plus the frame to undo them."""
    all_uv = np.vstack([im.uv for im in observations.images])
    pix_shift = all_uv.mean(axis=0)
    pix_scale = np.mean(np.linalg.norm(all_uv - pix_shift, axis=1))
    tgt = observations.target.xy
    tgt_shift = tgt.mean(axis=0)
    tgt_scale = np.mean(np.linalg.norm(tgt - tgt_shift, axis=1))
    frame = _Frame(pixel_scale=pix_scale, pixel_shift=pix_shift,
                   target_scale=tgt_scale, target_shift=tgt_shift)
    homographies = []
    for k in range(len(observations)):
        xy, uv = observations.correspondences(k)
        xy_n = (xy - tgt_shift) / tgt_scale
        uv_n = (uv - pix_shift) / pix_scale
        homographies.append(estimate_homography(xy_n, uv_n))
    return homographies, frame


def _default_base_index(observations: ObservationSet) -> int:
    counts = [len(im) for im in observations.images]
    return int(np.argmax(counts))  # argmax takes the lowest index on ties


def _decode_intrinsics(w: np.ndarray) -> CameraIntrinsics:
    cx, cy = w[2], w[4]
    fy2 = w[3] - cy * cy
    if fy2 <= 0:
        raise errors.NegativeRadicand(f"W22 - cy^2 = {fy2:.3e}")
    fy = np.sqrt(fy2)
    gamma = (w[1] - cx * cy) / fy
    fx2 = w[0] - cx * cx - gamma * gamma
    if fx2 <= 0:
        raise errors.NegativeRadicand(f"W11 - cx^2 - gamma^2 = {fx2:.3e}")
    return CameraIntrinsics(fx=np.sqrt(fx2), fy=fy, cx=cx, cy=cy, gamma=gamma)


def _decode_center(a: np.ndarray):
    if a[5] <= 0:
        raise errors.NegativeRadicand(f"A33 = {a[5]:.3e} is not positive")
    x = a[2] / a[5]
    y = a[4] / a[5]
    r2 = a[0] / a[5] - x * x
    if r2 <= 0:
        raise errors.NegativeRadicand(f"A11/A33 - x^2 = {r2:.3e}")
    # The raw recovery fixes the sign of the center's z component; the radius
    # is stored positive with t_cp = (x, y, -r).
    return x, y, float(np.sqrt(r2))


def _solve_linear(observations: ObservationSet, base_index, min_images: int):
    if len(observations) < min_images:
        raise ValueError(f"closed-form solver needs at least {min_images} images, "
                         f"got {len(observations)}")
    homographies, frame = _normalized_problem(observations)
    if base_index is None:
        base_index = _default_base_index(observations)
    system = build_linear_system(homographies, base_index)
    sv = np.linalg.svd(system.d, compute_uv=False)
    if sv[-1] <= RANK_RATIO_CUTOFF * sv[0]:
        raise errors.DegenerateConfiguration(
            f"stacked linear system is rank deficient "
            f"(sigma_min/sigma_max = {sv[-1] / sv[0]:.2e})")
    solution, *_ = np.linalg.lstsq(system.d, system.b, rcond=None)
    intr_n = _decode_intrinsics(solution[:5])
    x_n, y_n, r_n = _decode_center(solution[5:])
    rotations = tuple(decompose_homography(H, intr_n)[0] for H in homographies)
    intr = frame.intrinsics_to_raw(intr_n)
    x, y, r = frame.center_to_raw(x_n, y_n, r_n)
    return intr, SphericalExtrinsics(x=x, y=y, r=r, rotations=rotations)


def solve_closed_form(observations: ObservationSet, base_index: int | None = None):
    """Closed-form calibration from three or more images.

    Returns (CameraIntrinsics, SphericalExtrinsics).  The base image is the
    one with the most observed points unless base_index overrides it.
    """
    return _solve_linear(observations, base_index, min_images=3)


# ---------------------------------------------------------------------------
# minimal solver
# ---------------------------------------------------------------------------

def _image_constraint_rows(H: np.ndarray):
    u11 = iac_constraint_vector(H, 1, 1)
    u12 = iac_constraint_vector(H, 1, 2)
    u22 = iac_constraint_vector(H, 2, 2)
    u13 = iac_constraint_vector(H, 1, 3)
    u23 = iac_constraint_vector(H, 2, 3)
    u33 = iac_constraint_vector(H, 3, 3)
    return u11, u12, u22, u13, u23, u33


def _hidden_variable_matrix(rows_by_image, c: float) -> np.ndarray:
    blocks = []
    for (u11, u12, u22, u13, u23, u33) in rows_by_image:
        blocks.append(u12)
        blocks.append(u11 - u22)
        blocks.append(u13 + u23 + u33 + c * u11)
    return np.array(blocks)


def _quadratic_roots(p2: float, p1: float, p0: float):
    scale = max(abs(p2), abs(p1), abs(p0))
    if scale == 0.0:
        raise errors.NoRealRoot("determinant polynomial vanishes identically")
    p2, p1, p0 = p2 / scale, p1 / scale, p0 / scale
    if abs(p2) < 1e-14:
        if abs(p1) < 1e-14:
            raise errors.NoRealRoot("determinant polynomial is constant")
        return [-p0 / p1]
    disc = p1 * p1 - 4.0 * p2 * p0
    if disc < 0:
        if disc > -1e-12 * max(p1 * p1, abs(4.0 * p2 * p0)):
            disc = 0.0
        else:
            raise errors.NoRealRoot(f"discriminant {disc:.3e} < 0")
    sq = np.sqrt(disc)
    return [(-p1 - sq) / (2.0 * p2), (-p1 + sq) / (2.0 * p2)]


def _candidate_residual(rows_by_image, q, centers) -> float:
    x, y, t2 = centers
    total = 0.0
    for (u11, u12, u22, u13, u23, u33) in rows_by_image:
        for row in (u12, u11 - u22, u13 + x * u11, u23 + y * u11, u33 - t2 * u11):
            total += float(row @ q) ** 2 / float(row @ row)
    return total


def solve_minimal(observations: ObservationSet):
    """Two-image minimal solver via the hidden-variable technique.

    Treats c = x + y - |t_cp|^2 as the hidden variable of a 6x6 system
    C(c) q = 0, solves det C(c) = 0 (quadratic in c) and keeps every root
    whose conic is positive definite with a positive radius.  Candidates
    are returned ordered by total squared constraint residual.
    """
    if len(observations) != 2:
        raise ValueError(f"minimal solver takes exactly 2 images, got {len(observations)}")
    homographies, frame = _normalized_problem(observations)
    rows_by_image = [_image_constraint_rows(H.matrix) for H in homographies]

    # det C(c) is quadratic in c; fit it from three evaluations.
    d0 = np.linalg.det(_hidden_variable_matrix(rows_by_image, 0.0))
    dp = np.linalg.det(_hidden_variable_matrix(rows_by_image, 1.0))
    dm = np.linalg.det(_hidden_variable_matrix(rows_by_image, -1.0))
    p2 = 0.5 * (dp + dm) - d0
    p1 = 0.5 * (dp - dm)
    roots = _quadratic_roots(p2, p1, d0)

    candidates = []
    for c in roots:
        C = _hidden_variable_matrix(rows_by_image, c)
        _, _, Vt = np.linalg.svd(C)
        q = Vt[-1]
        if q[5] < 0:
            q = -q
        try:
            intr_n = decompose_iac(q)
        except errors.NotPositiveDefinite:
            continue
        # Joint least squares of both images' center constraints.
        num = np.zeros(3)
        den = 0.0
        for (u11, _, _, u13, u23, u33) in rows_by_image:
            g11 = float(u11 @ q)
            num += g11 * np.array([-(u13 @ q), -(u23 @ q), (u33 @ q)])
            den += g11 * g11
        x_n, y_n, t2_n = num / den
        r2 = t2_n - x_n * x_n - y_n * y_n
        if r2 <= 0:
            continue
        residual = _candidate_residual(rows_by_image, q / np.linalg.norm(q),
                                       (x_n, y_n, t2_n))
        rotations = tuple(decompose_homography(H, intr_n)[0] for H in homographies)
        intr = frame.intrinsics_to_raw(intr_n)
        x, y, r = frame.center_to_raw(x_n, y_n, float(np.sqrt(r2)))
        candidates.append((residual,
                           intr,
                           SphericalExtrinsics(x=x, y=y, r=r, rotations=rotations)))
    if not candidates:
        raise errors.NoValidCandidate(
            "no root produced a positive-definite conic with positive radius")
    candidates.sort(key=lambda item: item[0])
    return [(intr, ext) for _, intr, ext in candidates]


# ---------------------------------------------------------------------------
# degeneracy detection
# ---------------------------------------------------------------------------

def _common_pixels(im_a, im_b):
    ids_a = {int(i): k for k, i in enumerate(im_a.ids)}
    rows_a, rows_b = [], []
    for k, pid in enumerate(im_b.ids):
        j = ids_a.get(int(pid))
        if j is not None:
            rows_a.append(j)
            rows_b.append(k)
    return im_a.uv[rows_a], im_b.uv[rows_b]


def _matches_z_rotation_structure(G: np.ndarray, tol: float) -> bool:
    if abs(G[2, 2]) < 1e-12:
        return False
    G = G / G[2, 2]
    checks = (
        abs(G[2, 0]), abs(G[2, 1]),
        abs(G[0, 0] - G[1, 1]), abs(G[0, 1] + G[1, 0]),
        abs(G[0, 0] ** 2 + G[1, 0] ** 2 - 1.0),
    )
    return max(checks) < tol


def detect_degeneracy(observations: ObservationSet, *,
                      pixel_tolerance: float = 1e-6,
                      structure_tolerance: float = 1e-6,
                      rank_tolerance: float = RANK_RATIO_CUTOFF) -> DegeneracyReport:
    """Flag degenerate image pairs and report the rank of the stacked system.

    Pure translation shows up as pixel-identical observations; a rotation
    about an axis parallel to z leaves the relative homography with a plane
    rotation block over an unchanged last row.
    """
    if len(observations) < 2:
        raise ValueError("degeneracy detection needs at least 2 images")
    homographies, _ = _normalized_problem(observations)

    translation_pairs = []
    z_pairs = []
    for i in range(len(observations)):
        for j in range(i + 1, len(observations)):
            uv_i, uv_j = _common_pixels(observations.images[i], observations.images[j])
            if len(uv_i) >= 4 and np.max(np.abs(uv_i - uv_j)) < pixel_tolerance:
                translation_pairs.append((i, j))
            G = np.linalg.inv(homographies[i].matrix) @ homographies[j].matrix
            if _matches_z_rotation_structure(G, structure_tolerance):
                z_pairs.append((i, j))

    system = build_linear_system(homographies, _default_base_index(observations))
    sv = np.linalg.svd(system.d, compute_uv=False)
    rank = int(np.sum(sv > rank_tolerance * sv[0]))
    return DegeneracyReport(pure_translation_pairs=tuple(translation_pairs),
                            z_rotation_pairs=tuple(z_pairs),
                            rank=rank,
                            singular_values=sv)
