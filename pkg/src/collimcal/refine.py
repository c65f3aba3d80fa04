"""Robust nonlinear refinement built on a damped normal-equations LM engine.

Three bundle adjustments share one projection chain and its analytic
Jacobian: the spherical-motion refinement (shared optical center, 10 + 3N
parameters), the single-image refinement over (K, d, R), and a free
6-DOF-per-image refinement used by the baseline.  Rotations are updated
right-multiplicatively, R <- R exp(delta^), and re-orthogonalized on
every accepted step; the solver works on local increments, so Jacobian
rotation blocks are evaluated at delta = 0.

Residuals are robustified with the Cauchy function rho(s) = c^2 log(1 + s/c^2)
applied per residual block via iteratively reweighted least squares.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import errors
from .core_geom import (
    CameraIntrinsics,
    Distortion,
    ObservationSet,
    Rotation,
    axis_angle_from_rotation_matrix,
    rotation_matrix_from_axis_angle,
    skew,
)
from .multi_solver import SphericalExtrinsics

_MU_MIN = 1e-12
_MU_MAX = 1e16


@dataclass(frozen=True)
class RefinementConfig:
    max_iterations: int = 100
    gradient_tolerance: float = 1e-10
    parameter_tolerance: float = 1e-12
    cauchy_scale: float = 2.0
    initial_damping: float = 1e-3

    def __post_init__(self):
        for name in ("max_iterations", "gradient_tolerance", "parameter_tolerance",
                     "cauchy_scale", "initial_damping"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class ResidualReport:
    rms_reprojection: float
    per_image_rms: tuple
    iterations_used: int
    converged: bool
    cost_trajectory: tuple


def _block_squares(r: np.ndarray, block_size: int) -> np.ndarray:
    return np.sum(r.reshape(-1, block_size) ** 2, axis=1)


def _robust_cost(r: np.ndarray, block_size: int, scale) -> float:
    s = _block_squares(r, block_size)
    if scale is None:
        return float(np.sum(s))
    c2 = scale * scale
    return float(c2 * np.sum(np.log1p(s / c2)))


def _block_weights(r: np.ndarray, block_size: int, scale) -> np.ndarray:
    if scale is None:
        return np.ones(len(r))
    s = _block_squares(r, block_size)
    w = 1.0 / (1.0 + s / (scale * scale))
    return np.repeat(w, block_size)


def lm_minimize(residual_fn, jacobian_fn, x0, config: RefinementConfig | None = None, *,
                block_size: int = 1, robust_scale: float | None = None, plus=None):
    """Damped normal-equations Levenberg-Marquardt.

    `residual_fn(x)` and `jacobian_fn(x)` are evaluated at the current point;
    when `plus` is given, parameters live on a manifold and the Jacobian is
    taken with respect to the local increment at zero.  Damping is divided by
    10 on accepted steps and multiplied by 10 on rejections; termination on
    gradient infinity norm, step norm, or the iteration budget.

    Returns (parameters, ResidualReport).  The cost trajectory holds the
    robust cost at the start and after every accepted step.
    """
    cfg = config or RefinementConfig()
    if plus is None:
        plus = lambda x, d: x + d
    x = np.asarray(x0, dtype=float).copy()
    r = np.asarray(residual_fn(x), dtype=float)
    if r.size % block_size:
        raise ValueError("residual length is not a multiple of the block size")
    cost = _robust_cost(r, block_size, robust_scale)
    trajectory = [cost]
    mu = cfg.initial_damping
    accepted = 0
    converged = False

    for _ in range(cfg.max_iterations):
        J = np.asarray(jacobian_fn(x), dtype=float)
        if J.shape != (r.size, x.size):
            raise ValueError(f"jacobian shape {J.shape} does not match "
                             f"({r.size}, {x.size})")
        sw = np.sqrt(_block_weights(r, block_size, robust_scale))
        Jw = J * sw[:, None]
        g = Jw.T @ (r * sw)
        if np.max(np.abs(g)) < cfg.gradient_tolerance:
            converged = True
            break
        JtJ = Jw.T @ Jw
        diag = np.clip(np.diag(JtJ), _MU_MIN, None)

        step_taken = False
        while mu <= _MU_MAX:
            try:
                delta = np.linalg.solve(JtJ + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError as exc:
                if mu >= _MU_MAX:
                    raise errors.NormalEquationsFailed(
                        f"normal equations singular at damping {mu:.1e}") from exc
                mu *= 10.0
                continue
            x_new = plus(x, delta)
            try:
                r_new = np.asarray(residual_fn(x_new), dtype=float)
                cost_new = _robust_cost(r_new, block_size, robust_scale)
            except errors.CalibrationError:
                cost_new = np.inf
            if np.isfinite(cost_new) and cost_new <= cost:
                x, r, cost = x_new, r_new, cost_new
                trajectory.append(cost)
                accepted += 1
                mu = max(mu / 10.0, _MU_MIN)
                step_taken = True
                if np.linalg.norm(delta) < cfg.parameter_tolerance:
                    converged = True
                break
            mu *= 10.0
        if not step_taken or converged:
            break

    rms = float(np.sqrt(np.mean(r * r))) if r.size else 0.0
    report = ResidualReport(rms_reprojection=rms, per_image_rms=(),
                            iterations_used=accepted, converged=converged,
                            cost_trajectory=tuple(trajectory))
    return x, report


# ---------------------------------------------------------------------------
# shared projection chain with analytic derivatives
# ---------------------------------------------------------------------------

def _chain(intr_p: np.ndarray, dist_p: np.ndarray, xc: np.ndarray):
    """Pixels and derivative blocks for camera points xc (M, 3).

    Returns (uv, J_K, J_d, J_xc) with parameter order
    (fx, fy, cx, cy, gamma) and (d1, d2).
    """
    fx, fy, cx, cy, gamma = intr_p
    d1, d2 = dist_p
    z = xc[:, 2]
    if np.any(z <= 0):
        raise errors.PointBehindCamera("refinement stepped a point behind the camera")
    xn = xc[:, 0] / z
    yn = xc[:, 1] / z
    r2 = xn * xn + yn * yn
    f = 1.0 + d1 * r2 + d2 * r2 * r2
    xd = xn * f
    yd = yn * f
    uv = np.column_stack([fx * xd + gamma * yd + cx, fy * yd + cy])

    m = len(xc)
    J_K = np.zeros((m, 2, 5))
    J_K[:, 0, 0] = xd
    J_K[:, 0, 2] = 1.0
    J_K[:, 0, 4] = yd
    J_K[:, 1, 1] = yd
    J_K[:, 1, 3] = 1.0

    A = np.array([[fx, gamma], [0.0, fy]])
    D_dist = np.stack([np.column_stack([xn * r2, xn * r2 * r2]),
                       np.column_stack([yn * r2, yn * r2 * r2])], axis=1)
    J_d = np.einsum("ab,mbc->mac", A, D_dist)

    k = 2.0 * (d1 + 2.0 * d2 * r2)
    D_xy = np.empty((m, 2, 2))
    D_xy[:, 0, 0] = f + xn * xn * k
    D_xy[:, 0, 1] = xn * yn * k
    D_xy[:, 1, 0] = xn * yn * k
    D_xy[:, 1, 1] = f + yn * yn * k

    D_n = np.zeros((m, 2, 3))
    D_n[:, 0, 0] = 1.0 / z
    D_n[:, 0, 2] = -xn / z
    D_n[:, 1, 1] = 1.0 / z
    D_n[:, 1, 2] = -yn / z

    J_xc = np.einsum("ab,mbc,mcd->mad", A, D_xy, D_n)
    return uv, J_K, J_d, J_xc


def _skew_stack(v: np.ndarray) -> np.ndarray:
    S = np.zeros((len(v), 3, 3))
    S[:, 0, 1] = -v[:, 2]
    S[:, 0, 2] = v[:, 1]
    S[:, 1, 0] = v[:, 2]
    S[:, 1, 2] = -v[:, 0]
    S[:, 2, 0] = -v[:, 1]
    S[:, 2, 1] = v[:, 0]
    return S


def _compose_axis_angle(aa: np.ndarray, delta: np.ndarray) -> np.ndarray:
    R = rotation_matrix_from_axis_angle(aa) @ rotation_matrix_from_axis_angle(delta)
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return axis_angle_from_rotation_matrix(R)


def _per_image_rms(residuals_by_image):
    per = tuple(float(np.sqrt(np.mean(r * r))) for r in residuals_by_image)
    all_r = np.concatenate(residuals_by_image)
    return float(np.sqrt(np.mean(all_r * all_r))), per


def spherical_parameter_count(n_images: int, refine_center: bool = True) -> int:
    """Length of the spherical BA parameter vector: 7 + 3 (center) + 3N."""
    return 7 + (3 if refine_center else 0) + 3 * n_images


# ---------------------------------------------------------------------------
# spherical-motion bundle adjustment
# ---------------------------------------------------------------------------

def spherical_problem(observations: ObservationSet, init, *, refine_center: bool = True):
    """Residual, Jacobian and manifold-update closures for the spherical BA.

    Exposed separately so the analytic Jacobian can be checked against
    finite differences on the same local parameterization.
    Returns (residual, jacobian, plus, x0, unpack).
    """
    intr0, dist0, ext0 = init
    n = len(observations)
    if len(ext0.rotations) != n:
        raise ValueError("initial extrinsics must hold one rotation per image")
    if not np.all(np.isfinite(ext0.t_cp)):
        raise ValueError("initial optical center must be finite")

    points = [np.column_stack([xy, np.zeros(len(xy))])
              for xy, _ in (observations.correspondences(i) for i in range(n))]
    pixels = [observations.correspondences(i)[1] for i in range(n)]
    counts = [len(p) for p in points]
    frozen_center = ext0.t_cp

    center_dim = 3 if refine_center else 0
    rot_offset = 7 + center_dim

    def unpack(x):
        intr_p = x[:5]
        dist_p = x[5:7]
        t_cp = x[7:10] if refine_center else frozen_center
        aas = x[rot_offset:].reshape(n, 3)
        return intr_p, dist_p, t_cp, aas

    def residual(x):
        intr_p, dist_p, t_cp, aas = unpack(x)
        out = []
        for i in range(n):
            R = rotation_matrix_from_axis_angle(aas[i])
            xc = (points[i] - t_cp) @ R.T
            uv, *_ = _chain(intr_p, dist_p, xc)
            out.append((uv - pixels[i]).ravel())
        return np.concatenate(out)

    def jacobian(x):
        intr_p, dist_p, t_cp, aas = unpack(x)
        J = np.zeros((2 * sum(counts), len(x)))
        row = 0
        for i in range(n):
            R = rotation_matrix_from_axis_angle(aas[i])
            centered = points[i] - t_cp
            xc = centered @ R.T
            _, J_K, J_d, J_xc = _chain(intr_p, dist_p, xc)
            m = counts[i]
            rows = slice(row, row + 2 * m)
            J[rows, 0:5] = J_K.reshape(2 * m, 5)
            J[rows, 5:7] = J_d.reshape(2 * m, 2)
            if refine_center:
                J[rows, 7:10] = np.einsum("mab,bc->mac", J_xc, -R).reshape(2 * m, 3)
            D_rot = np.einsum("mab,bc,mcd->mad", J_xc, -R, _skew_stack(centered))
            J[rows, rot_offset + 3 * i: rot_offset + 3 * (i + 1)] = D_rot.reshape(2 * m, 3)
            row += 2 * m
        return J

    def plus(x, delta):
        x_new = x + delta
        for i in range(n):
            sl = slice(rot_offset + 3 * i, rot_offset + 3 * (i + 1))
            x_new[sl] = _compose_axis_angle(x[sl], delta[sl])
        return x_new

    x0 = np.concatenate(
        [np.array([intr0.fx, intr0.fy, intr0.cx, intr0.cy, intr0.gamma]),
         np.array([dist0.d1, dist0.d2])]
        + ([frozen_center] if refine_center else [])
        + [rot.axis_angle() for rot in ext0.rotations])
    return residual, jacobian, plus, x0, unpack


def spherical_ba(observations: ObservationSet, init, config: RefinementConfig | None = None,
                 *, refine_center: bool = True):
    """Jointly refine K, distortion, per-image rotations and the shared center.

    `init` is (CameraIntrinsics, Distortion, SphericalExtrinsics); the pose of
    image i is [R_i | -R_i t_cp], so the parameter vector has 10 + 3N entries
    (7 + 3N with the center frozen).  Returns the refined triple and a report.
    """
    cfg = config or RefinementConfig()
    n = len(observations)
    residual, jacobian, plus, x0, unpack = spherical_problem(
        observations, init, refine_center=refine_center)
    counts = [len(observations.images[i]) for i in range(n)]

    x, report = lm_minimize(residual, jacobian, x0, cfg,
                            block_size=2, robust_scale=cfg.cauchy_scale, plus=plus)

    intr_p, dist_p, t_cp, aas = unpack(x)
    intr = CameraIntrinsics(fx=intr_p[0], fy=intr_p[1], cx=intr_p[2], cy=intr_p[3],
                            gamma=intr_p[4])
    dist = Distortion(d1=dist_p[0], d2=dist_p[1])
    rotations = tuple(Rotation.from_matrix_orthogonalized(
        rotation_matrix_from_axis_angle(aa)) for aa in aas)
    ext = SphericalExtrinsics(x=t_cp[0], y=t_cp[1], r=-t_cp[2], rotations=rotations)

    final = residual(x)
    offsets = np.cumsum([0] + [2 * c for c in counts])
    rms, per = _per_image_rms([final[offsets[i]:offsets[i + 1]] for i in range(n)])
    report = replace(report, rms_reprojection=rms, per_image_rms=per)
    return (intr, dist, ext), report


# ---------------------------------------------------------------------------
# single-image bundle adjustment
# ---------------------------------------------------------------------------

def single_image_problem(rays: np.ndarray, pixels: np.ndarray, init):
    """Residual/Jacobian/update closures for the single-image refinement."""
    rays = np.asarray(rays, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(rays) != len(pixels):
        raise ValueError("rays and pixels differ in length")
    intr0, dist0, rot0 = init

    def residual(x):
        R = rotation_matrix_from_axis_angle(x[7:10])
        uv, *_ = _chain(x[:5], x[5:7], rays @ R.T)
        return (uv - pixels).ravel()

    def jacobian(x):
        R = rotation_matrix_from_axis_angle(x[7:10])
        xc = rays @ R.T
        _, J_K, J_d, J_xc = _chain(x[:5], x[5:7], xc)
        m = len(rays)
        J = np.zeros((2 * m, 10))
        J[:, 0:5] = J_K.reshape(2 * m, 5)
        J[:, 5:7] = J_d.reshape(2 * m, 2)
        J[:, 7:10] = np.einsum("mab,bc,mcd->mad", J_xc, -R,
                               _skew_stack(rays)).reshape(2 * m, 3)
        return J

    def plus(x, delta):
        x_new = x + delta
        x_new[7:10] = _compose_axis_angle(x[7:10], delta[7:10])
        return x_new

    x0 = np.concatenate([
        np.array([intr0.fx, intr0.fy, intr0.cx, intr0.cy, intr0.gamma]),
        np.array([dist0.d1, dist0.d2]),
        rot0.axis_angle(),
    ])
    return residual, jacobian, plus, x0


def single_image_ba(rays: np.ndarray, pixels: np.ndarray, init,
                    config: RefinementConfig | None = None):
    """Refine (K, d, R) so that projected reference rays match observed pixels.

    `rays` are unit directions in the reference camera frame; the residual of
    point i is pi(K, d, R q'_i) - p_i.  Needs at least 8 correspondences.
    """
    cfg = config or RefinementConfig()
    rays = np.asarray(rays, dtype=float).reshape(-1, 3)
    if len(rays) < 8:
        raise ValueError(f"single-image refinement needs >= 8 correspondences, got {len(rays)}")
    residual, jacobian, plus, x0 = single_image_problem(rays, pixels, init)
    x, report = lm_minimize(residual, jacobian, x0, cfg,
                            block_size=2, robust_scale=cfg.cauchy_scale, plus=plus)

    intr = CameraIntrinsics(fx=x[0], fy=x[1], cx=x[2], cy=x[3], gamma=x[4])
    dist = Distortion(d1=x[5], d2=x[6])
    rot = Rotation.from_matrix_orthogonalized(rotation_matrix_from_axis_angle(x[7:10]))
    final = residual(x)
    rms, per = _per_image_rms([final])
    report = replace(report, rms_reprojection=rms, per_image_rms=per)
    return (intr, dist, rot), report


# ---------------------------------------------------------------------------
# free-motion bundle adjustment (baseline refinement)
# ---------------------------------------------------------------------------

def general_problem(observations: ObservationSet, init):
    """Residual/Jacobian/update closures for the free-motion refinement."""
    intr0, dist0, poses0 = init
    n = len(observations)
    if len(poses0) != n:
        raise ValueError("initial poses must match the image count")

    points = [np.column_stack([xy, np.zeros(len(xy))])
              for xy, _ in (observations.correspondences(i) for i in range(n))]
    pixels = [observations.correspondences(i)[1] for i in range(n)]
    counts = [len(p) for p in points]

    def unpack(x):
        return x[:5], x[5:7], x[7:].reshape(n, 6)

    def residual(x):
        intr_p, dist_p, motion = unpack(x)
        out = []
        for i in range(n):
            R = rotation_matrix_from_axis_angle(motion[i, :3])
            uv, *_ = _chain(intr_p, dist_p, points[i] @ R.T + motion[i, 3:])
            out.append((uv - pixels[i]).ravel())
        return np.concatenate(out)

    def jacobian(x):
        intr_p, dist_p, motion = unpack(x)
        J = np.zeros((2 * sum(counts), len(x)))
        row = 0
        for i in range(n):
            R = rotation_matrix_from_axis_angle(motion[i, :3])
            _, J_K, J_d, J_xc = _chain(intr_p, dist_p, points[i] @ R.T + motion[i, 3:])
            m = counts[i]
            rows = slice(row, row + 2 * m)
            J[rows, 0:5] = J_K.reshape(2 * m, 5)
            J[rows, 5:7] = J_d.reshape(2 * m, 2)
            col = 7 + 6 * i
            J[rows, col:col + 3] = np.einsum(
                "mab,bc,mcd->mad", J_xc, -R, _skew_stack(points[i])).reshape(2 * m, 3)
            J[rows, col + 3:col + 6] = J_xc.reshape(2 * m, 3)
            row += 2 * m
        return J

    def plus(x, delta):
        x_new = x + delta
        for i in range(n):
            sl = slice(7 + 6 * i, 7 + 6 * i + 3)
            x_new[sl] = _compose_axis_angle(x[sl], delta[sl])
        return x_new

    x0 = np.concatenate(
        [np.array([intr0.fx, intr0.fy, intr0.cx, intr0.cy, intr0.gamma]),
         np.array([dist0.d1, dist0.d2])]
        + [np.concatenate([rot.axis_angle(), np.asarray(t, dtype=float)])
           for rot, t in poses0])
    return residual, jacobian, plus, x0, unpack


def general_ba(observations: ObservationSet, init, config: RefinementConfig | None = None):
    """Refine K, distortion and unconstrained per-image poses (7 + 6N parameters).

    `init` is (CameraIntrinsics, Distortion, [(Rotation, t), ...]); used as the
    refinement stage of the motion-unconstrained baseline.
    """
    cfg = config or RefinementConfig()
    n = len(observations)
    counts = [len(observations.images[i]) for i in range(n)]
    residual, jacobian, plus, x0, unpack = general_problem(observations, init)
    x, report = lm_minimize(residual, jacobian, x0, cfg,
                            block_size=2, robust_scale=cfg.cauchy_scale, plus=plus)

    intr_p, dist_p, motion = unpack(x)
    intr = CameraIntrinsics(fx=intr_p[0], fy=intr_p[1], cx=intr_p[2], cy=intr_p[3],
                            gamma=intr_p[4])
    dist = Distortion(d1=dist_p[0], d2=dist_p[1])
    poses = [(Rotation.from_matrix_orthogonalized(
        rotation_matrix_from_axis_angle(motion[i, :3])), motion[i, 3:].copy())
        for i in range(n)]
    final = residual(x)
    offsets = np.cumsum([0] + [2 * c for c in counts])
    rms, per = _per_image_rms([final[offsets[i]:offsets[i + 1]] for i in range(n)])
    report = replace(report, rms_reprojection=rms, per_image_rms=per)
    return (intr, dist, poses), report
