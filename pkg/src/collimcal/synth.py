"""Synthetic scenes, the motion-unconstrained baseline, and the benchmark harness.

Scene generation follows the experimental protocol: a planar grid target
observed from a fixed optical center t_cp = (x, y, -r) with arbitrary
camera orientation, isotropic per-coordinate Gaussian pixel noise, and
optional Gaussian perturbation of the center to model an imperfect sphere.

Per-trial RNG streams derive from SeedSequence(rng_seed, spawn_key=(trial,)),
so a trial sees identical poses and noise draws at every sweep point; the
swept parameter only scales its own (always-drawn) perturbations.  This
keeps solver comparisons and sweeps paired, and makes every run bit
reproducible.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import errors
from .core_geom import (
    CameraIntrinsics,
    Distortion,
    ImagePoints,
    ObservationSet,
    PlanarTarget,
    Rotation,
    assert_monotone_distortion,
    estimate_homography,
    decompose_homography,
    project,
)
from .multi_solver import (
    _normalized_problem,
    decompose_iac,
    iac_constraint_vector,
    solve_closed_form,
)
from .refine import RefinementConfig, general_ba, spherical_ba

MAX_TILT_DEG = 30.0
POSE_ATTEMPTS = 100

PARAM_NAMES = ("fx", "fy", "cx", "cy", "gamma", "d1", "d2", "x", "y", "r")

SOLVER_ARMS = ("ours", "ours_ba", "zhang", "zhang_ba")
_ARM_LABELS = {"ours": ("ours", "init"), "ours_ba": ("ours", "refined"),
               "zhang": ("zhang", "init"), "zhang_ba": ("zhang", "refined")}

SWEEP_KINDS = ("noise", "images", "spherical")


@dataclass(frozen=True)
class TargetGrid:
    """Regular grid of target points, row-major ids, spacing in mm."""

    rows: int = 8
    cols: int = 11
    spacing: float = 30.0

    def planar_target(self) -> PlanarTarget:
        jj, ii = np.meshgrid(np.arange(self.cols), np.arange(self.rows))
        xy = np.column_stack([jj.ravel() * self.spacing, ii.ravel() * self.spacing])
        return PlanarTarget(ids=np.arange(self.rows * self.cols), xy=xy)


@dataclass(frozen=True)
class SyntheticConfig:
    """Full synthetic protocol; defaults reproduce the reference configuration."""

    intrinsics: CameraIntrinsics = CameraIntrinsics(fx=1000.0, fy=1000.0,
                                                    cx=542.0, cy=478.0, gamma=0.01)
    distortion: Distortion = Distortion(0.0, 0.0)
    image_size: tuple = (1080, 960)
    target: TargetGrid = field(default_factory=TargetGrid)
    radius: float = 700.0
    target_offset: tuple = (150.0, 105.0)
    pixel_noise_sigma: float = 0.0
    spherical_noise_sigma: float = 0.0
    image_count: int = 15
    trial_count: int = 200
    rng_seed: int = 0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.image_count < 1 or self.trial_count < 1:
            raise ValueError("counts must be at least 1")
        if self.pixel_noise_sigma < 0 or self.spherical_noise_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        w, h = self.image_size
        intr = self.intrinsics
        corners = np.array([[0.0, 0.0], [w, 0.0], [0.0, h], [w, h]])
        radii = np.hypot((corners[:, 0] - intr.cx) / intr.fx,
                         (corners[:, 1] - intr.cy) / intr.fy)
        assert_monotone_distortion(self.distortion, float(radii.max()))

    @property
    def t_cp(self) -> np.ndarray:
        return np.array([self.target_offset[0], self.target_offset[1], -self.radius])

    def truth_vector(self) -> np.ndarray:
        intr = self.intrinsics
        return np.array([intr.fx, intr.fy, intr.cx, intr.cy, intr.gamma,
                         self.distortion.d1, self.distortion.d2,
                         self.target_offset[0], self.target_offset[1], self.radius])


def default_config(**overrides) -> SyntheticConfig:
    """The reference synthetic protocol (distortion off unless overridden)."""
    return replace(SyntheticConfig(), **overrides) if overrides else SyntheticConfig()


def _inside(uv: np.ndarray, image_size) -> np.ndarray:
    w, h = image_size
    return (uv[:, 0] >= 0) & (uv[:, 0] <= w) & (uv[:, 1] >= 0) & (uv[:, 1] <= h)


def generate_spherical_poses(config: SyntheticConfig, rng: np.random.Generator):
    """Sample per-image rotations keeping the whole target visible.

    Rotations are drawn with a uniform axis and an angle uniform in
    [0, 30 deg] about the target-facing orientation; a pose is resampled
    (up to 100 attempts) until every target point projects inside the
    image.  Visibility is checked for the nominal center; the spherical
    perturbation, drawn afterwards from an always-consumed stream, models
    the imperfect collimator.  Returns [(Rotation, t_cp_i), ...].
    """
    target = config.target.planar_target()
    points = np.column_stack([target.xy, np.zeros(len(target.ids))])
    nominal = config.t_cp
    poses = []
    for _ in range(config.image_count):
        for _ in range(POSE_ATTEMPTS):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = rng.uniform(0.0, np.deg2rad(MAX_TILT_DEG))
            rot = Rotation.from_axis_angle(axis * angle)
            try:
                uv = project(config.intrinsics, config.distortion, rot,
                             -rot.matrix @ nominal, points)
            except errors.PointBehindCamera:
                continue
            if np.all(_inside(uv, config.image_size)):
                break
        else:
            raise errors.PoseSamplingFailed(
                f"no visible pose found in {POSE_ATTEMPTS} attempts; "
                f"the view cone is too wide for this target/image geometry")
        jitter = rng.normal(size=3) * config.spherical_noise_sigma
        poses.append((rot, nominal + jitter))
    return poses


def render_observations(poses, config: SyntheticConfig,
                        rng: np.random.Generator) -> ObservationSet:
    """Project the grid through the full model, add pixel noise, drop off-image points."""
    target = config.target.planar_target()
    points = np.column_stack([target.xy, np.zeros(len(target.ids))])
    images = []
    for rot, t_cp_i in poses:
        uv = project(config.intrinsics, config.distortion, rot,
                     -rot.matrix @ t_cp_i, points)
        uv = uv + rng.normal(size=uv.shape) * config.pixel_noise_sigma
        keep = _inside(uv, config.image_size)
        images.append(ImagePoints(ids=target.ids[keep], uv=uv[keep]))
    return ObservationSet(target=target, images=tuple(images))


def make_scene(config: SyntheticConfig, rng: np.random.Generator):
    """Poses plus their rendered observations, sharing one RNG stream."""
    poses = generate_spherical_poses(config, rng)
    return poses, render_observations(poses, config, rng)


# ---------------------------------------------------------------------------
# motion-unconstrained baseline initializer
# ---------------------------------------------------------------------------

def zhang_init(observations: ObservationSet) -> CameraIntrinsics:
    """Classical plane-based closed-form intrinsics, no motion constraint.

    Stacks the orthogonality/equal-norm constraints on the image of the
    absolute conic from every homography and decodes K from the smallest
    singular vector.  Needs >= 3 images for the full five-parameter model;
    with exactly 2 a zero-skew row is added.
    """
    if len(observations) < 2:
        raise ValueError("baseline initialization needs at least 2 images")
    homographies, frame = _normalized_problem(observations)
    rows = []
    for H in homographies:
        rows.append(iac_constraint_vector(H.matrix, 1, 2))
        rows.append(iac_constraint_vector(H.matrix, 1, 1)
                    - iac_constraint_vector(H.matrix, 2, 2))
    if len(observations) == 2:
        rows.append(np.array([0.0, 1.0, 0.0, 0.0, 0.0, 0.0]))  # gamma = 0
    V = np.array(rows)
    _, s, Vt = np.linalg.svd(V)
    if s[-2] <= 1e-9 * s[0]:
        raise errors.DegenerateConfiguration(
            "absolute-conic constraint matrix is rank deficient")
    return frame.intrinsics_to_raw(decompose_iac(Vt[-1]))


def _zhang_poses(observations: ObservationSet, intr: CameraIntrinsics):
    poses = []
    for i in range(len(observations)):
        xy, uv = observations.correspondences(i)
        H = estimate_homography(xy, uv)
        rot, t, _ = decompose_homography(H, intr)
        poses.append((rot, t))
    return poses


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrialStats:
    """Signed per-trial estimation errors for one solver arm at one sweep point.

    `trials` is (trial_count, 10) ordered as PARAM_NAMES; failed trials are
    NaN rows.  `seconds` holds the wall-clock time of each trial's solve.
    """

    sweep_value: float
    solver: str
    stage: str
    truth: np.ndarray
    trials: np.ndarray
    seconds: np.ndarray
    fail_count: int

    def _column(self, name: str) -> np.ndarray:
        return self.trials[:, PARAM_NAMES.index(name)]

    def mean_abs_error(self, name: str) -> float:
        col = self._column(name)
        if np.all(np.isnan(col)):
            return float("nan")
        return float(np.nanmean(np.abs(col)))

    def mean_rel_error(self, name: str) -> float:
        true = self.truth[PARAM_NAMES.index(name)]
        return self.mean_abs_error(name) / abs(true)

    def focal_rel_errors(self) -> np.ndarray:
        fx, fy = self.truth[0], self.truth[1]
        return 0.5 * (np.abs(self._column("fx")) / fx + np.abs(self._column("fy")) / fy)

    def principal_point_errors(self) -> np.ndarray:
        return np.hypot(self._column("cx"), self._column("cy"))

    def center_errors(self) -> np.ndarray:
        return np.sqrt(self._column("x") ** 2 + self._column("y") ** 2
                       + self._column("r") ** 2)

    def ms_per_trial(self) -> float:
        return float(np.nanmean(self.seconds) * 1e3)


def _config_for(config: SyntheticConfig, sweep_kind: str, value) -> SyntheticConfig:
    if sweep_kind == "noise":
        return replace(config, pixel_noise_sigma=float(value))
    if sweep_kind == "images":
        return replace(config, image_count=int(value))
    if sweep_kind == "spherical":
        return replace(config, spherical_noise_sigma=float(value))
    raise ValueError(f"unknown sweep kind {sweep_kind!r}; expected one of {SWEEP_KINDS}")


def _error_row(intr, dist, ext, truth) -> np.ndarray:
    row = np.full(10, np.nan)
    row[0] = intr.fx - truth[0]
    row[1] = intr.fy - truth[1]
    row[2] = intr.cx - truth[2]
    row[3] = intr.cy - truth[3]
    row[4] = intr.gamma - truth[4]
    if dist is not None:
        row[5] = dist.d1 - truth[5]
        row[6] = dist.d2 - truth[6]
    if ext is not None:
        row[7] = ext.x - truth[7]
        row[8] = ext.y - truth[8]
        row[9] = ext.r - truth[9]
    return row


def run_single_trial(config: SyntheticConfig, trial_index: int, arms):
    """One paired trial: one scene, every requested solver arm on it.

    Returns {arm: (error_row, seconds)}; a failed arm maps to (None, seconds).
    """
    rng = np.random.default_rng(
        np.random.SeedSequence(config.rng_seed, spawn_key=(trial_index,)))
    truth = config.truth_vector()
    for _ in range(POSE_ATTEMPTS):
        _, observations = make_scene(config, rng)
        if min(len(im) for im in observations.images) >= 20:
            break
    else:
        raise errors.PoseSamplingFailed("could not render 20 visible points per image")

    results = {}
    ba_config = RefinementConfig()
    closed_form = None
    zhang = None

    for arm in arms:
        start = time.perf_counter()
        try:
            if arm == "ours":
                closed_form = solve_closed_form(observations)
                results[arm] = (_error_row(closed_form[0], None, closed_form[1], truth),
                                time.perf_counter() - start)
            elif arm == "ours_ba":
                if closed_form is None:
                    closed_form = solve_closed_form(observations)
                init = (closed_form[0], Distortion(0.0, 0.0), closed_form[1])
                (intr, dist, ext), _ = spherical_ba(observations, init, ba_config)
                results[arm] = (_error_row(intr, dist, ext, truth),
                                time.perf_counter() - start)
            elif arm == "zhang":
                zhang = zhang_init(observations)
                results[arm] = (_error_row(zhang, None, None, truth),
                                time.perf_counter() - start)
            elif arm == "zhang_ba":
                if zhang is None:
                    zhang = zhang_init(observations)
                init = (zhang, Distortion(0.0, 0.0), _zhang_poses(observations, zhang))
                (intr, dist, _), _ = general_ba(observations, init, ba_config)
                results[arm] = (_error_row(intr, dist, None, truth),
                                time.perf_counter() - start)
            else:
                raise ValueError(f"unknown solver arm {arm!r}")
        except errors.CalibrationError:
            results[arm] = (None, time.perf_counter() - start)
    return results


def _trial_worker(payload):
    config, trial_index, arms = payload
    return trial_index, run_single_trial(config, trial_index, arms)


def default_worker_count() -> int:
    env = os.environ.get("COLLIMCAL_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_monte_carlo(config: SyntheticConfig, sweep_kind: str, sweep_values,
                    arms=SOLVER_ARMS, workers: int | None = None):
    """Monte Carlo sweep: trial_count paired trials per sweep value and arm.

    Returns a list of TrialStats, one per (sweep value, arm), in sweep-major
    order.  Per-trial failures are recorded as NaN rows; a sweep point raises
    only if more than half of the trials failed for some arm.
    """
    arms = tuple(arms)
    for arm in arms:
        if arm not in SOLVER_ARMS:
            raise ValueError(f"unknown solver arm {arm!r}")
    if workers is None:
        workers = default_worker_count()

    all_stats = []
    for value in sweep_values:
        point_config = _config_for(config, sweep_kind, value)
        truth = point_config.truth_vector()
        n = point_config.trial_count
        per_arm_errors = {arm: np.full((n, 10), np.nan) for arm in arms}
        per_arm_seconds = {arm: np.full(n, np.nan) for arm in arms}

        payloads = [(point_config, t, arms) for t in range(n)]
        if workers > 1 and n > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(_trial_worker, payloads))
        else:
            outcomes = [_trial_worker(p) for p in payloads]

        for trial_index, result in outcomes:
            for arm, (row, seconds) in result.items():
                if row is not None:
                    per_arm_errors[arm][trial_index] = row
                per_arm_seconds[arm][trial_index] = seconds

        for arm in arms:
            fails = int(np.sum(np.all(np.isnan(per_arm_errors[arm]), axis=1)))
            if fails > n // 2:
                raise errors.CalibrationError(
                    f"sweep point {value} arm {arm}: {fails}/{n} trials failed")
            solver, stage = _ARM_LABELS[arm]
            all_stats.append(TrialStats(sweep_value=float(value), solver=solver,
                                        stage=stage, truth=truth,
                                        trials=per_arm_errors[arm],
                                        seconds=per_arm_seconds[arm],
                                        fail_count=fails))
    return all_stats
