import numpy as np
import pytest

from collimcal import errors, synth
from collimcal import multi_solver as ms
from collimcal.core_geom import (
    CameraIntrinsics,
    Distortion,
    angular_distance,
    back_project,
)
from conftest import scene


def pose_rng(seed=0, trial=0):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial,)))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_default_protocol_constants():
    cfg = synth.default_config()
    assert (cfg.intrinsics.fx, cfg.intrinsics.fy) == (1000.0, 1000.0)
    assert (cfg.intrinsics.cx, cfg.intrinsics.cy) == (542.0, 478.0)
    assert cfg.intrinsics.gamma == 0.01
    assert cfg.image_size == (1080, 960)
    assert cfg.target.rows * cfg.target.cols == 88
    assert cfg.target.spacing == 30.0
    assert np.allclose(cfg.t_cp, [150.0, 105.0, -700.0])


def test_config_validation():
    with pytest.raises(ValueError):
        synth.default_config(radius=-1.0)
    with pytest.raises(ValueError):
        synth.default_config(pixel_noise_sigma=-0.1)
    with pytest.raises(ValueError):
        # non-monotone forward distortion within this camera's field of view
        synth.default_config(distortion=Distortion(-0.9, 0.0))


def test_grid_target_layout():
    grid = synth.TargetGrid(rows=2, cols=3, spacing=10.0)
    target = grid.planar_target()
    assert np.allclose(target.xy[:3], [[0, 0], [10, 0], [20, 0]])
    assert np.allclose(target.xy[3:], [[0, 10], [10, 10], [20, 10]])


# ---------------------------------------------------------------------------
# pose generation
# ---------------------------------------------------------------------------

def test_poses_share_center_without_spherical_noise():
    cfg = synth.default_config()
    poses = synth.generate_spherical_poses(cfg, pose_rng())
    centers = np.array([c for _, c in poses])
    assert np.all(centers == centers[0])
    assert np.allclose(centers[0], cfg.t_cp)


def test_poses_perturbed_center_statistics():
    cfg = synth.default_config(spherical_noise_sigma=5.0, image_count=400)
    poses = synth.generate_spherical_poses(cfg, pose_rng())
    offsets = np.array([c - cfg.t_cp for _, c in poses])
    assert 4.0 < np.std(offsets) < 6.0
    assert np.all(np.abs(np.mean(offsets, axis=0)) < 1.5)


def test_pose_motion_matrix_determinant():
    cfg = synth.default_config()
    poses = synth.generate_spherical_poses(cfg, pose_rng(seed=1))
    for rot, t_cp in poses:
        assert abs(np.linalg.det(ms.motion_matrix(rot, t_cp)) - cfg.radius) < 1e-10 * cfg.radius


def test_angle_invariance_across_poses():
    # The angle subtended by any fixed target point pair is the same from
    # every pose: spherical motion preserves viewing angles.
    cfg = synth.default_config(image_count=100)
    poses = synth.generate_spherical_poses(cfg, pose_rng(seed=2))
    target = cfg.target.planar_target()
    points = np.column_stack([target.xy, np.zeros(len(target.ids))])
    pair_rng = np.random.default_rng(3)
    for _ in range(10):
        i, j = pair_rng.choice(len(points), size=2, replace=False)
        angles = []
        for rot, t_cp in poses:
            vi = rot.matrix @ (points[i] - t_cp)
            vj = rot.matrix @ (points[j] - t_cp)
            angles.append(angular_distance(vi, vj))
        assert max(angles) - min(angles) < 1e-10


def test_target_stays_on_sphere():
    cfg = synth.default_config(image_count=1000)
    poses = synth.generate_spherical_poses(cfg, pose_rng(seed=4))
    expected = np.linalg.norm(cfg.t_cp)
    for rot, t_cp in poses:
        t = -rot.matrix @ t_cp
        assert abs(np.linalg.norm(t) - expected) < 1e-10


def test_pose_sampling_failure_when_target_cannot_fit():
    cfg = synth.default_config(radius=260.0)  # target wider than the view
    with pytest.raises(errors.PoseSamplingFailed):
        synth.generate_spherical_poses(cfg, pose_rng(seed=5))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def test_render_full_visibility_noiseless():
    cfg = synth.default_config()
    rng = pose_rng(seed=6)
    poses = synth.generate_spherical_poses(cfg, rng)
    obs = synth.render_observations(poses, cfg, rng)
    assert all(len(im) == 88 for im in obs.images)


def test_render_inverts_through_back_projection():
    cfg = synth.default_config(distortion=Distortion(0.1, -0.2), image_count=3)
    rng = pose_rng(seed=7)
    poses = synth.generate_spherical_poses(cfg, rng)
    obs = synth.render_observations(poses, cfg, rng)
    target = cfg.target.planar_target()
    for (rot, t_cp), im in zip(poses, obs.images):
        points = np.column_stack([target.xy_for(im.ids),
                                  np.zeros(len(im.ids))])
        cam = (points - t_cp) @ rot.matrix.T
        rays = back_project(cfg.intrinsics, cfg.distortion, im.uv)
        cam /= np.linalg.norm(cam, axis=1, keepdims=True)
        assert np.max(np.linalg.norm(np.cross(rays, cam), axis=1)) < 1e-10


def test_render_noise_statistics():
    cfg = synth.default_config(pixel_noise_sigma=0.5, image_count=120)
    rng = pose_rng(seed=8)
    poses = synth.generate_spherical_poses(cfg, rng)
    noiseless = synth.render_observations(poses, synth.default_config(image_count=120),
                                          pose_rng(seed=8, trial=1))
    # rebuild with the same poses but fresh noise
    noisy = synth.render_observations(poses, cfg, rng)
    deltas = []
    for im_a, im_b in zip(noisy.images, noiseless.images):
        common = np.intersect1d(im_a.ids, im_b.ids)
        a = im_a.uv[np.isin(im_a.ids, common)]
        b = im_b.uv[np.isin(im_b.ids, common)]
        deltas.append(a - b)
    sigma = np.std(np.vstack(deltas))
    assert 0.45 < sigma < 0.55


# ---------------------------------------------------------------------------
# baseline initializer
# ---------------------------------------------------------------------------

def test_zhang_exact_on_noiseless_scene(noiseless_scene):
    _, _, obs = noiseless_scene
    intr = synth.zhang_init(obs)
    assert abs(intr.fx - 1000.0) / 1000.0 < 1e-6
    assert abs(intr.fy - 1000.0) / 1000.0 < 1e-6
    assert abs(intr.cx - 542.0) < 1e-3
    assert abs(intr.gamma - 0.01) < 1e-4


def test_zhang_degenerate_rotation_set_rejected():
    from test_multi_solver import z_rotated_observation_set
    from collimcal.core_geom import Rotation
    obs = z_rotated_observation_set(
        [Rotation.from_axis_angle([0.1, -0.07, 0.02])], extra_pairs=(0.4, -0.6))
    with pytest.raises((errors.DegenerateConfiguration, errors.NotPositiveDefinite)):
        synth.zhang_init(obs)


def test_zhang_noisier_than_constrained_solver():
    cfg = synth.default_config(pixel_noise_sigma=1.0, trial_count=25)
    stats = synth.run_monte_carlo(cfg, "noise", [1.0], arms=("ours", "zhang"), workers=1)
    ours, zhang = stats
    assert np.nanmean(ours.focal_rel_errors()) < np.nanmean(zhang.focal_rel_errors())


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------

def test_monte_carlo_deterministic():
    cfg = synth.default_config(pixel_noise_sigma=0.7, trial_count=6)
    a = synth.run_monte_carlo(cfg, "noise", [0.7], arms=("ours",), workers=1)[0]
    b = synth.run_monte_carlo(cfg, "noise", [0.7], arms=("ours",), workers=1)[0]
    assert np.array_equal(a.trials, b.trials, equal_nan=True)


def test_monte_carlo_parallel_matches_serial():
    cfg = synth.default_config(pixel_noise_sigma=0.7, trial_count=6)
    serial = synth.run_monte_carlo(cfg, "noise", [0.7], arms=("ours",), workers=1)[0]
    parallel = synth.run_monte_carlo(cfg, "noise", [0.7], arms=("ours",), workers=3)[0]
    assert np.array_equal(serial.trials, parallel.trials, equal_nan=True)


def test_monte_carlo_noise_trend():
    cfg = synth.default_config(trial_count=12)
    stats = synth.run_monte_carlo(cfg, "noise", [0.25, 1.0, 2.5], arms=("ours",),
                                  workers=1)
    focal = [np.nanmean(s.focal_rel_errors()) for s in stats]
    assert focal[0] < focal[1] < focal[2]


def test_monte_carlo_image_count_trend():
    cfg = synth.default_config(pixel_noise_sigma=0.5, trial_count=12)
    stats = synth.run_monte_carlo(cfg, "images", [3, 30], arms=("ours",), workers=1)
    assert np.nanmean(stats[1].focal_rel_errors()) < np.nanmean(stats[0].focal_rel_errors())


def test_monte_carlo_records_failures_not_fatal():
    # Three images at very high noise occasionally break the closed form;
    # failures must land in fail_count as NaN rows, not raise.
    cfg = synth.default_config(pixel_noise_sigma=3.0, image_count=3,
                                     trial_count=8)
    stats = synth.run_monte_carlo(cfg, "noise", [3.0], arms=("ours",), workers=1)[0]
    nan_rows = int(np.sum(np.all(np.isnan(stats.trials), axis=1)))
    assert nan_rows == stats.fail_count


def test_trial_stats_accessors():
    cfg = synth.default_config(pixel_noise_sigma=0.5, trial_count=5)
    s = synth.run_monte_carlo(cfg, "noise", [0.5], arms=("ours",), workers=1)[0]
    assert s.trials.shape == (5, 10)
    assert s.mean_abs_error("fx") >= 0
    assert s.mean_rel_error("fx") == pytest.approx(s.mean_abs_error("fx") / 1000.0)
    assert s.ms_per_trial() > 0
    assert s.solver == "ours" and s.stage == "init"


def test_unknown_sweep_and_arm_rejected():
    cfg = synth.default_config(trial_count=1)
    with pytest.raises(ValueError):
        synth.run_monte_carlo(cfg, "zoom", [1.0], arms=("ours",), workers=1)
    with pytest.raises(ValueError):
        synth.run_monte_carlo(cfg, "noise", [1.0], arms=("theirs",), workers=1)
