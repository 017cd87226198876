import numpy as np
import pytest

from surfel_fusion.config import SurfelConfig
from surfel_fusion.errors import (
    DegenerateInputError,
    DegenerateStateError,
    InvalidDepthError,
    UninitializedStateError,
)
from surfel_fusion.fusion import (
    Measurement,
    NoiseParams,
    apply_state,
    fuse_frame,
    info_update,
    info_update_dense,
    noise_covariance,
    observation_matrix,
)
from surfel_fusion.geometry import Intrinsics, Pose, exp_se3, rotation_matrices
from surfel_fusion.rasterizer import render
from surfel_fusion.surfel_map import SurfelMap, initialize_surfels
from test import processed, random_unit_vectors, small_intrinsics, surfel_arrays
from test.helper import batch_least_squares

# Per-block isotropic variances, as produced by the depth noise model.
SIGMA = np.array([1e-4, 1e-4, 1e-4, 4e-2, 4e-2, 4e-2])


@pytest.fixture(name="k")
def fixture_k() -> Intrinsics:
    return small_intrinsics(41, 33)


@pytest.fixture(name="pose")
def fixture_pose() -> Pose:
    return exp_se3([0.3, -0.2, 0.5, 0.2, -0.4, 0.7])


def test_observation_matrix_is_world_to_camera(pose: Pose) -> None:
    """
    ``H·[p; n] + t̄`` is the camera-frame vertex and normal.
    """
    h, t_bar = observation_matrix(pose)
    p = np.array([0.4, -1.0, 2.5])
    n = np.array([0.0, 0.6, -0.8])

    z = h @ np.concatenate([p, n]) + t_bar
    np.testing.assert_allclose(z[:3], pose.inverse().transform_points(p), atol=1e-12)
    np.testing.assert_allclose(z[3:], pose.rotation.T @ n, atol=1e-12)


def test_update_averages_equal_information() -> None:
    """
    Equal prior and measurement information gives the midpoint.
    """
    x0 = np.array([0.0, 0.0, 1.0, 0.0, 0.0, -1.0])
    z = np.array([0.02, 0.0, 1.04, 0.0, 0.6, -0.8])
    lam = 1.0 / SIGMA

    lam_new, eta_new, x_hat, sigma_hat = info_update(
        lam, lam * x0, z, np.eye(6), np.zeros(6), SIGMA
    )
    np.testing.assert_allclose(lam_new, 2 * lam)
    np.testing.assert_allclose(x_hat, (x0 + z) / 2)
    np.testing.assert_allclose(sigma_hat, SIGMA / 2)
    np.testing.assert_allclose(eta_new, lam_new * x_hat)


def test_consistent_measurement_leaves_state(pose: Pose) -> None:
    """
    Measuring exactly the current state changes only the confidence.
    """
    x0 = np.array([0.4, -1.0, 2.5, 0.0, 0.6, -0.8])
    h, t_bar = observation_matrix(pose)
    lam = np.array([50.0, 50.0, 50.0, 3.0, 3.0, 3.0])

    lam_new, _, x_hat, _ = info_update(lam, lam * x0, h @ x0 + t_bar, h, t_bar, SIGMA)
    np.testing.assert_allclose(x_hat, x0, atol=1e-12)
    assert np.all(lam_new > lam)


def test_sequential_updates_match_batch_least_squares(pose: Pose) -> None:
    """
    Fusing measurements one at a time equals solving for all of them at once.
    """
    rng = np.random.default_rng(0)
    x_true = np.array([0.4, -1.0, 2.5, 0.0, 0.6, -0.8])
    h, t_bar = observation_matrix(pose)

    prior_variance = SIGMA * 3.0
    prior = x_true + rng.normal(0.0, np.sqrt(prior_variance))
    lam, eta = 1.0 / prior_variance, prior / prior_variance

    world_measurements, variances = [], []
    for scale in (1.0, 0.5, 2.0, 1.3, 0.7):
        variance = SIGMA * scale
        z = h @ x_true + t_bar + rng.normal(0.0, np.sqrt(variance))
        lam, eta, x_hat, _ = info_update(lam, eta, z, h, t_bar, variance)
        world_measurements.append(h.T @ (z - t_bar))
        variances.append(variance)

    expected = batch_least_squares(prior, prior_variance, world_measurements, variances)
    np.testing.assert_allclose(x_hat, expected, atol=1e-10)


def test_dense_update_matches_diagonal(pose: Pose) -> None:
    """
    With isotropic blocks the general update stays diagonal and agrees with the
    diagonal one.
    """
    rng = np.random.default_rng(1)
    h, t_bar = observation_matrix(pose)
    lam = rng.uniform(10.0, 100.0, 6)
    eta = lam * rng.normal(size=6)
    z = rng.normal(size=6)

    lam_d, eta_d, x_d, sigma_d = info_update(lam, eta, z, h, t_bar, SIGMA)
    lam_f, eta_f, x_f, sigma_f = info_update_dense(lam, eta, z, h, t_bar, SIGMA)

    np.testing.assert_allclose(lam_f, np.diag(lam_d), rtol=1e-10, atol=1e-6)
    np.testing.assert_allclose(eta_f, eta_d, rtol=1e-10)
    np.testing.assert_allclose(x_f, x_d, rtol=1e-9)
    np.testing.assert_allclose(np.diag(sigma_f), sigma_d, rtol=1e-9)


def test_update_broadcasts_over_states(pose: Pose) -> None:
    """
    A batch update equals the per-state updates.
    """
    rng = np.random.default_rng(2)
    h, t_bar = observation_matrix(pose)
    lam = rng.uniform(10.0, 100.0, (5, 6))
    eta = lam * rng.normal(size=(5, 6))
    z = rng.normal(size=(5, 6))
    sigma = noise_covariance(rng.uniform(0.5, 3.0, 5), NoiseParams())

    batch = info_update(lam, eta, z, h, t_bar, sigma)
    for i in range(5):
        single = info_update(lam[i], eta[i], z[i], h, t_bar, sigma[i])
        for got, expected in zip(batch, single):
            np.testing.assert_allclose(got[i], expected)


def test_update_rejects_bad_noise() -> None:
    """
    Anisotropic blocks and non-positive variances are refused.
    """
    lam = np.ones(6)
    with pytest.raises(DegenerateInputError):
        info_update(lam, lam, np.zeros(6), np.eye(6), np.zeros(6), [1, 2, 1, 1, 1, 1])

    with pytest.raises(DegenerateInputError):
        info_update(lam, lam, np.zeros(6), np.eye(6), np.zeros(6), [0, 0, 0, 1, 1, 1])


def test_update_rejects_zero_information() -> None:
    """
    A state whose information cancels out has no mean.
    """
    lam = -1.0 / SIGMA
    with pytest.raises(UninitializedStateError):
        info_update(lam, np.zeros(6), np.zeros(6), np.eye(6), np.zeros(6), SIGMA)

    with pytest.raises(UninitializedStateError):
        info_update_dense(lam, np.zeros(6), np.zeros(6), np.eye(6), np.zeros(6), SIGMA)


def test_uncertainty_shrinks_with_observations() -> None:
    """
    After N equally noisy observations the spread of the estimate is about
    ``1/√N`` of a single observation's.
    """
    rng = np.random.default_rng(3)
    trials, n_obs = 2000, 16
    x_true = np.array([0.0, 0.0, 2.0, 0.0, 0.0, -1.0])
    sigma = np.tile(SIGMA, (trials, 1))

    first = x_true + rng.normal(0.0, np.sqrt(sigma))
    lam, eta = 1.0 / sigma, first / sigma
    for _ in range(n_obs - 1):
        z = x_true + rng.normal(0.0, np.sqrt(sigma))
        lam, eta, x_hat, _ = info_update(lam, eta, z, np.eye(6), np.zeros(6), sigma)

    ratio = np.std(x_hat[:, 2]) / np.std(first[:, 2])
    assert 0.15 <= ratio <= 0.40


def test_measurement_validation(k: Intrinsics) -> None:
    """
    Normals must be unit length and depths positive; frames yield measurements.
    """
    with pytest.raises(ValueError):
        Measurement(z=[0, 0, 1, 0, 0, 2], u=[1, 1], d=1.0)

    with pytest.raises(InvalidDepthError):
        Measurement(z=[0, 0, 1, 0, 0, -1], u=[1, 1], d=0.0)

    frame = processed(np.full(k.shape, 1.2), k)
    measurement = Measurement.from_frame(frame, (20, 16))
    np.testing.assert_allclose(measurement.z, [0, 0, 1.2, 0, 0, -1], atol=1e-12)
    np.testing.assert_array_equal(measurement.u, [20, 16])
    assert measurement.d == pytest.approx(1.2)


def test_apply_state() -> None:
    """
    Position and normal follow the state; the normal block of η is renormalised.
    """
    arrays = surfel_arrays([[0, 0, 1]], [[0, 0, -1]], lam=[[10, 10, 10, 2, 2, 2]])
    surfel = arrays.surfel(0)
    updated = apply_state(surfel, [0.1, 0.0, 1.1, 0.0, 0.0, -2.0])

    np.testing.assert_allclose(updated.p, [0.1, 0.0, 1.1])
    np.testing.assert_allclose(updated.normal, [0.0, 0.0, -1.0], atol=1e-12)
    np.testing.assert_allclose(updated.eta[3:], [0.0, 0.0, -2.0])
    # An unchanged normal leaves the rotation untouched.
    np.testing.assert_array_equal(updated.r, surfel.r)

    tilted = apply_state(surfel, [0.0, 0.0, 1.0, 0.0, 0.6, -0.8])
    np.testing.assert_allclose(tilted.normal, [0.0, 0.6, -0.8], atol=1e-12)
    np.testing.assert_allclose(tilted.eta[:3], surfel.eta[:3])

    with pytest.raises(DegenerateStateError):
        apply_state(surfel, [0.0, 0.0, 1.0, 0.0, 0.0, 0.0])


def test_normal_update_has_no_in_plane_spin() -> None:
    """
    Turning a surfel's normal keeps its tangent axes as close as possible to
    where they were.
    """
    rng = np.random.default_rng(4)
    normals = random_unit_vectors(rng, 20)
    arrays = surfel_arrays(np.zeros((20, 3)), normals)
    for i, target in enumerate(random_unit_vectors(rng, 20)):
        surfel = arrays.surfel(i)
        if surfel.normal @ target < -0.9:
            continue
        updated = apply_state(surfel, np.concatenate([[0, 0, 0], target]))

        before = rotation_matrices(surfel.r)
        after = rotation_matrices(updated.r)
        np.testing.assert_allclose(after[:, 2], target, atol=1e-9)
        # The rotation between the two frames is about the normals' common normal.
        delta = after @ before.T
        axis = np.cross(surfel.normal, target)
        if np.linalg.norm(axis) > 1e-6:
            np.testing.assert_allclose(delta @ axis, axis, atol=1e-9)


@pytest.fixture(name="mapped")
def fixture_mapped(k: Intrinsics) -> tuple[SurfelMap, Pose]:
    """
    A map spawned from one view of a wall at 1.5 m.
    """
    pose = Pose.identity()
    surfel_map = SurfelMap()
    frame = processed(np.full(k.shape, 1.5), k)
    surfel_map.add(
        initialize_surfels(
            frame, pose, render(surfel_map, pose, k), SurfelConfig(), NoiseParams()
        )
    )
    return surfel_map, pose


def test_fuse_frame_reobservation(
    k: Intrinsics, mapped: tuple[SurfelMap, Pose]
) -> None:
    """
    Seeing the same wall again fuses every surfel, doubling its information without
    moving it.
    """
    surfel_map, pose = mapped
    before = surfel_map.snapshot()
    frame = processed(np.full(k.shape, 1.5), k, frame_id=1)

    stats = fuse_frame(
        surfel_map, frame, pose, render(surfel_map, pose, k), NoiseParams()
    )

    assert stats.fused == len(surfel_map)
    assert stats.skipped_invalid == stats.skipped_occluded == stats.degenerate == 0
    assert stats.mean_position_change == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(surfel_map.arrays.lam, 2 * before.lam)
    np.testing.assert_allclose(
        surfel_map.arrays.positions, before.positions, atol=1e-12
    )
    np.testing.assert_array_equal(surfel_map.arrays.last_observed, 1)
    np.testing.assert_array_equal(surfel_map.arrays.created, 0)


def test_fuse_frame_moves_towards_measurement(
    k: Intrinsics, mapped: tuple[SurfelMap, Pose]
) -> None:
    """
    A wall measured 1 cm further away pulls the surfels halfway, since prior and
    measurement are equally confident at nearly the same depth.
    """
    surfel_map, pose = mapped
    frame = processed(np.full(k.shape, 1.51), k, frame_id=1)
    stats = fuse_frame(
        surfel_map, frame, pose, render(surfel_map, pose, k), NoiseParams()
    )

    assert stats.fused == len(surfel_map)
    z = surfel_map.arrays.positions[:, 2]
    assert np.all((z > 1.5) & (z < 1.51))
    np.testing.assert_allclose(z, 1.505, atol=5e-4)


def test_fuse_frame_all_invalid(k: Intrinsics, mapped: tuple[SurfelMap, Pose]) -> None:
    """
    A frame without depth fuses nothing and leaves the map untouched.
    """
    surfel_map, pose = mapped
    before = surfel_map.snapshot()
    frame = processed(np.zeros(k.shape), k, frame_id=1)
    stats = fuse_frame(
        surfel_map, frame, pose, render(surfel_map, pose, k), NoiseParams()
    )

    assert stats.fused == 0
    assert stats.skipped_invalid == len(surfel_map)
    np.testing.assert_array_equal(surfel_map.arrays.lam, before.lam)
    np.testing.assert_array_equal(surfel_map.arrays.last_observed, 0)


def test_fuse_frame_skips_occluded(
    k: Intrinsics, mapped: tuple[SurfelMap, Pose]
) -> None:
    """
    Surfels hidden behind a new foreground object are not updated.
    """
    surfel_map, pose = mapped
    depth = np.full(k.shape, 1.5)
    depth[10:22, 12:28] = 0.8
    frame = processed(depth, k, frame_id=1)
    stats = fuse_frame(
        surfel_map, frame, pose, render(surfel_map, pose, k), NoiseParams()
    )

    assert stats.skipped_occluded > 0
    assert stats.fused + stats.skipped_occluded + stats.skipped_invalid == len(
        surfel_map
    )
    hidden = surfel_map.arrays.last_observed == 0
    assert hidden.sum() == stats.skipped_occluded + stats.skipped_invalid


def test_fuse_frame_dense_matches_diagonal(k: Intrinsics) -> None:
    """
    The general update path gives the same map as the diagonal one.
    """
    maps = []
    for dense in (False, True):
        pose = Pose.identity()
        surfel_map = SurfelMap()
        first = processed(np.full(k.shape, 1.5), k)
        surfel_map.add(
            initialize_surfels(
                first, pose, render(surfel_map, pose, k), SurfelConfig(), NoiseParams()
            )
        )
        moved = exp_se3([0.01, 0.0, 0.0, 0.0, 0.0, 0.0])
        frame = processed(np.full(k.shape, 1.52), k, frame_id=1)
        fuse_frame(
            surfel_map,
            frame,
            moved,
            render(surfel_map, moved, k),
            NoiseParams(),
            dense_update=dense,
        )
        maps.append(surfel_map.arrays)

    np.testing.assert_allclose(maps[0].positions, maps[1].positions, atol=1e-12)
    np.testing.assert_allclose(maps[0].lam, maps[1].lam, rtol=1e-10)
