import dataclasses
import typing

import numpy as np
import pytest

from surfel_fusion.config import Config, OptimizerConfig, RuntimeConfig
from surfel_fusion.errors import DatasetFormatError
from surfel_fusion.evaluation import Trajectory, ate_rmse
from surfel_fusion.frame_pipeline import RawFrame
from surfel_fusion.pipeline import TIMING_COLUMNS, Pipeline, RunResult
from surfel_fusion.synthetic_scene import SceneSpec, make_scene, render_ground_truth


@pytest.fixture(name="scene")
def fixture_scene() -> SceneSpec:
    """
    The plane-box sequence at 80×60, about 5 cm of camera motion per frame.
    """
    return make_scene("plane-box", resolution_divisor=4)


@pytest.fixture(name="config")
def fixture_config() -> Config:
    return Config(optimizer=OptimizerConfig(n_batch=2, m=1, interval=3))


def _run(spec: SceneSpec, config: Config, count: int) -> tuple[RunResult, Trajectory]:
    frames: dict[int, tuple[RawFrame, typing.Any]] = {}

    def load(index: int) -> RawFrame:
        frames[index] = render_ground_truth(spec, index)
        return frames[index][0]

    result = Pipeline(spec.intrinsics, config).run(load, count)
    ground_truth = Trajectory.from_pairs(
        (frames[i][0].timestamp, frames[i][1]) for i in range(count)
    )
    return result, ground_truth


def test_zero_frames(scene: SceneSpec) -> None:
    with pytest.raises(ValueError):
        Pipeline(scene.intrinsics).run(lambda i: render_ground_truth(scene, i)[0], 0)


def test_loader_errors_propagate(scene: SceneSpec) -> None:
    """
    A failure in the tracking thread stops both threads and reaches the caller.
    """

    def load(index: int) -> RawFrame:
        raise DatasetFormatError(f"frame {index} is corrupt")

    with pytest.raises(DatasetFormatError):
        Pipeline(scene.intrinsics).run(load, 3)


def test_tracks_first_frames_densely(scene: SceneSpec, config: Config) -> None:
    """
    Frames after the first are registered by the dense stage against the map, close
    to the true relative motion.
    """
    result, ground_truth = _run(scene, config, 3)

    assert [r.stage for r in result.results] == ["initial", "dense", "dense"]
    assert all(r.accepted for r in result.results)
    origin = ground_truth.poses[0].inverse()
    for estimate, truth in zip(result.trajectory.poses, ground_truth.poses):
        expected = origin @ truth
        error = np.linalg.norm(estimate.translation - expected.translation)
        assert error < 0.01


@pytest.mark.slow
def test_reconstructs_plane_box(scene: SceneSpec, config: Config) -> None:
    """
    A short noiseless run tracks the camera to within a few centimeters and
    builds a map, optimising it on schedule.
    """
    result, ground_truth = _run(scene, config, 7)

    assert len(result.trajectory) == 7
    np.testing.assert_array_equal(
        result.trajectory.timestamps, ground_truth.timestamps
    )
    assert result.keyframes[0] == 0
    assert len(result.keyframe_trajectory) == len(result.keyframes)
    assert ate_rmse(result.trajectory, ground_truth) < 3.0

    assert len(result.surfel_map) > 0
    assert result.results[0].stage == "initial"

    assert [t.frame_id for t in result.timings] == list(range(7))
    assert all(len(t.row()) == len(TIMING_COLUMNS) for t in result.timings)
    assert all(t.total >= t.preprocess for t in result.timings)

    # Batches after frames 3 and 6, plus the final drain.
    assert {r.batch for r in result.losses} == {0, 1, 2}
    assert all(np.isfinite(r.loss) for r in result.losses)


@pytest.mark.slow
def test_results_independent_of_threads(scene: SceneSpec, config: Config) -> None:
    """
    The worker count changes nothing but speed.
    """
    single, _ = _run(scene, config, 4)
    threaded = dataclasses.replace(config, runtime=RuntimeConfig(threads=3))
    multi, _ = _run(scene, threaded, 4)

    for a, b in zip(single.trajectory.poses, multi.trajectory.poses):
        np.testing.assert_allclose(a.matrix, b.matrix, atol=1e-12)
    assert single.keyframes == multi.keyframes
    np.testing.assert_allclose(
        single.surfel_map.arrays.positions, multi.surfel_map.arrays.positions
    )
