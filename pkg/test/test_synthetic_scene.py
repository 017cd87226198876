import math
from pathlib import Path

import numpy as np
import pytest

from surfel_fusion.dataset import load_frame, load_tum
from surfel_fusion.errors import ConfigurationError, DatasetFormatError
from surfel_fusion.frame_pipeline import RawFrame
from surfel_fusion.synthetic_scene import (
    Box,
    Checker,
    NoiseSpec,
    OrbitTrajectory,
    Quad,
    SceneSpec,
    Solid,
    Sphere,
    SplineTrajectory,
    ValueNoise,
    corrupt,
    ground_truth_mesh,
    icosphere,
    look_at,
    make_scene,
    render_ground_truth,
    scene_from_dataset,
    scenes,
    write_tum_sequence,
)
from test import small_intrinsics


def _wall_scene(box_first_frame: int = 0) -> SceneSpec:
    """
    A 4 m wall two meters ahead along +x, and a box appearing in front of it.
    """
    trajectory = SplineTrajectory(
        eyes=[[0.0, 0.0, 0.0], [0.0, 0.1, 0.0]],
        targets=[[1.0, 0.0, 0.0], [1.0, 0.1, 0.0]],
        frames=3,
    )
    return SceneSpec(
        name="wall",
        primitives=(
            Quad((2.0, 0.0, 0.0), (0.0, 2.0, 0.0), (0.0, 0.0, 2.0), Solid()),
            Box(
                (1.0, 0.0, 0.0),
                (0.1, 0.1, 0.1),
                Solid((1.0, 0.0, 0.0)),
                first_frame=box_first_frame,
            ),
        ),
        trajectory=trajectory,
        intrinsics=small_intrinsics(41, 33),
    )


def test_quad_intersection() -> None:
    """
    Hits inside the rectangle report the ray parameter and the plane normal.
    """
    quad = Quad((0.0, 0.0, 2.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0))
    directions = np.array([[0.0, 0.0, 1.0], [0.25, 0.0, 1.0], [1.0, 0.0, 1.0]])

    t, normals = quad.intersect(np.zeros(3), directions)

    np.testing.assert_allclose(t[:2], [2.0, 2.0])
    assert math.isinf(t[2])
    np.testing.assert_allclose(normals[0], [0.0, 0.0, 1.0])

    with pytest.raises(ValueError):
        Quad((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (1.0, 1.0, 0.0))


def test_box_intersection() -> None:
    """
    Rays enter through the nearest face, with the normal facing the ray.
    """
    box = Box((0.0, 0.0, 5.0), (1.0, 1.0, 1.0))
    directions = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [0.2, 0.0, 1.0]])

    t, normals = box.intersect(np.zeros(3), directions)

    np.testing.assert_allclose(t[[0, 2]], [4.0, 4.0])
    np.testing.assert_array_equal(normals[0], [0.0, 0.0, -1.0])
    assert math.isinf(t[1])

    t, normals = box.intersect(np.array([-3.0, 0.0, 5.0]), np.array([[1.0, 0.0, 0.0]]))
    assert t[0] == pytest.approx(2.0)
    np.testing.assert_array_equal(normals[0], [-1.0, 0.0, 0.0])

    assert box.contains(np.array([0.0, 0.5, 5.5]))
    assert not box.contains(np.zeros(3))
    with pytest.raises(ValueError):
        Box((0.0, 0.0, 0.0), (1.0, 0.0, 1.0))


def test_sphere_intersection() -> None:
    sphere = Sphere((0.0, 0.0, 3.0), 1.0)
    t, normals = sphere.intersect(np.zeros(3), np.array([[0.0, 0.0, 2.0]]))

    assert t[0] == pytest.approx(1.0)
    np.testing.assert_allclose(normals[0], [0.0, 0.0, -1.0])
    vertices, _ = sphere.triangles()
    np.testing.assert_allclose(np.linalg.norm(vertices - sphere.center, axis=1), 1.0)


def test_icosphere_counts() -> None:
    """
    Every subdivision quadruples the faces and keeps the vertices on the sphere.
    """
    for level, (v, f) in enumerate([(12, 20), (42, 80), (162, 320)]):
        vertices, faces = icosphere(level)
        assert vertices.shape == (v, 3)
        assert faces.shape == (f, 3)
        np.testing.assert_allclose(np.linalg.norm(vertices, axis=1), 1.0)


def test_textures() -> None:
    """
    Checker cells alternate; value noise is deterministic and within its palette.
    """
    checker = Checker(1.0, ((1.0, 1.0, 1.0), (0.0, 0.0, 0.0)))
    colors = checker(np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [1.5, 1.5, 0.5]]))
    np.testing.assert_array_equal(colors[:, 0], [1.0, 0.0, 1.0])

    rng = np.random.default_rng(0)
    points = rng.uniform(-2, 2, (500, 3))
    noise = ValueNoise(scale=0.3, seed=5)
    values = noise(points)
    np.testing.assert_array_equal(values, ValueNoise(scale=0.3, seed=5)(points))
    assert np.all((values >= 0.5 - 1e-12) & (values <= 1.0 + 1e-12))
    assert values[:, 0].std() > 0.01


def test_look_at() -> None:
    """
    The optical axis points at the target and image x stays horizontal.
    """
    pose = look_at([1.0, 2.0, 1.5], [0.0, 0.0, 0.5])
    forward = pose.rotation[:, 2]
    expected = np.array([-1.0, -2.0, -1.0]) / math.sqrt(6.0)

    np.testing.assert_allclose(forward, expected)
    assert pose.rotation[2, 0] == pytest.approx(0.0)
    # Image y points down.
    assert pose.rotation[2, 1] < 0
    np.testing.assert_allclose(pose.translation, [1.0, 2.0, 1.5])

    with pytest.raises(ConfigurationError):
        look_at([0.0, 0.0, 0.0], [0.0, 0.0, 1.0])


def test_orbit_trajectory() -> None:
    """
    Eyes stay on the circle; timestamps have microsecond resolution.
    """
    orbit = OrbitTrajectory(
        center=(1.0, -1.0), radius=2.0, height=1.2, frames=7, fps=3.0, arc=math.pi
    )
    truth = orbit.ground_truth()

    assert len(truth) == 7
    assert truth.timestamps[1] == 0.333333
    offsets = truth.positions - [1.0, -1.0, 1.2]
    np.testing.assert_allclose(np.linalg.norm(offsets, axis=1), 2.0)
    np.testing.assert_allclose(truth.positions[:, 2], 1.2)

    with pytest.raises(ConfigurationError):
        OrbitTrajectory(center=(0.0, 0.0), radius=0.0, height=1.0, frames=3)


def test_spline_trajectory_interpolates_keys() -> None:
    spline = SplineTrajectory(
        eyes=[[0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 1.0]],
        targets=[[0.0, 5.0, 0.0]] * 3,
        frames=5,
    )
    np.testing.assert_allclose(spline.eye_and_target(0)[0], [0.0, 0.0, 1.0])
    np.testing.assert_allclose(spline.eye_and_target(2)[0], [1.0, 0.0, 1.0])
    np.testing.assert_allclose(spline.eye_and_target(4)[0], [1.0, 1.0, 1.0])

    with pytest.raises(ConfigurationError):
        SplineTrajectory(eyes=[[0.0, 0.0, 0.0]], targets=[[1.0, 0.0, 0.0]], frames=3)


def test_render_ground_truth_depth() -> None:
    """
    The wall reads its camera-z distance everywhere the box does not cover it.
    """
    spec = _wall_scene(box_first_frame=1)

    before, pose = render_ground_truth(spec, 0)
    after, _ = render_ground_truth(spec, 1)

    np.testing.assert_allclose(before.depth, 2.0)
    np.testing.assert_allclose(pose.translation, [0.0, 0.0, 0.0], atol=1e-12)
    assert before.color.dtype == np.uint8

    box = after.depth < 1.5
    assert 0 < np.count_nonzero(box) < box.size
    np.testing.assert_allclose(after.depth[box], 0.9, atol=1e-9)
    # Red box, grey wall.
    assert np.all(after.color[box][:, 1:] == 0)
    assert np.all(after.color[~box][:, 0] == after.color[~box][:, 1])

    threaded, _ = render_ground_truth(spec, 1, threads=3)
    np.testing.assert_array_equal(threaded.depth, after.depth)
    np.testing.assert_array_equal(threaded.color, after.color)

    with pytest.raises(IndexError):
        render_ground_truth(spec, 3)


def test_scene_validation() -> None:
    """
    Cameras may not start inside a primitive; scenes need two frames.
    """
    with pytest.raises(ConfigurationError):
        SceneSpec(
            name="inside",
            primitives=(Box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)),),
            trajectory=_wall_scene().trajectory,
        )
    with pytest.raises(ConfigurationError):
        SceneSpec(
            name="short",
            primitives=(),
            trajectory=OrbitTrajectory((0.0, 0.0), 1.0, 1.0, frames=1),
        )


def test_corrupt() -> None:
    """
    The noise model is deterministic per seed and frame, and honours dropout and
    quantization.
    """
    frame = RawFrame(
        np.zeros((20, 30, 3), dtype=np.uint8), np.full((20, 30), 2.0), 0.0, 4
    )
    assert corrupt(frame, NoiseSpec()) is frame

    noise = NoiseSpec(kappa=0.01, quantization=0.001)
    first = corrupt(frame, noise, seed=1)
    np.testing.assert_array_equal(first.depth, corrupt(frame, noise, seed=1).depth)
    assert not np.array_equal(first.depth, corrupt(frame, noise, seed=2).depth)
    np.testing.assert_allclose(
        first.depth / 0.001, np.rint(first.depth / 0.001), atol=1e-6
    )
    # One standard deviation is kappa·d² = 4 cm.
    assert 0.02 < np.std(first.depth) < 0.06

    dropped = corrupt(frame, NoiseSpec(dropout=1.0))
    assert not np.any(dropped.depth)

    for bad in ({"kappa": -1.0}, {"dropout": 1.5}, {"quantization": -0.1}):
        with pytest.raises(ConfigurationError):
            NoiseSpec(**bad)


def test_ground_truth_mesh_includes_late_primitives() -> None:
    mesh = ground_truth_mesh(_wall_scene(box_first_frame=2))
    assert len(mesh) == 2 + 12
    assert len(mesh.vertices) == 4 + 8


def test_canonical_scenes() -> None:
    """
    Every registered scene builds, at any power-of-two resolution divisor.
    """
    assert sorted(scenes.keys()) == ["plane-box", "room", "two-stage"]

    spec = make_scene("plane-box", frames=4, resolution_divisor=4)
    assert spec.frames == 4
    assert spec.intrinsics.shape == (60, 80)
    assert spec.resolution_divisor == 4

    two_stage = make_scene("two-stage", frames=10)
    assert [p.first_frame for p in two_stage.primitives] == [0, 0, 5]

    room = make_scene("room", frames=8, resolution_divisor=8)
    assert not room.noise.is_zero

    with pytest.raises(ConfigurationError):
        make_scene("plane-box", resolution_divisor=3)


def test_write_and_reload_sequence(tmp_path: Path) -> None:
    """
    A written sequence opens as a TUM dataset and rebuilds its scene.
    """
    spec = make_scene("plane-box", frames=3, resolution_divisor=8)
    root = write_tum_sequence(spec, tmp_path / "seq")

    handle = load_tum(root)
    assert len(handle) == 3
    assert handle.dropped == 0
    assert handle.intrinsics == spec.intrinsics
    assert handle.ground_truth is not None
    for index, pose in enumerate(handle.ground_truth.poses):
        np.testing.assert_allclose(
            pose.matrix, spec.trajectory.pose(index).matrix, atol=1e-12
        )

    expected, _ = render_ground_truth(spec, 1)
    frame = load_frame(handle, 1)
    np.testing.assert_array_equal(frame.color, expected.color)
    np.testing.assert_allclose(frame.depth, expected.depth, atol=1.0 / 5000.0)
    assert frame.timestamp == expected.timestamp

    rebuilt = scene_from_dataset(root)
    assert rebuilt.name == "plane-box"
    assert rebuilt.frames == 3
    assert rebuilt.intrinsics == spec.intrinsics

    with pytest.raises(DatasetFormatError):
        scene_from_dataset(tmp_path)
