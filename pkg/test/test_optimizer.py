import logging
import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from surfel_fusion.config import OptimizerConfig
from surfel_fusion.errors import BookkeepingError, ConfigurationError, EmptyDomainError
from surfel_fusion.frame_pipeline import ProcessedFrame
from surfel_fusion.geometry import Intrinsics, Pose
from surfel_fusion.optimizer import (
    Anchors,
    Gradients,
    KeyframeWindow,
    LossWeights,
    OptimizerState,
    backward,
    loss_depth,
    loss_normal,
    loss_photometric,
    loss_reg,
    optimize_batch,
    total_loss,
)
from surfel_fusion.rasterizer import (
    RenderOptions,
    RenderOutput,
    project_surfels,
    render,
)
from surfel_fusion.surfel_map import SurfelArrays, SurfelMap
from test import grid_surfels, processed, small_intrinsics, surfel_arrays


@pytest.fixture(name="k")
def fixture_k() -> Intrinsics:
    return small_intrinsics(41, 33)


def make_render(
    k: Intrinsics,
    color: float = 0.0,
    depth: float = 0.0,
    normal: tuple[float, float, float] = (0.0, 0.0, -1.0),
    alpha: float = 1.0,
) -> RenderOutput:
    """
    A hand-made render with constant maps and no footprints.
    """
    shape = k.shape
    alpha_acc = np.full(shape, alpha)
    valid = np.full(shape, depth > 0)
    normals = np.broadcast_to(np.asarray(normal, dtype=np.float64), shape + (3,))
    return RenderOutput(
        color=np.full(shape + (3,), color),
        depth=np.full(shape, depth),
        normal=normals.copy(),
        alpha_acc=alpha_acc,
        covered=alpha_acc >= 1e-3,
        valid=valid,
        normal_sum=normals * alpha,
        pose=Pose.identity(),
        intrinsics=k,
        footprints=project_surfels(SurfelArrays.empty(), Pose.identity(), k),
    )


@pytest.fixture(name="wall")
def fixture_wall(k: Intrinsics) -> ProcessedFrame:
    """
    Mid-grey wall at 1.5 m.
    """
    return processed(np.full(k.shape, 1.5), k)


def test_loss_photometric(k: Intrinsics, wall: ProcessedFrame) -> None:
    """
    Mean absolute colour error over channels and covered pixels only.
    """
    grey = 128 / 255
    assert loss_photometric(make_render(k, color=0.1), wall) == pytest.approx(
        grey - 0.1
    )

    with pytest.raises(EmptyDomainError):
        loss_photometric(make_render(k, alpha=0.0), wall)


def test_loss_depth(k: Intrinsics, wall: ProcessedFrame) -> None:
    """
    Mean absolute depth error where both depths are valid.
    """
    assert loss_depth(make_render(k, depth=1.6), wall) == pytest.approx(0.1)
    assert loss_depth(make_render(k, depth=1.5), wall) == pytest.approx(0.0)

    with pytest.raises(EmptyDomainError):
        loss_depth(make_render(k, depth=0.0), wall)

    with pytest.raises(EmptyDomainError):
        loss_depth(make_render(k, depth=1.5), processed(np.zeros(k.shape), k))


def test_loss_normal(k: Intrinsics, wall: ProcessedFrame) -> None:
    """
    Mean ``1 − cos`` between rendered and measured normals.
    """
    assert loss_normal(make_render(k, depth=1.5), wall) == pytest.approx(0.0)

    angle = math.radians(30)
    tilted = (0.0, math.sin(angle), -math.cos(angle))
    assert loss_normal(make_render(k, depth=1.5, normal=tilted), wall) == pytest.approx(
        1.0 - math.cos(angle)
    )


def test_loss_reg_and_anchors() -> None:
    """
    Distance to the anchor plus the weighted normal deviation, averaged over ids.
    """
    arrays = surfel_arrays(
        [[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]], [[0.0, 0.0, -1.0], [0.0, 0.0, -1.0]]
    )
    anchors = Anchors()
    anchors.update([0, 1], [[0.0, 0.0, 1.3], [1.0, 0.0, 1.0]], [[0, 0, -1], [0, 1, 0]])
    assert len(anchors) == 2
    assert 1 in anchors and 2 not in anchors

    # 0.3 for the first surfel; w_reg_n · 1 for the second.
    assert loss_reg(arrays, [0, 1], anchors, w_reg_n=0.5) == pytest.approx(
        (0.3 + 0.5) / 2
    )
    assert loss_reg(arrays, [1], anchors, w_reg_n=0.0) == pytest.approx(0.0)

    with pytest.raises(BookkeepingError):
        loss_reg(arrays, [0, 5], anchors)

    with pytest.raises(EmptyDomainError):
        loss_reg(arrays, [], anchors)


def test_anchors_update_from_arrays() -> None:
    """
    Anchors snapshot the current geometry of the given surfels and grow on demand.
    """
    arrays = surfel_arrays(np.arange(12.0).reshape(4, 3), np.tile([0, 0, 1.0], (4, 1)))
    anchors = Anchors()
    anchors.update_from(arrays, [3, 1])

    positions, normals = anchors.lookup([1, 3])
    np.testing.assert_array_equal(positions, arrays.positions[[1, 3]])
    np.testing.assert_allclose(normals, arrays.normals[[1, 3]])
    assert 0 not in anchors
    assert len(anchors) == 2

    arrays.positions[1] = 0.0
    np.testing.assert_array_equal(anchors.lookup([1])[0], [[3.0, 4.0, 5.0]])


def test_total_loss_combines_terms(k: Intrinsics, wall: ProcessedFrame) -> None:
    """
    ``L_c + w_d·L_d + w_n·L_n + w_reg·L_reg``.
    """
    out = make_render(k, color=0.1, depth=1.6)
    arrays = surfel_arrays([[0.0, 0.0, 1.0]], [[0.0, 0.0, -1.0]])
    anchors = Anchors()
    anchors.update([0], [[0.0, 0.0, 1.2]], [[0.0, 0.0, -1.0]])
    weights = LossWeights(w_d=0.5, w_n=0.1, w_reg=2.0, w_reg_n=0.1)

    expected = (128 / 255 - 0.1) + 0.5 * 0.1 + 0.1 * 0.0 + 2.0 * 0.2
    assert total_loss(out, wall, arrays, anchors, weights, ids=[0]) == pytest.approx(
        expected
    )

    photometric_only = LossWeights(w_d=0.0, w_n=0.0, w_reg=0.0)
    assert total_loss(out, wall, arrays, anchors, photometric_only) == pytest.approx(
        128 / 255 - 0.1
    )


def test_loss_weights_validation() -> None:
    """
    Weights must be finite and non-negative.
    """
    with pytest.raises(ConfigurationError):
        LossWeights(w_d=-1.0)

    with pytest.raises(ConfigurationError):
        LossWeights(w_n=math.nan)

    config = OptimizerConfig(w_d=0.3, w_reg=0.0)
    assert LossWeights.from_config(config) == LossWeights(0.3, 0.1, 0.0, 0.1)


@pytest.fixture(name="problem")
def fixture_problem(k: Intrinsics) -> tuple[SurfelArrays, ProcessedFrame, Anchors]:
    """
    A few overlapping, slightly tilted, semi-transparent surfels in front of a
    noisy-coloured wall; anchors are offset so every loss term is differentiable.
    """
    rng = np.random.default_rng(7)
    xs, ys = np.meshgrid([-0.12, 0.0, 0.12], [-0.1, 0.0, 0.1])
    n = xs.size
    positions = np.c_[xs.ravel(), ys.ravel(), rng.uniform(1.4, 1.5, n)]
    normals = np.c_[rng.normal(0.0, 0.15, (n, 2)), -np.ones(n)]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    arrays = surfel_arrays(
        positions,
        normals,
        scales=rng.uniform(0.04, 0.07, (n, 2)),
        opacities=rng.uniform(0.4, 0.7, n),
        rgb=rng.uniform(0.3, 0.7, (n, 3)),
    )
    arrays.colors[:, 1:] = rng.normal(0.0, 0.05, (n, 3, 3))

    color = rng.integers(0, 256, k.shape + (3,), dtype=np.uint8)
    frame = processed(np.full(k.shape, 1.6), k, color=color)

    anchors = Anchors()
    jitter = rng.normal(0.0, 0.01, (n, 3))
    tilted = arrays.normals + rng.normal(0.0, 0.1, (n, 3))
    anchors.update(
        np.arange(n),
        arrays.positions + jitter,
        tilted / np.linalg.norm(tilted, axis=1, keepdims=True),
    )
    return arrays, frame, anchors


def _perturbed(
    arrays: SurfelArrays, group: str, row: int, index: tuple[int, ...], eps: float
) -> SurfelArrays:
    out = arrays.copy()
    if group == "positions":
        out.positions[(row,) + index] += eps
    elif group == "log_scales":
        out.scales[(row,) + index] *= math.exp(eps)
    elif group == "logit_opacities":
        o = out.opacities[row]
        logit = math.log(o / (1.0 - o)) + eps
        out.opacities[row] = 1.0 / (1.0 + math.exp(-logit))
    elif group == "rotations":
        rotvec = np.zeros(3)
        rotvec[index] = eps
        out.rotations[row] = (
            Rotation.from_rotvec(rotvec) * Rotation.from_quat(out.rotations[row])
        ).as_quat()
    else:
        out.colors[(row,) + index] += eps
    return out


def test_backward_matches_finite_differences(
    k: Intrinsics, problem: tuple[SurfelArrays, ProcessedFrame, Anchors]
) -> None:
    """
    Analytic gradients of every parameter group agree with central differences of
    the total loss.
    """
    arrays, frame, anchors = problem
    weights = LossWeights(w_d=0.5, w_n=0.1, w_reg=1.0, w_reg_n=0.1)
    options = RenderOptions(keep_contributors=True)
    pose = Pose.identity()

    out = render(arrays, pose, k, options)
    ids = out.footprints.ids
    assert len(ids) == len(arrays)
    grads = backward(out, frame, arrays, anchors, weights)
    assert grads.touched.all()

    def loss(candidate: SurfelArrays) -> float:
        rendered = render(candidate, pose, k, options)
        return total_loss(rendered, frame, candidate, anchors, weights, ids=ids)

    eps = 1e-7
    shapes = {
        "positions": (3,),
        "log_scales": (2,),
        "rotations": (3,),
        "logit_opacities": (),
        "colors": (4, 3),
    }
    for group, shape in shapes.items():
        analytic = getattr(grads, group)
        for row in (0, 4, 8):
            for index in np.ndindex(*shape):
                plus = loss(_perturbed(arrays, group, row, index, eps))
                minus = loss(_perturbed(arrays, group, row, index, -eps))
                numeric = (plus - minus) / (2 * eps)
                assert analytic[(row,) + index] == pytest.approx(
                    numeric, rel=1e-4, abs=1e-7
                ), f"{group}[{row}, {index}]"


@pytest.mark.parametrize(
    "front_rgb, back_rgb, sign",
    [
        # Covering a dark surfel pulls the pixel towards the ground truth.
        (0.8, 0.1, -1.0),
        # A dark surfel in front pushes it away.
        (0.1, 0.8, 1.0),
    ],
)
def test_opacity_gradient_sign(
    k: Intrinsics, front_rgb: float, back_rgb: float, sign: float
) -> None:
    """
    Two stacked surfels in front of a light grey frame: the front surfel's opacity
    gradient says which way the photometric loss moves.
    """
    arrays = surfel_arrays(
        [[0.0, 0.0, 1.4], [0.0, 0.0, 1.5]],
        [[0.0, 0.0, -1.0], [0.0, 0.0, -1.0]],
        scales=0.2,
        opacities=[0.5, 0.9],
        rgb=[[front_rgb] * 3, [back_rgb] * 3],
    )
    color = np.full(k.shape + (3,), 204, dtype=np.uint8)
    frame = processed(np.full(k.shape, 1.6), k, color=color)
    anchors = Anchors()
    anchors.update(np.arange(2), arrays.positions, arrays.normals)
    weights = LossWeights(w_d=0.0, w_n=0.0, w_reg=0.0, w_reg_n=0.0)

    out = render(arrays, Pose.identity(), k, RenderOptions(keep_contributors=True))
    grads = backward(out, frame, arrays, anchors, weights)

    assert np.sign(grads.logit_opacities[0]) == sign


def test_backward_needs_contributors(
    k: Intrinsics, problem: tuple[SurfelArrays, ProcessedFrame, Anchors]
) -> None:
    """
    The backward pass replays the kept fragments.
    """
    arrays, frame, anchors = problem
    out = render(arrays, Pose.identity(), k)
    with pytest.raises(ValueError):
        backward(out, frame, arrays, anchors, LossWeights())


def test_backward_requires_anchors(
    k: Intrinsics, problem: tuple[SurfelArrays, ProcessedFrame, Anchors]
) -> None:
    """
    Regularising a surfel that was never anchored is a bookkeeping bug.
    """
    arrays, frame, _ = problem
    out = render(arrays, Pose.identity(), k, RenderOptions(keep_contributors=True))
    with pytest.raises(BookkeepingError):
        backward(out, frame, arrays, Anchors(), LossWeights())

    # Without the regulariser no anchors are needed.
    backward(out, frame, arrays, Anchors(), LossWeights(w_reg=0.0))


def test_adam_first_step() -> None:
    """
    The first bias-corrected step is ``lr·g/(|g| + ε)``; untouched rows are left
    alone.
    """
    config = OptimizerConfig(lr_p=0.01)
    state = OptimizerState(config, sh_coefficients=4)
    grads = Gradients.zeros(3, 4)
    grads.positions[1] = [2.0, -0.5, 0.0]
    grads.touched[1] = True

    updates = state.step(grads)
    np.testing.assert_allclose(
        updates["positions"], [[0.01, -0.01, 0.0]], rtol=1e-6, atol=1e-12
    )
    np.testing.assert_array_equal(state.steps, [0, 1, 0])
    np.testing.assert_array_equal(state.moments["positions"][0][[0, 2]], 0.0)

    # A second identical gradient keeps the step size.
    updates = state.step(grads)
    np.testing.assert_allclose(updates["positions"][0, 0], 0.01, rtol=1e-6)
    np.testing.assert_array_equal(state.steps, [0, 2, 0])


def test_keyframe_window(k: Intrinsics, wall: ProcessedFrame) -> None:
    """
    The window keeps the most recent keyframes up to its capacity.
    """
    window = KeyframeWindow(capacity=2)
    for i in range(3):
        window.push(wall, Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.array([i, 0.0, 0.0])))

    assert len(window) == 2
    assert [kf.pose.translation[0] for kf in window] == [1.0, 2.0]
    sampled = window.sample(np.random.default_rng(0))
    assert sampled in list(window)

    with pytest.raises(ConfigurationError):
        KeyframeWindow(capacity=0)


def test_optimize_batch_reduces_loss(k: Intrinsics) -> None:
    """
    A handful of iterations on one keyframe pulls mis-coloured surfels towards the
    observed colour.
    """
    frame = processed(np.full(k.shape, 1.5), k)
    arrays = grid_surfels(k, 1.5, rgb=(0.2, 0.2, 0.2))
    surfel_map = SurfelMap.from_arrays(arrays)

    window = KeyframeWindow(capacity=4)
    window.push(frame, Pose.identity())
    window.anchors.update_from(surfel_map.arrays, np.arange(len(surfel_map)))

    before = arrays.colors[:, 0].copy()
    config = OptimizerConfig(lr_c=0.05)
    state = OptimizerState(config)
    stats = optimize_batch(
        surfel_map,
        window,
        2,
        state,
        LossWeights.from_config(config),
        np.random.default_rng(0),
    )

    assert stats.iterations == 8
    assert stats.losses[-1] < stats.losses[0]
    assert np.all(surfel_map.arrays.colors[:, 0] > before)
    np.testing.assert_array_equal(state.steps, 8)


def test_optimize_batch_empty_window(caplog: pytest.LogCaptureFixture) -> None:
    """
    Nothing to optimise against: no iterations and a warning.
    """
    surfel_map = SurfelMap()
    window = KeyframeWindow(capacity=2)
    state = OptimizerState(OptimizerConfig())
    with caplog.at_level(logging.WARNING, logger="surfel_fusion.optimizer"):
        stats = optimize_batch(
            surfel_map, window, 2, state, LossWeights(), np.random.default_rng(0)
        )
    assert stats.iterations == 0
    assert "empty keyframe window" in caplog.text
