"""
The online reconstruction loop: a tracking thread and a mapping thread.

The tracker preprocesses and detects keypoints on frame ``t`` while the mapper is
still integrating frame ``t - 1``, then registers frame ``t`` against the map
snapshot published after that mapping step.  Results therefore do not depend on
thread timing.
"""

__all__ = [
    "FrameTiming",
    "LossRecord",
    "Mapper",
    "Pipeline",
    "RunResult",
    "TIMING_COLUMNS",
    "run_dataset",
]

import dataclasses
import logging
import queue
import threading
import time
import typing
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import sh
from .config import Config
from .dataset import DatasetHandle, load_frame
from .evaluation import Trajectory
from .frame_pipeline import ProcessedFrame, RawFrame, process_frame
from .fusion import FusionStats, NoiseParams, fuse_frame
from .geometry import Intrinsics, Pose
from .optimizer import KeyframeWindow, LossWeights, OptimizerState, optimize_batch
from .rasterizer import RenderOptions, RenderOutput, render_tiled
from .surfel_map import SurfelArrays, SurfelMap, initialize_surfels
from .tracking import TrackResult, Tracker

logger = logging.getLogger(__name__)

TIMING_COLUMNS = (
    "frame_id",
    "timestamp",
    "preprocess",
    "sparse",
    "dense",
    "fuse",
    "initialize",
    "optimize",
    "total",
)


@dataclasses.dataclass(frozen=True)
class FrameTiming:
    """
    Wall-clock seconds spent on one frame, per stage.
    """

    frame_id: int
    timestamp: float
    preprocess: float = 0.0
    sparse: float = 0.0
    dense: float = 0.0
    fuse: float = 0.0
    initialize: float = 0.0
    optimize: float = 0.0

    @property
    def total(self) -> float:
        return (
            self.preprocess
            + self.sparse
            + self.dense
            + self.fuse
            + self.initialize
            + self.optimize
        )

    def row(self) -> tuple[typing.Union[int, float], ...]:
        return (
            self.frame_id,
            self.timestamp,
            self.preprocess,
            self.sparse,
            self.dense,
            self.fuse,
            self.initialize,
            self.optimize,
            self.total,
        )


@dataclasses.dataclass(frozen=True)
class LossRecord:
    batch: int
    frame_id: int
    iteration: int
    loss: float


@dataclasses.dataclass(frozen=True, eq=False)
class RunResult:
    trajectory: Trajectory
    keyframes: tuple[int, ...]
    surfel_map: SurfelMap
    timings: tuple[FrameTiming, ...]
    losses: tuple[LossRecord, ...]
    results: tuple[TrackResult, ...]

    @property
    def keyframe_trajectory(self) -> Trajectory:
        chosen = set(self.keyframes)
        return Trajectory.from_pairs(
            (t, p)
            for i, (t, p) in enumerate(
                zip(self.trajectory.timestamps, self.trajectory.poses)
            )
            if i in chosen
        )


class Mapper:
    """
    The single writer of the surfel map: fusion, surfel spawning and the periodic
    keyframe-batch optimisation.
    """

    def __init__(self, k: Intrinsics, config: typing.Optional[Config] = None) -> None:
        config = config or Config()
        self.intrinsics = k
        self.config = config

        self.surfel_map = SurfelMap(config.surfels.sh_order, config.surfels.cell_size)
        self.window = KeyframeWindow(config.optimizer.n_batch)
        self.state = OptimizerState(
            config.optimizer, sh.coefficient_count(config.surfels.sh_order)
        )
        self.weights = LossWeights.from_config(config.optimizer)
        self.noise = NoiseParams(config.fusion.kappa_p, config.fusion.kappa_n)
        self.options = RenderOptions.from_config(config.rasterizer)
        self.rng = np.random.default_rng(config.runtime.seed)

        self.frames_mapped = 0
        self.batches = 0
        self.losses: list[LossRecord] = []

    def _render(self, pose: Pose) -> RenderOutput:
        return render_tiled(
            self.surfel_map.arrays,
            pose,
            self.intrinsics,
            self.options,
            threads=self.config.runtime.threads,
        )

    def map_frame(
        self, frame: ProcessedFrame, pose: Pose, keyframe: bool
    ) -> dict[str, float]:
        """
        Integrates one tracked frame.

        Returns:
            Seconds spent in the ``fuse``, ``initialize`` and ``optimize`` stages.
        """
        config = self.config
        arrays_before = len(self.surfel_map)

        started = time.perf_counter()
        stats = FusionStats()
        if config.fusion.enabled and len(self.surfel_map):
            stats = fuse_frame(
                self.surfel_map,
                frame,
                pose,
                self._render(pose),
                self.noise,
                config.surfels.delta_s,
                config.fusion.dense_update,
            )
        fused = time.perf_counter()

        batch = initialize_surfels(
            frame, pose, self._render(pose), config.surfels, self.noise
        )
        self.surfel_map.add(batch)

        # Re-anchor everything this frame touched at its fused / spawned state.
        arrays = self.surfel_map.arrays
        touched = np.nonzero(arrays.last_observed == frame.frame_id)[0]
        self.window.anchors.update_from(arrays, touched)
        if keyframe:
            self.window.push(frame, pose)
        initialized = time.perf_counter()

        self.frames_mapped += 1
        if self.frames_mapped % config.optimizer.interval == 0:
            self.optimize(frame.frame_id)
        optimized = time.perf_counter()

        logger.info(
            "Frame %d: %d surfels (+%d new, %d fused)%s",
            frame.frame_id,
            len(self.surfel_map),
            len(self.surfel_map) - arrays_before,
            stats.fused,
            " [keyframe]" if keyframe else "",
        )
        return {
            "fuse": fused - started,
            "initialize": initialized - fused,
            "optimize": optimized - initialized,
        }

    def optimize(self, frame_id: int) -> None:
        if not (self.config.optimizer.enabled and len(self.window)):
            return
        stats = optimize_batch(
            self.surfel_map,
            self.window,
            self.config.optimizer.m,
            self.state,
            self.weights,
            self.rng,
            self.options,
        )
        self.losses.extend(
            LossRecord(self.batches, frame_id, i, loss)
            for i, loss in enumerate(stats.losses)
        )
        self.batches += 1

    def drain(self, frame_id: int) -> None:
        """
        Final batch over the last keyframe window.
        """
        self.optimize(frame_id)


_STOP = object()


class Pipeline:
    """
    Tracking plus mapping over a frame source.

    Args:
        k:
            Intrinsics of every frame.

        config:
            Full configuration (defaults if omitted).
    """

    def __init__(self, k: Intrinsics, config: typing.Optional[Config] = None) -> None:
        self.config = config or Config()
        self.intrinsics = k
        self.tracker = Tracker(
            k,
            self.config.tracking,
            RenderOptions.from_config(self.config.rasterizer),
            self.config.frame.pyramid_levels,
            self.config.runtime.seed,
        )
        self.mapper = Mapper(k, self.config)
        self._failed = threading.Event()

    def _put(self, target: "queue.Queue[typing.Any]", item: typing.Any) -> bool:
        while not self._failed.is_set():
            try:
                target.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _get(self, source: "queue.Queue[typing.Any]") -> typing.Any:
        while True:
            try:
                return source.get(timeout=0.1)
            except queue.Empty:
                if self._failed.is_set():
                    return _STOP

    def _track_loop(
        self,
        load: typing.Callable[[int], RawFrame],
        count: int,
        work: "queue.Queue[typing.Any]",
        snapshots: "queue.Queue[typing.Any]",
    ) -> list[TrackResult]:
        results = []
        try:
            for index in range(count):
                started = time.perf_counter()
                frame = process_frame(load(index), self.intrinsics, self.config.frame)
                preprocess = time.perf_counter() - started

                started = time.perf_counter()
                keypoints = self.tracker.detect(frame)
                detect = time.perf_counter() - started

                model: typing.Optional[SurfelArrays] = None
                if index > 0:
                    model = self._get(snapshots)
                    if model is _STOP:
                        break

                result = self.tracker.track(frame, model, keypoints)
                results.append(result)
                timing = FrameTiming(
                    frame_id=frame.frame_id,
                    timestamp=frame.timestamp,
                    preprocess=preprocess,
                    sparse=detect + result.timings.get("sparse", 0.0),
                    dense=result.timings.get("dense", 0.0),
                )
                if not self._put(work, (frame, result, timing)):
                    break
        except BaseException:
            self._failed.set()
            raise
        finally:
            self._put(work, _STOP)
        return results

    def _map_loop(
        self,
        work: "queue.Queue[typing.Any]",
        snapshots: "queue.Queue[typing.Any]",
    ) -> list[FrameTiming]:
        timings = []
        last_frame = -1
        try:
            while True:
                item = self._get(work)
                if item is _STOP:
                    break
                frame, result, timing = item
                stages = self.mapper.map_frame(frame, result.pose, result.keyframe)
                timings.append(dataclasses.replace(timing, **stages))
                last_frame = frame.frame_id
                snapshots.put(self.mapper.surfel_map.snapshot())

            if not self._failed.is_set() and last_frame >= 0:
                self.mapper.drain(last_frame)
        except BaseException:
            self._failed.set()
            snapshots.put(_STOP)
            raise
        return timings

    def run(self, load: typing.Callable[[int], RawFrame], count: int) -> RunResult:
        """
        Processes frames ``load(0) … load(count - 1)``.

        Exceptions raised in either thread propagate to the caller.
        """
        if count < 1:
            raise ValueError("Nothing to reconstruct: zero frames")

        work: "queue.Queue[typing.Any]" = queue.Queue(
            maxsize=self.config.optimizer.n_batch
        )
        snapshots: "queue.Queue[typing.Any]" = queue.Queue()
        self._failed.clear()

        with ThreadPoolExecutor(
            max_workers=2, thread_name_prefix="surfel-fusion"
        ) as pool:
            mapping = pool.submit(self._map_loop, work, snapshots)
            tracking = pool.submit(self._track_loop, load, count, work, snapshots)
            timings = mapping.result()
            results = tracking.result()

        trajectory = Trajectory(
            np.array([t.timestamp for t in timings]),
            tuple(r.pose for r in results),
        )
        keyframes = tuple(t.frame_id for t, r in zip(timings, results) if r.keyframe)
        logger.info(
            "Reconstructed %d frames: %d keyframes, %d surfels, %d optimisation "
            "batches",
            len(results),
            len(keyframes),
            len(self.mapper.surfel_map),
            self.mapper.batches,
        )
        return RunResult(
            trajectory=trajectory,
            keyframes=keyframes,
            surfel_map=self.mapper.surfel_map,
            timings=tuple(timings),
            losses=tuple(self.mapper.losses),
            results=tuple(results),
        )


def run_dataset(
    handle: DatasetHandle,
    config: typing.Optional[Config] = None,
    max_frames: typing.Optional[int] = None,
) -> RunResult:
    count = len(handle) if max_frames is None else min(len(handle), max_frames)
    return Pipeline(handle.intrinsics, config).run(
        lambda index: load_frame(handle, index), count
    )
