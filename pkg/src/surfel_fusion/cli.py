"""
Command-line surface: ``surfel-fusion <command> ...``.

Each subcommand is a :py:class:`Command` registered in :py:data:`commands`, so
plugins can add their own through the ``surfel_fusion.commands`` entry-point group.
"""

__all__ = [
    "Command",
    "EvalCommand",
    "MeshCommand",
    "RenderCommand",
    "RunCommand",
    "SynthCommand",
    "build_parser",
    "commands",
    "main",
]

import argparse
import logging
import sys
import typing
from abc import ABC, abstractmethod as abstract_method
from pathlib import Path

import numpy as np

from .config import Config, dump_config, load_config
from .dataset import (
    CALIBRATION,
    GROUND_TRUTH,
    RGB_INDEX,
    load_frame,
    load_tum,
    read_calibration,
)
from .errors import ConfigurationError, DatasetFormatError, SurfelFusionError
from .evaluation import (
    Trajectory,
    associate,
    ate_rmse,
    format_report,
    psnr,
    recon_metrics,
    sample_surfel_points,
    ssim,
)
from .export import (
    export_mesh,
    export_surfels_ply,
    export_trajectory,
    load_mesh_ply,
    load_surfels_ply,
    load_trajectory,
    write_color_png,
    write_csv,
    write_depth_png,
)
from .geometry import Intrinsics, Pose
from .meshing import mesh_from_map
from .pipeline import TIMING_COLUMNS, run_dataset
from .rasterizer import RenderOptions, render_tiled
from .registry import AutoRegister, ComponentRegistry, UnknownComponentError
from .surfel_map import SurfelArrays
from .synthetic_scene import (
    ground_truth_mesh,
    make_scene,
    scene_from_dataset,
    write_tum_sequence,
)

logger = logging.getLogger(__name__)

PROG = "surfel-fusion"

# Run directory layout.
TRAJECTORY = "trajectory.txt"
KEYFRAMES = "keyframes.txt"
SURFELS = "surfels.ply"
TIMING = "timing.csv"
LOSSES = "losses.csv"
CONFIG = "config.ini"
MESH = "mesh.ply"
REPORT = "report.txt"
METRICS = "metrics.csv"
SCENE = "scene.txt"

commands = ComponentRegistry["Command"](
    attr_name="command_name", group="surfel_fusion.commands"
)


class Command(AutoRegister(commands), ABC):  # type: ignore
    """
    One subcommand.  The first docstring line becomes its ``--help`` summary.
    """

    command_name: str

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        pass

    @abstract_method
    def run(self, args: argparse.Namespace, config: Config) -> int:
        """
        Executes the command.

        Returns:
            Process exit code.
        """
        raise NotImplementedError()


def _write_calibration(path: Path, k: Intrinsics) -> None:
    path.write_text(
        "# fx fy cx cy width height\n"
        f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}\n"
    )


def _run_dir(path: typing.Union[str, Path]) -> Path:
    root = Path(path)
    for name in (SURFELS, KEYFRAMES, CALIBRATION):
        if not (root / name).is_file():
            raise DatasetFormatError(f"{root} is not a run directory: missing {name}")
    return root


class RunCommand(Command):
    """
    Reconstructs a TUM-layout sequence and writes a run directory.
    """

    command_name = "run"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("dataset", type=Path, help="TUM-layout sequence root")
        parser.add_argument(
            "--out", type=Path, default=Path("run"), help="run directory to write"
        )
        parser.add_argument(
            "--max-frames", type=int, default=None, help="stop after this many frames"
        )

    def run(self, args: argparse.Namespace, config: Config) -> int:
        handle = load_tum(args.dataset, config.evaluation.association_tolerance)
        result = run_dataset(handle, config, args.max_frames)

        out: Path = args.out
        out.mkdir(parents=True, exist_ok=True)
        export_trajectory(result.trajectory, out / TRAJECTORY)
        export_trajectory(result.keyframe_trajectory, out / KEYFRAMES)
        export_surfels_ply(result.surfel_map, out / SURFELS, config.surfels.tau_conf)
        write_csv(out / TIMING, TIMING_COLUMNS, (t.row() for t in result.timings))
        write_csv(
            out / LOSSES,
            ("batch", "frame_id", "iteration", "loss"),
            ((r.batch, r.frame_id, r.iteration, r.loss) for r in result.losses),
        )
        dump_config(config, out / CONFIG)
        _write_calibration(out / CALIBRATION, handle.intrinsics)

        logger.info(
            "Run finished: %d frames, %d keyframes, %d surfels -> %s",
            len(result.timings),
            len(result.keyframes),
            len(result.surfel_map),
            out,
        )
        return 0


class SynthCommand(Command):
    """
    Renders a registered synthetic scene to a TUM-layout sequence.
    """

    command_name = "synth"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("scene", help="scene name (e.g. room, plane-box)")
        parser.add_argument("--out", type=Path, required=True)
        parser.add_argument("--frames", type=int, default=None)
        parser.add_argument(
            "--divisor",
            type=int,
            default=1,
            help="resolution divisor (power of two)",
        )

    def run(self, args: argparse.Namespace, config: Config) -> int:
        spec = make_scene(args.scene, args.frames, args.divisor)
        write_tum_sequence(
            spec, args.out, seed=config.runtime.seed, threads=config.runtime.threads
        )
        return 0


class MeshCommand(Command):
    """
    Extracts a voxel-masked TSDF mesh from a run directory.
    """

    command_name = "mesh"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("run_dir", type=Path)
        parser.add_argument(
            "--out", type=Path, default=None, help="mesh path (.ply or .obj)"
        )
        parser.add_argument(
            "--dataset",
            type=Path,
            default=None,
            help="sequence root, required when meshing.use_raw_depth is set",
        )

    def run(self, args: argparse.Namespace, config: Config) -> int:
        root = _run_dir(args.run_dir)
        surfels = load_surfels_ply(root / SURFELS)
        keyframes = load_trajectory(root / KEYFRAMES)
        k = read_calibration(root / CALIBRATION)

        poses: typing.Sequence[Pose] = keyframes.poses
        depths = None
        if config.meshing.use_raw_depth:
            if args.dataset is None:
                raise ConfigurationError(
                    "meshing.use_raw_depth needs --dataset to read depth from"
                )
            handle = load_tum(args.dataset, config.evaluation.association_tolerance)
            pairs = associate(
                keyframes.timestamps,
                handle.timestamps,
                config.evaluation.association_tolerance,
            )
            poses = [keyframes.poses[i] for i, _ in pairs]
            depths = [load_frame(handle, j).depth for _, j in pairs]

        mesh = mesh_from_map(
            surfels,
            poses,
            k,
            config.meshing,
            depths=depths,
            render_options=RenderOptions.from_config(config.rasterizer),
            threads=config.runtime.threads,
        )
        export_mesh(mesh, args.out or root / MESH)
        return 0


class RenderCommand(Command):
    """
    Renders colour and depth PNGs of the map from a given pose.
    """

    command_name = "render"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("run_dir", type=Path)
        view = parser.add_mutually_exclusive_group(required=True)
        view.add_argument(
            "--pose",
            type=float,
            nargs=7,
            metavar=("TX", "TY", "TZ", "QX", "QY", "QZ", "QW"),
            help="camera-to-world pose",
        )
        view.add_argument(
            "--frame", type=int, help="index into the estimated trajectory"
        )
        parser.add_argument("--out", type=Path, default=None)

    def run(self, args: argparse.Namespace, config: Config) -> int:
        root = _run_dir(args.run_dir)
        surfels = load_surfels_ply(root / SURFELS)
        k = read_calibration(root / CALIBRATION)

        if args.pose is not None:
            values = np.asarray(args.pose, dtype=np.float64)
            pose = Pose(values[3:7], values[:3])
        else:
            trajectory = load_trajectory(root / TRAJECTORY)
            if not 0 <= args.frame < len(trajectory):
                raise ConfigurationError(
                    f"--frame {args.frame} is outside the trajectory "
                    f"(0..{len(trajectory) - 1})"
                )
            pose = trajectory.poses[args.frame]

        output = render_tiled(
            surfels,
            pose,
            k,
            RenderOptions.from_config(config.rasterizer),
            threads=config.runtime.threads,
        )
        out: Path = args.out or root
        out.mkdir(parents=True, exist_ok=True)
        color = np.clip(np.rint(output.color * 255.0), 0, 255).astype(np.uint8)
        write_color_png(out / "render_color.png", color)
        write_depth_png(out / "render_depth.png", output.depth, k.depth_scale)
        logger.info("Rendered %d surfels to %s", len(surfels), out)
        return 0


class EvalCommand(Command):
    """
    Reports trajectory error, reconstruction metrics and training-view quality.
    """

    command_name = "eval"

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        parser.add_argument("run_dir", type=Path)
        parser.add_argument(
            "--gt",
            type=Path,
            required=True,
            help="ground-truth sequence root or TUM trajectory file",
        )

    def _view_quality(
        self,
        gt_root: Path,
        surfels: SurfelArrays,
        keyframes: Trajectory,
        k: Intrinsics,
        config: Config,
    ) -> dict[str, float]:
        handle = load_tum(gt_root, config.evaluation.association_tolerance)
        pairs = associate(
            keyframes.timestamps,
            handle.timestamps,
            config.evaluation.association_tolerance,
        )
        if not pairs:
            return {}

        options = RenderOptions.from_config(config.rasterizer)
        psnrs, ssims = [], []
        for i, j in pairs:
            target = load_frame(handle, j).color.astype(np.float64) / 255.0
            rendered = render_tiled(
                surfels,
                keyframes.poses[i],
                k,
                options,
                threads=config.runtime.threads,
            )
            psnrs.append(psnr(np.clip(rendered.color, 0.0, 1.0), target))
            ssims.append(ssim(np.clip(rendered.color, 0.0, 1.0), target))
        return {
            "psnr_db": float(np.mean(psnrs)),
            "ssim": float(np.mean(ssims)),
            "views": float(len(pairs)),
        }

    def run(self, args: argparse.Namespace, config: Config) -> int:
        root = Path(args.run_dir)
        gt: Path = args.gt
        estimate = load_trajectory(root / TRAJECTORY)
        tolerance = config.evaluation.association_tolerance

        metrics: dict[str, float] = {}
        ground_truth = load_trajectory(gt / GROUND_TRUTH if gt.is_dir() else gt)
        metrics["ate_rmse_cm"] = ate_rmse(estimate, ground_truth, tolerance)
        metrics["frames"] = float(len(estimate))

        if gt.is_dir() and (root / SURFELS).is_file():
            surfels = load_surfels_ply(root / SURFELS)

            if (gt / SCENE).is_file() and len(surfels):
                reference = ground_truth_mesh(scene_from_dataset(gt))
                samples = sample_surfel_points(
                    surfels, config.evaluation.samples, config.runtime.seed
                )
                report = recon_metrics(
                    samples,
                    reference,
                    config.evaluation.tau,
                    seed=config.runtime.seed,
                )
                metrics.update(
                    {
                        "accuracy_cm": report.accuracy_cm,
                        "accuracy_ratio_pct": report.accuracy_ratio_pct,
                        "completeness_cm": report.completeness_cm,
                        "completeness_ratio_pct": report.completeness_ratio_pct,
                    }
                )
                if (root / MESH).is_file():
                    mesh_report = recon_metrics(
                        load_mesh_ply(root / MESH),
                        reference,
                        config.evaluation.tau,
                        samples=config.evaluation.samples,
                        seed=config.runtime.seed,
                    )
                    metrics["mesh_accuracy_cm"] = mesh_report.accuracy_cm
                    metrics["mesh_completeness_cm"] = mesh_report.completeness_cm

            if (gt / RGB_INDEX).is_file() and (root / KEYFRAMES).is_file():
                metrics.update(
                    self._view_quality(
                        gt,
                        surfels,
                        load_trajectory(root / KEYFRAMES),
                        read_calibration(root / CALIBRATION),
                        config,
                    )
                )

        # Centimetre metrics are reported at 0.01 cm resolution.
        shown = {
            key: f"{value:.2f}" if key.endswith("_cm") else value
            for key, value in metrics.items()
        }
        text = format_report(shown)
        (root / REPORT).write_text(text)
        write_csv(root / METRICS, ("metric", "value"), metrics.items())
        sys.stdout.write(text)
        return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG, description="CPU RGB-D surfel reconstruction."
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument(
        "-v", "--verbose", action="store_true", help="log debug messages"
    )
    verbosity.add_argument(
        "-q", "--quiet", action="store_true", help="log warnings and errors only"
    )
    parser.add_argument(
        "--config",
        type=Path,
        default=None,
        help="INI config (defaults to the run directory's config.ini when present)",
    )
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker threads (default: $SURFEL_FUSION_THREADS or the config)",
    )

    subparsers = parser.add_subparsers(dest="command_name", metavar="command")
    subparsers.required = True
    for key, summary in commands.describe().items():
        command = typing.cast(Command, commands.get(key))
        sub = subparsers.add_parser(key, help=summary, description=summary)
        command.add_arguments(sub)
        sub.set_defaults(command=command)
    return parser


def _resolve_config(args: argparse.Namespace) -> Config:
    path: typing.Optional[Path] = args.config
    if path is None:
        run_dir = getattr(args, "run_dir", None)
        if run_dir is not None and (Path(run_dir) / CONFIG).is_file():
            path = Path(run_dir) / CONFIG

    config = load_config(path) if path is not None else Config()
    return config.with_overrides(seed=args.seed, threads=args.threads)


def main(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        config = _resolve_config(args)
        return typing.cast(Command, args.command).run(args, config)
    except (ConfigurationError, UnknownComponentError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2
    except (SurfelFusionError, OSError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
