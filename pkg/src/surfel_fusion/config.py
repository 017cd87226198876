__all__ = [
    "Config",
    "EvaluationConfig",
    "FrameConfig",
    "FusionConfig",
    "MeshingConfig",
    "OptimizerConfig",
    "RasterizerConfig",
    "RuntimeConfig",
    "SurfelConfig",
    "THREADS_ENV_VAR",
    "TrackingConfig",
    "dump_config",
    "load_config",
    "parse_config",
]

import configparser
import dataclasses
import math
import os
import typing
from pathlib import Path

from .errors import ConfigurationError, ExportError

THREADS_ENV_VAR = "SURFEL_FUSION_THREADS"


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigurationError(message)


@dataclasses.dataclass(frozen=True)
class FrameConfig:
    """
    Depth filtering and pyramid construction.
    """

    bilateral_radius: int = 2
    sigma_spatial: float = 2.0
    sigma_range: float = 0.03
    pyramid_levels: int = 3

    def __post_init__(self) -> None:
        _require(self.bilateral_radius >= 0, "frame.bilateral_radius must be >= 0")
        _require(self.sigma_spatial > 0, "frame.sigma_spatial must be > 0")
        _require(self.sigma_range > 0, "frame.sigma_range must be > 0")
        _require(self.pyramid_levels >= 1, "frame.pyramid_levels must be >= 1")


@dataclasses.dataclass(frozen=True)
class SurfelConfig:
    """
    Surfel spawning, selection and confidence extraction.
    """

    alpha_s: float = 2.0
    scale_init: str = "adaptive"
    fixed_scale: float = 0.004
    stride: int = 2
    tau_o: float = 0.5
    tau_d: float = 0.06
    delta_s: float = 0.03
    o_init: float = 0.8
    sh_order: int = 1
    cell_size: float = 0.1
    tau_conf: float = 0.0

    def __post_init__(self) -> None:
        _require(self.alpha_s > 0, "surfels.alpha_s must be > 0")
        _require(self.fixed_scale > 0, "surfels.fixed_scale must be > 0")
        _require(self.stride >= 1, "surfels.stride must be >= 1")
        _require(0 <= self.tau_o <= 1, "surfels.tau_o must be in [0, 1]")
        _require(self.tau_d > 0, "surfels.tau_d must be > 0")
        _require(self.delta_s > 0, "surfels.delta_s must be > 0")
        _require(0 < self.o_init <= 1, "surfels.o_init must be in (0, 1]")
        _require(self.sh_order in (0, 1), "surfels.sh_order must be 0 or 1")
        _require(self.cell_size > 0, "surfels.cell_size must be > 0")
        _require(self.tau_conf >= 0, "surfels.tau_conf must be >= 0")


@dataclasses.dataclass(frozen=True)
class FusionConfig:
    """
    Information-filter noise model.
    """

    enabled: bool = True
    kappa_p: float = 0.002
    kappa_n: float = 0.02
    dense_update: bool = False

    def __post_init__(self) -> None:
        _require(self.kappa_p > 0, "fusion.kappa_p must be > 0")
        _require(self.kappa_n > 0, "fusion.kappa_n must be > 0")


@dataclasses.dataclass(frozen=True)
class RasterizerConfig:
    tile_size: int = 32
    near_plane: float = 0.01
    alpha_max: float = 0.999
    t_min: float = 1e-4
    eps_px: float = 1e-3

    def __post_init__(self) -> None:
        _require(self.tile_size >= 8, "rasterizer.tile_size must be >= 8")
        _require(self.near_plane > 0, "rasterizer.near_plane must be > 0")
        _require(0 < self.alpha_max < 1, "rasterizer.alpha_max must be in (0, 1)")
        _require(0 <= self.t_min < 1, "rasterizer.t_min must be in [0, 1)")
        _require(0 < self.eps_px < 1, "rasterizer.eps_px must be in (0, 1)")


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    """
    Loss weights, batch schedule and Adam hyper-parameters.
    """

    enabled: bool = True
    w_d: float = 0.5
    w_n: float = 0.1
    w_reg: float = 1.0
    w_reg_n: float = 0.1
    n_batch: int = 8
    m: int = 2
    interval: int = 8
    lr_p: float = 1e-4
    lr_r: float = 1e-3
    lr_s: float = 1e-3
    lr_o: float = 5e-2
    lr_c: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        for name in ("w_d", "w_n", "w_reg", "w_reg_n"):
            value = getattr(self, name)
            _require(
                math.isfinite(value) and value >= 0, f"optimizer.{name} must be >= 0"
            )
        _require(self.n_batch >= 1, "optimizer.n_batch must be >= 1")
        _require(self.m >= 0, "optimizer.m must be >= 0")
        _require(self.interval >= 1, "optimizer.interval must be >= 1")
        for name in ("lr_p", "lr_r", "lr_s", "lr_o", "lr_c"):
            _require(getattr(self, name) >= 0, f"optimizer.{name} must be >= 0")
        _require(0 <= self.beta1 < 1, "optimizer.beta1 must be in [0, 1)")
        _require(0 <= self.beta2 < 1, "optimizer.beta2 must be in [0, 1)")
        _require(self.epsilon > 0, "optimizer.epsilon must be > 0")


@dataclasses.dataclass(frozen=True)
class TrackingConfig:
    """
    Sparse frontend, reprojection solver, dense alignment and keyframe selection.
    """

    frontend: str = "harris-brief"
    use_sparse: bool = True
    max_keypoints: int = 1000
    match_radius: float = 15.0
    match_ratio: float = 0.8
    max_hamming: int = 64
    huber: float = 3.0
    inlier_threshold: float = 5.0
    min_correspondences: int = 4
    min_inliers: int = 10
    sparse_iterations: int = 20
    lambda_photo: float = 0.1
    pyramid_iterations: int = 2
    finest_iterations: int = 10
    max_distance: float = 0.1
    max_angle_deg: float = 30.0
    tau_step: float = 1e-5
    association_floor: int = 100
    damping: float = 1e-4
    t_k: float = 0.3
    theta_k_deg: float = 20.0
    landmark_cap: int = 5000

    def __post_init__(self) -> None:
        _require(self.max_keypoints >= 0, "tracking.max_keypoints must be >= 0")
        _require(self.match_radius >= 0, "tracking.match_radius must be >= 0")
        _require(0 < self.match_ratio <= 1, "tracking.match_ratio must be in (0, 1]")
        _require(self.huber > 0, "tracking.huber must be > 0")
        _require(self.inlier_threshold > 0, "tracking.inlier_threshold must be > 0")
        _require(
            self.min_correspondences >= 4, "tracking.min_correspondences must be >= 4"
        )
        _require(self.min_inliers >= 0, "tracking.min_inliers must be >= 0")
        _require(self.lambda_photo >= 0, "tracking.lambda_photo must be >= 0")
        _require(
            self.pyramid_iterations >= 1, "tracking.pyramid_iterations must be >= 1"
        )
        _require(
            self.finest_iterations >= self.pyramid_iterations,
            "tracking.finest_iterations must be >= tracking.pyramid_iterations",
        )
        _require(self.max_distance > 0, "tracking.max_distance must be > 0")
        _require(
            0 < self.max_angle_deg <= 180, "tracking.max_angle_deg must be in (0, 180]"
        )
        _require(self.tau_step > 0, "tracking.tau_step must be > 0")
        _require(self.association_floor >= 1, "tracking.association_floor must be >= 1")
        _require(self.damping > 0, "tracking.damping must be > 0")
        _require(self.t_k >= 0, "tracking.t_k must be >= 0")
        _require(self.theta_k_deg >= 0, "tracking.theta_k_deg must be >= 0")
        _require(self.landmark_cap >= 0, "tracking.landmark_cap must be >= 0")


@dataclasses.dataclass(frozen=True)
class MeshingConfig:
    voxel_size: float = 0.01
    truncation: float = 0.04
    dilation: int = 2
    use_mask: bool = True
    use_raw_depth: bool = False

    def __post_init__(self) -> None:
        _require(self.voxel_size > 0, "meshing.voxel_size must be > 0")
        _require(
            self.truncation >= self.voxel_size,
            "meshing.truncation must be >= meshing.voxel_size",
        )
        _require(self.dilation >= 0, "meshing.dilation must be >= 0")


@dataclasses.dataclass(frozen=True)
class EvaluationConfig:
    association_tolerance: float = 0.02
    tau: float = 0.03
    samples: int = 1_000_000

    def __post_init__(self) -> None:
        _require(
            self.association_tolerance > 0,
            "evaluation.association_tolerance must be > 0",
        )
        _require(self.tau > 0, "evaluation.tau must be > 0")
        _require(self.samples >= 0, "evaluation.samples must be >= 0")


@dataclasses.dataclass(frozen=True)
class RuntimeConfig:
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        _require(self.threads >= 1, "runtime.threads must be >= 1")


@dataclasses.dataclass(frozen=True)
class Config:
    """
    Every tunable of the pipeline, one section per module.
    """

    frame: FrameConfig = dataclasses.field(default_factory=FrameConfig)
    surfels: SurfelConfig = dataclasses.field(default_factory=SurfelConfig)
    fusion: FusionConfig = dataclasses.field(default_factory=FusionConfig)
    rasterizer: RasterizerConfig = dataclasses.field(default_factory=RasterizerConfig)
    optimizer: OptimizerConfig = dataclasses.field(default_factory=OptimizerConfig)
    tracking: TrackingConfig = dataclasses.field(default_factory=TrackingConfig)
    meshing: MeshingConfig = dataclasses.field(default_factory=MeshingConfig)
    evaluation: EvaluationConfig = dataclasses.field(default_factory=EvaluationConfig)
    runtime: RuntimeConfig = dataclasses.field(default_factory=RuntimeConfig)

    def with_overrides(
        self,
        seed: typing.Optional[int] = None,
        threads: typing.Optional[int] = None,
    ) -> "Config":
        """
        Applies CLI / environment overrides of the runtime section.

        ``threads`` falls back to ``$SURFEL_FUSION_THREADS`` when not given.
        """
        if threads is None and os.environ.get(THREADS_ENV_VAR):
            try:
                threads = int(os.environ[THREADS_ENV_VAR])
            except ValueError:
                raise ConfigurationError(
                    f"{THREADS_ENV_VAR} must be an integer, "
                    f"got {os.environ[THREADS_ENV_VAR]!r}"
                )

        runtime = dataclasses.replace(
            self.runtime,
            seed=self.runtime.seed if seed is None else seed,
            threads=self.runtime.threads if threads is None else threads,
        )
        return dataclasses.replace(self, runtime=runtime)


def _parse_value(
    section: str, field: dataclasses.Field[typing.Any], raw: str
) -> typing.Any:
    key = f"{section}.{field.name}"
    text = raw.strip()

    if field.type is bool:
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")

    try:
        if field.type is int:
            return int(text)
        if field.type is float:
            return float(text)
    except ValueError:
        raise ConfigurationError(
            f"{key}: expected {typing.cast(type, field.type).__name__}, got {raw!r}"
        )

    return text


def _format_value(value: typing.Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> Config:
    """
    Parses INI-style text into a :py:class:`Config`.

    Sections and keys mirror the dataclass layout (``[optimizer]`` / ``lr_p = 1e-4``).
    Missing keys keep their defaults; unknown sections or keys are errors.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # type: ignore[assignment,method-assign]
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"Malformed config: {e}") from e

    sections = {f.name: f for f in dataclasses.fields(Config)}
    values: dict[str, typing.Any] = {}

    for section in parser.sections():
        if section not in sections:
            raise ConfigurationError(
                f"Unknown config section [{section}] "
                f"(known: {', '.join(sorted(sections))})."
            )

        section_type = typing.cast(type, sections[section].type)
        fields = {f.name: f for f in dataclasses.fields(section_type)}
        kwargs = {}
        for key, raw in parser.items(section):
            if key not in fields:
                raise ConfigurationError(f"Unknown config key {section}.{key}.")
            kwargs[key] = _parse_value(section, fields[key], raw)

        values[section] = section_type(**kwargs)

    return Config(**values)


def load_config(path: typing.Union[str, Path]) -> Config:
    """
    Loads a config file.  See :py:func:`parse_config`.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"Cannot read config {path}: {e.strerror}") from e

    return parse_config(text)


def dump_config(
    config: Config, path: typing.Optional[typing.Union[str, Path]] = None
) -> str:
    """
    Serialises every field of ``config``; ``parse_config(dump_config(c)) == c``.

    If ``path`` is given the text is also written there.
    """
    lines = []
    for section_field in dataclasses.fields(config):
        section = getattr(config, section_field.name)
        lines.append(f"[{section_field.name}]")
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        lines.append("")

    text = "\n".join(lines)
    if path is not None:
        try:
            Path(path).write_text(text, encoding="utf-8")
        except OSError as e:
            raise ExportError(f"Cannot write {path}: {e.strerror}") from e

    return text
