__all__ = [
    "ComponentRegistry",
    "Config",
    "Intrinsics",
    "Pipeline",
    "Pose",
    "SurfelArrays",
    "SurfelFusionError",
    "SurfelMap",
    "UnknownComponentError",
    "load_config",
    "load_tum",
    "run_dataset",
]

from .config import Config, load_config
from .dataset import load_tum
from .errors import SurfelFusionError
from .geometry import Intrinsics, Pose
from .pipeline import Pipeline, run_dataset
from .registry import ComponentRegistry, UnknownComponentError
from .surfel_map import SurfelArrays, SurfelMap
