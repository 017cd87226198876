"""
TUM RGB-D dataset ingestion.
"""

__all__ = [
    "CALIBRATION",
    "DEPTH_INDEX",
    "DatasetHandle",
    "GROUND_TRUTH",
    "RGB_INDEX",
    "TUM_INTRINSICS",
    "iter_frames",
    "load_frame",
    "load_tum",
    "read_calibration",
]

import dataclasses
import logging
import typing
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError, EmptyDatasetError
from .evaluation import Trajectory, associate
from .export import load_trajectory
from .frame_pipeline import RawFrame
from .geometry import Intrinsics

logger = logging.getLogger(__name__)

RGB_INDEX = "rgb.txt"
DEPTH_INDEX = "depth.txt"
GROUND_TRUTH = "groundtruth.txt"
CALIBRATION = "calibration.txt"

TUM_INTRINSICS = Intrinsics(
    fx=525.0, fy=525.0, cx=319.5, cy=239.5, width=640, height=480
)


@dataclasses.dataclass(frozen=True)
class DatasetHandle:
    """
    An opened sequence: time-sorted ``(timestamp, color path, depth path)``
    associations plus the optional ground-truth trajectory.
    """

    root: Path
    intrinsics: Intrinsics
    entries: tuple[tuple[float, Path, Path], ...]
    ground_truth: typing.Optional[Trajectory] = None
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def timestamps(self) -> list[float]:
        return [entry[0] for entry in self.entries]


def _read_index(path: Path) -> list[tuple[float, str]]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetFormatError(f"Cannot read index file {path}: {exc}") from exc

    rows = []
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) < 2:
            raise DatasetFormatError(f"{path}:{number}: expected 'timestamp path'")
        try:
            rows.append((float(fields[0]), fields[1]))
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{number}: {exc}") from exc

    rows.sort(key=lambda row: row[0])
    return rows


def read_calibration(path: typing.Union[str, Path]) -> Intrinsics:
    """
    Parses a ``fx fy cx cy width height`` line (``#`` lines are comments).
    """
    path = Path(path)
    try:
        lines = [
            line
            for line in path.read_text().splitlines()
            if line.strip() and not line.lstrip().startswith("#")
        ]
    except OSError as exc:
        raise DatasetFormatError(f"Cannot read calibration {path}: {exc}") from exc

    fields = lines[0].split() if lines else []
    if len(fields) != 6:
        raise DatasetFormatError(f"{path}: expected 'fx fy cx cy width height'")
    try:
        fx, fy, cx, cy = (float(v) for v in fields[:4])
        return Intrinsics(fx, fy, cx, cy, int(fields[4]), int(fields[5]))
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc


def load_tum(
    root: typing.Union[str, Path], tolerance: float = 0.02
) -> DatasetHandle:
    """
    Opens a TUM-layout sequence.

    Colour and depth images are associated by nearest timestamp within
    ``tolerance`` seconds; unmatched entries are dropped (and counted).

    Raises:
        DatasetFormatError: if an index file is missing or malformed.
        EmptyDatasetError: if nothing could be associated.
    """
    root = Path(root)
    for name in (RGB_INDEX, DEPTH_INDEX):
        if not (root / name).is_file():
            raise DatasetFormatError(f"{root} is not a TUM sequence: missing {name}")

    rgb = _read_index(root / RGB_INDEX)
    depth = _read_index(root / DEPTH_INDEX)
    pairs = associate([t for t, _ in rgb], [t for t, _ in depth], tolerance)
    if not pairs:
        raise EmptyDatasetError(f"No colour/depth pairs within {tolerance}s in {root}")

    dropped = len(rgb) + len(depth) - 2 * len(pairs)
    if dropped:
        logger.warning(
            "Dropped %d unassociated entries from %s (%d rgb, %d depth, %d pairs)",
            dropped,
            root,
            len(rgb),
            len(depth),
            len(pairs),
        )

    entries = tuple(
        (rgb[i][0], root / rgb[i][1], root / depth[j][1]) for i, j in pairs
    )

    ground_truth = None
    if (root / GROUND_TRUTH).is_file():
        ground_truth = load_trajectory(root / GROUND_TRUTH)

    intrinsics = TUM_INTRINSICS
    if (root / CALIBRATION).is_file():
        intrinsics = read_calibration(root / CALIBRATION)

    logger.info("Opened %s: %d frames", root, len(entries))
    return DatasetHandle(root, intrinsics, entries, ground_truth, dropped)


def load_frame(handle: DatasetHandle, index: int) -> RawFrame:
    """
    Reads association ``index``: RGB ``uint8`` colour and metric depth.
    """
    import cv2

    timestamp, color_path, depth_path = handle.entries[index]
    color = cv2.imread(str(color_path), cv2.IMREAD_COLOR)
    depth = cv2.imread(str(depth_path), cv2.IMREAD_UNCHANGED)
    if color is None:
        raise DatasetFormatError(f"Cannot read colour image {color_path}")
    if depth is None or depth.ndim != 2:
        raise DatasetFormatError(f"Cannot read 16-bit depth image {depth_path}")

    k = handle.intrinsics
    if color.shape[:2] != k.shape or depth.shape != k.shape:
        raise DatasetFormatError(
            f"Frame {index} is {color.shape[1]}x{color.shape[0]}, "
            f"calibration says {k.width}x{k.height}"
        )

    return RawFrame(
        color=cv2.cvtColor(color, cv2.COLOR_BGR2RGB),
        depth=depth.astype(np.float64) / k.depth_scale,
        timestamp=timestamp,
        frame_id=index,
    )


def iter_frames(handle: DatasetHandle) -> typing.Iterator[RawFrame]:
    for index in range(len(handle)):
        yield load_frame(handle, index)
