"""
Artifact writers (and the matching readers used for round trips).
"""

__all__ = [
    "MeshExporter",
    "ObjMeshExporter",
    "PlyMeshExporter",
    "export_mesh",
    "export_surfels_ply",
    "export_trajectory",
    "load_mesh_ply",
    "load_surfels_ply",
    "load_trajectory",
    "mesh_exporters",
    "write_color_png",
    "write_csv",
    "write_depth_png",
]

import csv
import logging
import math
import typing
from abc import ABC, abstractmethod as abstract_method
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from plyfile import PlyData, PlyElement

from .errors import DatasetFormatError, ExportError
from .evaluation import Trajectory
from .geometry import FloatArray, Pose
from .meshing import TriangleMesh
from .registry import AutoRegister, ComponentRegistry, UnknownComponentError
from .surfel_map import SurfelArrays, SurfelMap, extract_confident

logger = logging.getLogger(__name__)

PathLike = typing.Union[str, Path]


def _wrap_io(path: PathLike, action: str) -> typing.Callable[[OSError], ExportError]:
    def _error(exc: OSError) -> ExportError:
        return ExportError(f"Cannot {action} {path}: {exc}")

    return _error


# --------------------------------------------------------------------------------
# Images


def write_color_png(path: PathLike, color: NDArray[np.uint8]) -> None:
    """
    Writes an RGB ``uint8`` image.
    """
    import cv2

    rgb = np.ascontiguousarray(color, dtype=np.uint8)
    image = cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), image):
        raise ExportError(f"Cannot write {path}")


def write_depth_png(
    path: PathLike, depth: FloatArray, depth_scale: float = 5000.0
) -> None:
    """
    Writes metric depth as a 16-bit PNG in ``1 / depth_scale`` m units.
    """
    import cv2

    units = np.rint(np.asarray(depth) * depth_scale)
    units = np.clip(units, 0, np.iinfo(np.uint16).max)
    if not cv2.imwrite(str(path), units.astype(np.uint16)):
        raise ExportError(f"Cannot write {path}")


def write_csv(
    path: PathLike,
    header: typing.Sequence[str],
    rows: typing.Iterable[typing.Sequence[typing.Any]],
) -> None:
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as exc:
        raise _wrap_io(path, "write")(exc) from exc


# --------------------------------------------------------------------------------
# Trajectories


def _format_number(value: float) -> str:
    # Adding 0.0 turns -0.0 into 0.0.
    return "%.17g" % (float(value) + 0.0)


def export_trajectory(trajectory: Trajectory, path: PathLike) -> None:
    """
    One ``timestamp tx ty tz qx qy qz qw`` line per pose.
    """
    lines = []
    for timestamp, pose in zip(trajectory.timestamps, trajectory.poses):
        values = np.concatenate([pose.translation, pose.quaternion])
        lines.append(
            " ".join([repr(float(timestamp))] + [_format_number(v) for v in values])
        )
    try:
        Path(path).write_text("".join(line + "\n" for line in lines))
    except OSError as exc:
        raise _wrap_io(path, "write")(exc) from exc


def load_trajectory(path: PathLike) -> Trajectory:
    """
    Parses a TUM trajectory file; ``#`` lines are comments.

    Raises:
        DatasetFormatError: on malformed lines.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DatasetFormatError(f"Cannot read trajectory {path}: {exc}") from exc

    stamps, poses = [], []
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.replace(",", " ").split()
        if len(fields) != 8:
            raise DatasetFormatError(
                f"{path}:{number}: expected 8 values, got {len(fields)}"
            )
        try:
            values = [float(v) for v in fields]
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{number}: {exc}") from exc
        stamps.append(values[0])
        poses.append(Pose(np.array(values[4:8]), np.array(values[1:4])))

    return Trajectory(np.array(stamps), tuple(poses))


# --------------------------------------------------------------------------------
# Surfels


def _surfel_fields(sh_coefficients: int) -> list[str]:
    return (
        ["x", "y", "z", "nx", "ny", "nz", "scale_0", "scale_1"]
        + [f"rot_{i}" for i in range(4)]
        + ["opacity"]
        + [f"f_{i}" for i in range(3 * sh_coefficients)]
        + [f"lam_{i}" for i in range(6)]
        + ["confidence", "created", "last_observed"]
    )


def export_surfels_ply(
    surfels: typing.Union[SurfelMap, SurfelArrays],
    path: PathLike,
    tau_conf: float = 0.0,
) -> int:
    """
    Writes surfels with confidence ``tr(Λ) >= tau_conf`` to a binary PLY.

    Besides the geometric attributes every SH coefficient and the information
    diagonal are stored, plus 8-bit ``red``/``green``/``blue`` from the DC term.

    Returns:
        Number of surfels written.
    """
    from . import sh

    arrays = surfels.arrays if isinstance(surfels, SurfelMap) else surfels
    if math.isinf(tau_conf):
        arrays = arrays.take(np.zeros(0, dtype=np.int64))
    else:
        arrays = extract_confident(arrays, tau_conf)

    k = arrays.sh_coefficients
    names = _surfel_fields(k)
    dtype = [(name, "f8") for name in names[:-2]]
    dtype += [("created", "i4"), ("last_observed", "i4")]
    dtype += [("red", "u1"), ("green", "u1"), ("blue", "u1")]

    n = len(arrays)
    elements = np.empty(n, dtype=dtype)
    columns = np.concatenate(
        [
            arrays.positions,
            arrays.normals.reshape(n, 3),
            arrays.scales,
            arrays.rotations,
            arrays.opacities[:, None],
            arrays.colors.reshape(n, -1),
            arrays.lam,
            arrays.confidence[:, None],
        ],
        axis=1,
    )
    for i, name in enumerate(names[:-2]):
        elements[name] = columns[:, i]
    elements["created"] = arrays.created
    elements["last_observed"] = arrays.last_observed

    rgb = np.clip(np.rint(sh.sh_to_rgb(arrays.colors[:, 0]) * 255.0), 0, 255)
    for i, channel in enumerate(("red", "green", "blue")):
        elements[channel] = rgb.reshape(n, 3)[:, i].astype(np.uint8)

    try:
        PlyData([PlyElement.describe(elements, "vertex")], text=False).write(str(path))
    except OSError as exc:
        raise _wrap_io(path, "write")(exc) from exc

    logger.info("Wrote %d surfels to %s", n, path)
    return n


def load_surfels_ply(path: PathLike) -> SurfelArrays:
    """
    Reads a PLY written by :py:func:`export_surfels_ply`.
    """
    try:
        vertex = PlyData.read(str(path))["vertex"]
    except (OSError, KeyError, ValueError) as exc:
        raise DatasetFormatError(f"Cannot read surfels from {path}: {exc}") from exc

    names = [p.name for p in vertex.properties]
    k = sum(1 for name in names if name.startswith("f_")) // 3

    def _stack(prefix: str, count: int) -> FloatArray:
        return np.stack(
            [
                np.asarray(vertex[f"{prefix}{i}"], dtype=np.float64)
                for i in range(count)
            ],
            axis=1,
        ).reshape(-1, count)

    def _column(name: str) -> FloatArray:
        return np.asarray(vertex[name], dtype=np.float64)

    positions = np.stack([_column("x"), _column("y"), _column("z")], axis=1)
    normals = np.stack([_column("nx"), _column("ny"), _column("nz")], axis=1)
    lam = _stack("lam_", 6)
    return SurfelArrays(
        positions=positions.reshape(-1, 3),
        scales=_stack("scale_", 2),
        rotations=_stack("rot_", 4),
        opacities=_column("opacity"),
        colors=_stack("f_", 3 * k).reshape(-1, k, 3),
        lam=lam,
        eta=lam * np.concatenate([positions, normals], axis=1).reshape(-1, 6),
        created=np.asarray(vertex["created"], dtype=np.int64),
        last_observed=np.asarray(vertex["last_observed"], dtype=np.int64),
    )


# --------------------------------------------------------------------------------
# Meshes

mesh_exporters = ComponentRegistry["MeshExporter"](
    attr_name="suffix", group="surfel_fusion.mesh_exporters"
)


class MeshExporter(AutoRegister(mesh_exporters), ABC):  # type: ignore
    """
    Writes a triangle mesh in one file format, selected by file suffix.
    """

    suffix: str

    @abstract_method
    def write(self, mesh: TriangleMesh, path: Path) -> None:
        raise NotImplementedError()


class PlyMeshExporter(MeshExporter):
    """
    Binary little-endian PLY.
    """

    suffix = ".ply"

    def write(self, mesh: TriangleMesh, path: Path) -> None:
        vertices = np.empty(
            len(mesh.vertices), dtype=[("x", "f4"), ("y", "f4"), ("z", "f4")]
        )
        vertices["x"], vertices["y"], vertices["z"] = mesh.vertices.T
        faces = np.empty(len(mesh.faces), dtype=[("vertex_indices", "i4", (3,))])
        faces["vertex_indices"] = mesh.faces
        PlyData(
            [
                PlyElement.describe(vertices, "vertex"),
                PlyElement.describe(faces, "face"),
            ],
            text=False,
        ).write(str(path))


class ObjMeshExporter(MeshExporter):
    """
    Wavefront OBJ (1-based face indices).
    """

    suffix = ".obj"

    def write(self, mesh: TriangleMesh, path: Path) -> None:
        with open(path, "w") as f:
            for v in mesh.vertices:
                f.write("v %.9g %.9g %.9g\n" % tuple(v))
            for face in mesh.faces + 1:
                f.write("f %d %d %d\n" % tuple(face))


def export_mesh(mesh: TriangleMesh, path: PathLike) -> None:
    """
    Raises:
        ExportError: for unsupported suffixes and I/O failures.
    """
    target = Path(path)
    try:
        exporter = typing.cast(MeshExporter, mesh_exporters.get(target.suffix.lower()))
    except UnknownComponentError as exc:
        raise ExportError(
            f"Unsupported mesh format {target.suffix!r} for {target}; "
            f"known: {', '.join(sorted(mesh_exporters.keys()))}"
        ) from exc

    try:
        exporter.write(mesh, target)
    except OSError as exc:
        raise _wrap_io(target, "write")(exc) from exc
    logger.info("Wrote mesh with %d faces to %s", len(mesh), target)


def load_mesh_ply(path: PathLike) -> TriangleMesh:
    try:
        ply = PlyData.read(str(path))
    except (OSError, ValueError) as exc:
        raise DatasetFormatError(f"Cannot read mesh from {path}: {exc}") from exc

    vertex = ply["vertex"]
    vertices = np.stack(
        [np.asarray(vertex[c], dtype=np.float64) for c in ("x", "y", "z")], axis=1
    )
    faces = np.asarray(
        [np.asarray(f, dtype=np.int64) for f in ply["face"]["vertex_indices"]],
        dtype=np.int64,
    ).reshape(-1, 3)
    return TriangleMesh(vertices.reshape(-1, 3), faces)
