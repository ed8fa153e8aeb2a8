"""File formats: plain-text meshes, binary float grids, pose tables, PNG.

* Mesh: OBJ subset with ``v x y z`` and ``f i j k`` lines, 1-based indices.
* Heightfield / float grid: 24-byte little-endian header
  ``magic(4s) nx(u32) ny(u32) cell(f32) origin_x(f32) origin_y(f32)``
  followed by float32 values in row-major order.  Heightfields use magic
  ``EHF1`` (nx, ny are grid dims); generic grids such as waterfalls use
  ``EFG1`` (nx = columns, ny = rows, cell = bin width).
* Poses: CSV ``ping_id,x,y,z,heading_deg,pitch_deg,roll_deg,side``.
  Angles are degrees in files, radians in memory.
* Waterfall PNG: 8-bit grayscale, normalization factor recorded in a
  ``<name>.scale.txt`` sidecar.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import Heightfield, TriangleMesh
from .sonar import PORT, STARBOARD, SonarPose

_HEADER = struct.Struct("<4sIIfff")
MAGIC_HEIGHTFIELD = b"EHF1"
MAGIC_GRID = b"EFG1"


class MeshFormatError(ValueError):
    def __init__(self, message: str, line: int) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


def write_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_obj(path, albedo: float = 1.0) -> TriangleMesh:
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) != 4:
                    raise MeshFormatError("vertex line needs 3 coordinates", lineno)
                try:
                    vertices.append([float(x) for x in parts[1:]])
                except ValueError:
                    raise MeshFormatError("bad vertex coordinate", lineno) from None
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise MeshFormatError("face line needs 3 indices", lineno)
                try:
                    idx = [int(x) - 1 for x in parts[1:]]
                except ValueError:
                    raise MeshFormatError("bad face index", lineno) from None
                if min(idx) < 0 or max(idx) >= len(vertices):
                    raise MeshFormatError("face index out of range", lineno)
                faces.append(idx)
            else:
                raise MeshFormatError(f"unsupported record {parts[0]!r}", lineno)
    if not faces:
        raise MeshFormatError("mesh has no faces", 0)
    return TriangleMesh(np.array(vertices), np.array(faces),
                        np.full(len(faces), float(albedo)))


def _write_grid(path, magic: bytes, nx: int, ny: int, cell: float,
                origin: tuple[float, float], data: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, nx, ny, cell, origin[0], origin[1]))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_grid(path, magic: bytes):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        got, nx, ny, cell, ox, oy = _HEADER.unpack(head)
        if got != magic:
            raise ValueError(f"{path}: bad magic {got!r}, expected {magic!r}")
        raw = fh.read()
    data = np.frombuffer(raw, dtype="<f4")
    return nx, ny, cell, (ox, oy), data


def write_heightfield(path, hf: Heightfield) -> None:
    _write_grid(path, MAGIC_HEIGHTFIELD, hf.nx, hf.ny, hf.cell_size, hf.origin_xy, hf.z)


def read_heightfield(path) -> Heightfield:
    nx, ny, cell, origin, data = _read_grid(path, MAGIC_HEIGHTFIELD)
    if data.size != nx * ny:
        raise ValueError(f"{path}: expected {nx * ny} values, found {data.size}")
    return Heightfield(origin, float(cell), data.reshape(nx, ny).astype(np.float64))


def write_heightfield_csv(path, hf: Heightfield) -> None:
    """Depth-positive CSV export; one row per grid i, columns are j."""
    with open(path, "w") as fh:
        fh.write(f"# nx={hf.nx} ny={hf.ny} cell_size={hf.cell_size!r}"
                 f" origin_x={hf.origin_xy[0]!r} origin_y={hf.origin_xy[1]!r}\n")
        np.savetxt(fh, -hf.z, delimiter=",", fmt="%.6f")


def write_float_grid(path, data: np.ndarray, cell: float = 0.0,
                     origin: tuple[float, float] = (0.0, 0.0)) -> None:
    data = np.asarray(data)
    _write_grid(path, MAGIC_GRID, data.shape[1], data.shape[0], cell, origin, data)


def read_float_grid(path) -> np.ndarray:
    nx, ny, _cell, _origin, data = _read_grid(path, MAGIC_GRID)
    if data.size != nx * ny:
        raise ValueError(f"{path}: expected {nx * ny} values, found {data.size}")
    return data.reshape(ny, nx).astype(np.float64)


def write_waterfall_png(path, data: np.ndarray) -> float:
    """Write a grayscale PNG plus its normalization factor sidecar.

    Returns the scale (the intensity mapped to white)."""
    data = np.asarray(data, dtype=np.float64)
    scale = float(data.max()) if data.size and data.max() > 0 else 1.0
    img = np.clip(data / scale * 255.0, 0.0, 255.0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
    Path(str(path) + ".scale.txt").write_text(f"{scale!r}\n")
    return scale


def write_pose_csv(path, poses: list[SonarPose]) -> None:
    with open(path, "w") as fh:
        fh.write("ping_id,x,y,z,heading_deg,pitch_deg,roll_deg,side\n")
        for p in poses:
            x, y, z = (float(c) for c in p.position)
            fh.write(f"{p.ping_id},{x!r},{y!r},{z!r},{float(np.rad2deg(p.heading))!r},"
                     f"{float(np.rad2deg(p.pitch))!r},{float(np.rad2deg(p.roll))!r},{p.side}\n")


def read_pose_csv(path, tilt: float) -> list[SonarPose]:
    poses: list[SonarPose] = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "ping_id,x,y,z,heading_deg,pitch_deg,roll_deg,side":
            raise ValueError(f"{path}: unexpected pose CSV header")
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 columns")
            pid = int(parts[0])
            x, y, z, hdg, pitch, roll = (float(s) for s in parts[1:7])
            side = parts[7].strip()
            if side not in (PORT, STARBOARD):
                raise ValueError(f"{path}:{lineno}: bad side {side!r}")
            poses.append(SonarPose((x, y, z), np.deg2rad(hdg), np.deg2rad(pitch),
                                   np.deg2rad(roll), side, tilt, pid))
    return poses
