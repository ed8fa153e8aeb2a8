"""Seafloor surfaces: heightfields, triangle meshes and scene generators.

World frame is right handed with z up; seafloor depth ``d`` metres is
stored as ``z = -d``.  Depth-positive values appear only at I/O and
reporting boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator
from scipy.spatial import QhullError


@dataclass
class Heightfield:
    """Regular grid of surface elevations.

    Vertex ``(i, j)`` sits at ``(origin_x + i*cell, origin_y + j*cell,
    z[i, j])``, so ``z`` has shape ``(nx, ny)``.
    """

    origin_xy: tuple[float, float]
    cell_size: float
    z: np.ndarray

    def __post_init__(self) -> None:
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 2 or self.z.shape[0] < 2 or self.z.shape[1] < 2:
            raise ValueError("heightfield needs at least a 2x2 grid")
        if self.cell_size <= 0.0:
            raise ValueError("cell_size must be positive")
        if not np.all(np.isfinite(self.z)):
            raise ValueError("heightfield contains non-finite values")

    @property
    def nx(self) -> int:
        return self.z.shape[0]

    @property
    def ny(self) -> int:
        return self.z.shape[1]

    def vertex_xy(self) -> tuple[np.ndarray, np.ndarray]:
        """World x and y of every grid vertex, each shaped (nx, ny)."""
        ox, oy = self.origin_xy
        xs = ox + self.cell_size * np.arange(self.nx)
        ys = oy + self.cell_size * np.arange(self.ny)
        return np.meshgrid(xs, ys, indexing="ij")

    def copy(self) -> "Heightfield":
        return Heightfield(self.origin_xy, self.cell_size, self.z.copy())


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (N, 3) float64
    faces: np.ndarray     # (F, 3) int64, consistent upward winding
    albedo: np.ndarray    # (F,) reflectivity in [0, 1]

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(-1)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if len(self.albedo) != len(self.faces):
            raise ValueError("albedo must be per-face")

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        if normalize:
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.maximum(norm, 1e-300)
        return n


@dataclass
class SparseDepthSet:
    """Scattered (x, y, depth) soundings; depth is positive down, metres."""

    points: np.ndarray  # (N, 3)

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 3 or _collinear(self.points[:, :2]):
            raise ValueError("need at least 3 non-collinear depth samples")


def _collinear(xy: np.ndarray) -> bool:
    s = np.linalg.svd(xy - xy.mean(axis=0), compute_uv=False)
    return s[1] < 1e-9 * max(s[0], 1e-9)


def grid_vertex_index(i, j, ny: int):
    """Vertex id used by :func:`heightfield_to_mesh` for grid node (i, j)."""
    return i * ny + j


def heightfield_to_mesh(hf: Heightfield, albedo: float = 1.0) -> TriangleMesh:
    """Triangulate a heightfield with the fixed (i,j)->(i+1,j+1) diagonal.

    Produces ``2*(nx-1)*(ny-1)`` upward-facing triangles; vertex order is
    row-major in (i, j) so vertex k carries ``z.flat[k]``.
    """
    xg, yg = hf.vertex_xy()
    vertices = np.column_stack([xg.ravel(), yg.ravel(), hf.z.ravel()])

    nx, ny = hf.nx, hf.ny
    i, j = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
    v00 = grid_vertex_index(i, j, ny).ravel()
    v10 = grid_vertex_index(i + 1, j, ny).ravel()
    v11 = grid_vertex_index(i + 1, j + 1, ny).ravel()
    v01 = grid_vertex_index(i, j + 1, ny).ravel()
    tris = np.empty((2 * len(v00), 3), dtype=np.int64)
    tris[0::2] = np.column_stack([v00, v10, v11])
    tris[1::2] = np.column_stack([v00, v11, v01])

    mesh = TriangleMesh(vertices, tris, np.full(len(tris), float(albedo)))
    areas = 0.5 * np.linalg.norm(mesh.face_normals(normalize=False), axis=1)
    if np.any(areas <= 0.0):
        raise ValueError("degenerate face in triangulated heightfield")
    return mesh


def make_flat_scene(depth: float, nx: int, ny: int, cell_size: float,
                    origin_xy: tuple[float, float] | None = None) -> Heightfield:
    if origin_xy is None:
        origin_xy = (-0.5 * (nx - 1) * cell_size, -0.5 * (ny - 1) * cell_size)
    return Heightfield(origin_xy, cell_size, np.full((nx, ny), -float(depth)))


def make_dome_scene(radius: float, seafloor_depth: float, nx: int, ny: int,
                    cell_size: float,
                    origin_xy: tuple[float, float] | None = None) -> Heightfield:
    """Spherical dome of the given radius rising from a flat seafloor.

    The dome is centred on the grid centre; its footprint must fit inside
    the grid extent.
    """
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    if seafloor_depth <= radius:
        raise ValueError("seafloor_depth must exceed the dome radius")
    hf = make_flat_scene(seafloor_depth, nx, ny, cell_size, origin_xy)
    xg, yg = hf.vertex_xy()
    cx = 0.5 * (xg[0, 0] + xg[-1, 0])
    cy = 0.5 * (yg[0, 0] + yg[0, -1])
    if (cx - radius < xg[0, 0] or cx + radius > xg[-1, 0]
            or cy - radius < yg[0, 0] or cy + radius > yg[0, -1]):
        raise ValueError("dome footprint exceeds the grid extent")
    r2 = radius**2 - (xg - cx) ** 2 - (yg - cy) ** 2
    hf.z = -seafloor_depth + np.sqrt(np.maximum(0.0, r2))
    return hf


def make_rocky_scene(seed: int, nx: int, ny: int, cell_size: float,
                     base_depth: float = 17.0, amplitude: float = 4.0,
                     smooth_cells: float = 2.0,
                     depth_band: tuple[float, float] = (9.0, 25.0),
                     origin_xy: tuple[float, float] | None = None) -> Heightfield:
    """Seeded random rough seafloor, clamped to a fixed depth band."""
    hf = make_flat_scene(base_depth, nx, ny, cell_size, origin_xy)
    if amplitude == 0.0:
        return hf
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((nx, ny))
    rough = ndimage.gaussian_filter(noise, sigma=smooth_cells, mode="wrap")
    rough = rough / max(rough.std(), 1e-12)
    depth = base_depth - amplitude * rough
    lo, hi = depth_band
    hf.z = -np.clip(depth, lo, hi)
    return hf


def init_from_sparse_depth(samples: SparseDepthSet, nx: int, ny: int, cell_size: float,
                           smooth_sigma: float,
                           origin_xy: tuple[float, float] | None = None) -> Heightfield:
    """Heightfield from scattered soundings: Delaunay-linear interpolation,
    nearest-sample extrapolation outside the hull, then Gaussian smoothing
    (kernel truncated at 3 sigma, replicated edges)."""
    hf = make_flat_scene(0.0, nx, ny, cell_size, origin_xy)
    xg, yg = hf.vertex_xy()
    xy = samples.points[:, :2]
    depth = samples.points[:, 2]
    try:
        lin = LinearNDInterpolator(xy, depth)
        grid = lin(xg, yg)
    except QhullError as err:
        raise ValueError("sparse depth samples are degenerate") from err
    missing = ~np.isfinite(grid)
    if missing.any():
        near = NearestNDInterpolator(xy, depth)
        grid[missing] = near(xg[missing], yg[missing])
    sigma_cells = smooth_sigma / cell_size
    if sigma_cells > 0.0:
        grid = ndimage.gaussian_filter(grid, sigma=sigma_cells, mode="nearest", truncate=3.0)
    hf.z = -grid
    return hf
