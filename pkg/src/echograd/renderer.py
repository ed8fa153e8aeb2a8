"""Forward sonar-image formation: soft rasterization, Lambertian shading
and Gaussian range blending.

Per ping side, the scene is rasterized through the acoustic camera into a
fragment buffer holding the K nearest faces per pixel ray.  Each filled
slot is shaded with the Lambertian cosine rule and a horizontal beam
weight, then blended into slant-range bins: a contribution at range ``z``
deposits ``exp(-(z - rs)^2 / gamma)`` into every nearby bin ``rs``, scaled
by ``sigmoid(d_xy / sigma)`` where ``d_xy`` is the signed pixel-to-face
distance in the image plane (positive inside).  Bins whose range sphere
meets no visible surface stay near zero, which is what produces the nadir
gap and acoustic shadows.

The depth stored per fragment is the Euclidean distance from the sensor
to the ray-face intersection (slant range), since range bins are spheres
around the sensor, not planes of constant camera depth.

Geometry and blending are written against the polymorphic helpers in
:mod:`echograd.autodiff`, so the same code runs untaped on arrays or
taped on :class:`~echograd.autodiff.Var` for gradients.  All discrete
selections (face sets, bin windows, top-M sets, visibility and branch
masks) are computed from forward values and enter the tape as constants.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var, value
from .scene import TriangleMesh
from .sonar import BeamPattern, SonarIntrinsics, SonarPose, beam_pattern, camera_basis

_Z_EPS = 1e-9          # minimum camera depth / plane-parallel guard
# Range-kernel cutoff: contributions beyond it are dropped, so it is kept
# small enough that a bin window sliding by one bin moves the loss by
# far less than finite-difference resolution.
_KG_CUTOFF = 1e-10
_SIG_CUTOFF = 1e-6     # sigmoid weight below which faces are not rasterized


@dataclass
class RenderParams:
    """User-tunable knobs of the soft renderer."""

    k_faces: int = 8                 # fragments kept per pixel
    top_m: int | None = None         # per-bin contribution cap; None sums all
    sigma: float = 1e-4              # image-plane blending temperature (NDC)
    gamma: float | None = None       # range kernel scale, m^2; None -> (2*bin_width)^2
    width: int = 4                   # image columns across the horizontal FoV
    use_beam_pattern: bool = True
    occlusion_tolerance: float | None = None  # metres behind the first hit; None -> sqrt(gamma)
    spreading_loss: bool = False     # optional 1/r^2 amplitude falloff

    def __post_init__(self) -> None:
        if self.k_faces < 1 or self.width < 1:
            raise ValueError("k_faces and width must be at least 1")
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.gamma is not None and self.gamma <= 0.0:
            raise ValueError("gamma must be positive")
        if self.top_m is not None and self.top_m < 1:
            raise ValueError("top_m must be at least 1 (or None for all)")

    def resolved_gamma(self, intr: SonarIntrinsics) -> float:
        return self.gamma if self.gamma is not None else (2.0 * intr.bin_width) ** 2

    def resolved_occlusion_tol(self, intr: SonarIntrinsics) -> float:
        if self.occlusion_tolerance is not None:
            return self.occlusion_tolerance
        return float(np.sqrt(self.resolved_gamma(intr)))

    def image_height(self, intr: SonarIntrinsics) -> int:
        return int(np.ceil(intr.fx / intr.fy * self.width))

    def blur_radius(self) -> float:
        # distance at which the sigmoid weight falls below _SIG_CUTOFF
        return self.sigma * float(np.log(1.0 / _SIG_CUTOFF - 1.0))

    def range_truncation(self, intr: SonarIntrinsics) -> float:
        return float(np.sqrt(self.resolved_gamma(intr) * np.log(1.0 / _KG_CUTOFF)))


@dataclass
class Ping:
    """Slant-range intensities of one transmit-receive cycle."""

    intensities: np.ndarray
    side: str
    ping_id: int = 0

    def __post_init__(self) -> None:
        self.intensities = np.asarray(self.intensities, dtype=np.float64)
        if not np.all(np.isfinite(self.intensities)) or np.any(self.intensities < 0):
            raise ValueError("ping intensities must be finite and non-negative")


@dataclass
class Waterfall:
    """Stacked pings; each row is the port ping reversed, then starboard."""

    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("waterfall must be 2-D")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("waterfall contains non-finite values")

    @property
    def n_pings(self) -> int:
        return self.data.shape[0]


def make_row(port: Ping, starboard: Ping) -> np.ndarray:
    return np.concatenate([port.intensities[::-1], starboard.intensities])


@dataclass
class FragmentBuffer:
    """Per-pixel records of the K nearest faces, sorted by ascending range.

    Dense layout ``(H*W, K)``; empty slots carry ``face_ids == -1`` and
    ``z_depth == +inf`` and always trail the filled ones.  ``inside``
    marks slots whose ray actually crosses the face; ``visible`` marks
    slots not occluded by a nearer inside hit on the same ray.
    """

    height: int
    width: int
    face_ids: np.ndarray   # (H*W, K) int64
    z_depth: np.ndarray    # (H*W, K) float64, slant range
    d_xy: np.ndarray       # (H*W, K) float64, signed NDC distance
    bary: np.ndarray       # (H*W, K, 3) float64
    inside: np.ndarray     # (H*W, K) bool
    visible: np.ndarray    # (H*W, K) bool

    @property
    def k_faces(self) -> int:
        return self.face_ids.shape[1]

    @property
    def filled(self) -> np.ndarray:
        return self.face_ids >= 0

    def flat_slots(self) -> tuple[np.ndarray, np.ndarray]:
        """(pixel index, slot index) of every filled slot, row-major order."""
        pix, slot = np.nonzero(self.filled)
        return pix, slot


class _Camera:
    """Constant per-(pose, intrinsics, params) ray geometry."""

    def __init__(self, pose: SonarPose, intr: SonarIntrinsics, params: RenderParams,
                 bp: BeamPattern | None) -> None:
        self.origin = np.asarray(pose.position, dtype=np.float64)
        self.x_axis, self.y_axis, self.z_axis = camera_basis(pose)
        self.fx, self.fy = intr.fx, intr.fy
        self.width = params.width
        self.height = params.image_height(intr)
        self.xn = -1.0 + (2.0 * np.arange(self.width) + 1.0) / self.width
        self.yn = -1.0 + (2.0 * np.arange(self.height) + 1.0) / self.height
        xg, yg = np.meshgrid(self.xn, self.yn)           # (H, W)
        d = (self.z_axis[None, :]
             + (xg.ravel() / self.fx)[:, None] * self.x_axis[None, :]
             + (yg.ravel() / self.fy)[:, None] * self.y_axis[None, :])
        self.ray_dirs = d / np.linalg.norm(d, axis=1, keepdims=True)   # (H*W, 3)
        self.pix_ndc = np.column_stack([xg.ravel(), yg.ravel()])       # (H*W, 2)
        if params.use_beam_pattern and bp is not None:
            self.col_weights = beam_pattern(np.arctan(self.xn / self.fx), bp)
        else:
            self.col_weights = np.ones(self.width)

    def to_camera(self, pts: np.ndarray) -> np.ndarray:
        rel = pts - self.origin
        return rel @ np.column_stack([self.x_axis, self.y_axis, self.z_axis])


def _cull_faces(mesh: TriangleMesh, cam: _Camera, intr: SonarIntrinsics,
                params: RenderParams) -> np.ndarray:
    """Indices of faces that can influence any pixel of this render."""
    if len(mesh.faces) == 0:
        return np.empty(0, dtype=np.int64)
    pc = cam.to_camera(mesh.vertices)                 # (N, 3)
    slant = np.linalg.norm(mesh.vertices - cam.origin, axis=1)
    cz = pc[:, 2]
    in_front = cz > _Z_EPS
    f = mesh.faces
    ok = in_front[f].all(axis=1)
    rmax = intr.max_slant_range + params.range_truncation(intr)
    ok &= slant[f].min(axis=1) <= rmax
    if not ok.any():
        return np.empty(0, dtype=np.int64)
    margin = params.blur_radius()
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(in_front, intr.fx * pc[:, 0] / cz, 0.0)
        v = np.where(in_front, intr.fy * pc[:, 1] / cz, 0.0)
    fu, fv = u[f], v[f]
    ok &= (fu.min(axis=1) <= 1.0 + margin) & (fu.max(axis=1) >= -1.0 - margin)
    ok &= (fv.min(axis=1) <= 1.0 + margin) & (fv.max(axis=1) >= -1.0 - margin)
    return np.nonzero(ok)[0].astype(np.int64)


def _project_culled(vx, vy, vz, cam: _Camera):
    """NDC coordinates of culled vertices; components may be taped."""
    dx, dy, dz = vx - cam.origin[0], vy - cam.origin[1], vz - cam.origin[2]
    xa, ya, za = cam.x_axis, cam.y_axis, cam.z_axis
    cx = dx * xa[0] + dy * xa[1] + dz * xa[2]
    cy = dx * ya[0] + dy * ya[1] + dz * ya[2]
    cz = dx * za[0] + dy * za[1] + dz * za[2]
    u = cam.fx * (cx / cz)
    v = cam.fy * (cy / cz)
    return u, v, (dx, dy, dz)


def _point_segment_distance(px, py, ax, ay, bx, by, branches: list):
    """Distance from fixed points (px, py) to segments a->b (taped coords).

    The projection parameter is clamped to [0, 1]; the clamp state is a
    frozen branch, appended to ``branches``.
    """
    ex, ey = bx - ax, by - ay
    e2 = ex * ex + ey * ey
    t = ((px - ax) * ex + (py - ay) * ey) / e2
    tval = value(t)
    clamp_lo = tval < 0.0
    clamp_hi = tval > 1.0
    branches.append(clamp_lo)
    branches.append(clamp_hi)
    interior = (~clamp_lo & ~clamp_hi).astype(np.float64)
    tc = t * interior + clamp_hi.astype(np.float64)
    qx = ax + tc * ex
    qy = ay + tc * ey
    return ad.sqrt((px - qx) ** 2 + (py - qy) ** 2)


def _signed_xy_distance(px, py, u0, v0, u1, v1, u2, v2, inside: np.ndarray,
                        branches: list | None = None):
    """Signed Euclidean NDC distance to the triangle boundary, + inside."""
    if branches is None:
        branches = []
    d0 = _point_segment_distance(px, py, u0, v0, u1, v1, branches)
    d1 = _point_segment_distance(px, py, u1, v1, u2, v2, branches)
    d2 = _point_segment_distance(px, py, u2, v2, u0, v0, branches)
    stack = np.stack([value(d0), value(d1), value(d2)])
    choice = np.argmin(stack, axis=0)
    branches.append(choice)
    m0 = (choice == 0).astype(np.float64)
    m1 = (choice == 1).astype(np.float64)
    m2 = (choice == 2).astype(np.float64)
    dmin = d0 * m0 + d1 * m1 + d2 * m2
    signs = np.where(inside, 1.0, -1.0)
    return dmin * signs


def _barycentric(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of 2-D points p in triangles (a, b, c)."""
    v0 = b - a
    v1 = c - a
    v2 = p - a
    den = v0[..., 0] * v1[..., 1] - v0[..., 1] * v1[..., 0]
    den = np.where(np.abs(den) < 1e-300, 1e-300, den)
    w1 = (v2[..., 0] * v1[..., 1] - v2[..., 1] * v1[..., 0]) / den
    w2 = (v0[..., 0] * v2[..., 1] - v0[..., 1] * v2[..., 0]) / den
    return np.stack([1.0 - w1 - w2, w1, w2], axis=-1)


class _SigAccum:
    """Order-sensitive digest of every discrete selection in a render."""

    def __init__(self) -> None:
        self._h = hashlib.md5()

    def update(self, arr) -> None:
        a = np.ascontiguousarray(arr)
        self._h.update(str(a.dtype).encode())
        self._h.update(str(a.shape).encode())
        self._h.update(a.tobytes())

    def digest(self) -> bytes:
        return self._h.digest()


def rasterize(mesh: TriangleMesh, pose: SonarPose, intr: SonarIntrinsics,
              params: RenderParams, bp: BeamPattern | None = None) -> FragmentBuffer:
    """Collect the K nearest intersected (or boundary-grazing) faces per pixel."""
    cam = _Camera(pose, intr, params, bp)
    hw = cam.height * cam.width
    k = params.k_faces
    buf = FragmentBuffer(
        height=cam.height, width=cam.width,
        face_ids=np.full((hw, k), -1, dtype=np.int64),
        z_depth=np.full((hw, k), np.inf),
        d_xy=np.zeros((hw, k)),
        bary=np.zeros((hw, k, 3)),
        inside=np.zeros((hw, k), dtype=bool),
        visible=np.ones((hw, k), dtype=bool),
    )
    fsel = _cull_faces(mesh, cam, intr, params)
    if len(fsel) == 0:
        return buf

    faces = mesh.faces[fsel]
    vid = np.unique(faces)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[vid] = np.arange(len(vid))
    lf = remap[faces]                                   # (F', 3) into culled verts
    verts = mesh.vertices[vid]
    vx, vy, vz = verts[:, 0], verts[:, 1], verts[:, 2]

    u, v, (dx, dy, dz) = _project_culled(vx, vy, vz, cam)
    tri_u = u[lf]                                       # (F', 3)
    tri_v = v[lf]

    # ray-plane range along every (pixel, face) pair
    e1 = verts[lf[:, 1]] - verts[lf[:, 0]]
    e2 = verts[lf[:, 2]] - verts[lf[:, 0]]
    n = np.cross(e1, e2)                                # (F', 3) upward for seafloor
    num = np.einsum("fj,fj->f", n, verts[lf[:, 0]] - cam.origin)
    den = cam.ray_dirs @ n.T                            # (HW, F')
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num[None, :] / den
    t[np.abs(den) < _Z_EPS] = np.inf

    # conservative image-plane proximity: signed distance to each edge line
    p = cam.pix_ndc                                     # (HW, 2)
    area2 = ((tri_u[:, 1] - tri_u[:, 0]) * (tri_v[:, 2] - tri_v[:, 0])
             - (tri_v[:, 1] - tri_v[:, 0]) * (tri_u[:, 2] - tri_u[:, 0]))
    orient = np.sign(area2)
    orient[orient == 0.0] = 1.0
    dline_min = np.full((hw, len(fsel)), np.inf)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        ex = tri_u[:, b] - tri_u[:, a]
        ey = tri_v[:, b] - tri_v[:, a]
        elen = np.hypot(ex, ey)
        elen = np.where(elen < 1e-300, 1e-300, elen)
        cross = (ex[None, :] * (p[:, 1:2] - tri_v[None, :, a])
                 - ey[None, :] * (p[:, 0:1] - tri_u[None, :, a]))
        dline_min = np.minimum(dline_min, cross * (orient / elen)[None, :])

    rmax = intr.max_slant_range + params.range_truncation(intr)
    candidate = (dline_min > -params.blur_radius()) & (t > _Z_EPS) & (t <= rmax)
    if not candidate.any():
        return buf

    t_sort = np.where(candidate, t, np.inf)
    order = np.argsort(t_sort, axis=1, kind="stable")[:, :k]
    t_top = np.take_along_axis(t_sort, order, axis=1)
    filled = np.isfinite(t_top)                         # (HW, K)

    pix, slot = np.nonzero(filled)
    if len(pix) == 0:
        return buf
    fidx = order[pix, slot]                             # into fsel
    buf.face_ids[pix, slot] = fsel[fidx]
    buf.z_depth[pix, slot] = t_top[pix, slot]

    su = tri_u[fidx]
    sv = tri_v[fidx]
    pb = _barycentric(p[pix], np.stack([su[:, 0], sv[:, 0]], 1),
                      np.stack([su[:, 1], sv[:, 1]], 1),
                      np.stack([su[:, 2], sv[:, 2]], 1))
    inside = (pb >= 0.0).all(axis=1)
    buf.bary[pix, slot] = pb
    buf.inside[pix, slot] = inside
    dxy = _signed_xy_distance(p[pix, 0], p[pix, 1],
                              su[:, 0], sv[:, 0], su[:, 1], sv[:, 1],
                              su[:, 2], sv[:, 2], inside, None)
    buf.d_xy[pix, slot] = dxy

    _mark_visibility(buf, params.resolved_occlusion_tol(intr))
    return buf


def _mark_visibility(buf: FragmentBuffer, tol: float) -> None:
    """A slot is visible unless a strictly nearer inside hit on the same
    ray precedes it by more than ``tol`` metres."""
    z_inside = np.where(buf.inside, buf.z_depth, np.inf)
    z_ref = z_inside.min(axis=1, keepdims=True)
    buf.visible = ~(buf.z_depth > z_ref + tol)
    buf.visible &= buf.filled


def shade_lambertian(frags: FragmentBuffer, mesh: TriangleMesh, pose: SonarPose,
                     bp: BeamPattern | None, intr: SonarIntrinsics,
                     params: RenderParams) -> np.ndarray:
    """Per-slot Lambertian intensities, shaped like the fragment grid.

    ``c = albedo * max(0, cos incidence) * beam_weight(column)``; no
    distance attenuation unless ``params.spreading_loss`` is set.
    """
    cam = _Camera(pose, intr, params, bp)
    c = np.zeros_like(frags.z_depth)
    pix, slot = frags.flat_slots()
    if len(pix) == 0:
        return c
    fid = frags.face_ids[pix, slot]
    n = mesh.face_normals()[fid]
    rays = cam.ray_dirs[pix]
    cos_inc = np.maximum(0.0, -np.einsum("sj,sj->s", rays, n))
    vals = mesh.albedo[fid] * cos_inc * cam.col_weights[pix % frags.width]
    if params.spreading_loss:
        vals = vals / np.maximum(frags.z_depth[pix, slot], _Z_EPS) ** 2
    c[pix, slot] = vals
    return c


def gaussian_kernel(r, rs, gamma: float):
    """Range-blending weight ``exp(-(r - rs)^2 / gamma)``."""
    if gamma <= 0.0:
        raise ValueError("gamma must be positive")
    d = r - rs
    return ad.exp(d * d * (-1.0 / gamma))


def _blend_flat(z, dxy_sig_c, intr: SonarIntrinsics, params: RenderParams,
                sig: _SigAccum | None = None, sig_slots: np.ndarray | None = None):
    """Blend per-slot weighted intensities into B bins.

    ``z`` is the per-slot range (possibly taped), ``dxy_sig_c`` the
    per-slot product sigmoid * shade * visibility (possibly taped).
    ``sig_slots`` gives the slot ordering used when hashing the top-M
    selection into ``sig``.
    """
    b = intr.n_bins
    dr = intr.bin_width
    zv = value(z)
    s = len(zv)
    if s == 0:
        return np.zeros(b)
    gamma = params.resolved_gamma(intr)
    half = int(np.ceil(params.range_truncation(intr) / dr))
    offs = np.arange(-half, half + 1)
    # The window base is deliberately absent from the selection signature:
    # sliding it by one bin changes the result only at the _KG_CUTOFF level.
    base = np.round(zv / dr - 0.5).astype(np.int64)
    bins = base[:, None] + offs[None, :]                # (S, Wd)
    valid = (bins >= 0) & (bins < b)
    bins_flat = np.clip(bins, 0, b - 1).ravel()
    keep = valid.ravel().astype(np.float64)

    wd = len(offs)
    rep = np.repeat(np.arange(s), wd)
    rs_flat = (bins_flat + 0.5) * dr
    z_rep = ad.gather(z, rep)
    kg = gaussian_kernel(z_rep, rs_flat, gamma)
    contrib = kg * ad.gather(dxy_sig_c, rep) * keep

    if params.top_m is not None:
        cv = value(contrib)
        order = np.lexsort((-cv, bins_flat))
        sorted_bins = bins_flat[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = sorted_bins[1:] != sorted_bins[:-1]
        group_start = np.maximum.accumulate(np.where(first, np.arange(len(order)), 0))
        rank = np.arange(len(order)) - group_start
        keep_m = np.zeros(len(order))
        keep_m[order] = (rank < params.top_m).astype(np.float64)
        keep_m *= keep  # out-of-range entries stay dropped
        if sig is not None and sig_slots is not None:
            sig.update(keep_m.reshape(s, wd)[sig_slots].astype(bool))
        contrib = contrib * keep_m
    return ad.scatter_add(contrib, bins_flat, b)


def blend_ping(frags: FragmentBuffer, c: np.ndarray, intr: SonarIntrinsics,
               params: RenderParams, side: str = "starboard", ping_id: int = 0) -> Ping:
    """Blend shaded fragments into one ping of B bins.

    With ``top_m`` unset every contribution is summed; otherwise only the
    M largest contributions per bin are kept.  Occluded slots are
    excluded; this is how shadows survive blending.
    """
    pix, slot = frags.flat_slots()
    z = frags.z_depth[pix, slot]
    w = (ad.sigmoid(frags.d_xy[pix, slot] / params.sigma)
         * c[pix, slot] * frags.visible[pix, slot].astype(np.float64))
    return Ping(_blend_flat(z, w, intr, params, None), side=side, ping_id=ping_id)


def render_ping(mesh: TriangleMesh, pose: SonarPose, intr: SonarIntrinsics,
                bp: BeamPattern | None, params: RenderParams) -> Ping:
    """rasterize -> shade -> blend for one ping side."""
    frags = rasterize(mesh, pose, intr, params, bp)
    c = shade_lambertian(frags, mesh, pose, bp, intr, params)
    return blend_ping(frags, c, intr, params, side=pose.side, ping_id=pose.ping_id)


def render_row(mesh: TriangleMesh, port: SonarPose, starboard: SonarPose,
               intr: SonarIntrinsics, bp: BeamPattern | None,
               params: RenderParams) -> np.ndarray:
    return make_row(render_ping(mesh, port, intr, bp, params),
                    render_ping(mesh, starboard, intr, bp, params))


def render_waterfall(mesh: TriangleMesh, rows: list[tuple[SonarPose, SonarPose]],
                     intr: SonarIntrinsics, bp: BeamPattern | None,
                     params: RenderParams, threads: int = 1) -> Waterfall:
    """One waterfall row per (port, starboard) pose pair, in input order."""
    if not rows:
        raise ValueError("need at least one pose row")
    from ._parallel import map_ordered

    def work(i: int) -> np.ndarray:
        p, s = rows[i]
        return render_row(mesh, p, s, intr, bp, params)

    return Waterfall(np.stack(map_ordered(work, len(rows), threads)))


# -- differentiable path -------------------------------------------------


def taped_side_intensities(tape_z: Var, const_xy: tuple[np.ndarray, np.ndarray],
                           mesh: TriangleMesh, pose: SonarPose, intr: SonarIntrinsics,
                           bp: BeamPattern | None, params: RenderParams,
                           sig: _SigAccum | None = None):
    """Bin intensities for one ping side with gradients w.r.t. vertex z.

    ``tape_z`` holds the z of every mesh vertex (a leaf Var); x and y are
    constants.  The fragment selection is taken from a fresh rasterization
    of the current forward values and then frozen.  Returns a length-B
    Var, or a plain zero array when nothing is hit.
    """
    vx_all, vy_all = const_xy
    current = TriangleMesh(
        np.column_stack([vx_all, vy_all, value(tape_z)]), mesh.faces, mesh.albedo
    )
    cam = _Camera(pose, intr, params, bp)
    buf = rasterize(current, pose, intr, params, bp)
    pix, slot = buf.flat_slots()
    if len(pix) == 0:
        return np.zeros(intr.n_bins)

    fid = buf.face_ids[pix, slot]
    vid = np.unique(mesh.faces[fid])
    remap = np.full(len(vx_all), -1, dtype=np.int64)
    remap[vid] = np.arange(len(vid))
    lf = remap[mesh.faces[fid]]                         # (S, 3) into culled verts

    vx = vx_all[vid]
    vy = vy_all[vid]
    vz = ad.gather(tape_z, vid)
    u, v, (dx, dy, dz) = _project_culled(vx, vy, vz, cam)

    i0, i1, i2 = lf[:, 0], lf[:, 1], lf[:, 2]
    gx = lambda arr, i: ad.gather(arr, i)
    # face normal from world-frame edge vectors
    e1x, e1y, e1z = gx(dx, i1) - gx(dx, i0), gx(dy, i1) - gx(dy, i0), gx(dz, i1) - gx(dz, i0)
    e2x, e2y, e2z = gx(dx, i2) - gx(dx, i0), gx(dy, i2) - gx(dy, i0), gx(dz, i2) - gx(dz, i0)
    nx = e1y * e2z - e1z * e2y
    ny = e1z * e2x - e1x * e2z
    nz = e1x * e2y - e1y * e2x

    rays = cam.ray_dirs[pix]
    den = nx * rays[:, 0] + ny * rays[:, 1] + nz * rays[:, 2]
    num = nx * gx(dx, i0) + ny * gx(dy, i0) + nz * gx(dz, i0)
    z_depth = num / den

    nlen = ad.sqrt(nx * nx + ny * ny + nz * nz)
    cos_inc = ad.relu(-(den / nlen))

    branches: list[np.ndarray] = []
    dxy = _signed_xy_distance(cam.pix_ndc[pix, 0], cam.pix_ndc[pix, 1],
                              gx(u, i0), gx(v, i0), gx(u, i1), gx(v, i1),
                              gx(u, i2), gx(v, i2), buf.inside[pix, slot], branches)

    shade = cos_inc * (mesh.albedo[fid] * cam.col_weights[pix % cam.width])
    if params.spreading_loss:
        shade = shade / (z_depth * z_depth)
    sig_w = ad.sigmoid(dxy * (1.0 / params.sigma))
    visible = buf.visible[pix, slot].astype(np.float64)
    w = sig_w * shade * visible

    sig_slots = None
    if sig is not None:
        # Hash the selection restricted to slots whose image-plane weight
        # is non-negligible, ordered by (pixel, face) so a marginal face
        # appearing or vanishing at the blur boundary does not reshuffle
        # (and thereby flag) every other slot.
        relevant = np.nonzero(value(sig_w) >= 1e-5)[0]
        sig_slots = relevant[np.lexsort((fid[relevant], pix[relevant]))]
        sig.update(pix[sig_slots])
        sig.update(fid[sig_slots])
        sig.update(buf.inside[pix, slot][sig_slots])
        sig.update(buf.visible[pix, slot][sig_slots])
        sig.update((value(cos_inc) > 0.0)[sig_slots])
        for br in branches:
            sig.update(br[sig_slots])
    return _blend_flat(z_depth, w, intr, params, sig, sig_slots)


def taped_row_ssq(tape_z: Var, const_xy, mesh: TriangleMesh,
                  row: tuple[SonarPose, SonarPose], ref_row: np.ndarray,
                  intr: SonarIntrinsics, bp: BeamPattern | None,
                  params: RenderParams, sig: _SigAccum | None = None):
    """Sum of squared residuals of one waterfall row against a reference.

    Returns a scalar Var (or float when the row saw no geometry).
    """
    port, starboard = row
    b = intr.n_bins
    ref_port = ref_row[:b][::-1].copy()
    ref_stbd = ref_row[b:]
    total = 0.0
    for pose, ref in ((port, ref_port), (starboard, ref_stbd)):
        intens = taped_side_intensities(tape_z, const_xy, mesh, pose, intr, bp, params, sig)
        res = intens - ref
        ssq = (res * res).sum() if isinstance(res, Var) else float(np.sum(res * res))
        total = ssq + total
    return total
