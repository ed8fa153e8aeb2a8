import numpy as np
import pytest

from echograd.renderer import RenderParams
from echograd.scene import TriangleMesh
from echograd.sonar import BeamPattern, SonarPose, intrinsics_from_fov

DEG = np.deg2rad


@pytest.fixture(scope="session")
def intr():
    return intrinsics_from_fov(DEG(1.0), DEG(50.0), 50.0, 256)


@pytest.fixture(scope="session")
def beam():
    return BeamPattern()


@pytest.fixture
def params():
    return RenderParams()


@pytest.fixture
def starboard_pose():
    # heading +y, starboard looks along +x, tilted 30 degrees down
    return SonarPose((0.0, 0.0, 0.0), np.pi / 2, 0.0, 0.0, "starboard", DEG(30.0))


def facing_patch(range_m, elev_deg, half_m, pose=None, albedo=1.0, azim_deg=0.0):
    """Square patch of 2 triangles at the given slant range, perpendicular
    to the ray leaving the sensor at that elevation, facing the sensor.

    Assumes the sensor sits at the origin looking along +x (the
    ``starboard_pose`` fixture geometry).
    """
    e = DEG(elev_deg)
    az = DEG(azim_deg)
    d = np.array([np.cos(e) * np.cos(az), np.cos(e) * np.sin(az), -np.sin(e)])
    center = range_m * d
    a = np.array([-np.sin(az), np.cos(az), 0.0])
    b = np.cross(d, a)
    v = np.array([center - half_m * a - half_m * b, center + half_m * a - half_m * b,
                  center + half_m * a + half_m * b, center - half_m * a + half_m * b])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    n = np.cross(v[1] - v[0], v[2] - v[0])
    if np.dot(n, -d) < 0:
        faces = faces[:, ::-1]
    return TriangleMesh(v, faces, np.full(2, albedo))


def raycast_oracle(mesh, pose, intr, params, bp):
    """Exact first-hit ray casting plus hard range binning.

    Independent of the soft renderer: Moller-Trumbore intersection of
    every pixel ray against every face, nearest hit only, Lambertian
    shading with the same beam weights, full deposit into the containing
    bin.
    """
    from echograd.renderer import _Camera

    cam = _Camera(pose, intr, params, bp)
    out = np.zeros(intr.n_bins)
    verts, faces = mesh.vertices, mesh.faces
    origin = np.asarray(pose.position, dtype=np.float64)
    a = verts[faces[:, 0]]
    e1 = verts[faces[:, 1]] - a
    e2 = verts[faces[:, 2]] - a
    normals = np.cross(e1, e2)
    unit_n = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    tv = origin - a                                    # (F, 3)
    for pidx in range(cam.height * cam.width):
        d = cam.ray_dirs[pidx]
        pv = np.cross(d, e2)                           # (F, 3)
        det = np.einsum("fj,fj->f", e1, pv)
        ok = np.abs(det) > 1e-12
        det = np.where(ok, det, 1.0)
        u = np.einsum("fj,fj->f", tv, pv) / det
        qv = np.cross(tv, e1)
        v = (qv @ d) / det
        t = np.einsum("fj,fj->f", e2, qv) / det
        hit = ok & (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
        if not hit.any():
            continue
        t = np.where(hit, t, np.inf)
        fi = int(np.argmin(t))
        if t[fi] <= intr.max_slant_range:
            ci = max(0.0, -d @ unit_n[fi])
            out[int(t[fi] / intr.bin_width)] += (
                mesh.albedo[fi] * ci * cam.col_weights[pidx % cam.width])
    return out


@pytest.fixture
def make_patch():
    return facing_patch


@pytest.fixture
def oracle():
    return raycast_oracle
