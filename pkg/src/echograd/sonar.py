"""Acoustic camera model for a sidescan sonar.

A ping is rendered through a perspective camera whose optical axis points
sideways from the vehicle, rotated down from horizontal by the transducer
tilt.  The horizontal field of view is the (narrow) along-track beam
width, the vertical field of view is the (wide) across-track opening, and
the focal factors follow ``fx = 1/tan(phi/2)``, ``fy = 1/tan(alpha/2)``.

Conventions: world frame right handed, z up.  Body frame x forward,
y port, z up.  Heading is measured CCW from the world +x axis; pitch > 0
raises the nose; roll > 0 raises the port side.  Rotations compose as
yaw, then pitch, then roll.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PORT = "port"
STARBOARD = "starboard"


@dataclass(frozen=True)
class SonarPose:
    """Pose of one sonar head for one ping."""

    position: tuple[float, float, float]
    heading: float
    pitch: float
    roll: float
    side: str
    tilt: float
    ping_id: int = 0

    def __post_init__(self) -> None:
        if self.side not in (PORT, STARBOARD):
            raise ValueError(f"side must be '{PORT}' or '{STARBOARD}', got {self.side!r}")


@dataclass(frozen=True)
class SonarIntrinsics:
    phi: float             # horizontal FoV, radians
    alpha: float           # vertical FoV, radians
    fx: float
    fy: float
    max_slant_range: float
    n_bins: int

    @property
    def bin_width(self) -> float:
        return self.max_slant_range / self.n_bins


@dataclass(frozen=True)
class BeamPattern:
    k_phi: float = 159.46
    phi0: float = np.deg2rad(0.5)

    def __post_init__(self) -> None:
        if self.k_phi <= 0.0:
            raise ValueError("k_phi must be positive")


def intrinsics_from_fov(phi: float, alpha: float, max_range: float, n_bins: int) -> SonarIntrinsics:
    if not 0.0 < phi < alpha < np.pi:
        raise ValueError("field of view must satisfy 0 < phi < alpha < pi")
    if max_range <= 0.0:
        raise ValueError("max_range must be positive")
    if n_bins < 2:
        raise ValueError("need at least 2 range bins")
    return SonarIntrinsics(
        phi=float(phi),
        alpha=float(alpha),
        fx=1.0 / np.tan(phi / 2.0),
        fy=1.0 / np.tan(alpha / 2.0),
        max_slant_range=float(max_range),
        n_bins=int(n_bins),
    )


def beam_pattern(phi_off, bp: BeamPattern):
    """Horizontal beam weight at angle ``phi_off`` from the camera axis.

    Fourth-power sinc of ``k_phi * sin(phi_off - phi0)``: exactly 1 on the
    beam axis (``phi_off = phi0``), even about it, below 1 elsewhere.
    """
    x = bp.k_phi * np.sin(np.asarray(phi_off, dtype=np.float64) - bp.phi0)
    return np.sinc(x / np.pi) ** 4


def grazing_angle(oz: float, pz: float, rs: float) -> float:
    """Grazing angle from sensor height ``oz``, seabed height ``pz`` and
    slant range ``rs``: ``arcsin(|pz - oz| / rs)``."""
    dz = abs(pz - oz)
    if dz <= 0.0:
        raise ValueError("sensor and footprint must be at different heights")
    if rs < dz:
        raise ValueError("slant range shorter than the vertical offset")
    return float(np.arcsin(dz / rs))


def bin_centers(intr: SonarIntrinsics) -> np.ndarray:
    return (np.arange(intr.n_bins) + 0.5) * intr.bin_width


def bin_center(i: int, intr: SonarIntrinsics) -> float:
    if not 0 <= i < intr.n_bins:
        raise IndexError(f"bin index {i} out of range [0, {intr.n_bins})")
    return (i + 0.5) * intr.bin_width


def body_rotation(heading: float, pitch: float, roll: float) -> np.ndarray:
    """Body-to-world rotation, yaw then pitch then roll."""
    ch, sh = np.cos(heading), np.sin(heading)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    rz = np.array([[ch, -sh, 0.0], [sh, ch, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rz @ ry @ rx


def camera_basis(pose: SonarPose) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unit camera axes in world coordinates.

    Returns ``(x_cam, y_cam, z_cam)``: image-horizontal (along track),
    image-vertical, and the viewing axis (sideways, tilted down).
    """
    r = body_rotation(pose.heading, pose.pitch, pose.roll)
    forward = r[:, 0]
    port_dir = r[:, 1]
    up = r[:, 2]
    side_dir = port_dir if pose.side == PORT else -port_dir
    z_cam = np.cos(pose.tilt) * side_dir - np.sin(pose.tilt) * up
    x_cam = forward
    y_cam = np.cross(z_cam, x_cam)
    return x_cam, y_cam, z_cam


@dataclass(frozen=True)
class SurveyLeg:
    """One straight constant-altitude survey line."""

    start_xy: tuple[float, float]
    end_xy: tuple[float, float]
    z: float
    ping_spacing: float

    def __post_init__(self) -> None:
        if self.ping_spacing <= 0.0:
            raise ValueError("ping_spacing must be positive")
        d = np.hypot(self.end_xy[0] - self.start_xy[0], self.end_xy[1] - self.start_xy[1])
        if d <= 0.0:
            raise ValueError("zero-length survey leg")


def make_survey_lines(legs: list[SurveyLeg], tilt: float) -> list[SonarPose]:
    """Pose sequence for a survey: for every ping position along every leg,
    one port and one starboard pose sharing a ping id."""
    poses: list[SonarPose] = []
    ping_id = 0
    for leg in legs:
        sx, sy = leg.start_xy
        ex, ey = leg.end_xy
        length = float(np.hypot(ex - sx, ey - sy))
        heading = float(np.arctan2(ey - sy, ex - sx))
        n = int(np.floor(length / leg.ping_spacing)) + 1
        for k in range(n):
            t = k * leg.ping_spacing / length
            pos = (sx + t * (ex - sx), sy + t * (ey - sy), leg.z)
            for side in (PORT, STARBOARD):
                poses.append(SonarPose(pos, heading, 0.0, 0.0, side, tilt, ping_id))
            ping_id += 1
    return poses


def pose_rows(poses: list[SonarPose]) -> list[tuple[SonarPose, SonarPose]]:
    """Group a flat pose list into per-ping (port, starboard) pairs."""
    by_ping: dict[int, dict[str, SonarPose]] = {}
    order: list[int] = []
    for p in poses:
        if p.ping_id not in by_ping:
            by_ping[p.ping_id] = {}
            order.append(p.ping_id)
        by_ping[p.ping_id][p.side] = p
    rows = []
    for pid in order:
        pair = by_ping[pid]
        if PORT not in pair or STARBOARD not in pair:
            raise ValueError(f"ping {pid} is missing a side")
        rows.append((pair[PORT], pair[STARBOARD]))
    return rows


def make_box_survey(center_xy: tuple[float, float], standoff: float, half_length: float,
                    z: float, ping_spacing: float, tilt: float) -> list[SonarPose]:
    """Four legs boxing a target so it is seen from four viewpoints."""
    cx, cy = center_xy
    legs = [
        SurveyLeg((cx - standoff, cy - half_length), (cx - standoff, cy + half_length), z, ping_spacing),
        SurveyLeg((cx + half_length, cy + standoff), (cx - half_length, cy + standoff), z, ping_spacing),
        SurveyLeg((cx + standoff, cy + half_length), (cx + standoff, cy - half_length), z, ping_spacing),
        SurveyLeg((cx - half_length, cy - standoff), (cx + half_length, cy - standoff), z, ping_spacing),
    ]
    return make_survey_lines(legs, tilt)
