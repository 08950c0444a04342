"""Tunnel, anchor, reflector-panel and trajectory geometry.

Everything downstream works in one of two frames:

* the **global tunnel frame**: x runs along the tunnel, y across it, z up,
  with the road surface at z = 0;
* an **array-local frame** per antenna panel: the array lies in the local
  xy-plane (every element has local z = 0), local x is the boresight-side
  in-plane axis and local z the panel normal.

Orientation convention (fixed here, used everywhere): a pose carries
``(azimuth, downtilt)`` in degrees; the local z axis is the panel normal
(the boresight), pointing along azimuth measured from global +x about the
global z axis, with negative downtilt pitching it below the horizon.  The
full map is the intrinsic rotation ``R = Rz(azimuth) @ Ry(90deg -
downtilt)``: azimuth about global z, then downtilt about the rotated y
axis.  Local x is then the in-plane steepest axis and local y the in-plane
horizontal axis.

Worked example: orientation ``(0, -30)`` gives boresight
``direction_to_global(pose, (0, 0, 1)) == (cos30, 0, -sin30)`` (down-tunnel
and 30 deg below the horizon); orientation ``(90, 0)`` turns the boresight
from global +x to global +y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import ConfigError

SPEED_OF_LIGHT = 299_792_458.0


def _vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    return a


@dataclass(frozen=True)
class TunnelSpec:
    """Box approximation of the tunnel: walls at y=0 and y=width, ceiling at z=height."""

    length: float = 100.0
    width: float = 10.0
    height: float = 5.0

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ConfigError("tunnel dimensions must be positive")

    def contains(self, p, margin: float = 0.0) -> bool:
        x, y, z = _vec3(p)
        return (
            -margin <= x <= self.length + margin
            and 0.0 <= y <= self.width
            and 0.0 <= z <= self.height
        )


@dataclass(frozen=True)
class Pose:
    """Position plus (azimuth, downtilt) orientation of an array panel."""

    position: np.ndarray
    azimuth_deg: float = 0.0
    downtilt_deg: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position))

    @property
    def rotation(self) -> np.ndarray:
        """Local-to-global rotation, R = Rz(azimuth) @ Ry(90deg - downtilt)."""
        az = math.radians(self.azimuth_deg)
        b = math.pi / 2.0 - math.radians(self.downtilt_deg)
        ca, sa = math.cos(az), math.sin(az)
        cb, sb = math.cos(b), math.sin(b)
        rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
        ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
        return rz @ ry

    @property
    def boresight(self) -> np.ndarray:
        """Global direction of the local z axis (panel normal = boresight)."""
        return self.rotation[:, 2]


def local_to_global(pose: Pose, points) -> np.ndarray:
    """Map array-local point(s) into the global frame."""
    p = np.asarray(points, dtype=float)
    return (p @ pose.rotation.T) + pose.position


def global_to_local(pose: Pose, points) -> np.ndarray:
    """Map global point(s) into the array-local frame (inverse of local_to_global)."""
    p = np.asarray(points, dtype=float)
    return (p - pose.position) @ pose.rotation


def direction_to_global(pose: Pose, d) -> np.ndarray:
    """Rotate a local direction vector into the global frame (no translation)."""
    return np.asarray(d, dtype=float) @ pose.rotation.T


@dataclass(frozen=True)
class AnchorSpec:
    """Single anchor with one or more rectangular arrays at a known pose.

    ``orientations`` holds one (azimuth, downtilt) degree pair per array
    panel; all panels share the element grid (rows x cols, ``spacing``
    metres, normally half the carrier wavelength).
    """

    position: np.ndarray
    orientations: tuple = ((0.0, 0.0),)
    rows: int = 10
    cols: int = 10
    spacing: float = SPEED_OF_LIGHT / 5.9e9 / 2.0

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position))
        object.__setattr__(
            self, "orientations", tuple((float(a), float(t)) for a, t in self.orientations)
        )
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("array must have at least one row and one column")
        if self.spacing <= 0:
            raise ConfigError("element spacing must be positive")

    @property
    def n_elements(self) -> int:
        return self.rows * self.cols

    def pose(self, array_index: int = 0) -> Pose:
        az, tilt = self.orientations[array_index]
        return Pose(self.position, az, tilt)


def build_ura_layout(anchor: AnchorSpec) -> np.ndarray:
    """Element positions of the rectangular array in the array-local frame.

    Element ``m = r * cols + c`` sits at ``(c * spacing, r * spacing, 0)``:
    element 0 is the reference at the local origin and the whole grid lies
    in the local xy-plane (z = 0 for every element), which the near-field
    linear solver requires.
    """
    c = np.arange(anchor.cols) * anchor.spacing
    r = np.arange(anchor.rows) * anchor.spacing
    xx, yy = np.meshgrid(c, r)  # row-major: m = r*cols + c
    out = np.zeros((anchor.n_elements, 3))
    out[:, 0] = xx.ravel()
    out[:, 1] = yy.ravel()
    return out


@dataclass(frozen=True)
class Panel:
    """Planar reflector (tunnel wall, ceiling, or radio-reflective marking).

    ``half_extents`` bound the panel in its own plane: the first extent is
    measured along the in-plane axis ``u`` (horizontal-ish, derived from the
    normal), the second along ``v = normal x u``.
    """

    id: int
    center: np.ndarray
    unit_normal: np.ndarray
    half_extents: tuple
    reflection_loss_db: float = 3.0
    kind: str = "wall"  # "wall" | "ceiling" | "rrm"

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center))
        n = _vec3(self.unit_normal)
        nn = np.linalg.norm(n)
        if nn < 1e-12:
            raise ConfigError(f"panel {self.id}: zero normal")
        object.__setattr__(self, "unit_normal", n / nn)
        he = (float(self.half_extents[0]), float(self.half_extents[1]))
        if min(he) <= 0:
            raise ConfigError(f"panel {self.id}: half extents must be positive")
        object.__setattr__(self, "half_extents", he)

    @property
    def in_plane_axes(self) -> tuple:
        """Deterministic (u, v) basis of the panel plane.

        u is horizontal (perpendicular to the normal and to global z) when
        the panel is not horizontal itself; for near-horizontal panels u
        falls back to global x.
        """
        n = self.unit_normal
        if abs(n[2]) < 0.99:
            u = np.cross(n, np.array([0.0, 0.0, 1.0]))
        else:
            u = np.array([1.0, 0.0, 0.0]) - n[0] * n
        u = u / np.linalg.norm(u)
        v = np.cross(n, u)
        return u, v

    def signed_distance(self, p) -> float:
        return float(np.dot(_vec3(p) - self.center, self.unit_normal))

    def contains_in_plane(self, p, tol: float = 1e-9) -> bool:
        """True when the in-plane projection of p falls inside the half extents."""
        u, v = self.in_plane_axes
        d = _vec3(p) - self.center
        return (
            abs(float(np.dot(d, u))) <= self.half_extents[0] + tol
            and abs(float(np.dot(d, v))) <= self.half_extents[1] + tol
        )

    def same_plane(self, other: "Panel", tol: float = 1e-9) -> bool:
        """True when both panels lie in the same infinite mirror plane."""
        if abs(abs(float(np.dot(self.unit_normal, other.unit_normal))) - 1.0) > tol:
            return False
        return abs(self.signed_distance(other.center)) <= tol


@dataclass(frozen=True)
class TrajectorySample:
    """One epoch of the vehicle feed: pose plus the CAM-style kinematic report."""

    time: float
    position: np.ndarray
    speed: float
    heading: float  # [rad] direction of travel in the xy-plane

    def __post_init__(self):
        object.__setattr__(self, "position", _vec3(self.position))

    @property
    def height(self) -> float:
        return float(self.position[2])

    @property
    def velocity(self) -> np.ndarray:
        return np.array(
            [self.speed * math.cos(self.heading), self.speed * math.sin(self.heading), 0.0]
        )


def gen_trajectory(
    kind: str,
    tunnel: TunnelSpec,
    speed: float,
    epoch: float,
    *,
    start,
    epochs: int,
    heading_deg: float = 0.0,
    amplitude: float = 1.5,
    period_m: float = 40.0,
) -> list:
    """Generate a constant-speed trajectory sampled every ``epoch`` seconds.

    ``straight`` drives along ``heading_deg`` at fixed lateral offset;
    ``slalom`` superimposes a sinusoidal lateral sweep of ``amplitude``
    metres with spatial period ``period_m`` on a +x drive.  Samples are
    spaced so that consecutive positions are exactly ``speed * epoch``
    metres apart, and each sample's heading is the direction actually
    travelled over the following epoch.

    Raises ConfigError if any sample leaves the tunnel box.
    """
    if speed <= 0:
        raise ConfigError("speed must be positive")
    if epoch <= 0:
        raise ConfigError("epoch must be positive")
    if epochs < 1:
        raise ConfigError("need at least one epoch")
    start = _vec3(start)
    step = speed * epoch

    if kind == "straight":
        h = math.radians(heading_deg)
        d = np.array([math.cos(h), math.sin(h), 0.0])
        points = [start + k * step * d for k in range(epochs)]
    elif kind == "slalom":
        if amplitude < 0 or period_m <= 0:
            raise ConfigError("slalom needs amplitude >= 0 and period_m > 0")
        x0, yc, z0 = start
        omega = 2.0 * math.pi / period_m

        def curve(x):
            return np.array([x, yc + amplitude * math.sin(omega * (x - x0)), z0])

        points = [curve(x0)]
        x = x0
        for _ in range(epochs - 1):
            p = points[-1]

            def gap(xn):
                return float(np.linalg.norm(curve(xn) - p)) - step

            # chord <= arc, so the next x lies in (x, x + step]
            x = brentq(gap, x + 0.25 * step, x + step + 1e-12, xtol=1e-13)
            points.append(curve(x))
    else:
        raise ConfigError(f"unknown trajectory kind {kind!r}")

    for p in points:
        if not tunnel.contains(p):
            raise ConfigError(
                f"trajectory leaves the tunnel at {np.round(p, 3).tolist()}; "
                "shrink the amplitude/offset or the epoch count"
            )

    samples = []
    for k, p in enumerate(points):
        nxt = points[k + 1] if k + 1 < len(points) else None
        if nxt is not None:
            dvec = nxt - p
            heading = math.atan2(dvec[1], dvec[0])
        else:
            heading = samples[-1].heading if samples else math.radians(heading_deg)
        samples.append(TrajectorySample(time=k * epoch, position=p, speed=speed, heading=heading))
    return samples
