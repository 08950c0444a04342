"""Image-method single-bounce ray generation.

Produces exact ground-truth path parameters (delays, Dopplers, complex
gains, per-antenna distance offsets) for channel synthesis and for
brute-force validation of the array-size bounds.  A reflected path is
represented through its virtual user (VUE): the mirror image of the
transmitter across the panel plane, from which the path is an exact
line-of-sight link.

Sign conventions fixed here:

* per-antenna offset ``delta[m] = d_m - d_0`` with element 0 the reference,
  so ``delta[0] == 0`` exactly;
* Doppler ``f_d = -(f_c / c) * d/dt(path length)``: a transmitter receding
  from the anchor (or a VUE receding along its path) gives ``f_d < 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .scene import (
    SPEED_OF_LIGHT,
    AnchorSpec,
    Panel,
    Pose,
    TrajectorySample,
    build_ura_layout,
    global_to_local,
    local_to_global,
)

_DEGENERATE_DIST = 1e-9


@dataclass
class PathTruth:
    """Ground truth for one propagation path at one epoch."""

    path_kind: str  # "los" | "reflected" | "clutter"
    panel_id: Optional[int]
    vue_position: np.ndarray  # wave origin; equals the UE position for LoS
    specular_point: Optional[np.ndarray]  # reflected paths only
    gain: complex
    delay: float  # [s] includes the transmitter clock bias
    doppler: float  # [Hz]
    per_antenna_delta: np.ndarray  # [m] length M, delta[0] == 0
    distance_ref: float  # [m] exact path length to the reference antenna

    def __post_init__(self):
        self.vue_position = np.asarray(self.vue_position, dtype=float).reshape(3)
        if self.specular_point is not None:
            self.specular_point = np.asarray(self.specular_point, dtype=float).reshape(3)
        self.per_antenna_delta = np.asarray(self.per_antenna_delta, dtype=float).ravel()


def mirror_image(ue, panel: Panel) -> np.ndarray:
    """Reflect a point across the panel's infinite plane.

    The midpoint of the point and its image lies on the plane.  A point
    already on the plane (within 1e-9 m) is its own image.
    """
    p = np.asarray(ue, dtype=float).reshape(3)
    sd = panel.signed_distance(p)
    if abs(sd) < _DEGENERATE_DIST:
        return p.copy()
    return p - 2.0 * sd * panel.unit_normal


def specular_point(ue, anchor_ref, panel: Panel):
    """Reflection point of the anchor-UE path on the panel plane.

    Returns ``(point, valid)`` where the point is the intersection of the
    segment anchor -> mirror_image(ue) with the plane, and ``valid`` is True
    only when the intersection exists and falls inside the panel's half
    extents.  The anchor and UE must sit on the same side of the plane for
    a physical reflection.
    """
    a = np.asarray(anchor_ref, dtype=float).reshape(3)
    vue = mirror_image(ue, panel)
    sd_a = panel.signed_distance(a)
    sd_v = panel.signed_distance(vue)
    sd_u = panel.signed_distance(ue)
    denom = sd_a - sd_v
    if abs(denom) < 1e-12:  # segment parallel to the plane
        return a.copy(), False
    t = sd_a / denom
    point = a + t * (vue - a)
    same_side = sd_a * sd_u > 0
    valid = bool(same_side and 0.0 < t < 1.0 and panel.contains_in_plane(point))
    return point, valid


def _plane_groups(panels: Sequence[Panel]):
    """Group panels sharing one infinite mirror plane (e.g. a wall and a
    flush-mounted reflective marking): they form a single mirror surface
    whose loss depends on where the specular point lands."""
    groups: list = []
    for p in panels:
        for g in groups:
            if g[0].same_plane(p):
                g.append(p)
                break
        else:
            groups.append([p])
    return groups


def free_space_gain(distance: float, wavelength: float, tx_power_w: float) -> float:
    """Amplitude gain folding transmit power and free-space loss together."""
    return math.sqrt(tx_power_w) * wavelength / (4.0 * math.pi * distance)


def _path_from_point_source(
    source: np.ndarray,
    source_velocity: np.ndarray,
    elements_global: np.ndarray,
    f_c: float,
    clock_bias: float,
    amp: float,
    phase: float,
    kind: str,
    panel_id=None,
    spec_pt=None,
) -> PathTruth:
    dists = np.linalg.norm(elements_global - source[None, :], axis=1)
    d0 = float(dists[0])
    u = (source - elements_global[0]) / d0
    rate = float(np.dot(u, source_velocity))  # d/dt of the path length
    return PathTruth(
        path_kind=kind,
        panel_id=panel_id,
        vue_position=source,
        specular_point=spec_pt,
        gain=amp * complex(math.cos(phase), math.sin(phase)),
        delay=d0 / SPEED_OF_LIGHT + clock_bias,
        doppler=-(f_c / SPEED_OF_LIGHT) * rate,
        per_antenna_delta=dists - d0,
        distance_ref=d0,
    )


def trace_paths(
    anchor: AnchorSpec,
    panels: Sequence[Panel],
    ue: TrajectorySample,
    f_c: float,
    *,
    array_index: int = 0,
    los_blocked: bool = False,
    clock_bias: float = 0.0,
    tx_power_dbm: float = 23.0,
    rng: Optional[np.random.Generator] = None,
) -> list:
    """Trace the LoS path and one single-bounce path per mirror plane.

    Paths are kept only when their wave origin lies in front of the serving
    array (positive local z) and, for reflections, when the specular point
    of the reference antenna falls on some panel of that plane; co-planar
    panels are merged and the one with the lowest reflection loss containing
    the specular point sets the path loss.  Path phases are drawn uniformly
    from ``rng`` (zero without one), everything else is deterministic
    geometry.
    """
    pose = anchor.pose(array_index)
    elements = local_to_global(pose, build_ura_layout(anchor))
    wavelength = SPEED_OF_LIGHT / f_c
    tx_power_w = 10.0 ** ((tx_power_dbm - 30.0) / 10.0)
    v_ue = ue.velocity

    def front_of_array(point) -> bool:
        return global_to_local(pose, point)[2] > _DEGENERATE_DIST

    paths = []
    if not los_blocked and front_of_array(ue.position):
        d0 = float(np.linalg.norm(ue.position - elements[0]))
        amp = free_space_gain(d0, wavelength, tx_power_w)
        phase = float(rng.uniform(0.0, 2.0 * math.pi)) if rng is not None else 0.0
        paths.append(
            _path_from_point_source(
                ue.position, v_ue, elements, f_c, clock_bias, amp, phase, "los"
            )
        )

    for group in _plane_groups(panels):
        plane = group[0]
        vue = mirror_image(ue.position, plane)
        if np.allclose(vue, ue.position):
            continue  # UE on the plane: degenerate mirror
        if not front_of_array(vue):
            continue
        point, _ = specular_point(ue.position, elements[0], plane)
        containing = [p for p in group if specular_point(ue.position, elements[0], p)[1]]
        if not containing:
            continue
        best = min(containing, key=lambda p: p.reflection_loss_db)
        n = plane.unit_normal
        v_vue = v_ue - 2.0 * float(np.dot(v_ue, n)) * n
        d0 = float(np.linalg.norm(vue - elements[0]))
        amp = free_space_gain(d0, wavelength, tx_power_w) * 10.0 ** (
            -best.reflection_loss_db / 20.0
        )
        phase = float(rng.uniform(0.0, 2.0 * math.pi)) if rng is not None else 0.0
        paths.append(
            _path_from_point_source(
                vue, v_vue, elements, f_c, clock_bias, amp, phase,
                "reflected", panel_id=best.id, spec_pt=point,
            )
        )
    return paths


def clutter_path(
    anchor: AnchorSpec,
    position,
    ue: TrajectorySample,
    f_c: float,
    *,
    array_index: int = 0,
    clock_bias: float = 0.0,
    doppler_offset_hz: float = 200.0,
    tx_power_dbm: float = 23.0,
    loss_db: float = 6.0,
    rng: Optional[np.random.Generator] = None,
) -> Optional[PathTruth]:
    """Synthetic dynamic-clutter path: a point source whose Doppler is offset
    from any static-reflector prediction.  Harness extension, not part of the
    physical scene."""
    pose = anchor.pose(array_index)
    elements = local_to_global(pose, build_ura_layout(anchor))
    source = np.asarray(position, dtype=float).reshape(3)
    if global_to_local(pose, source)[2] <= _DEGENERATE_DIST:
        return None
    wavelength = SPEED_OF_LIGHT / f_c
    tx_power_w = 10.0 ** ((tx_power_dbm - 30.0) / 10.0)
    phase = float(rng.uniform(0.0, 2.0 * math.pi)) if rng is not None else 0.0
    path = _path_from_point_source(
        source,
        ue.velocity,
        elements,
        f_c,
        clock_bias,
        free_space_gain(float(np.linalg.norm(source - elements[0])), wavelength, tx_power_w)
        * 10.0 ** (-loss_db / 20.0),
        phase,
        "clutter",
    )
    path.doppler += doppler_offset_hz
    return path
