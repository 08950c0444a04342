"""Snapshot baseline: per-epoch position from the line-of-sight tuple.

No tracking, no data association, no use of reflections: each epoch the
LoS path is identified by the same geometric consistency rule the tracker
uses, and the position is read off its (azimuth, elevation, range) tuple
directly.  The range is the wavefront curvature radius when the near-field
estimate is valid; otherwise the biased propagation distance stands in,
which degrades accuracy by the full clock-bias excursion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .estimate import FF, NF, PathParamEstimate
from .track import identify_los


@dataclass
class SnapshotFix:
    position: np.ndarray
    used_curvature: bool  # False: fell back to the clock-biased distance
    path_index: int


def _ray_point(anchor_pos, phi, psi, r):
    direction = np.array(
        [math.cos(psi) * math.cos(phi), math.cos(psi) * math.sin(phi), math.sin(psi)]
    )
    return np.asarray(anchor_pos, dtype=float) + r * direction


def snapshot_position(
    params: Sequence[PathParamEstimate],
    anchor_pos,
    gamma: float = 0.2,
) -> Optional[SnapshotFix]:
    """Single-epoch LoS fix, or None for an outage epoch.

    Near-field paths are screened by the distance/range consistency ratio;
    the winner's curvature radius gives the range.  When no near-field path
    passes, the shortest-distance far-field path (if any) is used with the
    biased distance as range.  Epochs with neither produce an outage.
    """
    candidates = [p for p in params if p.valid and p.d >= 0]
    if not candidates:
        return None
    # as in the tracker's re-identification, only the shortest-delay path
    # is a physical LoS candidate: every reflection travels farther
    j = min(range(len(candidates)), key=lambda i: candidates[i].d)
    p = candidates[j]
    if p.regime == NF:
        if identify_los([p], gamma) is None:
            return None
        return SnapshotFix(
            position=_ray_point(anchor_pos, p.phi, p.psi, p.kappa),
            used_curvature=True,
            path_index=j,
        )
    return SnapshotFix(
        position=_ray_point(anchor_pos, p.ff_phi, p.ff_psi, p.d),
        used_curvature=False,
        path_index=j,
    )
