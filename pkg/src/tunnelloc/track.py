"""Joint vehicle / virtual-user tracking with a variable-dimension EKF.

The filter state stacks the vehicle position with the transverse
coordinates of every tracked virtual user (VUE):

    s = [x_u, y_u, z_u, y_v1, z_v1, ..., y_vn, z_vn],  D = 2 (n+1) + 1

(the x coordinate of every VUE equals the vehicle's, because all tunnel
mirror planes contain the longitudinal axis).  Everything geometric is
expressed in the anchor's global-aligned frame: coordinates relative to
the anchor position, axes parallel to the tunnel frame.

Epoch flow: predict (velocity-sensor model for the vehicle, random walk
for VUEs) -> gated nearest-neighbour association on the (azimuth,
elevation, range) rows -> track management (miss counting, births from
unassociated measurements, LoS re-identification, Doppler-based clutter
rejection) -> Joseph-form EKF update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import chi2

from .errors import NumericalError
from .estimate import FF, NF, MeasurementVector, PathMeasurement


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return -((-np.asarray(a) + math.pi) % (2.0 * math.pi) - math.pi)


@dataclass
class FilterConfig:
    """Gating, noise and track-management parameters.

    Defaults follow the evaluation setup: gate probability 0.99, one
    allowed consecutive miss, LoS consistency threshold 0.2, measurement
    sigmas of 2 deg / 2 deg / 1.5 m / 1.5 m, speed and heading input
    sigmas of 0.2 m/s and 1 deg, and 10 m initial position sigma.
    """

    gate_probability: float = 0.99
    max_misses: int = 1  # consecutive misses a VUE track survives
    los_ratio_gamma: float = 0.2
    sigma_phi: float = math.radians(2.0)
    sigma_psi: float = math.radians(2.0)
    sigma_kappa: float = 1.5
    sigma_kappa_vue: Optional[float] = None  # None: same as sigma_kappa
    kappa_range_ref: Optional[float] = None  # [m] None: constant sigma_kappa
    kappa_sigma_floor: float = 0.3
    sigma_delta_d: float = 1.5
    sigma_speed: float = 0.2
    sigma_heading: float = math.radians(1.0)
    sigma_init: float = 10.0
    sigma_init_z: Optional[float] = None  # None: same as sigma_init; the
    # vehicle height is typically known much better than the 2D fix
    sigma_vue_walk: float = 0.1  # [m] per-epoch VUE random walk
    z_process_var: float = 1e-4  # [m^2] vehicle height is externally known
    doppler_tol: float = 1.0  # [m/s] static/dynamic discrimination
    miss_inflation_m: float = 0.0  # [m] extra per-epoch xy sigma while the
    # vehicle track keeps missing: reopens the gates of a confidently
    # wrong estimate so the track can re-acquire (0 disables)
    miss_inflation_grace: int = 3  # missed epochs before inflation starts

    def gate_threshold(self, dof: int) -> float:
        return float(chi2.ppf(self.gate_probability, dof))

    def kappa_sigma(self, track_index: int, kappa: Optional[float] = None) -> float:
        """Range-row noise: the reflector-range model of a reflected path is
        only loosely consistent with the wavefront-curvature measurement, so
        VUE rows may carry their own (larger) sigma.  When
        ``kappa_range_ref`` is set, the vehicle-row sigma additionally
        scales quadratically with the measured range (the precision of a
        curvature-radius estimate degrades as range squared for a fixed
        aperture), floored at ``kappa_sigma_floor``."""
        if track_index != 0 and self.sigma_kappa_vue is not None:
            return self.sigma_kappa_vue
        sigma = self.sigma_kappa
        if (
            track_index == 0
            and self.kappa_range_ref is not None
            and kappa is not None
            and math.isfinite(kappa)
        ):
            sigma = sigma * (max(kappa, 0.0) / self.kappa_range_ref) ** 2
            sigma = max(sigma, self.kappa_sigma_floor)
        return sigma


@dataclass
class TrackSet:
    """Filter state: vehicle track (id 0, permanent) plus VUE tracks."""

    state: np.ndarray  # (D,)
    cov: np.ndarray  # (D, D)
    vue_ids: list = field(default_factory=list)
    miss_counts: list = field(default_factory=list)
    epoch: int = 0
    next_id: int = 1
    ue_miss_streak: int = 0

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=float).ravel()
        self.cov = np.asarray(self.cov, dtype=float)
        if self.state.size != 3 + 2 * len(self.vue_ids):
            raise ValueError("state dimension does not match the VUE track list")
        if self.cov.shape != (self.state.size, self.state.size):
            raise ValueError("covariance shape does not match the state")

    @property
    def n_tracks(self) -> int:
        return 1 + len(self.vue_ids)

    @property
    def dim(self) -> int:
        return self.state.size

    @property
    def ue_position(self) -> np.ndarray:
        return self.state[:3].copy()

    def vue_position(self, track_index: int) -> np.ndarray:
        """3D position of VUE track `track_index` (>= 1): x copied from the UE."""
        base = 3 + 2 * (track_index - 1)
        return np.array([self.state[0], self.state[base], self.state[base + 1]])

    def copy(self) -> "TrackSet":
        return TrackSet(
            state=self.state.copy(),
            cov=self.cov.copy(),
            vue_ids=list(self.vue_ids),
            miss_counts=list(self.miss_counts),
            epoch=self.epoch,
            next_id=self.next_id,
            ue_miss_streak=self.ue_miss_streak,
        )


def initial_tracks(position, config: FilterConfig) -> TrackSet:
    """Vehicle-only track set from the last open-sky fix."""
    sz = config.sigma_init if config.sigma_init_z is None else config.sigma_init_z
    return TrackSet(
        state=np.asarray(position, dtype=float).copy(),
        cov=np.diag([config.sigma_init**2, config.sigma_init**2, sz**2]),
    )


# ---------------------------------------------------------------------------
# Measurement model


def reflector_from_vue(p_u, p_v) -> np.ndarray:
    """Reflection point on the mirror plane implied by a UE/VUE pair, in
    anchor-origin coordinates.

    The mirror normal is the (y, z) direction from UE to VUE; the point is
    the intersection of the anchor->VUE segment with the mirror plane:
    ``p_r = ((n.p_u + n.p_v) / (2 n.p_v)) p_v``.

    Raises NumericalError for degenerate pairs (coincident, or plane
    through the anchor).
    """
    a = np.asarray(p_u, dtype=float).reshape(3)
    b = np.asarray(p_v, dtype=float).reshape(3)
    dy, dz = b[1] - a[1], b[2] - a[2]
    norm = math.hypot(dy, dz)
    if norm < 1e-9:
        raise NumericalError("VUE coincides with the UE: reflector undefined")
    n = np.array([0.0, dy / norm, dz / norm])
    n_dot_v = float(n @ b)
    if abs(n_dot_v) < 1e-9:
        raise NumericalError("mirror plane passes through the anchor: reflector undefined")
    g = (float(n @ a) + n_dot_v) / (2.0 * n_dot_v)
    return g * b


def _angles_of(q):
    h = math.hypot(q[0], q[1])
    return math.atan2(q[1], q[0]), math.atan2(q[2], h)


def _angle_jacobian(q):
    """d(phi, psi)/dq for phi = atan2(q_y, q_x), psi = atan2(q_z, hypot)."""
    x, y, z = q
    h2 = x * x + y * y
    h = math.sqrt(h2)
    r2 = h2 + z * z
    j_phi = np.array([-y / h2, x / h2, 0.0])
    j_psi = np.array([-x * z / (h * r2), -y * z / (h * r2), h / r2])
    return j_phi, j_psi


def _kappa_vue_and_grad(a, b):
    """Reflector range kappa = g * ||b|| for UE a, VUE b (anchor-origin),
    with gradients w.r.t. (x_u, a_y, a_z, b_y, b_z).

    g depends only on transverse coordinates:
        g = (b_y^2 + b_z^2 - a_y^2 - a_z^2)
            / (2 (b_y^2 + b_z^2 - a_y b_y - a_z b_z)).
    """
    ay, az = a[1], a[2]
    by, bz = b[1], b[2]
    nb = float(np.linalg.norm(b))
    num = by * by + bz * bz - ay * ay - az * az
    den = 2.0 * (by * by + bz * bz - ay * by - az * bz)
    if abs(den) < 1e-12 or nb < 1e-12:
        raise NumericalError("degenerate UE/VUE geometry for the reflector range")
    g = num / den
    kappa = g * nb

    d_num = {"ay": -2 * ay, "az": -2 * az, "by": 2 * by, "bz": 2 * bz}
    d_den = {"ay": -2 * by, "az": -2 * bz, "by": 2 * (2 * by - ay), "bz": 2 * (2 * bz - az)}
    dg = {k: (d_num[k] * den - num * d_den[k]) / (den * den) for k in d_num}
    # ||b|| depends on (x_u, b_y, b_z); b_x = x_u - anchor_x
    dnb = {"xu": b[0] / nb, "by": by / nb, "bz": bz / nb}
    grad = np.array(
        [
            g * dnb["xu"],  # d/dx_u
            dg["ay"] * nb,  # d/da_y (= y_u)
            dg["az"] * nb,  # d/da_z (= z_u)
            dg["by"] * nb + g * dnb["by"],  # d/db_y (= y_v)
            dg["bz"] * nb + g * dnb["bz"],  # d/db_z (= z_v)
        ]
    )
    return kappa, grad


def _vue_state_slice(track_index: int):
    base = 3 + 2 * (track_index - 1)
    return base, base + 1


def track_rows(ts: TrackSet, track_index: int, anchor_pos):
    """Predicted (phi, psi, kappa) of one track and the 3 x D Jacobian.

    Vehicle rows depend on p_u alone; VUE rows depend on x_u and that
    track's (y_v, z_v), with the reflector range also pulling in the full
    vehicle position.  Falls back to the vehicle range when the reflector
    is undefined (VUE on top of the UE).
    """
    anchor_pos = np.asarray(anchor_pos, dtype=float).reshape(3)
    d = ts.dim
    jac = np.zeros((3, d))
    q_u = ts.state[:3] - anchor_pos
    if track_index == 0:
        phi, psi = _angles_of(q_u)
        r = float(np.linalg.norm(q_u))
        j_phi, j_psi = _angle_jacobian(q_u)
        jac[0, :3] = j_phi
        jac[1, :3] = j_psi
        jac[2, :3] = q_u / r
        return np.array([phi, psi, r]), jac

    iy, iz = _vue_state_slice(track_index)
    q_v = np.array([q_u[0], ts.state[iy] - anchor_pos[1], ts.state[iz] - anchor_pos[2]])
    phi, psi = _angles_of(q_v)
    j_phi, j_psi = _angle_jacobian(q_v)
    jac[0, 0] = j_phi[0]
    jac[0, iy] = j_phi[1]
    jac[0, iz] = j_phi[2]
    jac[1, 0] = j_psi[0]
    jac[1, iy] = j_psi[1]
    jac[1, iz] = j_psi[2]
    try:
        kappa, grad = _kappa_vue_and_grad(q_u, q_v)
        jac[2, 0] = grad[0]
        jac[2, 1] = grad[1]
        jac[2, 2] = grad[2]
        jac[2, iy] = grad[3]
        jac[2, iz] = grad[4]
    except NumericalError:
        # coincident VUE: predicted range degrades to the vehicle range
        r = float(np.linalg.norm(q_u))
        kappa = r
        jac[2, :3] = q_u / r
    return np.array([phi, psi, kappa]), jac


def range_row(ts: TrackSet, track_index: int, anchor_pos):
    """Distance from the anchor to a track's point (vehicle or VUE) and its
    gradient row; building block of the delay-difference rows."""
    anchor_pos = np.asarray(anchor_pos, dtype=float).reshape(3)
    row = np.zeros(ts.dim)
    q_u = ts.state[:3] - anchor_pos
    if track_index == 0:
        r = float(np.linalg.norm(q_u))
        row[:3] = q_u / r
        return r, row
    iy, iz = _vue_state_slice(track_index)
    q_v = np.array([q_u[0], ts.state[iy] - anchor_pos[1], ts.state[iz] - anchor_pos[2]])
    r = float(np.linalg.norm(q_v))
    row[0] = q_v[0] / r
    row[iy] = q_v[1] / r
    row[iz] = q_v[2] / r
    return r, row


def h_model(ts: TrackSet, anchor_pos):
    """Predicted measurement blocks for every track: (phi, psi, kappa) rows
    plus the anchor ranges used by the delay-difference rows."""
    values = []
    jacobians = []
    ranges = []
    range_rows = []
    for i in range(ts.n_tracks):
        h, jac = track_rows(ts, i, anchor_pos)
        values.append(h)
        jacobians.append(jac)
        r, row = range_row(ts, i, anchor_pos)
        ranges.append(r)
        range_rows.append(row)
    return values, jacobians, np.array(ranges), range_rows


def numeric_track_rows(ts: TrackSet, track_index: int, anchor_pos, step: float = 1e-6):
    """Central-difference fallback / oracle for the analytic Jacobian."""
    d = ts.dim
    jac = np.zeros((3, d))
    for k in range(d):
        h = step * (1.0 + abs(ts.state[k]))
        up = ts.copy()
        up.state[k] += h
        dn = ts.copy()
        dn.state[k] -= h
        h_up, _ = track_rows(up, track_index, anchor_pos)
        h_dn, _ = track_rows(dn, track_index, anchor_pos)
        diff = h_up - h_dn
        diff[0] = wrap_angle(diff[0])
        jac[:, k] = diff / (2.0 * h)
    h0, _ = track_rows(ts, track_index, anchor_pos)
    return h0, jac


# ---------------------------------------------------------------------------
# Association


@dataclass
class AssocResult:
    pairs: list  # (track_index, measurement_index)
    mahalanobis: dict  # (track_index, measurement_index) -> eta^2
    unassociated_tracks: list
    unassociated_measurements: list
    los_reidentified: bool = False
    skipped_singular: int = 0


def _measurement_rows(meas: PathMeasurement):
    """Association uses (phi, psi, kappa) for near-field measurements and a
    2-DoF (phi, psi) gate for far-field-demoted ones."""
    if meas.kappa is not None:
        return np.array([meas.phi, meas.psi, meas.kappa]), (0, 1, 2)
    return np.array([meas.phi, meas.psi]), (0, 1)


def associate(
    ts: TrackSet,
    mv: MeasurementVector,
    config: FilterConfig,
    anchor_pos,
) -> AssocResult:
    """Gated nearest-neighbour association by Mahalanobis distance.

    Every track/measurement pair is scored with the innovation covariance
    S = H P H^T + R restricted to that pair's angle/range rows (retaining
    cross-track correlations through the full predicted covariance); pairs
    inside the chi-square gate are then selected greedily by ascending
    distance with one-to-one enforcement.
    """
    values, jacobians, _, _ = h_model(ts, anchor_pos)
    candidates = []
    skipped = 0
    for j, meas in enumerate(mv.measurements):
        z_rows, row_idx = _measurement_rows(meas)
        gate = config.gate_threshold(len(row_idx))
        for i in range(ts.n_tracks):
            r_diag = np.array(
                [config.sigma_phi**2, config.sigma_psi**2,
                 config.kappa_sigma(i, meas.kappa) ** 2]
            )
            h_rows = values[i][list(row_idx)]
            jac = jacobians[i][list(row_idx), :]
            s = jac @ ts.cov @ jac.T + np.diag(r_diag[list(row_idx)])
            innov = z_rows - h_rows
            innov[0] = wrap_angle(innov[0])
            innov[1] = wrap_angle(innov[1])
            try:
                eta2 = float(innov @ np.linalg.solve(s, innov))
                _, logdet = np.linalg.slogdet(s)
            except np.linalg.LinAlgError:
                skipped += 1
                continue
            if eta2 < gate:
                # selection score is the ML association likelihood, which
                # adds log det S: a vague newborn track cannot outbid a
                # converged one for the same measurement on eta^2 alone
                candidates.append((eta2 + logdet, eta2, i, j))

    candidates.sort()
    used_tracks = set()
    used_meas = set()
    pairs = []
    mahalanobis = {}
    # the shortest-delay measurement is the physical LoS whenever the LoS
    # exists (reflections travel farther and the clock bias is common), so
    # when it gates with the vehicle track that pairing wins outright
    if mv.reference_index is not None:
        for score, eta2, i, j in candidates:
            if i == 0 and j == mv.reference_index:
                used_tracks.add(0)
                used_meas.add(j)
                pairs.append((0, j))
                mahalanobis[(0, j)] = eta2
                break
    for _, eta2, i, j in candidates:
        if i in used_tracks or j in used_meas:
            continue
        used_tracks.add(i)
        used_meas.add(j)
        pairs.append((i, j))
        mahalanobis[(i, j)] = eta2
    return AssocResult(
        pairs=pairs,
        mahalanobis=mahalanobis,
        unassociated_tracks=[i for i in range(ts.n_tracks) if i not in used_tracks],
        unassociated_measurements=[
            j for j in range(len(mv.measurements)) if j not in used_meas
        ],
        skipped_singular=skipped,
    )


# ---------------------------------------------------------------------------
# Track management


def predicted_path_speed(q_u, q_v, ego_velocity) -> float:
    """Radial-speed prediction for a static mirror: the VUE moves with the
    mirrored ego velocity, and the measured velocity convention is positive
    toward the anchor (v = -d/dt of path length)."""
    q_u = np.asarray(q_u, dtype=float)
    q_v = np.asarray(q_v, dtype=float)
    v = np.asarray(ego_velocity, dtype=float)
    dy, dz = q_v[1] - q_u[1], q_v[2] - q_u[2]
    norm = math.hypot(dy, dz)
    if norm < 1e-9:  # LoS: the "VUE" is the vehicle itself
        v_src = v
    else:
        n = np.array([0.0, dy / norm, dz / norm])
        v_src = v - 2.0 * float(v @ n) * n
    rho = float(np.linalg.norm(q_v))
    if rho < 1e-9:
        return 0.0
    return -float((q_v / rho) @ v_src)


def _angle_gate_ok(ts: TrackSet, meas: PathMeasurement, config: FilterConfig, anchor_pos) -> bool:
    """2-DoF azimuth/elevation gate of a measurement against the vehicle
    track prediction (range rows excluded: they are what usually broke the
    regular association)."""
    values, jac = track_rows(ts, 0, anchor_pos)
    h2 = values[:2]
    j2 = jac[:2, :]
    s = j2 @ ts.cov @ j2.T + np.diag([config.sigma_phi**2, config.sigma_psi**2])
    innov = wrap_angle(np.array([meas.phi, meas.psi]) - h2)
    try:
        eta2 = float(innov @ np.linalg.solve(s, innov))
    except np.linalg.LinAlgError:
        return False
    return eta2 < config.gate_threshold(2)


def birth_candidate(meas: PathMeasurement, ue_estimate, anchor_pos):
    """Initial VUE position for an unassociated measurement.

    The measurement ray from the anchor along (phi, psi) is intersected
    with the plane x = x_u (every tunnel VUE shares the vehicle's x); for
    rays nearly parallel to that plane the range reconstructed from the
    delay difference (``||p_v|| = d_LoS + delta_d``) is used instead, or
    the raw near-field range as a last resort.  Returns None when no usable
    range information exists.
    """
    anchor_pos = np.asarray(anchor_pos, dtype=float).reshape(3)
    q_u = np.asarray(ue_estimate, dtype=float) - anchor_pos
    direction = np.array(
        [
            math.cos(meas.psi) * math.cos(meas.phi),
            math.cos(meas.psi) * math.sin(meas.phi),
            math.sin(meas.psi),
        ]
    )
    if abs(direction[0]) > 0.05:
        t = q_u[0] / direction[0]
        if t > 0:
            return direction * t
    if meas.delta_d is not None:
        rho = float(np.linalg.norm(q_u)) + meas.delta_d
        if rho > 0:
            return direction * rho
    if meas.kappa is not None and meas.kappa > 0:
        return direction * meas.kappa
    return None


@dataclass
class ManageResult:
    births: list  # new track ids
    deaths: list  # removed track ids
    dynamic_measurements: list  # measurement indices flagged as clutter
    drop_after_update: list  # track ids to remove once updated (dynamic)
    los_measurement: Optional[int]  # measurement index serving as LoS
    nlos_epoch: bool


def manage_tracks(
    ts: TrackSet,
    assoc: AssocResult,
    mv: MeasurementVector,
    ego_speed: float,
    ego_heading: float,
    config: FilterConfig,
    anchor_pos,
):
    """Track birth/death bookkeeping between association and update.

    Associated tracks reset their miss counters; unassociated VUE tracks
    accumulate misses and die once they exceed the allowance (the vehicle
    track is permanent).  Unassociated measurements with usable geometry
    give birth to VUE tracks unless their Doppler is inconsistent with a
    static mirror (dynamic clutter: used this epoch, never propagated).
    When the vehicle track itself went unassociated, the LoS path is
    re-identified among the leftover measurements through the
    biased-distance/range consistency ratio.
    """
    anchor_pos = np.asarray(anchor_pos, dtype=float).reshape(3)
    ts = ts.copy()
    ego_velocity = np.array(
        [ego_speed * math.cos(ego_heading), ego_speed * math.sin(ego_heading), 0.0]
    )
    q_u = ts.state[:3] - anchor_pos

    pairs = list(assoc.pairs)
    unassoc_meas = list(assoc.unassociated_measurements)
    los_meas = next((j for i, j in pairs if i == 0), None)
    los_reidentified = False
    nlos = False

    # (c) LoS re-identification when the vehicle went unassociated.  Only
    # the shortest-delay leftover is a physical LoS candidate (every
    # reflection is longer); it must pass the distance/range consistency
    # ratio and, as a guard against locking onto a reflection, a 2-DoF
    # angle gate against the predicted vehicle direction.
    if los_meas is None and 0 in {i for i in assoc.unassociated_tracks}:
        candidates = sorted(unassoc_meas, key=lambda j: mv.measurements[j].d)
        if candidates:
            j = candidates[0]
            pick = identify_los([mv.measurements[j]], config.los_ratio_gamma)
            if pick is not None and _angle_gate_ok(ts, mv.measurements[j], config, anchor_pos):
                los_meas = j
                pairs.append((0, j))
                unassoc_meas.remove(j)
                los_reidentified = True
    nlos = los_meas is None

    # (d) Doppler consistency: flag dynamic-reflector measurements
    dynamic = []
    for j, m in enumerate(mv.measurements):
        track = next((i for i, jj in pairs if jj == j), None)
        if track == 0:
            q_v = q_u
        elif track is not None:
            q_v = ts.vue_position(track) - anchor_pos
        else:
            cand = birth_candidate(m, ts.state[:3], anchor_pos)
            if cand is None:
                continue
            q_v = cand
        v_pred = predicted_path_speed(q_u, q_v, ego_velocity)
        if abs(m.v - v_pred) > config.doppler_tol:
            dynamic.append(j)

    # (a) miss counting and deaths (vehicle track never removed)
    assoc_tracks = {i for i, _ in pairs}
    deaths = []
    keep = []
    for k, vid in enumerate(ts.vue_ids):
        if (k + 1) in assoc_tracks:
            ts.miss_counts[k] = 0
            keep.append(k)
        else:
            ts.miss_counts[k] += 1
            if ts.miss_counts[k] > config.max_misses:
                deaths.append(vid)
            else:
                keep.append(k)
    if deaths:
        ts, pairs = _remove_tracks(ts, keep, pairs)

    # a track updated by a dynamic measurement is not propagated further
    drop_after_update = []
    for i, j in pairs:
        if j in dynamic and i != 0:
            drop_after_update.append(ts.vue_ids[i - 1])

    # (b) births from unassociated, static-consistent measurements
    births = []
    for j in unassoc_meas:
        if j in dynamic:
            continue
        cand = birth_candidate(mv.measurements[j], ts.state[:3], anchor_pos)
        if cand is None:
            continue
        pos_global = cand + anchor_pos
        ts = _append_track(ts, pos_global[1], pos_global[2], config)
        births.append(ts.vue_ids[-1])

    result = ManageResult(
        births=births,
        deaths=deaths,
        dynamic_measurements=dynamic,
        drop_after_update=drop_after_update,
        los_measurement=los_meas,
        nlos_epoch=nlos,
    )
    new_assoc = AssocResult(
        pairs=pairs,
        mahalanobis=assoc.mahalanobis,
        unassociated_tracks=[i for i in range(ts.n_tracks) if i not in {p[0] for p in pairs}],
        unassociated_measurements=[j for j in unassoc_meas if j not in {p[1] for p in pairs}],
        los_reidentified=los_reidentified,
        skipped_singular=assoc.skipped_singular,
    )
    return ts, new_assoc, result


def _remove_tracks(ts: TrackSet, keep_vue_indices, pairs):
    """Marginalize out dead VUE tracks; remap association track indices."""
    idx = list(range(3))
    new_ids = []
    new_miss = []
    remap = {0: 0}
    for new_k, old_k in enumerate(keep_vue_indices):
        base = 3 + 2 * old_k
        idx.extend([base, base + 1])
        new_ids.append(ts.vue_ids[old_k])
        new_miss.append(ts.miss_counts[old_k])
        remap[old_k + 1] = new_k + 1
    out = TrackSet(
        state=ts.state[idx],
        cov=ts.cov[np.ix_(idx, idx)],
        vue_ids=new_ids,
        miss_counts=new_miss,
        epoch=ts.epoch,
        next_id=ts.next_id,
        ue_miss_streak=ts.ue_miss_streak,
    )
    new_pairs = [(remap[i], j) for i, j in pairs if i in remap]
    return out, new_pairs


def _append_track(ts: TrackSet, y_v: float, z_v: float, config: FilterConfig) -> TrackSet:
    d = ts.dim
    state = np.concatenate([ts.state, [y_v, z_v]])
    cov = np.zeros((d + 2, d + 2))
    cov[:d, :d] = ts.cov
    cov[d:, d:] = config.sigma_init**2 * np.eye(2)
    return TrackSet(
        state=state,
        cov=cov,
        vue_ids=ts.vue_ids + [ts.next_id],
        miss_counts=ts.miss_counts + [0],
        epoch=ts.epoch,
        next_id=ts.next_id + 1,
        ue_miss_streak=ts.ue_miss_streak,
    )


def drop_tracks_by_id(ts: TrackSet, ids) -> TrackSet:
    if not ids:
        return ts
    keep = [k for k, vid in enumerate(ts.vue_ids) if vid not in set(ids)]
    out, _ = _remove_tracks(ts, keep, [])
    return out


# ---------------------------------------------------------------------------
# EKF prediction and update


def predict(ts: TrackSet, speed: float, heading: float, dt: float, config: FilterConfig) -> TrackSet:
    """Velocity-sensor prediction for the vehicle, random walk for VUEs.

    The vehicle moves by dt * speed along the reported heading; the process
    noise maps the (speed, heading) input uncertainties through the
    displacement Jacobian, with a small floor on the height variance.  VUE
    coordinates are static with random-walk inflation.
    """
    ts = ts.copy()
    ch, sh = math.cos(heading), math.sin(heading)
    ts.state[0] += dt * speed * ch
    ts.state[1] += dt * speed * sh

    g = dt * np.array([[ch, -speed * sh], [sh, speed * ch], [0.0, 0.0]])
    q_ue = g @ np.diag([config.sigma_speed**2, config.sigma_heading**2]) @ g.T
    q_ue[2, 2] += config.z_process_var
    q = np.zeros_like(ts.cov)
    q[:3, :3] = q_ue
    for k in range(len(ts.vue_ids)):
        base = 3 + 2 * k
        q[base, base] = config.sigma_vue_walk**2
        q[base + 1, base + 1] = config.sigma_vue_walk**2
    ts.cov = ts.cov + q  # transition Jacobian is the identity
    return ts


def _assemble_update(ts: TrackSet, mv: MeasurementVector, pairs, config: FilterConfig, anchor_pos):
    """Stack update rows in state order: per associated track its angle
    (and near-field range) rows, then the delay-difference rows of every
    associated measurement against the reference measurement's track."""
    values, jacobians, ranges, range_rows = h_model(ts, anchor_pos)
    by_track = sorted(pairs)
    z_list, h_list, jac_rows, r_list, wrap_rows = [], [], [], [], []
    row = 0
    for i, j in by_track:
        meas = mv.measurements[j]
        z_rows, row_idx = _measurement_rows(meas)
        for k, ridx in enumerate(row_idx):
            z_list.append(z_rows[k])
            h_list.append(values[i][ridx])
            jac_rows.append(jacobians[i][ridx, :])
            r_list.append(
                [config.sigma_phi**2, config.sigma_psi**2,
                 config.kappa_sigma(i, meas.kappa) ** 2][ridx]
            )
            if ridx < 2:
                wrap_rows.append(row)
            row += 1

    # delay differences are taken against the direct path, so their rows
    # are usable only on epochs where the reference (shortest-delay)
    # measurement is associated with the vehicle track itself; referencing
    # them to a virtual-user track instead would leak that track's position
    # error straight into the vehicle's along-tunnel coordinate
    meas_to_track = {j: i for i, j in pairs}
    ref = mv.reference_index
    if ref is not None and meas_to_track.get(ref) == 0:
        for i, j in by_track:
            meas = mv.measurements[j]
            if meas.delta_d is None or j == ref:
                continue
            z_list.append(meas.delta_d)
            h_list.append(ranges[i] - ranges[0])
            jac_rows.append(range_rows[i] - range_rows[0])
            r_list.append(config.sigma_delta_d**2)
            row += 1
    if not z_list:
        return None
    return (
        np.array(z_list),
        np.array(h_list),
        np.vstack(jac_rows),
        np.diag(r_list),
        wrap_rows,
    )


def update(
    ts: TrackSet,
    mv: MeasurementVector,
    pairs,
    config: FilterConfig,
    anchor_pos,
) -> TrackSet:
    """Joseph-form EKF update over all associated rows.

    The Joseph form (I - K H) P (I - K H)^T + K R K^T preserves symmetry
    and positive semidefiniteness; the result is symmetrized against
    accumulated rounding.  A singular innovation covariance skips the
    update (the caller keeps the prediction).
    """
    assembled = _assemble_update(ts, mv, pairs, config, anchor_pos)
    if assembled is None:
        return ts
    z, h, jac, r, wrap_rows = assembled
    ts = ts.copy()
    innov = z - h
    for k in wrap_rows:
        innov[k] = wrap_angle(innov[k])
    s = jac @ ts.cov @ jac.T + r
    try:
        gain = np.linalg.solve(s.T, (ts.cov @ jac.T).T).T
    except np.linalg.LinAlgError:
        return ts
    ts.state = ts.state + gain @ innov
    ikh = np.eye(ts.dim) - gain @ jac
    cov = ikh @ ts.cov @ ikh.T + gain @ r @ gain.T
    ts.cov = 0.5 * (cov + cov.T)
    return ts


def _inflate_on_miss(ts: TrackSet, config: FilterConfig) -> None:
    """Grow the vehicle's planar covariance while it keeps missing, so a
    confidently wrong estimate eventually reopens its gates and
    re-acquires; capped at the initial uncertainty."""
    if config.miss_inflation_m <= 0 or ts.ue_miss_streak <= config.miss_inflation_grace:
        return
    extra = config.miss_inflation_m**2
    cap = config.sigma_init**2
    for k in (0, 1):
        if ts.cov[k, k] < cap:
            ts.cov[k, k] = min(ts.cov[k, k] + extra, cap)


@dataclass
class StepDiagnostics:
    epoch: int
    n_measurements: int
    n_associated: int
    births: list
    deaths: list
    dynamic_measurements: list
    los_measurement: Optional[int]
    nlos_epoch: bool
    los_reidentified: bool
    coasted: bool
    mahalanobis: dict


def step(
    ts: TrackSet,
    mv: MeasurementVector,
    ego_speed: float,
    ego_heading: float,
    dt: float,
    config: FilterConfig,
    anchor_pos,
):
    """One full tracking epoch: predict, associate, manage, update.

    With no usable measurements the epoch is predict-only (coasting).
    Returns the posterior track set and per-epoch diagnostics.
    """
    ts = predict(ts, ego_speed, ego_heading, dt, config)
    ts.epoch += 1
    if not mv.measurements:
        ts.ue_miss_streak += 1
        _inflate_on_miss(ts, config)
        return ts, StepDiagnostics(
            epoch=ts.epoch, n_measurements=0, n_associated=0, births=[], deaths=[],
            dynamic_measurements=[], los_measurement=None, nlos_epoch=True,
            los_reidentified=False, coasted=True, mahalanobis={},
        )
    assoc = associate(ts, mv, config, anchor_pos)
    ts, assoc, managed = manage_tracks(
        ts, assoc, mv, ego_speed, ego_heading, config, anchor_pos
    )
    if any(i == 0 for i, _ in assoc.pairs):
        ts.ue_miss_streak = 0
    else:
        ts.ue_miss_streak += 1
        _inflate_on_miss(ts, config)
    ts = update(ts, mv, assoc.pairs, config, anchor_pos)
    ts = drop_tracks_by_id(ts, managed.drop_after_update)
    diag = StepDiagnostics(
        epoch=ts.epoch,
        n_measurements=len(mv.measurements),
        n_associated=len(assoc.pairs),
        births=managed.births,
        deaths=managed.deaths,
        dynamic_measurements=managed.dynamic_measurements,
        los_measurement=managed.los_measurement,
        nlos_epoch=managed.nlos_epoch,
        los_reidentified=assoc.los_reidentified,
        coasted=len(assoc.pairs) == 0,
        mahalanobis=assoc.mahalanobis,
    )
    return ts, diag


def identify_los(measurements: Sequence, gamma: float):
    """Geometric LoS consistency rule shared with the snapshot baseline:
    the path minimizing |d - kappa| subject to d/kappa within [1 - gamma,
    1 + gamma].  Works on anything exposing ``d`` and ``kappa`` (a missing
    or non-finite range disqualifies the path).  Returns the index of the
    identified path or None."""
    best = None
    for j, m in enumerate(measurements):
        if m.kappa is None or not math.isfinite(m.kappa) or m.kappa <= 0:
            continue
        ratio = m.d / m.kappa
        if 1.0 - gamma <= ratio <= 1.0 + gamma:
            gap = abs(m.d - m.kappa)
            if best is None or gap < best[0]:
                best = (gap, j)
    return None if best is None else best[1]
