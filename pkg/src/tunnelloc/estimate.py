"""Measurement front-end: from a noisy channel tensor to per-path parameters.

Pipeline stages (each usable on its own):

1. ``cpd``: alternating-least-squares canonical polyadic decomposition of
   the channel tensor into per-path spatial / frequency / time steering
   vectors;
2. ``resolve_scaling``: path-gain recovery and per-column normalization so
   every steering vector has first entry 1;
3. ``vandermonde_roots`` + ``estimate_distance_velocity``: shift-invariance
   phase increments giving biased distance and radial velocity per path;
4. ``unwrap_phase_2d``: reliability-guided 2D phase unwrapping of the
   spatial steering vector into per-antenna distance offsets;
5. ``solve_wave_origin_nf`` / ``solve_direction_ff``: total-least-squares
   wave-origin solve (near field) or least-squares direction solve (far
   field) on the array-local grid;
6. ``extract_angles`` + frame conversion, and ``sanitize_measurements``
   applying the consistency rules that build the measurement vector.

Angle convention: azimuth is atan2-style in the xy-plane of whichever frame
is named; elevation is the angle above that plane, so a wave origin at
in-plane distance h and range kappa has h = kappa * cos(elevation).  The
solvers assume origins in front of the array (non-negative local z).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from skimage.restoration import unwrap_phase as _unwrap_image

from .channel import GridSpec
from .errors import ConfigError
from .scene import SPEED_OF_LIGHT, Pose

NF = "NF"
FF = "FF"


# ---------------------------------------------------------------------------
# CP decomposition


@dataclass
class EstimatorConfig:
    """ALS settings: 500 sweeps max, 1e-8 relative-improvement tolerance,
    5 random restarts by default.  ``early_stop_residual`` short-circuits
    the restart loop once a fit is clearly good enough (e.g. at the noise
    floor), which matters when the decomposition runs once per epoch.

    ``kappa_trust_m`` is the adaptive near-field/far-field switch: a solved
    wavefront curvature radius beyond it is treated as unobservable (the
    quadratic phase across the aperture has fallen into the noise) and the
    path demotes to its far-field estimate.  None disables the demotion.
    """

    max_iter: int = 500
    tol: float = 1e-8
    restarts: int = 5
    seed: int = 0
    early_stop_residual: float = 0.0
    kappa_trust_m: Optional[float] = 30.0


@dataclass
class SteeringEstimates:
    """CPD output: one steering-matrix estimate per tensor mode."""

    b_s: np.ndarray  # (M, L)
    b_f: np.ndarray  # (N_f, L)
    b_t: np.ndarray  # (N_t, L)
    residual: float  # relative Frobenius reconstruction error
    restarts_used: int = 1
    converged: bool = True

    @property
    def rank(self) -> int:
        return self.b_s.shape[1]


def _khatri_rao(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a[:, None, :] * b[None, :, :]).reshape(a.shape[0] * b.shape[0], a.shape[1])


def _unfold(t: np.ndarray, mode: int) -> np.ndarray:
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1)


def kruskal_condition_ok(shape: tuple, rank: int) -> bool:
    """Generic-position Kruskal uniqueness check:
    sum_i min(dim_i, L) >= 2L + 2."""
    return sum(min(n, rank) for n in shape) >= 2 * rank + 2


_OTHERS = {0: (1, 2), 1: (0, 2), 2: (0, 1)}


def _hosvd_init(unfoldings, rank):
    """Leading left singular vectors of each unfolding; a far better start
    than random factors when components are correlated."""
    out = []
    for x in unfoldings:
        u, s, _ = np.linalg.svd(x, full_matrices=False)
        k = min(rank, u.shape[1])
        f = u[:, :k] * s[:k][None, :]
        if k < rank:  # pad degenerate modes with small noise
            pad = 1e-3 * s[0] * np.ones((u.shape[0], rank - k))
            f = np.column_stack([f, pad])
        out.append(f.astype(complex))
    return out


def _gevd_init(h, unfoldings, rank, rng):
    """Algebraic initialization via a generalized eigendecomposition.

    Project the tensor onto its leading mode-0/mode-1 subspaces, aggregate
    the mode-2 slabs with two random weightings, and diagonalize the
    resulting matrix pencil: the eigenvector bases recover the projected
    factor matrices up to scale, which a subsequent ALS polish fixes.
    Falls back to None when the pencil is too ill-conditioned to solve.
    """
    m, n_f, n_t = h.shape
    if rank > min(m, n_f):
        return None
    u0, _, _ = np.linalg.svd(unfoldings[0], full_matrices=False)
    u1, _, _ = np.linalg.svd(unfoldings[1], full_matrices=False)
    u0 = u0[:, :rank]
    u1 = u1[:, :rank]
    core = np.einsum("im,mft->ift", u0.conj().T, h)
    core = np.einsum("jf,ift->ijt", u1.conj().T, core)  # (rank, rank, n_t)
    wa = rng.standard_normal(n_t) + 1j * rng.standard_normal(n_t)
    wb = rng.standard_normal(n_t) + 1j * rng.standard_normal(n_t)
    sa = np.einsum("ijt,t->ij", core, wa)
    sb = np.einsum("ijt,t->ij", core, wb)
    try:
        sb_inv = np.linalg.inv(sb)
        evals_p, vec_p = np.linalg.eig(sa @ sb_inv)
        evals_q, vec_q = np.linalg.eig((sa.T) @ np.linalg.inv(sb.T))
    except np.linalg.LinAlgError:
        return None
    # align the two eigenbases through their (shared) eigenvalues
    order_q = [int(np.argmin(np.abs(evals_q - lam))) for lam in evals_p]
    if len(set(order_q)) != rank:
        return None
    b_s = u0 @ vec_p
    b_f = u1 @ vec_q[:, order_q]
    # mode-2 factor by least squares given the other two
    z = _khatri_rao(b_s, b_f)
    gram = (b_s.conj().T @ b_s) * (b_f.conj().T @ b_f)
    w = unfoldings[2] @ z.conj()
    try:
        b_t = np.linalg.solve(gram, w.T).T
    except np.linalg.LinAlgError:
        return None
    return [b_s, b_f, b_t]


def _relative_residual(unfoldings, factors, norm_x):
    """|| X - reconstruction ||_F / ||X||_F via the gram identity."""
    b = factors[0]
    z = _khatri_rao(factors[1], factors[2])
    gram = (factors[1].conj().T @ factors[1]) * (factors[2].conj().T @ factors[2])
    w = unfoldings[0] @ z.conj()
    fit = float(
        norm_x**2
        - 2.0 * np.real(np.sum(b.conj() * w))
        + np.real(np.sum((b.conj().T @ b) * gram))
    )
    return math.sqrt(max(fit, 0.0)) / norm_x


def _als_run(unfoldings, shape, rank, rng, init, max_iter, tol, stop_at=0.0):
    norm_x = float(np.linalg.norm(unfoldings[0]))
    if init is not None:
        factors = [np.asarray(f, dtype=complex).copy() for f in init]
    else:
        factors = [
            (rng.standard_normal((n, rank)) + 1j * rng.standard_normal((n, rank)))
            for n in shape
        ]
    prev_rel = np.inf
    rel = np.inf
    converged = False
    prev_factors = None
    beta_ok = 0  # consecutive accepted extrapolations
    for it in range(max_iter):
        for mode in (0, 1, 2):
            i, j = _OTHERS[mode]
            z = _khatri_rao(factors[i], factors[j])
            gram = (factors[i].conj().T @ factors[i]) * (factors[j].conj().T @ factors[j])
            w = unfoldings[mode] @ z.conj()
            try:
                factors[mode] = np.linalg.solve(gram, w.T).T
            except np.linalg.LinAlgError:
                factors[mode] = w @ np.linalg.pinv(gram).T
            if mode == 0:
                b = factors[0]
                fit = float(
                    norm_x**2
                    - 2.0 * np.real(np.sum(b.conj() * w))
                    + np.real(np.sum((b.conj().T @ b) * gram))
                )
                rel = math.sqrt(max(fit, 0.0)) / norm_x
        # rebalance column scales into the spatial factor for conditioning
        for mode in (1, 2):
            scale = np.linalg.norm(factors[mode], axis=0)
            scale[scale == 0] = 1.0
            factors[mode] /= scale
            factors[0] *= scale
        # line-search extrapolation: ALS with correlated components crawls
        # along a flat valley ("swamp"); stepping further along the last
        # sweep direction breaks out of it when it keeps lowering the fit
        if prev_factors is not None and it >= 2:
            beta = min(1.0 + beta_ok * 0.5, 4.0)
            cand = [f + beta * (f - p) for f, p in zip(factors, prev_factors)]
            cand_rel = _relative_residual(unfoldings, cand, norm_x)
            if cand_rel < rel:
                prev_factors = [f.copy() for f in factors]
                factors = cand
                rel = cand_rel
                beta_ok += 1
            else:
                prev_factors = [f.copy() for f in factors]
                beta_ok = 0
        else:
            prev_factors = [f.copy() for f in factors]
        if rel <= stop_at or prev_rel - rel < tol:
            converged = True
            break
        prev_rel = rel
    return factors, rel, converged


def cpd(
    h: np.ndarray,
    rank: int,
    config: Optional[EstimatorConfig] = None,
    init: Optional[Sequence[np.ndarray]] = None,
) -> SteeringEstimates:
    """CP decomposition of the channel tensor by alternating least squares.

    Runs up to ``config.restarts`` random initializations (plus ``init`` as
    a warm start when given) and keeps the best fit by relative residual.
    Non-convergence returns the best factors found with ``converged=False``.
    """
    config = config or EstimatorConfig()
    h = np.asarray(h, dtype=complex)
    if h.ndim != 3:
        raise ConfigError("cpd expects a 3-way tensor")
    shape = h.shape
    if rank < 1:
        raise ConfigError("rank must be >= 1")
    max_rank = min(shape[0] * shape[1], shape[0] * shape[2], shape[1] * shape[2])
    if rank > max_rank:
        raise ConfigError(f"rank {rank} not representable on grid {shape}")
    if not kruskal_condition_ok(shape, rank):
        warnings.warn(
            f"Kruskal uniqueness condition fails for shape {shape}, rank {rank}; "
            "the decomposition may not be unique",
            stacklevel=2,
        )
    if float(np.linalg.norm(h)) == 0.0:
        raise ConfigError("cannot decompose an all-zero tensor")

    unfoldings = [_unfold(h, m) for m in range(3)]
    rng = np.random.default_rng(config.seed)
    best = None
    # initialization ladder, built lazily so later rungs cost nothing once
    # an earlier one reaches the early-stop residual.  The algebraic (GEVD)
    # init leads: it re-derives the factors from the data every call, so
    # correlated-component mixing does not accumulate across warm-started
    # epochs (per-epoch estimation errors stay independent, which the
    # downstream filter can average out).
    ladder = [("gevd", lambda: _gevd_init(h, unfoldings, rank, rng))]
    if init is not None:
        ladder.append(("warm", lambda: [np.asarray(f) for f in init]))
    ladder.append(("hosvd", lambda: _hosvd_init(unfoldings, rank)))
    ladder.extend(("random", lambda: "random") for _ in range(config.restarts))

    used = 0
    for name, make_attempt in ladder:
        attempt = make_attempt()
        if attempt is None:
            continue  # algebraic init unavailable (ill-conditioned pencil)
        used += 1
        factors, rel, converged = _als_run(
            unfoldings, shape, rank, rng,
            None if attempt == "random" else attempt,
            config.max_iter, config.tol,
            stop_at=config.early_stop_residual,
        )
        if best is None or rel < best[1]:
            best = (factors, rel, converged)
        if best[1] <= config.early_stop_residual:
            break
    if best is None:
        raise ConfigError("decomposition produced no usable fit")

    factors, rel, converged = best
    return SteeringEstimates(
        b_s=factors[0], b_f=factors[1], b_t=factors[2],
        residual=rel, restarts_used=used, converged=converged,
    )


def resolve_scaling(est: SteeringEstimates):
    """Recover path gains and normalize the steering-matrix columns.

    The gain of path l is the product of the three first-row entries
    (taken before any normalization); afterwards each column is divided by
    its own first entry so all first rows become exactly 1.  Paths whose
    first-row entry is numerically zero in any mode are reported invalid.
    """
    b_s, b_f, b_t = est.b_s.copy(), est.b_f.copy(), est.b_t.copy()
    gains = b_s[0, :] * b_f[0, :] * b_t[0, :]
    valid = np.ones(est.rank, dtype=bool)
    for b in (b_s, b_f, b_t):
        first = b[0, :].copy()
        bad = np.abs(first) < 1e-12
        valid &= ~bad
        first[bad] = 1.0
        b /= first[None, :]
    out = replace(est, b_s=b_s, b_f=b_f, b_t=b_t)
    return out, gains, valid


def vandermonde_roots(b: np.ndarray) -> np.ndarray:
    """Per-column phase increment from the shift-invariance of a uniform
    grid: angle of the diagonal of B_minus^H @ B_plus (rows 0..N-2 against
    rows 1..N-1)."""
    b = np.asarray(b)
    if b.shape[0] < 2:
        raise ConfigError("need at least two rows for a phase increment")
    return np.angle(np.sum(b[:-1].conj() * b[1:], axis=0))


def estimate_distance_velocity(est: SteeringEstimates, grid: GridSpec):
    """Biased propagation distance and radial velocity per path.

    d_l = -c / (2 pi delta_f) * mu_f  (unambiguous within c / delta_f, and
    carrying the transmitter clock bias); v_l = c / (2 pi f_c T0) * mu_t.
    """
    mu_f = vandermonde_roots(est.b_f)
    mu_t = vandermonde_roots(est.b_t)
    d = -SPEED_OF_LIGHT / (2.0 * math.pi * grid.delta_f) * mu_f
    v = SPEED_OF_LIGHT / (2.0 * math.pi * grid.f_c * grid.t0) * mu_t
    return d, v


# ---------------------------------------------------------------------------
# Spatial processing


def unwrap_phase_2d(b_s: np.ndarray, rows: int, cols: int, wavelength: float):
    """Per-antenna distance offsets from the spatial steering vector.

    The wrapped phase is laid out on the rows x cols element grid
    (element m = r * cols + c) and unwrapped with the reliability-guided
    2D algorithm (quality map from local second differences, region growing
    with 2-pi corrections); degenerate single-row/column grids fall back to
    1D unwrapping.  The result is re-anchored so the reference element has
    offset exactly 0.

    Returns ``(delta_m, reliable)``; ``reliable`` goes False when the
    unwrapped solution itself implies an adjacent-element phase step of at
    least pi, i.e. the spatial sampling was aliased and the offsets cannot
    be trusted.
    """
    b_s = np.asarray(b_s).reshape(-1)
    if b_s.size != rows * cols:
        raise ConfigError("steering vector does not match the rows*cols grid")
    phase = np.angle(b_s).reshape(rows, cols)
    if rows == 1 or cols == 1:
        unwrapped = np.unwrap(phase.ravel()).reshape(rows, cols)
    else:
        unwrapped = np.asarray(_unwrap_image(phase))
    unwrapped = unwrapped - unwrapped[0, 0]

    reliable = True
    if cols > 1 and np.max(np.abs(np.diff(unwrapped, axis=1))) >= math.pi * (1 - 1e-9):
        reliable = False
    if rows > 1 and np.max(np.abs(np.diff(unwrapped, axis=0))) >= math.pi * (1 - 1e-9):
        reliable = False

    delta = wavelength / (2.0 * math.pi) * unwrapped.ravel()
    return delta, reliable


@dataclass
class WaveOrigin:
    """Near-field solve result in the array-local frame."""

    x: float
    y: float
    kappa: float
    degenerate: bool = False  # smallest singular value not isolated
    ff_recommended: bool = False  # homogeneous coordinate collapsed: planar wave


def solve_wave_origin_nf(delta: np.ndarray, layout: np.ndarray) -> WaveOrigin:
    """Total-least-squares wave-origin solve on the element grid.

    Builds one equation per non-reference element,
    ``2 (x_m x + y_m y + delta_m kappa) = r_m^2 - delta_m^2`` (exact for a
    point source seen by an array in the local xy-plane), and, because the
    offsets contaminate both sides, solves it in total least squares: the
    right-singular vector of ``[2A | -b]`` with smallest singular value,
    dehomogenized.
    """
    delta = np.asarray(delta, dtype=float).ravel()
    layout = np.asarray(layout, dtype=float).reshape(-1, 3)
    m = layout.shape[0]
    if m < 4:
        raise ConfigError("near-field solve needs at least 4 elements")
    if delta.size != m:
        raise ConfigError("offset vector does not match the layout")

    a = np.column_stack([layout[1:, 0], layout[1:, 1], delta[1:]])
    r2 = np.sum(layout[1:, :] ** 2, axis=1)
    b = r2 - delta[1:] ** 2
    aug = np.column_stack([2.0 * a, -b])
    _, sigma, vt = np.linalg.svd(aug, full_matrices=False)
    v = vt[-1, :]
    degenerate = bool(sigma[-2] - sigma[-1] < 1e-9 * max(sigma[0], 1e-300))
    ff_recommended = bool(abs(v[3]) < 1e-12 * np.linalg.norm(v))
    if ff_recommended:
        return WaveOrigin(math.inf, math.inf, math.inf, degenerate, True)
    x, y, kappa = (v[:3] / v[3]).tolist()
    return WaveOrigin(x, y, kappa, degenerate, False)


def solve_direction_ff(delta: np.ndarray, layout: np.ndarray) -> np.ndarray:
    """Far-field direction cosines: least-squares fit of the planar-wave
    model ``delta_m = -(u_x x_m + u_y y_m)`` over the coordinate columns."""
    delta = np.asarray(delta, dtype=float).ravel()
    layout = np.asarray(layout, dtype=float).reshape(-1, 3)
    if layout.shape[0] < 3:
        raise ConfigError("far-field solve needs at least 3 elements")
    a = layout[1:, :2]
    if np.linalg.matrix_rank(a) < 2:
        raise ConfigError("rank-deficient element grid: cannot solve a 2D direction")
    u, *_ = np.linalg.lstsq(a, -delta[1:], rcond=None)
    return u


@dataclass
class AngleExtraction:
    phi: float  # [rad] azimuth in the array-local frame
    psi: float  # [rad] elevation above the array plane, in [0, pi/2]
    kappa: float  # [m] wave-origin range (NaN in far field)
    clamped: bool = False  # in-plane magnitude exceeded kappa and was clamped
    boresight: bool = False  # azimuth undefined (origin on boresight), phi = 0


def extract_angles(x_l, regime: str = NF) -> AngleExtraction:
    """Azimuth / elevation / range from a solved wave origin or direction.

    Near field: ``x_l`` is (x, y, kappa) with in-plane magnitude
    ``kappa * cos(psi)``.  Far field: ``x_l`` is the in-plane direction
    cosine pair, whose norm is cos(psi).
    """
    if regime == FF:
        ux, uy = float(x_l[0]), float(x_l[1])
        h = math.hypot(ux, uy)
        clamped = h > 1.0 + 1e-9
        h = min(h, 1.0)
        if h < 1e-12:
            return AngleExtraction(0.0, math.pi / 2.0, math.nan, clamped, True)
        return AngleExtraction(math.atan2(uy, ux), math.acos(h), math.nan, clamped, False)

    x, y, kappa = (float(x_l[0]), float(x_l[1]), float(x_l[2]))
    h = math.hypot(x, y)
    if h < 1e-12 * max(abs(kappa), 1.0):
        return AngleExtraction(0.0, math.pi / 2.0, kappa, False, True)
    phi = math.atan2(y, x)
    ratio = h / kappa if kappa > 0 else math.inf
    clamped = ratio > 1.0 + 1e-9
    psi = math.acos(min(max(ratio, 0.0), 1.0))
    return AngleExtraction(phi, psi, kappa, clamped, False)


def angles_to_global(pose: Pose, phi: float, psi: float):
    """Rotate array-local (azimuth, elevation) into the anchor's
    global-aligned frame (axes parallel to the tunnel frame)."""
    d_local = np.array(
        [math.cos(psi) * math.cos(phi), math.cos(psi) * math.sin(phi), math.sin(psi)]
    )
    d = pose.rotation @ d_local
    return math.atan2(d[1], d[0]), math.atan2(d[2], math.hypot(d[0], d[1]))


# ---------------------------------------------------------------------------
# Per-path estimates and sanitization


@dataclass
class PathParamEstimate:
    """One path's estimated parameters, angles in the anchor's
    global-aligned frame.  ``ff_phi``/``ff_psi`` hold the far-field
    fallback solution used when the near-field one is rejected."""

    alpha: complex
    phi: float
    psi: float
    kappa: float
    d: float  # [m] clock-biased propagation distance
    v: float  # [m/s] radial velocity (positive toward the anchor)
    regime: str = NF
    valid: bool = True
    ff_phi: float = math.nan
    ff_psi: float = math.nan
    unreliable_unwrap: bool = False


@dataclass
class PathMeasurement:
    """Sanitized measurement of one retained path."""

    phi: float
    psi: float
    kappa: Optional[float]  # None for far-field paths (no range row)
    delta_d: Optional[float]  # None for the reference path
    regime: str
    d: float
    v: float
    source_index: int  # position in the pre-sanitization estimate list


@dataclass
class MeasurementVector:
    """Stacked per-epoch measurement set for the tracker."""

    measurements: list
    reference_index: Optional[int]  # index into ``measurements`` of the delay reference

    @property
    def k(self) -> int:
        n = 0
        for m in self.measurements:
            n += 2  # angles
            if m.kappa is not None:
                n += 1
            if m.delta_d is not None:
                n += 1
        return n

    def as_stacked(self) -> np.ndarray:
        """Flat layout: all azimuths, all elevations, the near-field ranges,
        then the delay differences."""
        phis = [m.phi for m in self.measurements]
        psis = [m.psi for m in self.measurements]
        kappas = [m.kappa for m in self.measurements if m.kappa is not None]
        dds = [m.delta_d for m in self.measurements if m.delta_d is not None]
        return np.array(phis + psis + kappas + dds, dtype=float)


def sanitize_measurements(params: Sequence[PathParamEstimate]) -> MeasurementVector:
    """Consistency rules building the measurement vector.

    (i) a negative estimated distance discards the path; (ii) a negative
    curvature radius demotes the path to its far-field estimate (angles
    only, no range row); (iii) anything else keeps the near-field estimate.
    Delay differences are taken against the retained path with the smallest
    estimated distance, which drops its own (zero) difference row.
    """
    kept = []
    for idx, p in enumerate(params):
        if not p.valid or p.d < 0.0:
            continue
        regime = p.regime
        if regime == NF and (p.kappa < 0.0 or p.unreliable_unwrap):
            regime = FF
        if regime == FF and (math.isnan(p.ff_phi) or math.isnan(p.ff_psi)):
            continue
        phi, psi = (p.phi, p.psi) if regime == NF else (p.ff_phi, p.ff_psi)
        kept.append(
            PathMeasurement(
                phi=phi,
                psi=psi,
                kappa=p.kappa if regime == NF else None,
                delta_d=None,
                regime=regime,
                d=p.d,
                v=p.v,
                source_index=idx,
            )
        )
    if not kept:
        return MeasurementVector(measurements=[], reference_index=None)

    ref = int(np.argmin([m.d for m in kept]))
    for i, m in enumerate(kept):
        if i != ref:
            m.delta_d = m.d - kept[ref].d
    return MeasurementVector(measurements=kept, reference_index=ref)


def extract_path_parameters(
    h_tilde: np.ndarray,
    grid: GridSpec,
    pose: Pose,
    layout_local: np.ndarray,
    rows: int,
    cols: int,
    n_paths: int,
    config: Optional[EstimatorConfig] = None,
    init: Optional[Sequence[np.ndarray]] = None,
):
    """Full front-end for one epoch: CPD, scaling resolution, per-path
    delay/velocity, unwrapping, wave-origin solve and frame conversion.

    Returns ``(estimates, steering)`` where ``steering`` is the normalized
    CPD output (reusable as the next epoch's warm start).
    """
    est = cpd(h_tilde, n_paths, config=config, init=init)
    est, gains, valid = resolve_scaling(est)
    d_all, v_all = estimate_distance_velocity(est, grid)

    out = []
    for ell in range(est.rank):
        if not valid[ell]:
            out.append(
                PathParamEstimate(
                    alpha=complex(gains[ell]), phi=0.0, psi=0.0, kappa=math.nan,
                    d=float(d_all[ell]), v=float(v_all[ell]), valid=False,
                )
            )
            continue
        delta, reliable = unwrap_phase_2d(est.b_s[:, ell], rows, cols, grid.wavelength)

        ff_sol = solve_direction_ff(delta, layout_local)
        ff_ang = extract_angles(ff_sol, regime=FF)
        ff_phi_g, ff_psi_g = angles_to_global(pose, ff_ang.phi, ff_ang.psi)

        origin = solve_wave_origin_nf(delta, layout_local)
        trust = config.kappa_trust_m if config is not None else None
        beyond_horizon = trust is not None and origin.kappa > trust
        if origin.ff_recommended or origin.degenerate or beyond_horizon:
            regime = FF
            phi_g, psi_g, kappa = ff_phi_g, ff_psi_g, math.nan
        else:
            regime = NF
            nf_ang = extract_angles((origin.x, origin.y, origin.kappa), regime=NF)
            phi_g, psi_g = angles_to_global(pose, nf_ang.phi, nf_ang.psi)
            kappa = nf_ang.kappa

        out.append(
            PathParamEstimate(
                alpha=complex(gains[ell]),
                phi=phi_g,
                psi=psi_g,
                kappa=kappa,
                d=float(d_all[ell]),
                v=float(v_all[ell]),
                regime=regime,
                valid=True,
                ff_phi=ff_phi_g,
                ff_psi=ff_psi_g,
                unreliable_unwrap=not reliable,
            )
        )
    return out, est
