"""Array-size validity bounds for the single-reflector near-field model.

A reflected path is physically a spherical wave from the virtual user
(mirror image).  Modelling it instead as a wave from one fixed reflection
point on the plane is only consistent while the phase mismatch across the
array stays below a tolerance ``eps_phi``; these routines give the closed
forms for the largest admissible array side and the exact brute-force
oracle used to validate them.

Canonical validity frame: the reference element at the origin, the array in
the xy-plane extending toward +x and +y, the transmitter at ``(R, y_u,
z_u)`` with R > 0, and the reflecting plane ``y = W``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .raygen import mirror_image
from .scene import AnchorSpec, Panel, build_ura_layout

_DEGENERATE_OFFSET = 1e-9


@dataclass(frozen=True)
class BoundInputs:
    """Geometry and tolerance feeding the closed-form bounds."""

    R: float  # [m] longitudinal transmitter distance
    W: float  # [m] anchor-to-plane distance
    y_u: float  # [m] transmitter transverse coordinate (toward the plane)
    eps_phi: float  # [rad] maximum tolerable phase error
    wavelength: float
    spacing: float | None = None  # [m] defaults to wavelength / 2
    z_u: float = 0.0

    def __post_init__(self):
        if self.R <= 0 or self.W <= 0 or self.eps_phi <= 0 or self.wavelength <= 0:
            raise ValueError("R, W, eps_phi and wavelength must be positive")
        if self.spacing is None:
            object.__setattr__(self, "spacing", self.wavelength / 2.0)

    @property
    def vue(self) -> np.ndarray:
        return np.array([self.R, 2.0 * self.W - self.y_u, self.z_u])


def mmax_2d(inp: BoundInputs) -> float:
    """Largest per-axis element count keeping the single-reflector model
    phase-consistent, 2D geometry (z_u = 0):

        M_max = 1 + 2 * sqrt(R * W * eps_phi / (wavelength * |W - y_u| * pi))

    Returns ``inf`` when the transmitter sits on the plane (|W - y_u| ~ 0):
    the quadratic mismatch term vanishes and no array size is excluded.
    """
    gap = abs(inp.W - inp.y_u)
    if gap < _DEGENERATE_OFFSET:
        return math.inf
    return 1.0 + 2.0 * math.sqrt(
        inp.R * inp.W * inp.eps_phi / (inp.wavelength * gap * math.pi)
    )


def rho_3d(R: float, W: float, y_u: float, z_u: float) -> float:
    """Propagation distance to the virtual user, ||(R, 2W - y_u, z_u)||."""
    return math.sqrt(R * R + (2.0 * W - y_u) ** 2 + z_u * z_u)


def mmax_3d(rho: float, eps_phi: float, wavelength: float) -> float:
    """Generalized (3D) bound on the larger array dimension:

        M_max = 1 + 2 * sqrt(rho * eps_phi / (wavelength * pi))

    This form drops the 2D bound's |W - y_u| / W geometry factor, so it is
    the more conservative of the two for transmitters close to the plane;
    report both rather than reconciling them.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    return 1.0 + 2.0 * math.sqrt(rho * eps_phi / (wavelength * math.pi))


def phase_error_fresnel(inp: BoundInputs, m_side: int) -> float:
    """Second-order (Fresnel) prediction of the worst phase error [rad] for a
    per-axis count ``m_side``:

        (2 pi / wavelength) * |W - y_u| / (2 R W) * ((m_side - 1) * spacing)^2

    Valid for apertures small against R and transverse offsets small against
    R (paraxial); the exact oracle below replaces it outside that regime.
    """
    if m_side < 1:
        raise ValueError("m_side must be >= 1")
    edge = (m_side - 1) * inp.spacing
    return (
        (2.0 * math.pi / inp.wavelength)
        * abs(inp.W - inp.y_u)
        / (2.0 * inp.R * inp.W)
        * edge * edge
    )


def validity_layout(side: int, spacing: float) -> np.ndarray:
    """Square array in the canonical validity frame (xy-plane, +x/+y quadrant)."""
    return build_ura_layout(AnchorSpec(np.zeros(3), rows=side, cols=side, spacing=spacing))


def plane_panel(W: float, extent: float = 1e6) -> Panel:
    """The reflecting plane y = W as an (effectively infinite) panel."""
    return Panel(
        id=0,
        center=np.array([0.0, W, 0.0]),
        unit_normal=np.array([0.0, -1.0, 0.0]),
        half_extents=(extent, extent),
    )


def phase_error_exact(layout: np.ndarray, ue, panel: Panel, wavelength: float) -> float:
    """Brute-force oracle: worst phase error [rad] of the single-reflector
    model over the array, with no series expansion anywhere.

    For each element m the true offset uses exact distances to the mirror
    image, while the single-reflector offset uses exact distances to the one
    reflection point fixed by the reference element.  Returns
    ``max_m (2 pi / wavelength) * |delta_true_m - delta_sr_m|``.
    """
    layout = np.asarray(layout, dtype=float).reshape(-1, 3)
    ue = np.asarray(ue, dtype=float).reshape(3)
    ref = layout[0]

    vue = mirror_image(ue, panel)
    sd_ref = panel.signed_distance(ref)
    sd_vue = panel.signed_distance(vue)
    denom = sd_ref - sd_vue
    if abs(denom) < 1e-12:
        raise ValueError("degenerate geometry: reference-to-image segment parallel to plane")
    p_s0 = ref + (sd_ref / denom) * (vue - ref)

    d_true = np.linalg.norm(layout - vue[None, :], axis=1)
    d_sr = np.linalg.norm(layout - p_s0[None, :], axis=1)
    delta_true = d_true - d_true[0]
    delta_sr = d_sr - d_sr[0]
    return float(2.0 * math.pi / wavelength * np.max(np.abs(delta_true - delta_sr)))


def residual_second_order(layout: np.ndarray, vue, wavelength: float) -> float:
    """Worst phase error [rad] from the generalized quadratic residual

        |delta_m| = || P_perp p_m ||^2 / (2 rho),

    with the projector P_perp = I - u u^T built from the unit propagation
    direction u toward the wave origin.  No plane-geometry prefactor; this
    is the conservative 3D form.
    """
    layout = np.asarray(layout, dtype=float).reshape(-1, 3)
    vue = np.asarray(vue, dtype=float).reshape(3)
    rho = float(np.linalg.norm(vue))
    if rho <= 0:
        raise ValueError("wave origin at the array reference")
    u = vue / rho
    perp = layout - np.outer(layout @ u, u)
    return float(
        2.0 * math.pi / wavelength * np.max(np.sum(perp * perp, axis=1)) / (2.0 * rho)
    )


def sweep_rows(
    R_values,
    W_values,
    y_frac_values,
    eps_phi: float,
    wavelength: float,
):
    """Yield bound-sweep CSV rows: for each (R, W, y_u) the 2D and 3D bounds
    plus the exact oracle error of a floor(M_max)-per-axis square array."""
    for R in R_values:
        for W in W_values:
            for frac in y_frac_values:
                y_u = frac * W
                inp = BoundInputs(R=R, W=W, y_u=y_u, eps_phi=eps_phi, wavelength=wavelength)
                m2 = mmax_2d(inp)
                m3 = mmax_3d(rho_3d(R, W, y_u, 0.0), eps_phi, wavelength)
                if math.isfinite(m2) and m2 >= 2:
                    layout = validity_layout(int(m2), inp.spacing)
                    exact = phase_error_exact(
                        layout, [R, y_u, 0.0], plane_panel(W), wavelength
                    )
                else:
                    exact = 0.0
                yield {
                    "R": R,
                    "W": W,
                    "y_u": y_u,
                    "eps_phi": eps_phi,
                    "wavelength": wavelength,
                    "mmax_2d": m2,
                    "mmax_3d": m3,
                    "exact_error_at_mmax": exact,
                }
