"""Scenario assembly: geometry, radio grid, filter settings, trajectory.

A scenario can be built programmatically (``straight_scenario`` /
``slalom_scenario``) or loaded from a TOML file; the file schema mirrors
the dataclasses here and is documented field by field in the README.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

import numpy as np

from .channel import ClockModel, GridSpec
from .errors import ConfigError
from .estimate import EstimatorConfig
from .scene import SPEED_OF_LIGHT, AnchorSpec, Panel, TunnelSpec, gen_trajectory
from .track import FilterConfig


@dataclass
class TrajectoryConfig:
    kind: str = "straight"
    start: tuple = (20.0, 1.5, 1.5)
    speed_mps: float = 10.0
    epoch_s: float = 0.025
    epochs: int = 100
    heading_deg: float = 0.0
    amplitude: float = 1.2
    period_m: float = 40.0


@dataclass
class ClutterConfig:
    """Synthetic dynamic-clutter injection (extension, off by default)."""

    probability: float = 0.0  # per-epoch probability of one clutter path
    doppler_offset_hz: float = 200.0
    loss_db: float = 6.0


def _runtime_estimator() -> EstimatorConfig:
    """Per-epoch decomposition profile: the warm start / algebraic init do
    the heavy lifting, so few sweeps and a single fallback restart suffice."""
    return EstimatorConfig(max_iter=250, tol=1e-7, restarts=1, kappa_trust_m=25.0)


@dataclass
class Scenario:
    tunnel: TunnelSpec
    anchor: AnchorSpec
    panels: list
    trajectory: TrajectoryConfig
    grid: GridSpec
    clock: ClockModel = ClockModel()
    filter_config: FilterConfig = field(default_factory=FilterConfig)
    estimator: EstimatorConfig = field(default_factory=_runtime_estimator)
    clutter: ClutterConfig = field(default_factory=ClutterConfig)
    ego_input_noise: bool = True  # corrupt reported speed/heading with the filter sigmas
    seed: int = 1

    def panels_for_run(self, rrm_enabled: bool = True) -> list:
        if rrm_enabled:
            return list(self.panels)
        return [p for p in self.panels if p.kind != "rrm"]

    def samples(self):
        t = self.trajectory
        return gen_trajectory(
            t.kind,
            self.tunnel,
            t.speed_mps,
            t.epoch_s,
            start=t.start,
            epochs=t.epochs,
            heading_deg=t.heading_deg,
            amplitude=t.amplitude,
            period_m=t.period_m,
        )


def _default_panels(tunnel: TunnelSpec) -> list:
    mid = tunnel.length / 2.0
    return [
        Panel(id=1, center=[mid, 0.0, tunnel.height / 2], unit_normal=[0, 1, 0],
              half_extents=(tunnel.length / 2, tunnel.height / 2),
              reflection_loss_db=10.0, kind="wall"),
        Panel(id=2, center=[mid, tunnel.width, tunnel.height / 2], unit_normal=[0, -1, 0],
              half_extents=(tunnel.length / 2, tunnel.height / 2),
              reflection_loss_db=10.0, kind="wall"),
        Panel(id=3, center=[mid, tunnel.width / 2, tunnel.height], unit_normal=[0, 0, -1],
              half_extents=(tunnel.length / 2, tunnel.width / 2),
              reflection_loss_db=12.0, kind="ceiling"),
    ]


def _default_rrms() -> list:
    """Four radio-reflective markings near the driving lane, placed so their
    specular windows fall midway along the approach: two flush on the near
    wall (they locally override the wall's reflection loss when the
    specular point crosses them) and two tilted 55 deg at the
    wall/sidewalk junction."""
    tilt = math.radians(55.0)
    n_incl = [0.0, math.sin(tilt), math.cos(tilt)]
    return [
        Panel(id=11, center=[32.0, 0.0, 2.33], unit_normal=[0, 1, 0],
              half_extents=(1.6, 0.7), reflection_loss_db=1.0, kind="rrm"),
        Panel(id=12, center=[42.0, 0.0, 2.33], unit_normal=[0, 1, 0],
              half_extents=(1.6, 0.7), reflection_loss_db=1.0, kind="rrm"),
        Panel(id=13, center=[30.0, 0.3, 0.3], unit_normal=n_incl,
              half_extents=(2.0, 0.9), reflection_loss_db=1.0, kind="rrm"),
        Panel(id=14, center=[40.0, 0.3, 0.3], unit_normal=n_incl,
              half_extents=(2.0, 0.9), reflection_loss_db=1.0, kind="rrm"),
    ]


def _default_grid(n_antennas: int) -> GridSpec:
    # comb-8 pilots decimated by 4 at the receiver (full sweep retained),
    # one pilot symbol per slot over 12 consecutive slots
    return GridSpec.from_bandwidth(
        n_antennas,
        f_c=5.9e9,
        bandwidth_hz=100e6,
        subcarrier_hz=30e3,
        comb=32,
        n_t=12,
        symbol_period_s=0.5e-3,
    )


def _tuned_filter() -> FilterConfig:
    """Measurement sigmas matched to this simulator's front-end noise
    (angles come out far cleaner than the default assumption, ranges a bit
    worse at long distance); process parameters keep their defaults."""
    return FilterConfig(
        sigma_phi=math.radians(0.8),
        sigma_psi=math.radians(0.8),
        sigma_kappa=5.0,
        sigma_kappa_vue=25.0,
        kappa_range_ref=25.0,
        kappa_sigma_floor=1.0,
        sigma_delta_d=0.5,
        sigma_init=0.5,  # GNSS/odometry-grade open-sky fix at the portal
        sigma_init_z=0.1,
        miss_inflation_m=0.3,
        miss_inflation_grace=2,
    )


def straight_scenario(seed: int = 1) -> Scenario:
    tunnel = TunnelSpec(100.0, 10.0, 5.0)
    anchor = AnchorSpec(
        position=[50.0, 3.0, 4.0],
        orientations=((0.0, -30.0), (180.0, -30.0)),
        rows=10,
        cols=10,
        spacing=SPEED_OF_LIGHT / 5.9e9 / 2.0,
    )
    return Scenario(
        tunnel=tunnel,
        anchor=anchor,
        panels=_default_panels(tunnel) + _default_rrms(),
        trajectory=TrajectoryConfig(kind="straight", start=(20.0, 1.5, 1.5)),
        grid=_default_grid(anchor.n_elements),
        filter_config=_tuned_filter(),
        seed=seed,
    )


def slalom_scenario(seed: int = 1) -> Scenario:
    base = straight_scenario(seed)
    return replace(
        base,
        trajectory=TrajectoryConfig(kind="slalom", start=(20.0, 1.7, 1.5),
                                    amplitude=1.2, period_m=40.0),
    )


# ---------------------------------------------------------------------------
# TOML loading


def _get(table: dict, key: str, expected: type, where: str):
    if key not in table:
        raise ConfigError(f"missing key '{key}' in [{where}]")
    value = table[key]
    if expected is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, expected):
        raise ConfigError(f"key '{key}' in [{where}] should be {expected.__name__}")
    return value


def load_scenario(path) -> Scenario:
    """Parse a scenario TOML file; raises ConfigError with the offending
    section/key on schema violations."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"scenario file {path}: {exc}")

    t = raw.get("tunnel", {})
    tunnel = TunnelSpec(
        length=float(t.get("length", 100.0)),
        width=float(t.get("width", 10.0)),
        height=float(t.get("height", 5.0)),
    )

    a = raw.get("anchor", {})
    if "position" not in a:
        raise ConfigError("missing key 'position' in [anchor]")
    orientations = tuple(tuple(o) for o in a.get("orientations", [[0.0, 0.0]]))
    f_c = float(raw.get("radio", {}).get("carrier_hz", 5.9e9))
    anchor = AnchorSpec(
        position=a["position"],
        orientations=orientations,
        rows=int(a.get("rows", 10)),
        cols=int(a.get("cols", 10)),
        spacing=float(a.get("spacing", SPEED_OF_LIGHT / f_c / 2.0)),
    )

    r = raw.get("radio", {})
    grid = GridSpec.from_bandwidth(
        anchor.n_elements,
        f_c=f_c,
        bandwidth_hz=float(r.get("bandwidth_hz", 100e6)),
        subcarrier_hz=float(r.get("subcarrier_hz", 30e3)),
        comb=int(r.get("comb", 32)),
        n_t=int(r.get("n_symbols", 12)),
        n_f=r.get("n_subcarriers"),
        symbol_period_s=r.get("symbol_period_s", 0.5e-3),
        tx_power_dbm=float(r.get("tx_power_dbm", 23.0)),
        noise_figure_db=float(r.get("noise_figure_db", 5.0)),
        antenna_temp_k=float(r.get("antenna_temp_k", 298.0)),
    )

    c = raw.get("clock", {})
    clock = ClockModel(
        sigma=float(c.get("sigma_s", 50e-9)),
        support=tuple(c.get("support_s", (-100e-9, 100e-9))),
    )

    tr = raw.get("trajectory", {})
    trajectory = TrajectoryConfig(
        kind=str(tr.get("kind", "straight")),
        start=tuple(_get(tr, "start", list, "trajectory")),
        speed_mps=_get(tr, "speed_mps", float, "trajectory"),
        epoch_s=float(tr.get("epoch_s", 0.025)),
        epochs=int(tr.get("epochs", 100)),
        heading_deg=float(tr.get("heading_deg", 0.0)),
        amplitude=float(tr.get("amplitude", 1.2)),
        period_m=float(tr.get("period_m", 40.0)),
    )

    panels = []
    for i, p in enumerate(raw.get("panels", [])):
        where = f"panels[{i}]"
        panels.append(
            Panel(
                id=int(p.get("id", i + 1)),
                center=_get(p, "center", list, where),
                unit_normal=_get(p, "normal", list, where),
                half_extents=tuple(_get(p, "half_extents", list, where)),
                reflection_loss_db=float(p.get("reflection_loss_db", 3.0)),
                kind=str(p.get("kind", "wall")),
            )
        )
    if not panels:
        panels = _default_panels(tunnel) + _default_rrms()

    f = raw.get("filter", {})
    filter_config = FilterConfig(
        gate_probability=float(f.get("gate_probability", 0.99)),
        max_misses=int(f.get("max_misses", 1)),
        los_ratio_gamma=float(f.get("los_ratio_gamma", 0.2)),
        sigma_phi=math.radians(float(f.get("sigma_phi_deg", 2.0))),
        sigma_psi=math.radians(float(f.get("sigma_psi_deg", 2.0))),
        sigma_kappa=float(f.get("sigma_kappa_m", 1.5)),
        sigma_delta_d=float(f.get("sigma_delta_d_m", 1.5)),
        sigma_speed=float(f.get("sigma_speed_mps", 0.2)),
        sigma_heading=math.radians(float(f.get("sigma_heading_deg", 1.0))),
        sigma_init=float(f.get("sigma_init_m", 10.0)),
        sigma_vue_walk=float(f.get("sigma_vue_walk_m", 0.1)),
        z_process_var=float(f.get("z_process_var_m2", 1e-4)),
        doppler_tol=float(f.get("doppler_tol_mps", 1.0)),
    )

    e = raw.get("estimator", {})
    estimator = EstimatorConfig(
        max_iter=int(e.get("max_iter", 250)),
        tol=float(e.get("tol", 1e-7)),
        restarts=int(e.get("restarts", 1)),
        seed=int(e.get("seed", 0)),
        kappa_trust_m=e.get("kappa_trust_m", 25.0),
    )

    cl = raw.get("clutter", {})
    clutter = ClutterConfig(
        probability=float(cl.get("probability", 0.0)),
        doppler_offset_hz=float(cl.get("doppler_offset_hz", 200.0)),
        loss_db=float(cl.get("loss_db", 6.0)),
    )

    return Scenario(
        tunnel=tunnel,
        anchor=anchor,
        panels=panels,
        trajectory=trajectory,
        grid=grid,
        clock=clock,
        filter_config=filter_config,
        estimator=estimator,
        clutter=clutter,
        ego_input_noise=bool(raw.get("ego_input_noise", True)),
        seed=int(raw.get("seed", 1)),
    )
