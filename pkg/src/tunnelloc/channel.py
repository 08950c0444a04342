"""Uplink channel synthesis on the antenna x frequency x time grid.

The channel tensor entry for antenna m, pilot subcarrier s and pilot
symbol k is

    H[m, s, k] = sum_l alpha_l * exp(+j 2 pi f_c / c * delta_{l,m})
                               * exp(-j 2 pi s df * tau_l)
                               * exp(+j 2 pi k f_d_l T0),

a sum of rank-1 terms (one per path), which is what the tensor
decomposition front-end later takes apart.  The Doppler exponent sign is
fixed to + throughout, matching the channel definition above.

Transmit power and propagation loss live entirely inside the path gains
(see raygen), so the observation step only adds thermal noise scaled from
the receiver's equivalent noise temperature.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .raygen import PathTruth
from .scene import SPEED_OF_LIGHT

BOLTZMANN = 1.380649e-23  # [J/K]


@dataclass(frozen=True)
class GridSpec:
    """Dimensions and radio constants of the pilot grid.

    ``delta_f`` is the effective pilot spacing in frequency (comb size times
    the subcarrier spacing for comb-mapped pilots) and ``t0`` the effective
    pilot symbol period.
    """

    n_antennas: int
    n_f: int
    n_t: int
    f_c: float
    delta_f: float
    t0: float
    bandwidth_hz: float
    tx_power_dbm: float = 23.0
    noise_figure_db: float = 5.0
    antenna_temp_k: float = 298.0

    def __post_init__(self):
        if min(self.n_antennas, self.n_f, self.n_t) < 1:
            raise ConfigError("grid dimensions must be at least 1")
        if min(self.f_c, self.delta_f, self.t0, self.bandwidth_hz) <= 0:
            raise ConfigError("radio constants must be positive")
        if self.delta_f * self.n_f > self.bandwidth_hz * (1 + 1e-9):
            raise ConfigError("pilot grid exceeds the signal bandwidth")

    @classmethod
    def from_bandwidth(
        cls,
        n_antennas: int,
        *,
        f_c: float = 5.9e9,
        bandwidth_hz: float = 100e6,
        subcarrier_hz: float = 30e3,
        comb: int = 8,
        n_t: int = 12,
        n_f: Optional[int] = None,
        symbol_period_s: Optional[float] = None,
        **kwargs,
    ) -> "GridSpec":
        """Comb-mapped pilot grid: delta_f = comb * subcarrier spacing and
        n_f = floor(bandwidth / delta_f) unless explicitly capped."""
        delta_f = comb * subcarrier_hz
        max_nf = int(bandwidth_hz // delta_f)
        if n_f is None:
            n_f = max_nf
        elif n_f > max_nf:
            raise ConfigError(f"n_f={n_f} exceeds bandwidth capacity {max_nf}")
        if symbol_period_s is None:
            # 14-symbol slot; slot duration scales inversely with numerology
            symbol_period_s = 1e-3 * (15e3 / subcarrier_hz) / 14.0
        return cls(
            n_antennas=n_antennas,
            n_f=n_f,
            n_t=n_t,
            f_c=f_c,
            delta_f=delta_f,
            t0=symbol_period_s,
            bandwidth_hz=bandwidth_hz,
            **kwargs,
        )

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.f_c

    @property
    def shape(self) -> tuple:
        return (self.n_antennas, self.n_f, self.n_t)

    @property
    def noise_temperature_k(self) -> float:
        """Equivalent noise temperature T_ant + 290 (F - 1), F linear."""
        f_lin = 10.0 ** (self.noise_figure_db / 10.0)
        return self.antenna_temp_k + 290.0 * (f_lin - 1.0)

    @property
    def noise_power_w(self) -> float:
        """Per-entry complex noise variance k_B * BW * T_e [W]."""
        return BOLTZMANN * self.bandwidth_hz * self.noise_temperature_k


@dataclass(frozen=True)
class ClockModel:
    """Transmitter clock bias: truncated Gaussian, hard support."""

    sigma: float = 50e-9  # [s]
    support: tuple = (-100e-9, 100e-9)

    def __post_init__(self):
        lo, hi = self.support
        if not lo < hi:
            raise ConfigError("clock support must be a nonempty interval")


def draw_clock_bias(model: ClockModel, rng: np.random.Generator) -> float:
    """One truncated-Gaussian draw by rejection; degenerate sigma gives 0."""
    if model.sigma <= 0:
        return 0.0
    lo, hi = model.support
    for _ in range(10_000):
        x = rng.normal(0.0, model.sigma)
        if lo <= x <= hi:
            return float(x)
    raise RuntimeError("clock-bias rejection sampling failed; support too narrow?")


def steering_vectors(path: PathTruth, grid: GridSpec):
    """Spatial / frequency / time steering vectors of one path.

    First element of each vector is exactly 1 (the reference antenna,
    subcarrier and symbol).
    """
    delta = np.asarray(path.per_antenna_delta, dtype=float)
    if delta.size != grid.n_antennas:
        raise ConfigError("per-antenna offset list does not match the array size")
    b_s = np.exp(2j * math.pi * grid.f_c / SPEED_OF_LIGHT * delta)
    s_idx = np.arange(grid.n_f)
    b_f = np.exp(-2j * math.pi * s_idx * grid.delta_f * path.delay)
    k_idx = np.arange(grid.n_t)
    b_t = np.exp(2j * math.pi * k_idx * path.doppler * grid.t0)
    return b_s, b_f, b_t


def synth_channel(paths: Sequence[PathTruth], grid: GridSpec) -> np.ndarray:
    """Noise-free channel tensor: rank-1 contribution per path."""
    if not paths:
        raise ConfigError("need at least one path to synthesize a channel")
    h = np.zeros(grid.shape, dtype=complex)
    for path in paths:
        b_s, b_f, b_t = steering_vectors(path, grid)
        h += path.gain * np.einsum("m,f,t->mft", b_s, b_f, b_t)
    return h


def factor_matrices(paths: Sequence[PathTruth], grid: GridSpec):
    """Stacked true steering matrices (B_s, B_f, B_t) and gains, for oracles."""
    cols = [steering_vectors(p, grid) for p in paths]
    b_s = np.stack([c[0] for c in cols], axis=1)
    b_f = np.stack([c[1] for c in cols], axis=1)
    b_t = np.stack([c[2] for c in cols], axis=1)
    gains = np.array([p.gain for p in paths])
    return b_s, b_f, b_t, gains


def pilot_tensor(grid: GridSpec, rng: np.random.Generator) -> np.ndarray:
    """Unit-modulus pseudo-random (QPSK-like) pilot tensor."""
    phases = rng.integers(0, 4, size=grid.shape) * (math.pi / 2.0) + math.pi / 4.0
    return np.exp(1j * phases)


def observe(h: np.ndarray, grid: GridSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply pilots and thermal noise, then remove the pilots again.

    Y = H * X + Z with Z circular complex Gaussian of per-entry variance
    k_B * BW * T_e; the returned estimate is Y / X = H + Z / X, whose noise
    keeps the same variance because the pilots are unit-modulus.
    """
    h = np.asarray(h)
    if h.shape != grid.shape:
        raise ConfigError(f"tensor shape {h.shape} does not match grid {grid.shape}")
    n0 = grid.noise_power_w
    if n0 == 0.0:
        return h.copy()
    x = pilot_tensor(grid, rng)
    scale = math.sqrt(n0 / 2.0)
    z = scale * (rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape))
    return (h * x + z) / x


_DUMP_HEADER = struct.Struct("<qqq")


def save_tensor(path, h: np.ndarray) -> None:
    """Write a channel tensor: 24-byte header of little-endian int64
    (M, N_f, N_t), then the entries as little-endian complex64 in C order
    (antenna-major, symbol index fastest)."""
    h = np.ascontiguousarray(h, dtype=np.complex64)
    if h.ndim != 3:
        raise ConfigError("tensor dump expects a 3-way tensor")
    with open(path, "wb") as fh:
        fh.write(_DUMP_HEADER.pack(*h.shape))
        fh.write(h.astype("<c8").tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a tensor written by save_tensor."""
    with open(path, "rb") as fh:
        header = fh.read(_DUMP_HEADER.size)
        m, n_f, n_t = _DUMP_HEADER.unpack(header)
        data = np.frombuffer(fh.read(), dtype="<c8")
    if data.size != m * n_f * n_t:
        raise ConfigError("tensor dump is truncated or corrupt")
    return data.reshape(m, n_f, n_t).astype(complex)
