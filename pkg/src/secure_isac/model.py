"""Physical-layer model: array steering, channels, uncertainty sets, beam patterns.

All angles are in radians internally (the CLI converts from degrees at the
boundary).  The transmit array is a uniform linear array with normalized
element spacing ``spacing`` (fraction of the carrier wavelength), so the
response toward angle theta is

    a(theta)[n] = exp(j * 2*pi * spacing * n * sin(theta)),   n = 0..N_T-1.

The eavesdropper link is line-of-sight with free-space reference gain
beta = (lambda_c / 4 pi)^2, i.e. h = (sqrt(beta)/d) * a(theta).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class ScenarioConfig:
    """All physical and algorithmic constants of a simulation scenario.

    Defaults reproduce the desk-scale setup: 8 antennas, 4 users, a 120-degree
    sector of a 200 m cell, -90 dBm noise, 30 dBm power budget, 1 ms slot split
    into 0.1 ms steps.  The carrier wavelength and the eavesdropper distance
    range are not pinned down by the physical setup description; the defaults
    below were calibrated so that the sensing phase produces a meaningful
    refinement of the angular uncertainty (see README).
    """

    n_antennas: int = 8
    n_users: int = 4
    antenna_spacing: float = 0.5          # element spacing / wavelength
    carrier_wavelength: float = 4.0       # m (assumption; see class docstring)
    total_slot: float = 1e-3              # s
    time_step: float = 1e-4               # s
    power_budget: float = 1.0             # W (30 dBm)
    noise_user: float = 1e-12             # W (-90 dBm)
    noise_eve: float = 1e-12              # W
    noise_sense: float = 1e-12            # W
    leakage_cap: float = 0.5              # bits/s/Hz, per user
    angle_grid_size: int = 120
    pattern_tol_i: float = 0.1
    pattern_tol_ii: float = 0.1
    aod_bound_initial: float = np.pi / 6  # rad
    gamma_bound: Optional[float] = None   # absolute |Gamma| error bound; None -> rel_bound * |Gamma|
    gamma_rel_bound: float = 0.1
    distance_bound: float = 10.0          # m
    conv_tol_polyblock: float = 1e-3
    conv_tol_bisect: float = 1e-3
    conv_tol_interior: float = 1e-8
    cell_radius: float = 200.0            # m
    pathloss_exp_user: float = 3.0
    pathloss_exp_eve: float = 2.0
    ref_pathloss_db: float = 40.0         # dB at 1 m
    sector_halfwidth: float = np.pi / 3   # rad; users/grid span +- this
    eve_distance_min: float = 20.0        # m (must exceed distance_bound)
    eve_distance_max: float = 40.0        # m

    def __post_init__(self):
        if self.n_antennas < 1 or self.n_users < 1:
            raise ValueError("n_antennas and n_users must be positive")
        for name in ("antenna_spacing", "carrier_wavelength", "total_slot",
                     "time_step", "power_budget", "noise_user", "noise_eve",
                     "noise_sense", "leakage_cap", "pattern_tol_i",
                     "pattern_tol_ii", "aod_bound_initial",
                     "distance_bound", "conv_tol_polyblock", "conv_tol_bisect",
                     "conv_tol_interior", "cell_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        # zero reflectivity uncertainty is allowed (perfectly known |Gamma|)
        if self.gamma_rel_bound < 0:
            raise ValueError("gamma_rel_bound must be nonnegative")
        if self.gamma_bound is not None and self.gamma_bound < 0:
            raise ValueError("gamma_bound must be nonnegative when given")
        if self.gamma_rel_bound >= 1.0:
            raise ValueError("gamma_rel_bound must be < 1 so |Gamma| stays bounded away from 0")
        if self.aod_bound_initial >= np.pi / 2:
            raise ValueError("aod_bound_initial must be < pi/2")
        if self.angle_grid_size < 2:
            raise ValueError("angle_grid_size must be >= 2")
        steps = self.total_slot / self.time_step
        if abs(steps - round(steps)) > 1e-9 * steps or round(steps) < 2:
            raise ValueError(
                f"time_step {self.time_step} must divide total_slot {self.total_slot} "
                "into an integer number of steps >= 2")
        if self.eve_distance_min <= self.distance_bound:
            raise ValueError("eve_distance_min must exceed distance_bound "
                             "(otherwise the true distance can reach zero)")
        if self.eve_distance_max < self.eve_distance_min:
            raise ValueError("eve_distance_max < eve_distance_min")

    @property
    def n_time_steps(self) -> int:
        """Number of ``time_step`` increments in the slot (D in the time grid)."""
        return int(round(self.total_slot / self.time_step))

    @property
    def ref_pathloss(self) -> float:
        """Linear reference path loss at 1 m (40 dB -> 1e-4)."""
        return 10.0 ** (-self.ref_pathloss_db / 10.0)

    @property
    def eve_ref_gain(self) -> float:
        """Free-space reference gain beta = (lambda_c / 4 pi)^2 of the LoS eve link."""
        return (self.carrier_wavelength / (4.0 * np.pi)) ** 2

    def time_grid(self) -> np.ndarray:
        """Candidate sensing durations d * time_step, d = 1 .. D-1."""
        d = np.arange(1, self.n_time_steps)
        return d * self.time_step

    def with_overrides(self, **kw) -> "ScenarioConfig":
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class ChannelRealization:
    """One Monte-Carlo drop: user channels plus nominal eavesdropper parameters."""

    user_channels: np.ndarray      # (K, N_T) complex
    user_distances: np.ndarray     # (K,) m, kept for diagnostics
    eve_aod_nominal: float         # rad
    eve_distance_nominal: float    # m
    eve_gamma_nominal: complex     # round-trip reflection coefficient
    rng_seed: int

    def __post_init__(self):
        g = np.asarray(self.user_channels, dtype=complex)
        if g.ndim != 2:
            raise ValueError("user_channels must be a (K, N_T) array")
        if not np.all(np.isfinite(g)):
            raise ValueError("user_channels must be finite")
        if np.any(np.linalg.norm(g, axis=1) == 0):
            raise ValueError("user_channels rows must be nonzero")
        if not (-np.pi / 2 < self.eve_aod_nominal < np.pi / 2):
            raise ValueError("eve_aod_nominal must lie in (-pi/2, pi/2)")
        if self.eve_distance_nominal <= 0:
            raise ValueError("eve_distance_nominal must be positive")
        g.setflags(write=False)
        object.__setattr__(self, "user_channels", g)
        d = np.asarray(self.user_distances, dtype=float)
        d.setflags(write=False)
        object.__setattr__(self, "user_distances", d)

    @property
    def n_users(self) -> int:
        return self.user_channels.shape[0]

    @property
    def n_antennas(self) -> int:
        return self.user_channels.shape[1]


@dataclass(frozen=True)
class UncertaintyBox:
    """Box uncertainty (AoD halfwidth, |Gamma| halfwidth, distance halfwidth)."""

    aod_halfwidth: float
    gamma_halfwidth: float
    distance_halfwidth: float

    def __post_init__(self):
        if min(self.aod_halfwidth, self.gamma_halfwidth, self.distance_halfwidth) < 0:
            raise ValueError("uncertainty halfwidths must be nonnegative")


@dataclass(frozen=True, eq=False)
class BeamPattern:
    """Ideal 0/1 beam pattern on an angular grid for phase 'I' or 'II'."""

    grid: np.ndarray     # (L,) rad, ascending
    values: np.ndarray   # (L,) entries exactly 0.0 or 1.0
    phase: str           # 'I' or 'II'

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if grid.shape != vals.shape or grid.ndim != 1:
            raise ValueError("grid and values must be matching 1-D arrays")
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ValueError("pattern values must be exactly 0 or 1")
        grid.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", vals)


def steering_vector(theta: float, n_antennas: int, spacing: float = 0.5) -> np.ndarray:
    """ULA response a(theta)[n] = exp(j 2 pi * spacing * n * sin theta)."""
    n = np.arange(n_antennas)
    return np.exp(1j * 2.0 * np.pi * spacing * n * np.sin(theta))


def steering_derivative(theta: float, n_antennas: int, spacing: float = 0.5) -> np.ndarray:
    """d a / d theta, elementwise j 2 pi * spacing * n * cos(theta) * a[n]."""
    n = np.arange(n_antennas)
    return 1j * 2.0 * np.pi * spacing * n * np.cos(theta) * steering_vector(theta, n_antennas, spacing)


def steering_taylor(theta_bar: float, n_antennas: int, spacing: float = 0.5
                    ) -> Tuple[np.ndarray, np.ndarray]:
    """First-order expansion a(theta_bar + dth) ~ a0 + a1 * dth.

    a1 is the elementwise derivative of a at theta_bar; its first entry is 0.
    """
    a0 = steering_vector(theta_bar, n_antennas, spacing)
    a1 = steering_derivative(theta_bar, n_antennas, spacing)
    return a0, a1


def eve_channel(theta: float, distance: float, wavelength: float,
                n_antennas: int, spacing: float = 0.5) -> np.ndarray:
    """LoS eavesdropper channel h = (sqrt(beta)/d) a(theta), beta = (lambda/4pi)^2."""
    if distance <= 0:
        raise ValueError("distance must be positive")
    beta = (wavelength / (4.0 * np.pi)) ** 2
    return (np.sqrt(beta) / distance) * steering_vector(theta, n_antennas, spacing)


def target_response(theta: float, n_antennas: int, spacing: float = 0.5
                    ) -> Tuple[np.ndarray, np.ndarray]:
    """Rank-one target response H = a a^H and its angular derivative.

    dH/dtheta = a' a^H + a (a')^H with a' the elementwise steering derivative;
    both returned matrices are Hermitian.
    """
    a = steering_vector(theta, n_antennas, spacing)
    ap = steering_derivative(theta, n_antennas, spacing)
    H = np.outer(a, a.conj())
    dH = np.outer(ap, a.conj()) + np.outer(a, ap.conj())
    return H, dH


def sector_grid(config: ScenarioConfig) -> np.ndarray:
    """Uniform angular grid over the served sector [-halfwidth, +halfwidth]."""
    return np.linspace(-config.sector_halfwidth, config.sector_halfwidth,
                       config.angle_grid_size)


def ideal_beam_pattern(theta_bar: float, psi: float, grid: np.ndarray,
                       phase: str = "I") -> BeamPattern:
    """Indicator pattern: 1 on grid points within +-psi of theta_bar, else 0."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or np.any(np.diff(grid) < 0):
        raise ValueError("grid must be 1-D and sorted ascending")
    values = (np.abs(grid - theta_bar) <= psi).astype(float)
    return BeamPattern(grid=grid, values=values, phase=phase)


def gamma_halfwidth(config: ScenarioConfig, realization: ChannelRealization) -> float:
    """|Gamma| uncertainty halfwidth: absolute override or rel_bound * |Gamma_nominal|."""
    if config.gamma_bound is not None:
        return config.gamma_bound
    return config.gamma_rel_bound * abs(realization.eve_gamma_nominal)


def uncertainty_box(config: ScenarioConfig, realization: ChannelRealization,
                    aod_halfwidth: Optional[float] = None) -> UncertaintyBox:
    """Assemble the uncertainty box; AoD width defaults to the initial bound."""
    psi = config.aod_bound_initial if aod_halfwidth is None else aod_halfwidth
    return UncertaintyBox(aod_halfwidth=psi,
                          gamma_halfwidth=gamma_halfwidth(config, realization),
                          distance_halfwidth=config.distance_bound)


def sample_realization(config: ScenarioConfig, seed: int) -> ChannelRealization:
    """Draw one i.i.d. channel drop, deterministic in (config, seed).

    Users are placed uniformly over the sector area (radius >= 1 m to avoid the
    path-loss singularity); small-scale fading is unit-variance circularly
    symmetric Gaussian, scaled by sqrt(beta0 * r^-alpha_user).  The
    eavesdropper nominal AoD is uniform over the sector and its distance
    uniform over [eve_distance_min, eve_distance_max]; the nominal round-trip
    coefficient has magnitude sqrt(beta)/d^2 (unit radar cross section) and a
    uniform random phase.
    """
    rng = np.random.default_rng(seed)
    K, N = config.n_users, config.n_antennas
    beta0 = config.ref_pathloss

    radii = np.empty(K)
    for k in range(K):
        r = 0.0
        while r < 1.0:  # guard: redraw users inside the 1 m exclusion disk
            r = config.cell_radius * np.sqrt(rng.uniform())
        radii[k] = r
    # placement angles do not enter the Rayleigh channel model (only the
    # distance does, through the path loss), so they are not retained

    fading = (rng.standard_normal((K, N)) + 1j * rng.standard_normal((K, N))) / np.sqrt(2.0)
    gains = np.sqrt(beta0 * radii ** (-config.pathloss_exp_user))
    g = fading * gains[:, None]

    theta_bar = rng.uniform(-config.sector_halfwidth, config.sector_halfwidth)
    d_bar = rng.uniform(config.eve_distance_min, config.eve_distance_max)
    beta = config.eve_ref_gain
    gamma_mag = np.sqrt(beta) / d_bar ** 2
    gamma = gamma_mag * np.exp(1j * rng.uniform(0.0, 2.0 * np.pi))

    return ChannelRealization(user_channels=g,
                              user_distances=radii,
                              eve_aod_nominal=theta_bar,
                              eve_distance_nominal=d_bar,
                              eve_gamma_nominal=gamma,
                              rng_seed=seed)


def config_fingerprint(config: ScenarioConfig) -> str:
    """Stable short hash of every config field (used for on-disk result keys)."""
    import hashlib
    parts = []
    for f in fields(config):
        parts.append(f"{f.name}={getattr(config, f.name)!r}")
    blob = ";".join(parts)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
