"""Probing-phase covariance design.

During the first slot the array illuminates an uncertain reflector (the
potential eavesdropper) to estimate its angle.  This module builds and solves
the semidefinite program that picks the probing covariance: minimize a
worst-case bound on the angle-estimation error variance, subject to a total
power budget and an L1 beam-shape constraint toward the served sector (the
deviation from a flat-top template is capped at a fraction of the template's
mass, so the tolerance constrains shape, not power).

The error bound comes from the estimation-theoretic lower bound for the
angle of a point reflector observed through `gamma * H(theta)` with
`H = a a^H`:

    bound(theta, gamma, T, R) =
        noise / (2 |gamma|^2 T * S(R)),
    S(R) = Tr(dH R dH) - |Tr(H R dH)|^2 / Tr(H R H)

`S` is concave-like in the Schur sense: `S(R) >= chi` is representable as a
2x2 PSD block, and robustness over the reflectivity interval
`|gamma| in [(1-rho) g0, (1+rho) g0]` is a lossless one-constraint
S-procedure.  The solved program is expressed in the scaled variable
`q = (2 T g0^2 / noise) * eta`, which removes the slot length and the
reflectivity magnitude from the constraint data entirely: the optimal `q`
does not depend on them, so the optimal bound scales exactly like `1/T`.
`SensingSolution.at_time` exploits that to re-time a solution for free.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import conic
from .model import (
    ChannelRealization,
    ScenarioConfig,
    gamma_halfwidth,
    ideal_beam_pattern,
    sector_grid,
    steering_vector,
    target_response,
)

__all__ = [
    "SensingSolution",
    "crlb_theta",
    "build_sensing_program",
    "solve_sensing",
]


def _fisher_term(config: ScenarioConfig, R: np.ndarray, theta: float) -> float:
    """Curvature term S(R) of the angle observation model; raises if degenerate."""
    H, dH = target_response(theta, config.n_antennas, config.antenna_spacing)
    echo = np.trace(H @ R @ H).real          # Tr(H R H^H), H Hermitian
    cross = np.trace(H @ R @ dH)             # Tr(H R dH^H), dH Hermitian
    curve = np.trace(dH @ R @ dH).real
    scale = max(abs(curve), abs(echo), 1.0)
    if echo <= 1e-14 * scale:
        # no echo power at all: fall back to the pure-curvature term
        fisher = curve
    else:
        fisher = curve - abs(cross) ** 2 / echo
    if fisher <= 1e-12 * scale:
        raise ValueError("angle unidentifiable under this covariance")
    return fisher


def crlb_theta(config: ScenarioConfig, R: np.ndarray, theta: float,
               gamma_mag: float, sensing_time: float,
               noise_power: Optional[float] = None) -> float:
    """Angle-error lower bound for probing covariance R at a given reflector.

    Raises ValueError if the angle is unidentifiable under R (the curvature
    term of the observation model vanishes), since the bound is then infinite.
    """
    if sensing_time <= 0:
        raise ValueError("sensing_time must be positive")
    if gamma_mag <= 0:
        raise ValueError("gamma_mag must be positive")
    noise = config.noise_sense if noise_power is None else noise_power
    fisher = _fisher_term(config, R, theta)
    return noise / (2.0 * gamma_mag ** 2 * sensing_time * fisher)


@dataclass(frozen=True)
class SensingSolution:
    """Optimal probing covariance and its certified error bound."""

    covariance: np.ndarray        # (N, N) Hermitian PSD, Tr <= power budget
    crlb_bound: float             # certified worst-case angle variance (rad^2)
    refined_halfwidth: float      # updated angular uncertainty for phase two
    fisher_floor: float           # certified curvature level chi
    pattern_scale: float          # L1 beam-shape scaling factor
    sproc_multiplier: float       # robustness certificate multiplier
    sensing_time: float
    scaled_bound: float           # q = (2 T g0^2 / noise) * crlb_bound

    def at_time(self, sensing_time: float, config: ScenarioConfig) -> "SensingSolution":
        """Same covariance re-certified for a different slot length.

        The scaled program is slot-length free, so the optimal covariance is
        shared and the bound just rescales by the time ratio.
        """
        if sensing_time <= 0:
            raise ValueError("sensing_time must be positive")
        eta = self.crlb_bound * self.sensing_time / sensing_time
        return replace(self, sensing_time=sensing_time, crlb_bound=eta,
                       refined_halfwidth=_halfwidth(config, eta))


def _halfwidth(config: ScenarioConfig, eta: float) -> float:
    """Three-sigma angular uncertainty, never wider than the prior sector."""
    return min(config.aod_bound_initial, 3.0 * np.sqrt(eta))


def _gamma_rel_bound(config: ScenarioConfig, realization: ChannelRealization) -> float:
    """Relative reflectivity uncertainty rho with |gamma| in [(1-rho),(1+rho)]*g0."""
    rho = gamma_halfwidth(config, realization) / abs(realization.eve_gamma_nominal)
    if not 0.0 <= rho < 1.0:
        raise ValueError("reflectivity uncertainty must leave |gamma| positive")
    return rho


def build_sensing_program(config: ScenarioConfig,
                          realization: ChannelRealization) -> conic.ConicProgram:
    """Scaled probing-phase program (slot length and reflectivity scaled out).

    Variables: `cov` (PSD covariance), `fisher_floor` chi, its reciprocal
    bound `inv_floor` s with s*chi >= 1, the scaled error bound `q`, the
    beam-shape scale, and the robustness multiplier.  Minimizing `q`
    minimizes the worst-case error bound for every slot length at once.

    The beam-shape constraint is relative: the total L1 deviation from the
    flat-top template `scale * indicator` may not exceed the tolerance
    fraction of the template's own mass (`tol * scale * #window points`).
    The scale is a free variable, so the constraint fixes the *shape* of the
    transmit pattern without capping its power.
    """
    n = config.n_antennas
    theta = realization.eve_aod_nominal
    rho = _gamma_rel_bound(config, realization)

    H, dH = target_response(theta, n, config.antenna_spacing)
    curve_coeff = dH @ dH       # Tr(dH R dH^H) = Tr((dH dH) R)
    echo_coeff = H @ H
    cross_coeff = dH @ H        # Tr(H R dH^H) = Tr((dH H) R)

    grid = sector_grid(config)
    pattern = ideal_beam_pattern(theta, config.aod_bound_initial, grid, phase="I")

    p = conic.ConicProgram()
    p.add_psd_var("cov", n)
    p.add_scalar_var("fisher_floor", lower=0.0)
    p.add_scalar_var("inv_floor", lower=0.0)
    p.add_scalar_var("q", lower=0.0)
    p.add_scalar_var("pattern_scale", lower=0.0)
    if rho > 0.0:
        p.add_scalar_var("mult", lower=0.0)

    p.add_linear(conic.trace_term("cov", np.eye(n)) + conic.aff(-config.power_budget),
                 label="power")

    exprs = []
    for idx, (ang, mask) in enumerate(zip(grid, pattern.values)):
        a = steering_vector(ang, n, config.antenna_spacing)
        e = conic.trace_term("cov", -np.outer(a, a.conj()))
        if mask:
            e = e + conic.scalar_term("pattern_scale")
        exprs.append(e)
    window_mass = float(pattern.values.sum())
    conic.lower_absolute_sum(
        p, exprs,
        conic.scalar_term("pattern_scale", config.pattern_tol_i * window_mass),
        label="beam_shape")

    p.add_lmi(2, {
        (0, 0): conic.trace_term("cov", curve_coeff) + conic.scalar_term("fisher_floor", -1.0),
        (0, 1): conic.trace_term("cov", cross_coeff),
        (1, 1): conic.trace_term("cov", echo_coeff),
    }, label="curvature")

    p.add_lmi(2, {
        (0, 0): conic.scalar_term("inv_floor"),
        (0, 1): conic.aff(1.0),
        (1, 1): conic.scalar_term("fisher_floor"),
    }, label="reciprocal")

    if rho == 0.0:
        p.add_linear(conic.scalar_term("inv_floor") + conic.scalar_term("q", -1.0),
                     label="robust_bound")
    else:
        # q (1+u)^2 - s >= 0 for all |u| <= rho, as a 2x2 certificate
        p.add_lmi(2, {
            (0, 0): conic.scalar_term("q") + conic.scalar_term("mult"),
            (0, 1): conic.scalar_term("q"),
            (1, 1): (conic.scalar_term("q") + conic.scalar_term("inv_floor", -1.0)
                     + conic.scalar_term("mult", -rho ** 2)),
        }, label="robust_bound")

    p.set_objective("min", conic.scalar_term("q"))
    return p


def solve_sensing(config: ScenarioConfig, realization: ChannelRealization,
                  sensing_time: float) -> SensingSolution:
    """Solve the probing-phase design and certify the error bound.

    Raises RuntimeError when the solver cannot produce an optimal point
    (e.g. a beam-shape tolerance too tight to satisfy).
    """
    if sensing_time <= 0:
        raise ValueError("sensing_time must be positive")
    program = build_sensing_program(config, realization)
    # the bound below is re-certified from the returned covariance, so solver
    # accuracy affects optimality only, never soundness.  Large instances
    # cannot always close the strictest interior gap; retry one and two
    # notches looser (the covariance moves below the certificate's own
    # resolution) before giving up.  The solver's native regularization is
    # pinned here: the looser package default, chosen for the transmission
    # oracle, prevents clean convergence of this program.
    status = None
    for tol in (config.conv_tol_interior, 10.0 * config.conv_tol_interior,
                100.0 * config.conv_tol_interior):
        status = conic.solve(program, interior_tol=tol,
                             static_regularization_constant=1e-8)
        if status.ok:
            break
    if not status.ok:
        raise RuntimeError(f"probing-phase design failed: {status.status} "
                           f"({status.solver_status})")
    v = status.variables
    gamma_mag = abs(realization.eve_gamma_nominal)
    rho = _gamma_rel_bound(config, realization)
    # certify the bound directly from the returned covariance: the bound is
    # decreasing in |gamma|, so the exact worst case sits at the low corner.
    # This keeps the certificate independent of interior-point residuals.
    R = v["cov"]
    theta = realization.eve_aod_nominal
    eta = crlb_theta(config, R, theta, gamma_mag * (1.0 - rho), sensing_time)
    q = eta * 2.0 * sensing_time * gamma_mag ** 2 / config.noise_sense
    return SensingSolution(
        covariance=R,
        crlb_bound=eta,
        refined_halfwidth=_halfwidth(config, eta),
        fisher_floor=_fisher_term(config, R, theta),
        pattern_scale=float(v["pattern_scale"]),
        sproc_multiplier=float(v.get("mult", 0.0)) / gamma_mag ** 2,
        sensing_time=sensing_time,
        scaled_bound=q,
    )
