"""Transmission-phase secure beamforming with a global monotonic search.

After the probing phase has narrowed the eavesdropper's angle to a halfwidth,
the remaining slot carries user data plus artificial noise (AN).  The design
problem maximizes the sum of user rates subject to a per-user cap on what the
eavesdropper can decode, robust over the residual angle/distance/reflectivity
uncertainty, a total power budget, and an L1 shape constraint keeping the AN
usable as a probing waveform.

The rate objective is monotone in the per-user SINR targets, so the search
runs over the K-dimensional target space: a shrinking union of boxes (a
"polyblock") encloses the feasible target region, and each step projects the
most promising vertex onto the feasible boundary by bisecting a semidefinite
feasibility oracle along the ray to the origin.  The oracle itself maximizes
a common SINR slack, which makes it solvable even at unreachable targets
(feasibility is then just the sign of the slack) and yields interior points
whose achieved SINRs ("witnesses") tighten the incumbent for free.

Robust leakage handling: with ``M_k = W_k - cbar Z`` (signal covariance minus
the scaled AN covariance), the cap is equivalent to

    a(dth)^H M_k a(dth) <= cbar * noise_E * d^2 / beta   for all |dth|, |dd|

and is split through a slack level per user: a first certificate bounds the
left side over the angle interval using the first-order steering expansion,
a second bounds the level against the worst (closest) distance.  Both are
lossless one-constraint S-procedure certificates.

Scaling note: the physical leakage level ``cbar * noise_E * dbar^2 / beta``
is around 1e-8 W at the default geometry, far below an interior-point
solver's feasibility resolution on an O(1) program.  Both certificates are
therefore posed in units of that level (a congruence rescaling of the LMIs,
so the feasible set is unchanged), which keeps every LMI entry O(1) at the
solution.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import conic
from .model import (
    ChannelRealization,
    ScenarioConfig,
    ideal_beam_pattern,
    sector_grid,
    steering_taylor,
    steering_vector,
)

__all__ = [
    "SecureContext",
    "SecureSolution",
    "PolyblockState",
    "LeakageReport",
    "utopia_vertex",
    "build_feasibility_program",
    "project_vertex",
    "polyblock_optimize",
    "extract_beamformers",
    "rank_one_ratio",
    "leakage_grid",
    "verify_robust_leakage",
]


# ---------------------------------------------------------------------------
# context: precomputed data + compiled feasibility oracle


def _leakage_cap_bits(config: ScenarioConfig, sensing_time: float) -> float:
    """Per-user leakage cap in bits, inflated by the probing/transmit split."""
    if not 0.0 <= sensing_time < config.total_slot:
        raise ValueError("sensing_time must lie in [0, total_slot)")
    return config.leakage_cap * config.total_slot / (config.total_slot - sensing_time)


def utopia_vertex(realization: ChannelRealization, config: ScenarioConfig) -> np.ndarray:
    """Componentwise unbeatable SINR+1 point: full power, no interference."""
    gains = np.sum(np.abs(realization.user_channels) ** 2, axis=1)
    return 1.0 + gains * config.power_budget / config.noise_user


@dataclass
class _OracleResult:
    feasible: bool
    slack: float
    witness: Optional[Dict[str, np.ndarray]]  # W_0..W_{K-1}, Z (physical units)
    solver_status: str = ""


class SecureContext:
    """Everything fixed while searching over SINR targets.

    Holds the channel data, the leakage-cap constants and the compiled
    feasibility oracle (targets enter as solver parameters, so repeated
    oracle calls skip construction entirely).
    """

    def __init__(self, config: ScenarioConfig, realization: ChannelRealization,
                 halfwidth: float, sensing_time: float, use_an: bool = True,
                 cap_margin_bits: float = 0.0):
        if not 0.0 < halfwidth < np.pi / 2:
            raise ValueError("halfwidth must lie in (0, pi/2)")
        self.config = config
        self.realization = realization
        self.halfwidth = float(halfwidth)
        self.sensing_time = float(sensing_time)
        self.use_an = use_an

        self.cap_bits = _leakage_cap_bits(config, sensing_time)
        self.cap_ratio = 2.0 ** self.cap_bits - 1.0

        n, k = config.n_antennas, config.n_users
        self.n_users = k
        self.channel_gains = np.array(
            [np.outer(g, g.conj()) / config.noise_user for g in realization.user_channels])
        self.utopia = utopia_vertex(realization, config)
        self._oracle_count = 0
        self._bound_skips = 0

        program = build_feasibility_program(
            1.0, np.ones(k), halfwidth, sensing_time, config, realization,
            use_an=use_an, targets_as_params=True, cap_margin_bits=cap_margin_bits)
        self._param_names = [f"target{i}" for i in range(k)]
        self.oracle_solver = conic.ParametricSolver(
            program, interior_tol=config.conv_tol_interior)

    @property
    def oracle_calls(self) -> int:
        return self._oracle_count

    @property
    def sdp_solves(self) -> int:
        return self.oracle_solver.solve_count

    def _power_lower_bound(self, targets: np.ndarray) -> float:
        """Transmit power provably needed to meet ``targets``.

        Each user's signal covariance must carry at least
        (target-1) * noise / ||g||^2 watts even with zero interference, since
        Tr(G W) <= ||g||^2/noise * Tr(W).  Exceeding the budget certifies
        infeasibility without touching the solver.
        """
        return float(np.sum((targets - 1.0) * self.config.power_budget
                            / (self.utopia - 1.0)))

    def oracle(self, targets: np.ndarray) -> _OracleResult:
        """Max-slack feasibility probe at a vector of SINR+1 targets.

        Low-accuracy solves still decide feasibility by the slack's sign --
        treating them as infeasible would wrongly excise feasible region from
        the outer search -- but their witness is withheld so every reported
        design comes from a fully converged solve.
        """
        targets = np.asarray(targets, dtype=float)
        self._oracle_count += 1
        if self._power_lower_bound(targets) > self.config.power_budget:
            self._bound_skips += 1
            return _OracleResult(False, -np.inf, None, "power_bound")
        status = self.oracle_solver.solve(dict(zip(self._param_names, targets)))
        if status.status == conic.INACCURATE and status.variables is not None:
            slack = float(status.variables["slack"])
            return _OracleResult(slack >= 0.0, slack, None, status.solver_status)
        if not status.ok:
            return _OracleResult(False, -np.inf, None, status.solver_status)
        v = status.variables
        k = self.n_users
        witness = {f"W{i}": v[f"W{i}"] for i in range(k)}
        witness["Z"] = v["Z"] if self.use_an else np.zeros_like(witness["W0"])
        witness["pattern_scale"] = float(v.get("pattern_scale", 0.0))
        witness["levels"] = np.array([v[f"level{i}"] for i in range(k)])
        witness["angle_mults"] = np.array([v[f"angle_mult{i}"] for i in range(k)])
        witness["dist_mults"] = np.array([v[f"dist_mult{i}"] for i in range(k)])
        return _OracleResult(float(v["slack"]) >= 0.0, float(v["slack"]), witness,
                             status.solver_status)

    def achieved_targets(self, witness: Dict[str, np.ndarray]) -> np.ndarray:
        """SINR+1 actually delivered by a witness (its exact feasible point)."""
        k = self.n_users
        Z = witness["Z"]
        out = np.empty(k)
        for i in range(k):
            G = self.channel_gains[i]
            own = np.trace(G @ witness[f"W{i}"]).real
            other = sum(np.trace(G @ witness[f"W{j}"]).real for j in range(k) if j != i)
            denom = other + np.trace(G @ Z).real + 1.0
            out[i] = 1.0 + max(own, 0.0) / max(denom, 1.0)
        return out


def _rate(targets: np.ndarray) -> float:
    """Sum rate at a SINR+1 vector, clamped below at the zero-rate point."""
    return float(np.sum(np.log2(np.maximum(targets, 1.0))))


def build_feasibility_program(varpi: float, target: np.ndarray, halfwidth: float,
                              sensing_time: float, config: ScenarioConfig,
                              realization: ChannelRealization,
                              use_an: bool = True,
                              targets_as_params: bool = False,
                              cap_margin_bits: float = 0.0) -> conic.ConicProgram:
    """Max-slack program deciding whether SINR+1 targets ``varpi * target`` are jointly achievable.

    Structure: power budget, AN beam-shape L1 constraint (dropped when
    ``use_an`` is false), two leakage certificates per user (angle interval,
    then distance interval), and one slack-loaded SINR row per user.  The
    program always admits the zero-power point, so feasibility of the targets
    is exactly ``optimal slack >= 0``.

    With ``targets_as_params`` the per-user targets become named solver
    parameters ``target0..target{K-1}`` (initialized to ``varpi * target``),
    which lets a compiled instance be re-solved along the whole ray.
    ``cap_margin_bits`` tightens the leakage cap used in the build (never the
    reported one) so solver-precision slack cannot surface as a cap breach.
    """
    cfg, real = config, realization
    n, k = cfg.n_antennas, cfg.n_users
    if np.any(np.asarray(target) < 1.0):
        raise ValueError("targets must be >= 1 componentwise")
    if not 0.0 <= varpi <= 1.0:
        raise ValueError("varpi must lie in [0, 1]")

    cap_bits = _leakage_cap_bits(cfg, sensing_time) - cap_margin_bits
    if cap_bits <= 0:
        raise ValueError("cap margin leaves no leakage budget")
    cap_ratio = 2.0 ** cap_bits - 1.0
    d_bar = real.eve_distance_nominal
    level_scale = cap_ratio * cfg.noise_eve * d_bar ** 2 / cfg.eve_ref_gain
    dist_ratio = cfg.distance_bound / d_bar
    a0, a1 = steering_taylor(real.eve_aod_nominal, n, cfg.antenna_spacing)
    gains = [np.outer(g, g.conj()) / cfg.noise_user for g in real.user_channels]
    utopia = utopia_vertex(real, cfg)

    p = conic.ConicProgram()
    for i in range(k):
        p.add_psd_var(f"W{i}", n)
    if use_an:
        p.add_psd_var("Z", n)
        p.add_scalar_var("pattern_scale", lower=0.0)
    p.add_scalar_var("slack")
    for i in range(k):
        p.add_scalar_var(f"level{i}", lower=0.0)
        p.add_scalar_var(f"angle_mult{i}", lower=0.0)
        p.add_scalar_var(f"dist_mult{i}", lower=0.0)
    if targets_as_params:
        for i in range(k):
            p.add_param(f"target{i}", float(varpi * target[i]))

    # total transmit power
    total = conic.AffExpr()
    for i in range(k):
        total = total + conic.trace_term(f"W{i}", np.eye(n))
    if use_an:
        total = total + conic.trace_term("Z", np.eye(n))
    p.add_linear(total + conic.aff(-cfg.power_budget), label="power")

    # AN beam shape over the refined window
    if use_an:
        grid = sector_grid(cfg)
        pattern = ideal_beam_pattern(real.eve_aod_nominal, halfwidth, grid, phase="II")
        window = pattern.values.astype(bool)
        if not window.any():
            # a window narrower than the grid spacing still needs one
            # on-window sample; an all-zero indicator would force the AN to
            # vanish everywhere (and drop pattern_scale from the program)
            window[int(np.argmin(np.abs(grid - real.eve_aod_nominal)))] = True
        exprs = []
        for ang, mask in zip(grid, window):
            a = steering_vector(ang, n, cfg.antenna_spacing)
            e = conic.trace_term("Z", -np.outer(a, a.conj()))
            if mask:
                e = e + conic.scalar_term("pattern_scale")
            exprs.append(e)
        conic.lower_absolute_sum(p, exprs, cfg.pattern_tol_ii, label="an_shape")

    # leakage certificates; the level variable counts leakage in units of
    # level_scale, and the angle block is congruence-scaled by diag(psi, 1)
    # so the two steering coefficient matrices have comparable norms
    psi2 = halfwidth ** 2

    def m_term(i: int, coeff: np.ndarray) -> conic.AffExpr:
        # quadratic-form value of M_i = W_i - cap_ratio * Z with coefficient matrix
        e = conic.trace_term(f"W{i}", coeff)
        if use_an:
            e = e + conic.trace_term("Z", -cap_ratio * coeff)
        return e

    q11 = np.outer(a1, a1.conj()) * psi2
    q10 = np.outer(a0, a1.conj()) * halfwidth  # Tr(q10 M) = a1^H M a0
    q00 = np.outer(a0, a0.conj())
    for i in range(k):
        # angle certificate (S-procedure over |dth| <= halfwidth for the
        # first-order steering model), with kappa := mult * psi^2:
        # [[kappa - a1Ma1, -a1Ma0], [., scale*level - kappa - a0Ma0]] >= 0
        p.add_lmi(2, {
            (0, 0): conic.scalar_term(f"angle_mult{i}") + m_term(i, -q11),
            (0, 1): m_term(i, -q10),
            (1, 1): (conic.scalar_term(f"level{i}", level_scale)
                     + conic.scalar_term(f"angle_mult{i}", -1.0)
                     + m_term(i, -q00)),
        }, label=f"angle_leak{i}")
        # distance certificate: level <= (1 + x/d_bar)^2 for all |x| <= bound
        p.add_lmi(2, {
            (0, 0): conic.aff(1.0) + conic.scalar_term(f"dist_mult{i}"),
            (0, 1): conic.aff(1.0),
            (1, 1): (conic.aff(1.0) + conic.scalar_term(f"level{i}", -1.0)
                     + conic.scalar_term(f"dist_mult{i}", -dist_ratio ** 2)),
        }, label=f"dist_leak{i}")

    # SINR rows: achieved >= target, loaded with the common slack; each row
    # is scaled by 1/utopia_k so coefficients stay O(1), which also makes the
    # slack a utopia-relative margin shared uniformly across users
    for i in range(k):
        G = gains[i]
        scale = 1.0 / utopia[i]
        row = conic.scalar_term("slack") + conic.aff(-scale)
        row = row + conic.trace_term(f"W{i}", -scale * G)
        interferers = [conic.trace_term(f"W{j}", scale * G) for j in range(k) if j != i]
        terms = interferers + ([conic.trace_term("Z", scale * G)] if use_an else [])
        if targets_as_params:
            for t in terms:
                row = row + conic.AffExpr(
                    terms=[conic.Term(t.terms[0].var, t.terms[0].coeff, f"target{i}")])
                row = row + t.scaled(-1.0)
            row = row + conic.AffExpr(const_params=[(scale, f"target{i}")])
        else:
            mu = float(varpi * target[i])
            for t in terms:
                row = row + t.scaled(mu - 1.0)
            row = row + conic.aff(scale * mu)
        p.add_linear(row, label=f"sinr{i}")

    p.set_objective("max", conic.scalar_term("slack"))
    return p


# ---------------------------------------------------------------------------
# ray projection by bisection


@dataclass
class ProjectionResult:
    point: np.ndarray              # ratio * vertex (unclamped)
    ratio: float                   # largest ratio certified feasible
    calls: int                     # oracle invocations used
    witness: Optional[Dict[str, np.ndarray]]
    achieved: Optional[np.ndarray]  # witness SINR+1 vector (>= clamped point)
    rate: float                    # sum rate at the clamped projection point
    partial: bool = False          # bisection stopped early (dominated ray)
    hi_ratio: float = 1.0          # smallest ratio certified infeasible


def project_vertex(vertex: np.ndarray, context: SecureContext,
                   warm_ratio: float = 0.0,
                   tol: Optional[float] = None,
                   stop_rate: Optional[float] = None) -> ProjectionResult:
    """Intersect the ray through ``vertex`` with the feasible boundary.

    Bisection over the scaling ratio in [0, 1]: the all-zero transmit point
    makes ratio 0 feasible, and feasibility is monotone along the ray.  The
    first oracle call tests the vertex itself; the interval then halves until
    its width is below ``tol``, so the total call count never exceeds
    ceil(log2(1/tol)) + 1 and the returned ratio is feasible while
    ratio + tol is not (when below 1).

    ``warm_ratio`` marks a ratio already known feasible (inherited from a
    parent vertex); it narrows the initial interval without an oracle call.

    ``stop_rate`` aborts refinement once the rate at the upper bracket can no
    longer exceed it: the returned ratio is still certified feasible, only
    less sharp, and the result is flagged ``partial``.  Callers holding an
    incumbent use this to stop polishing rays that cannot win.
    """
    cfg = context.config
    tol = cfg.conv_tol_bisect if tol is None else tol
    vertex = np.asarray(vertex, dtype=float)
    if np.any(vertex < 1.0):
        raise ValueError("vertex must be >= 1 componentwise")
    budget = int(np.ceil(np.log2(1.0 / tol))) + 1

    calls = 0
    best_witness: Optional[Dict[str, np.ndarray]] = None
    best_achieved: Optional[np.ndarray] = None

    def probe(ratio: float) -> bool:
        nonlocal calls, best_witness, best_achieved
        calls += 1
        res = context.oracle(np.maximum(ratio * vertex, 1.0))
        if res.feasible and res.witness is not None:
            ach = context.achieved_targets(res.witness)
            if best_achieved is None or _rate(ach) > _rate(best_achieved):
                best_witness, best_achieved = res.witness, ach
        return res.feasible

    if probe(1.0):
        return ProjectionResult(vertex.copy(), 1.0, calls, best_witness,
                                best_achieved, _rate(vertex))

    lo, hi = min(float(warm_ratio), 1.0), 1.0
    partial = False
    while hi - lo > tol and calls < budget:
        if stop_rate is not None and _rate(np.maximum(hi * vertex, 1.0)) <= stop_rate:
            partial = True
            break
        mid = 0.5 * (lo + hi)
        if probe(mid):
            lo = mid
        else:
            hi = mid
    point = lo * vertex
    return ProjectionResult(point, lo, calls, best_witness, best_achieved,
                            _rate(np.maximum(point, 1.0)), partial, hi)


# ---------------------------------------------------------------------------
# polyblock outer approximation


@dataclass
class PolyblockState:
    """Search state: vertex set, incumbent, and per-iteration trace."""

    vertex_set: List[np.ndarray] = field(default_factory=list)
    best_vertex: Optional[np.ndarray] = None
    best_projection: Optional[np.ndarray] = None
    iteration: int = 0
    gap: float = np.inf
    trace: List[dict] = field(default_factory=list)
    pruned: bool = False


@dataclass(frozen=True)
class SecureSolution:
    """Solved transmission-phase design."""

    signal_covs: np.ndarray        # (K, N, N) rank-one PSD
    beamformers: np.ndarray        # (K, N) extracted vectors
    an_cov: np.ndarray             # (N, N) PSD artificial-noise covariance
    sinr_targets: np.ndarray       # (K,) SINR+1 delivered
    sum_rate: float                # time-weighted bits/s/Hz
    inner_rate: float              # un-weighted sum of log2(sinr_targets)
    sensing_time: float
    halfwidth: float
    cap_bits: float                # per-user leakage cap after time inflation
    pattern_scale: float           # AN shape amplitude (0 without AN)
    leakage_levels: np.ndarray     # (K,) certified leakage level per user,
    #                                in units of the nominal-distance cap
    angle_multipliers: np.ndarray  # (K,) angle-certificate multipliers
    distance_multipliers: np.ndarray  # (K,) distance-certificate multipliers
    witness_rank_ratios: np.ndarray  # (K,) second/first eigenvalue ratio of
    #                                  the solver covariances before repair
    iterations: int
    oracle_calls: int
    converged: bool
    gap: float
    stop_reason: str
    trace: Tuple[dict, ...]


def _vertex_key(v: np.ndarray) -> tuple:
    return tuple(np.round(v / 1e-9).astype(np.int64))


def polyblock_optimize(context: SecureContext, max_iterations: int = 500,
                       max_vertices: int = 10_000, certify: bool = True,
                       stagnation_window: Optional[int] = None) -> SecureSolution:
    """Globally maximize the sum rate over achievable SINR targets.

    Classic monotonic outer approximation: start from the utopia box, project
    the most promising vertex (largest projected rate) onto the feasible
    boundary, and replace it with K children that shave off the infeasible
    corner.  Projections are memoized per vertex; vertices are only projected
    when their optimistic rate could beat the current best projection, which
    keeps the per-iteration SDP count low without changing the selected
    vertex.  Terminates when the bound over the vertex set meets the
    incumbent (within tolerance), or when the selected vertex attains that
    bound and its own vertex/projection gap is below tolerance.

    ``certify=True`` additionally splits the bound-attaining vertex each
    iteration so the bound provably descends; sweep callers that only need a
    good incumbent under a fixed iteration budget can turn it off.
    ``stagnation_window`` stops early (reported as not converged) once the
    incumbent has not improved for that many consecutive iterations --
    deterministic, so repeated runs stay bitwise identical.
    """
    cfg = context.config
    eps = cfg.conv_tol_polyblock
    state = PolyblockState()
    utopia = np.maximum(context.utopia, 1.0)

    # memo: vertex key -> ProjectionResult
    memo: Dict[tuple, ProjectionResult] = {}
    # warm feasible ratio inherited by children of each projected vertex
    warm: Dict[tuple, float] = {}

    incumbent_rate = 0.0
    incumbent_witness: Optional[Dict[str, np.ndarray]] = None

    # reduction pass: bisect each corner ray (one target raised, the rest at
    # the floor) for a certified per-user cap -- a feasible point above the
    # cap would dominate the corner ray's infeasible bracket end.  Clipping
    # the start box to the caps loses no feasible point and spares the main
    # loop many near-hopeless splits; the corner witnesses also seed the
    # incumbent.
    caps = utopia.copy()
    for i in range(context.n_users):
        if utopia[i] <= 1.0 + 1e-9:
            continue
        corner = np.ones(context.n_users)
        corner[i] = utopia[i]
        pr = project_vertex(corner, context, tol=1e-2)
        caps[i] = max(pr.hi_ratio * utopia[i], 1.0)
        if pr.achieved is not None and _rate(pr.achieved) > incumbent_rate:
            incumbent_rate = _rate(pr.achieved)
            incumbent_witness = pr.witness
    root = np.minimum(utopia, caps)
    state.vertex_set = [root]
    warm[_vertex_key(root)] = 0.0

    def project(v: np.ndarray) -> ProjectionResult:
        nonlocal incumbent_rate, incumbent_witness
        key = _vertex_key(v)
        if key not in memo:
            # rays whose remaining bracket cannot beat the incumbent are not
            # worth polishing; a partial result still yields a feasible cut
            pr = project_vertex(v, context, warm_ratio=warm.get(key, 0.0),
                                stop_rate=incumbent_rate + eps)
            memo[key] = pr
            if pr.achieved is not None and _rate(pr.achieved) > incumbent_rate:
                incumbent_rate = _rate(pr.achieved)
                incumbent_witness = pr.witness
        return memo[key]

    converged = False
    stop_reason = "iterations"
    stale_iters = 0
    while state.iteration < max_iterations:
        state.iteration += 1
        incumbent_before = incumbent_rate
        # a vertex bounds the rate over its whole box, so boxes that cannot
        # beat the incumbent by more than the tolerance are dead
        state.vertex_set = [v for v in state.vertex_set
                            if _rate(v) > incumbent_rate + eps]
        if not state.vertex_set:
            state.gap = 0.0
            converged = True
            stop_reason = "exhausted"
            break
        # certified upper bound over the current polyblock
        upper = max(_rate(v) for v in state.vertex_set)
        if upper - incumbent_rate <= eps:
            state.gap = upper - incumbent_rate
            converged = True
            stop_reason = "bound"
            break

        # select argmax of projected rate, projecting only vertices whose
        # optimistic rate can still beat the best projected rate seen
        order = sorted(state.vertex_set, key=lambda v: (-_rate(v), tuple(v)))
        best_pr, best_v, best_rate = None, None, -np.inf
        for v in order:
            if _rate(v) <= best_rate:
                break
            pr = project(v)
            r = pr.rate
            if r > best_rate or (r == best_rate and best_v is not None
                                 and tuple(v) < tuple(best_v)):
                best_pr, best_v, best_rate = pr, v, r
        assert best_v is not None and best_pr is not None

        state.best_vertex = best_v
        state.best_projection = np.maximum(best_pr.point, 1.0)
        state.gap = _rate(best_v) - best_pr.rate
        state.trace.append(dict(iteration=state.iteration, vertex_rate=_rate(best_v),
                                projected_rate=best_pr.rate, gap=state.gap,
                                vertex_count=len(state.vertex_set),
                                upper_bound=upper, incumbent=incumbent_rate))
        # the vertex/projection gap certifies global optimality only when the
        # selected vertex also attains the bound over the whole vertex set
        if state.gap <= eps and _rate(best_v) >= upper - 1e-12:
            converged = True
            stop_reason = "gap"
            break
        if stagnation_window is not None:
            stale_iters = stale_iters + 1 if incumbent_rate <= incumbent_before \
                else 0
            if stale_iters >= stagnation_window:
                stop_reason = "stagnation"
                break

        # split the selected vertex, and (when certifying the bound) also the
        # vertex attaining it -- already projected by the selection loop --
        # so the bound provably descends even when the most promising ray
        # lies elsewhere
        split_keys = {_vertex_key(best_v)}
        splits = [(best_v, best_pr)]
        if certify:
            ub_v = order[0]
            ub_key = _vertex_key(ub_v)
            if ub_key not in split_keys:
                split_keys.add(ub_key)
                splits.append((ub_v, project(ub_v)))
        remaining = [v for v in state.vertex_set
                     if _vertex_key(v) not in split_keys]
        seen = {_vertex_key(v) for v in remaining}
        for parent, pr in splits:
            # children shave the corner above the infeasible bracket end of
            # the projection.  Cutting at the certified infeasible ratio
            # (rather than the feasible one) keeps the vertex set a true
            # outer approximation of the feasible region -- no feasible
            # point dominates an infeasible one -- so the upper-bound and
            # pruning certificates stay valid.  A coordinate already at the
            # domain floor admits no cut.
            cut = pr.hi_ratio * parent
            for i in range(context.n_users):
                new_coord = max(cut[i], 1.0)
                if new_coord >= parent[i] - 1e-12:
                    continue
                child = parent.copy()
                child[i] = new_coord
                ck = _vertex_key(child)
                if ck in seen:
                    continue
                seen.add(ck)
                warm[ck] = max(warm.get(ck, 0.0), pr.ratio)
                remaining.append(child)
        state.vertex_set = remaining
        if not state.vertex_set:
            converged = True
            state.gap = 0.0
            stop_reason = "exhausted"
            break
        if len(state.vertex_set) > max_vertices:
            state.pruned = True
            projected = [v for v in state.vertex_set if _vertex_key(v) in memo]
            projected.sort(key=lambda v: memo[_vertex_key(v)].rate)
            drop_keys = {_vertex_key(v) for v in
                         projected[:len(state.vertex_set) - max_vertices]}
            state.vertex_set = [v for v in state.vertex_set
                                if _vertex_key(v) not in drop_keys]

    if incumbent_witness is None:
        # nothing projected feasibly above zero rate: fall back to silence
        n, k = cfg.n_antennas, context.n_users
        incumbent_witness = {f"W{i}": np.zeros((n, n), dtype=complex) for i in range(k)}
        incumbent_witness["Z"] = np.zeros((n, n), dtype=complex)
        incumbent_witness["pattern_scale"] = 0.0
        for extra in ("levels", "angle_mults", "dist_mults"):
            incumbent_witness[extra] = np.zeros(k)

    return _finalize(context, incumbent_witness, state, converged, stop_reason)


def _finalize(context: SecureContext, witness: Dict[str, np.ndarray],
              state: PolyblockState, converged: bool,
              stop_reason: str) -> SecureSolution:
    """Rank-one repair, beamformer extraction and bookkeeping."""
    cfg = context.config
    k, n = context.n_users, cfg.n_antennas
    Ws = np.empty((k, n, n), dtype=complex)
    witness_ratios = np.empty(k)
    for i in range(k):
        witness_ratios[i] = rank_one_ratio(witness[f"W{i}"])
        Ws[i] = _rank_one_repair(witness[f"W{i}"], context.realization.user_channels[i])
    Z = witness["Z"]
    repaired = {f"W{i}": Ws[i] for i in range(k)}
    repaired["Z"] = Z
    achieved = context.achieved_targets(repaired)
    vecs = np.stack([extract_beamformers(Ws[i]) for i in range(k)])
    weight = 1.0 - context.sensing_time / cfg.total_slot
    inner = _rate(achieved)
    return SecureSolution(
        signal_covs=Ws,
        beamformers=vecs,
        an_cov=Z,
        sinr_targets=achieved,
        sum_rate=weight * inner,
        inner_rate=inner,
        sensing_time=context.sensing_time,
        halfwidth=context.halfwidth,
        cap_bits=context.cap_bits,
        pattern_scale=float(witness.get("pattern_scale", 0.0)),
        leakage_levels=np.asarray(witness["levels"], dtype=float),
        angle_multipliers=np.asarray(witness["angle_mults"], dtype=float),
        distance_multipliers=np.asarray(witness["dist_mults"], dtype=float),
        witness_rank_ratios=witness_ratios,
        iterations=state.iteration,
        oracle_calls=context.oracle_calls,
        converged=converged,
        gap=float(state.gap),
        stop_reason=stop_reason,
        trace=tuple(state.trace),
    )


def _rank_one_repair(W: np.ndarray, channel: np.ndarray) -> np.ndarray:
    """Replace W by the rank-one matrix delivering the same power to ``channel``.

    W g (g^H W g)^{-1} g^H W is PSD, dominated by W, preserves the user's own
    received power exactly, and never increases anyone else's interference or
    the leakage quadratic forms — so it inherits feasibility.
    """
    g = channel
    norm = np.linalg.norm(W)
    if norm < 1e-15:
        return np.zeros_like(W)
    power = (g.conj() @ W @ g).real
    if power <= 1e-15 * norm * (np.linalg.norm(g) ** 2 + 1e-30):
        return np.zeros_like(W)
    w = W @ g / np.sqrt(power)
    out = np.outer(w, w.conj())
    return (out + out.conj().T) / 2


def extract_beamformers(W: np.ndarray) -> np.ndarray:
    """Principal-component beamforming vector of a (near) rank-one covariance.

    Raises RuntimeError when the second eigenvalue exceeds 1e-3 of the first:
    that contradicts the rank-one structure the repair guarantees and would
    mean the relaxation gap is real.
    """
    W = np.asarray(W)
    lam, V = np.linalg.eigh((W + W.conj().T) / 2)
    lam = np.maximum(lam, 0.0)
    if lam[-1] <= 0.0:
        return np.zeros(W.shape[0], dtype=complex)
    if lam[-2] / lam[-1] > 1e-3:
        raise RuntimeError(
            f"covariance is not rank one (ratio {lam[-2] / lam[-1]:.2e}); "
            "relaxation gap detected")
    return np.sqrt(lam[-1]) * V[:, -1]


def rank_one_ratio(W: np.ndarray) -> float:
    """Second-to-first eigenvalue ratio; 0 for the zero matrix."""
    lam = np.linalg.eigvalsh((W + W.conj().T) / 2)
    if lam[-1] <= 1e-18:
        return 0.0
    return float(max(lam[-2], 0.0) / lam[-1])


# ---------------------------------------------------------------------------
# robust leakage verification


@dataclass(frozen=True)
class LeakageReport:
    """Grid evaluation of the eavesdropper's per-user decode rate."""

    cap_bits: float
    taylor_worst: np.ndarray   # (K,) max over the grid, first-order steering
    exact_worst: np.ndarray    # (K,) max over the grid, exact steering
    compliant: bool            # Taylor model within cap + 1e-6 for all users

    @property
    def taylor_margin(self) -> float:
        return float(self.cap_bits - self.taylor_worst.max())

    @property
    def exact_gap(self) -> float:
        """How far the exact model exceeds the cap (<= 0 means compliant)."""
        return float(self.exact_worst.max() - self.cap_bits)


def leakage_grid(signal_covs: np.ndarray, an_cov: np.ndarray, halfwidth: float,
                 eve_aod: float, eve_distance: float, config: ScenarioConfig,
                 grid_n: int = 101) -> Tuple[np.ndarray, np.ndarray]:
    """Worst per-user decode rate over the (angle, distance) uncertainty grid.

    Returns the maxima under the first-order steering model (the model the
    design's certificates cover) and under exact steering (quantifies the
    linearization gap), both in bits.
    """
    cfg = config
    n = cfg.n_antennas
    a0, a1 = steering_taylor(eve_aod, n, cfg.antenna_spacing)
    beta = cfg.eve_ref_gain

    dths = np.linspace(-halfwidth, halfwidth, grid_n)
    dds = np.linspace(-cfg.distance_bound, cfg.distance_bound, grid_n)
    taylor_dirs = a0[None, :] + dths[:, None] * a1[None, :]
    exact_dirs = np.stack([steering_vector(eve_aod + d, n, cfg.antenna_spacing)
                           for d in dths])

    k = len(signal_covs)
    taylor_worst = np.zeros(k)
    exact_worst = np.zeros(k)
    gain = beta / (eve_distance + dds) ** 2   # (grid_n,) path gains over distances
    Z = an_cov
    for i in range(k):
        W = signal_covs[i]
        for dirs, out in ((taylor_dirs, taylor_worst), (exact_dirs, exact_worst)):
            sig = np.einsum("gi,ij,gj->g", dirs.conj(), W, dirs).real
            an = np.einsum("gi,ij,gj->g", dirs.conj(), Z, dirs).real
            # outer product over (angle, distance) grid
            ratio = (gain[None, :] * sig[:, None]) / (
                gain[None, :] * an[:, None] + cfg.noise_eve)
            out[i] = np.log2(1.0 + ratio.max())
    return taylor_worst, exact_worst


def verify_robust_leakage(solution: SecureSolution, realization: ChannelRealization,
                          config: ScenarioConfig, grid_n: int = 101) -> LeakageReport:
    """Evaluate worst-case leakage over the (angle, distance) uncertainty box.

    The certificates inside the design hold for the first-order steering
    model, so that evaluation must stay under the cap everywhere (up to 1e-6);
    the exact-steering evaluation quantifies the linearization gap and is
    reported for information.
    """
    taylor_worst, exact_worst = leakage_grid(
        solution.signal_covs, solution.an_cov, solution.halfwidth,
        realization.eve_aod_nominal, realization.eve_distance_nominal,
        config, grid_n)
    compliant = bool(np.all(taylor_worst <= solution.cap_bits + 1e-6))
    return LeakageReport(cap_bits=solution.cap_bits, taylor_worst=taylor_worst,
                         exact_worst=exact_worst, compliant=compliant)
