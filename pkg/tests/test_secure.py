"""Transmission-phase search: oracle contracts, projection, global optimum."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from secure_isac.model import (
    ChannelRealization,
    ScenarioConfig,
    sample_realization,
    steering_vector,
)
from secure_isac.secure import (
    LeakageReport,
    SecureContext,
    _rank_one_repair,
    extract_beamformers,
    leakage_grid,
    polyblock_optimize,
    project_vertex,
    rank_one_ratio,
    utopia_vertex,
    verify_robust_leakage,
)


def small_config(**kw):
    """Shrunk scenario so solver-backed tests stay fast."""
    base = dict(n_antennas=2, n_users=2, angle_grid_size=16)
    base.update(kw)
    return ScenarioConfig(**base)


def small_context(seed=0, halfwidth=0.05, sensing_time=5e-4, **cfg_kw):
    cfg = small_config(**cfg_kw)
    return SecureContext(cfg, sample_realization(cfg, seed),
                         halfwidth=halfwidth, sensing_time=sensing_time)


def far_eve_realization(cfg, channels, distance=1e6):
    """Hand-built drop whose eavesdropper is too far for the cap to bind."""
    g = np.asarray(channels, dtype=complex)
    return ChannelRealization(
        user_channels=g,
        user_distances=np.full(g.shape[0], 50.0),
        eve_aod_nominal=0.1,
        eve_distance_nominal=distance,
        eve_gamma_nominal=1e-9 + 0j,
        rng_seed=0,
    )


# --- utopia point and leakage cap -------------------------------------------


def test_utopia_is_full_power_no_interference():
    cfg = small_config()
    real = sample_realization(cfg, 3)
    got = utopia_vertex(real, cfg)
    expect = 1.0 + np.array(
        [np.linalg.norm(g) ** 2 for g in real.user_channels]
    ) * cfg.power_budget / cfg.noise_user
    assert got == pytest.approx(expect, rel=1e-12)


def test_cap_inflation_matches_slot_split():
    cfg = small_config()
    real = sample_realization(cfg, 0)
    for t_s in (0.0, 2e-4, 8e-4):
        ctx = SecureContext(cfg, real, halfwidth=0.05, sensing_time=t_s)
        assert ctx.cap_bits == pytest.approx(
            cfg.leakage_cap * cfg.total_slot / (cfg.total_slot - t_s), rel=1e-12)
    with pytest.raises(ValueError):
        SecureContext(cfg, real, halfwidth=0.05, sensing_time=cfg.total_slot)


# --- feasibility oracle -----------------------------------------------------


def test_oracle_feasible_at_floor_and_infeasible_past_utopia():
    ctx = small_context(seed=1)
    at_floor = ctx.oracle(np.ones(2))
    assert at_floor.feasible and at_floor.slack >= 0
    beyond = ctx.oracle(ctx.utopia * 1.5)
    assert not beyond.feasible


def test_oracle_power_bound_shortcut_certifies_without_solving():
    ctx = small_context(seed=1)
    solves_before = ctx.sdp_solves
    res = ctx.oracle(ctx.utopia * 1.5)  # needs > 1.5x the power budget
    assert not res.feasible
    assert res.solver_status == "power_bound"
    assert ctx.sdp_solves == solves_before


def test_oracle_slack_decreases_along_rays():
    ctx = small_context(seed=2)
    vertex = 1.0 + 0.9 * (ctx.utopia - 1.0)
    slacks = [ctx.oracle(np.maximum(r * vertex, 1.0)).slack
              for r in (0.05, 0.2, 0.5, 0.9)]
    finite = [s for s in slacks if np.isfinite(s)]
    assert all(a >= b - 1e-6 for a, b in zip(finite, finite[1:]))


def test_oracle_witness_meets_its_achieved_targets():
    ctx = small_context(seed=4)
    res = None
    for f in (0.3, 0.1, 0.03, 0.01):
        res = ctx.oracle(1.0 + f * (ctx.utopia - 1.0))
        if res.feasible and res.witness is not None:
            break
    assert res is not None and res.witness is not None
    achieved = ctx.achieved_targets(res.witness)
    # anything strictly inside the witness's achieved point stays feasible
    again = ctx.oracle(np.maximum(1.0 + 0.999 * (achieved - 1.0), 1.0))
    assert again.feasible


# --- ray projection ---------------------------------------------------------

_PROJ_CTX = {}


def _shared_ctx(seed):
    if seed not in _PROJ_CTX:
        _PROJ_CTX[seed] = small_context(seed=seed)
    return _PROJ_CTX[seed]


@settings(deadline=None, max_examples=10)
@given(st.integers(0, 2), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_projection_bracket_and_call_budget(seed, f0, f1):
    ctx = _shared_ctx(seed)
    cfg = ctx.config
    vertex = 1.0 + np.array([f0, f1]) * (ctx.utopia - 1.0)
    budget = int(np.ceil(np.log2(1.0 / cfg.conv_tol_bisect))) + 1
    before = ctx.oracle_calls
    pr = project_vertex(vertex, ctx)
    assert pr.calls == ctx.oracle_calls - before <= budget
    assert ctx.oracle(np.maximum(pr.ratio * vertex, 1.0)).feasible
    if pr.ratio + cfg.conv_tol_bisect < 1.0:
        probe = np.maximum((pr.ratio + cfg.conv_tol_bisect) * vertex, 1.0)
        assert not ctx.oracle(probe).feasible
        assert pr.hi_ratio - pr.ratio <= cfg.conv_tol_bisect + 1e-12


def test_projection_returns_vertex_when_feasible():
    ctx = small_context(seed=0)
    vertex = 1.0 + 1e-4 * (ctx.utopia - 1.0)
    pr = project_vertex(vertex, ctx)
    assert pr.ratio == 1.0 and pr.calls == 1
    assert pr.point == pytest.approx(vertex)


def test_projection_warm_start_is_a_floor():
    ctx = small_context(seed=0)
    vertex = ctx.utopia.copy()
    cold = project_vertex(vertex, ctx)
    warm = project_vertex(vertex, ctx, warm_ratio=cold.ratio)
    assert warm.calls <= cold.calls
    assert warm.ratio >= cold.ratio - 1e-12


def test_projection_stop_rate_aborts_with_valid_bracket():
    ctx = small_context(seed=0)
    vertex = ctx.utopia.copy()
    sharp = project_vertex(vertex, ctx)
    lazy = project_vertex(vertex, ctx, stop_rate=1e9)
    assert lazy.partial and lazy.calls < sharp.calls
    # the bracket is still certified: lo feasible, hi infeasible
    assert ctx.oracle(np.maximum(lazy.ratio * vertex, 1.0)).feasible
    assert not ctx.oracle(np.maximum(lazy.hi_ratio * vertex, 1.0)).feasible


def test_projection_rejects_vertex_below_floor():
    ctx = small_context(seed=0)
    with pytest.raises(ValueError):
        project_vertex(np.array([0.5, 2.0]), ctx)


# --- global search ----------------------------------------------------------


def test_polyblock_matches_waterfilling_on_orthogonal_channels():
    # two orthogonal single-antenna-per-user channels and an eavesdropper too
    # far to matter: the rate region is a clean power split, whose optimum is
    # the symmetric allocation in closed form
    cfg = small_config()
    c = np.sqrt(48.0 * cfg.noise_user / cfg.power_budget)
    real = far_eve_realization(cfg, [[c, 0.0], [0.0, c]])
    ctx = SecureContext(cfg, real, halfwidth=0.05, sensing_time=5e-4)
    sol = polyblock_optimize(ctx)
    expect = 2.0 * np.log2(1.0 + 24.0)  # per-user SNR 48 split evenly
    assert sol.converged
    assert sol.inner_rate == pytest.approx(expect, abs=0.05)
    assert sol.sum_rate == pytest.approx(0.5 * sol.inner_rate, rel=1e-12)


def test_polyblock_single_user_reduces_to_ray_bisection():
    cfg = small_config(n_users=1)
    real = sample_realization(cfg, 5)
    direct = project_vertex(utopia_vertex(real, cfg),
                            SecureContext(cfg, real, halfwidth=0.05,
                                          sensing_time=5e-4))
    sol = polyblock_optimize(SecureContext(cfg, real, halfwidth=0.05,
                                           sensing_time=5e-4))
    assert sol.converged
    # the 1-D optimum sits on the single ray's feasible boundary
    assert sol.inner_rate >= np.log2(max(direct.point[0], 1.0)) - 1e-6
    assert sol.inner_rate <= np.log2(max(direct.hi_ratio
                                         * utopia_vertex(real, cfg)[0], 1.0)) + 1e-6


def test_polyblock_deterministic_across_runs():
    a = polyblock_optimize(small_context(seed=3), max_iterations=25)
    b = polyblock_optimize(small_context(seed=3), max_iterations=25)
    assert a.inner_rate == b.inner_rate
    assert a.iterations == b.iterations
    assert np.array_equal(a.sinr_targets, b.sinr_targets)


def test_polyblock_trace_invariants():
    sol = polyblock_optimize(small_context(seed=3), max_iterations=40)
    uppers = [row["upper_bound"] for row in sol.trace]
    for row in sol.trace:
        # a selected vertex always dominates its own projection, and no
        # projection beats the final optimum
        assert row["vertex_rate"] >= row["projected_rate"] - 1e-9
        assert row["vertex_rate"] >= sol.inner_rate - 1e-9
        assert row["incumbent"] <= sol.inner_rate + 1e-9
    assert all(a >= b - 1e-9 for a, b in zip(uppers, uppers[1:]))
    assert sol.stop_reason in ("gap", "bound", "exhausted", "iterations")
    assert sol.converged == (sol.stop_reason != "iterations")
    if sol.stop_reason in ("gap", "bound"):
        assert sol.gap <= small_config().conv_tol_polyblock + 1e-12


def test_polyblock_stagnation_stop_reports_not_converged():
    sol = polyblock_optimize(small_context(seed=3), max_iterations=200,
                             certify=False, stagnation_window=2)
    if sol.stop_reason == "stagnation":
        assert not sol.converged
    else:
        # tiny instances may genuinely finish before stagnating
        assert sol.converged


def test_polyblock_rate_monotone_in_leakage_cap():
    rates = {}
    for cap in (0.2, 1.0):
        ctx = small_context(seed=6, leakage_cap=cap)
        rates[cap] = polyblock_optimize(ctx).inner_rate
    eps = small_config().conv_tol_polyblock
    assert rates[1.0] >= rates[0.2] - 2 * eps


def test_polyblock_rate_monotone_in_angle_uncertainty():
    rates = {}
    for psi in (0.02, 0.4):
        ctx = small_context(seed=6, halfwidth=psi)
        rates[psi] = polyblock_optimize(ctx).inner_rate
    eps = small_config().conv_tol_polyblock
    assert rates[0.02] >= rates[0.4] - 2 * eps


def test_solution_designs_are_rank_one_and_feasible():
    sol = polyblock_optimize(small_context(seed=7))
    for W, w in zip(sol.signal_covs, sol.beamformers):
        assert rank_one_ratio(W) <= 1e-10
        assert np.allclose(np.outer(w, w.conj()), W, atol=1e-9)
    total = sum(np.trace(W).real for W in sol.signal_covs) \
        + np.trace(sol.an_cov).real
    assert total <= small_config().power_budget * (1 + 1e-7)
    assert sol.inner_rate == pytest.approx(
        float(np.sum(np.log2(np.maximum(sol.sinr_targets, 1.0)))), rel=1e-12)


# --- distance certificate ---------------------------------------------------


def test_distance_certificate_scales_cap_by_worst_range():
    # single user aligned with the eavesdropper direction so the leakage cap
    # is the binding constraint; shrinking the worst-case range to
    # (1 - r) * nominal must scale the achievable SINR by (1 - r)^2.  Noise
    # levels are chosen to put the cap-bound SINR and the power-bound SINR on
    # the same order, so the ray bisection resolves both sharply.
    achieved = {}
    for bound in (1e-6, 9.0):
        cfg = small_config(n_users=1, leakage_cap=0.05, noise_eve=1e-3,
                           noise_user=2e-3, distance_bound=bound)
        a0 = steering_vector(0.1, cfg.n_antennas, cfg.antenna_spacing)
        real = far_eve_realization(cfg, [a0], distance=30.0)
        ctx = SecureContext(cfg, real, halfwidth=1e-4, sensing_time=5e-4,
                            use_an=False)
        pr = project_vertex(utopia_vertex(real, cfg), ctx, tol=1e-4)
        achieved[bound] = max(pr.point[0], 1.0) - 1.0
    shrink = (1.0 - 9.0 / 30.0) ** 2
    assert achieved[9.0] / achieved[1e-6] == pytest.approx(shrink, rel=2e-2)


# --- leakage verification ---------------------------------------------------


def test_leakage_grid_zero_design_is_silent():
    cfg = small_config()
    Ws = np.zeros((2, 2, 2), dtype=complex)
    taylor, exact = leakage_grid(Ws, np.zeros((2, 2)), 0.1, 0.2, 30.0, cfg)
    assert np.all(taylor == 0.0) and np.all(exact == 0.0)


def test_solved_instance_passes_robust_leakage_grid():
    cfg = small_config(leakage_cap=0.1)
    real = sample_realization(cfg, 8)
    sol = polyblock_optimize(SecureContext(cfg, real, halfwidth=0.05,
                                           sensing_time=5e-4))
    report = verify_robust_leakage(sol, real, cfg)
    assert isinstance(report, LeakageReport)
    assert report.compliant
    assert np.all(report.taylor_worst <= sol.cap_bits + 1e-6)


def test_leakage_grid_refinement_is_stable():
    cfg = small_config(leakage_cap=0.1)
    real = sample_realization(cfg, 8)
    sol = polyblock_optimize(SecureContext(cfg, real, halfwidth=0.05,
                                           sensing_time=5e-4))
    coarse = verify_robust_leakage(sol, real, cfg, grid_n=3)
    fine = verify_robust_leakage(sol, real, cfg, grid_n=101)
    assert coarse.compliant == fine.compliant


# --- rank-one repair and extraction -----------------------------------------


def test_rank_one_repair_preserves_own_power_and_is_dominated():
    rng = np.random.default_rng(11)
    for _ in range(20):
        A = rng.standard_normal((3, 3)) + 1j * rng.standard_normal((3, 3))
        W = A @ A.conj().T
        g = rng.standard_normal(3) + 1j * rng.standard_normal(3)
        R = _rank_one_repair(W, g)
        assert rank_one_ratio(R) <= 1e-12
        assert (g.conj() @ R @ g).real == pytest.approx(
            (g.conj() @ W @ g).real, rel=1e-9)
        # dominated: W - R stays PSD, so the repair never raises any
        # interference or leakage quadratic form
        assert np.linalg.eigvalsh(W - R).min() >= -1e-9 * np.trace(W).real


def test_rank_one_repair_zero_matrix_stays_zero():
    g = np.array([1.0, 1j])
    assert np.all(_rank_one_repair(np.zeros((2, 2)), g) == 0)


def test_extract_beamformers_inverts_outer_product():
    rng = np.random.default_rng(12)
    w = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    got = extract_beamformers(np.outer(w, w.conj()))
    assert abs(np.vdot(got, w)) == pytest.approx(np.linalg.norm(w) ** 2, rel=1e-9)


def test_extract_beamformers_rejects_genuine_rank_two():
    W = np.diag([1.0, 0.5]).astype(complex)
    with pytest.raises(RuntimeError):
        extract_beamformers(W)
