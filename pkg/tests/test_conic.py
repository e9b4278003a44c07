"""Conic IR and backend: known optima, embeddings, residual round-trips."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from secure_isac import conic as C


def _rand_hermitian(rng, n):
    A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return (A + A.conj().T) / 2


# --- hermitian_real_embedding -----------------------------------------------


def test_embedding_doubles_spectrum():
    rng = np.random.default_rng(7)
    M = _rand_hermitian(rng, 5)
    S = C.hermitian_real_embedding(M)
    assert S.shape == (10, 10)
    assert np.allclose(S, S.T)
    w_m = np.sort(np.linalg.eigvalsh(M))
    w_s = np.sort(np.linalg.eigvalsh(S))
    assert np.allclose(w_s, np.repeat(w_m, 2), atol=1e-10)


def test_embedding_psd_equivalence_samples():
    rng = np.random.default_rng(21)
    for _ in range(50):
        n = rng.integers(2, 7)
        M = _rand_hermitian(rng, n)
        # shift to straddle the PSD boundary from both sides
        shift = rng.choice([-1.0, 0.0, 1.0]) * abs(np.linalg.eigvalsh(M)).max()
        M = M + shift * np.eye(n)
        psd_m = np.linalg.eigvalsh(M).min() >= -1e-9
        psd_s = np.linalg.eigvalsh(C.hermitian_real_embedding(M)).min() >= -1e-9
        assert psd_m == psd_s


def test_embedding_rejects_bad_input():
    with pytest.raises(ValueError):
        C.hermitian_real_embedding(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        C.hermitian_real_embedding(np.zeros((2, 3)))


# --- small programs with hand-checkable optima ------------------------------


def test_hyperbolic_lmi():
    # [[s,1],[1,chi]] >= 0 encodes s*chi >= 1; min s+chi attains 2 at s=chi=1
    p = C.ConicProgram()
    p.add_scalar_var("s", lower=0.0)
    p.add_scalar_var("chi", lower=0.0)
    p.add_lmi(2, {(0, 0): C.scalar_term("s"), (0, 1): C.aff(1.0),
                  (1, 1): C.scalar_term("chi")}, label="hyp")
    p.set_objective("min", C.scalar_term("s") + C.scalar_term("chi"))
    st = C.solve(p)
    assert st.ok
    assert st.objective == pytest.approx(2.0, abs=1e-6)
    assert st.variables["s"] == pytest.approx(1.0, abs=1e-5)


def test_rank_one_cover():
    # min Tr X s.t. Tr(a a^H X) >= 1: optimum 1 at X = a a^H / ||a||^4 * ...
    a = np.array([1.0, 1j, -1.0]) / np.sqrt(3)
    A = np.outer(a, a.conj())
    p = C.ConicProgram()
    p.add_psd_var("X", 3)
    p.add_linear(C.aff(1.0) + C.trace_term("X", -A))
    p.set_objective("min", C.trace_term("X", np.eye(3)))
    st = C.solve(p)
    assert st.ok
    assert st.objective == pytest.approx(1.0, abs=1e-6)
    X = st.variables["X"]
    assert np.linalg.eigvalsh(X).min() >= -1e-7 * (1 + np.linalg.norm(X))


def test_complex_lmi_magnitude():
    # [[t, c], [conj(c), t]] >= 0 iff t >= |c|
    c = 3.0 - 4.0j
    p = C.ConicProgram()
    p.add_scalar_var("t", lower=0.0)
    p.add_lmi(2, {(0, 0): C.scalar_term("t"), (0, 1): C.aff(c),
                  (1, 1): C.scalar_term("t")})
    p.set_objective("min", C.scalar_term("t"))
    st = C.solve(p)
    assert st.ok
    assert st.objective == pytest.approx(5.0, abs=1e-6)


def test_infeasible_and_unbounded_statuses():
    p = C.ConicProgram()
    p.add_scalar_var("x", lower=0.0)
    p.add_linear(C.scalar_term("x") + C.aff(1.0))  # x <= -1 with x >= 0
    p.set_objective("min", C.scalar_term("x"))
    assert C.solve(p).status == C.INFEASIBLE

    q = C.ConicProgram()
    q.add_scalar_var("y")
    q.set_objective("min", C.scalar_term("y"))
    assert C.solve(q).status == C.NUMERICAL_FAILURE


# --- absolute-sum lowering --------------------------------------------------


def _abs_sum_program(use_reduction):
    p = C.ConicProgram()
    p.add_scalar_var("u")
    p.add_scalar_var("v")
    exprs = [C.scalar_term("u") + C.aff(-2.0), C.scalar_term("v") + C.aff(1.0)]
    if use_reduction:
        C.lower_absolute_sum(p, exprs, 0.5, label="l1")
    else:
        p.add_abs_sum(exprs, 0.5, label="l1")
    p.set_objective("max", C.scalar_term("u") + C.scalar_term("v"))
    return p


def test_abs_sum_lowering_matches_native():
    a = C.solve(_abs_sum_program(False))
    b = C.solve(_abs_sum_program(True))
    assert a.ok and b.ok
    # |u-2| + |v+1| <= 1/2 caps u+v at 2 - 1 + 1/2
    assert a.objective == pytest.approx(1.5, abs=1e-7)
    assert b.objective == pytest.approx(a.objective, abs=1e-6)


def test_abs_sum_reduction_aux_count():
    p = _abs_sum_program(True)
    aux = [n for n in p.scalar_vars if n.startswith("_abs")]
    assert len(aux) == 2
    assert all(p.scalar_vars[n] == 0.0 for n in aux)


def test_abs_sum_rejects_negative_bound():
    p = C.ConicProgram()
    p.add_scalar_var("u")
    with pytest.raises(ValueError):
        p.add_abs_sum([C.scalar_term("u")], -1.0)


# --- parameters and compiled re-solves --------------------------------------


def test_parametric_resolve():
    p = C.ConicProgram()
    p.add_scalar_var("x")
    p.add_param("lo", 3.0)
    p.add_linear(C.AffExpr(terms=[C.Term("x", -1.0)], const_params=[(1.0, "lo")]))
    p.set_objective("min", C.scalar_term("x"))
    solver = C.ParametricSolver(p)
    assert solver.solve().objective == pytest.approx(3.0, abs=1e-7)
    assert solver.solve({"lo": -1.5}).objective == pytest.approx(-1.5, abs=1e-7)
    assert solver.solve_count == 2


def test_parametric_complex_lmi():
    # min t s.t. [[t, (1+1j) z], [conj, t]] >= 0  ->  t = sqrt(2) |z|
    p = C.ConicProgram()
    p.add_scalar_var("t", lower=0.0)
    p.add_param("z", 2.0)
    p.add_lmi(2, {(0, 0): C.scalar_term("t"),
                  (0, 1): C.AffExpr(const_params=[(1 + 1j, "z")]),
                  (1, 1): C.scalar_term("t")})
    p.set_objective("min", C.scalar_term("t"))
    solver = C.ParametricSolver(p)
    assert solver.solve().objective == pytest.approx(2 * np.sqrt(2), abs=1e-6)
    assert solver.solve({"z": 0.5}).objective == pytest.approx(np.sqrt(2) / 2, abs=1e-6)


def test_param_inside_trace_term():
    # constraint p * Tr(X) >= 1 with p scaling the trace coefficient
    p = C.ConicProgram()
    p.add_psd_var("X", 2)
    p.add_param("w", 2.0)
    p.add_linear(C.aff(1.0) + C.trace_term("X", -np.eye(2), param="w"))
    p.set_objective("min", C.trace_term("X", np.eye(2)))
    solver = C.ParametricSolver(p)
    assert solver.solve().objective == pytest.approx(0.5, abs=1e-6)
    assert solver.solve({"w": 4.0}).objective == pytest.approx(0.25, abs=1e-6)


# --- validation and bookkeeping ---------------------------------------------


def test_program_validation():
    p = C.ConicProgram()
    p.add_psd_var("X", 2)
    with pytest.raises(ValueError):
        p.add_psd_var("X", 3)
    with pytest.raises(ValueError):
        p.add_scalar_var("X")
    with pytest.raises(ValueError):
        p.add_linear(C.scalar_term("nope"))
    with pytest.raises(ValueError):
        p.add_linear(C.trace_term("X", np.eye(3)))  # wrong shape
    with pytest.raises(ValueError):
        p.add_linear(C.scalar_term("X"))  # X is a matrix: coeff shape mismatch
    with pytest.raises(ValueError):
        p.add_linear(C.AffExpr(const_params=[(1.0, "ghost")]))
    with pytest.raises(ValueError):
        p.add_lmi(2, {(1, 0): C.aff(1.0)})
    with pytest.raises(ValueError):
        p.set_objective("argmax", C.trace_term("X", np.eye(2)))


def test_residual_roundtrip():
    # solve, then re-evaluate every constraint at the returned point
    a = np.array([1.0, np.exp(0.3j), np.exp(-1.1j)]) / np.sqrt(3)
    A = np.outer(a, a.conj())
    p = C.ConicProgram()
    p.add_psd_var("X", 3)
    p.add_scalar_var("t", lower=0.0)
    p.add_linear(C.aff(1.0) + C.trace_term("X", -A), label="cover")
    p.add_linear(C.trace_term("X", np.eye(3)) + C.scalar_term("t", -1.0), label="power")
    p.add_lmi(2, {(0, 0): C.scalar_term("t"), (0, 1): C.aff(1.0),
                  (1, 1): C.scalar_term("t")}, label="t_big")
    p.add_abs_sum([C.trace_term("X", np.eye(3)) + C.aff(-1.0)], 0.25, label="near1")
    p.set_objective("min", C.scalar_term("t"))
    st = C.solve(p)
    assert st.ok
    res = C.constraint_residuals(p, st.variables)
    assert set(res) == {"cover", "power", "t_big", "near1"}
    assert all(v <= 1e-6 for v in res.values()), res


def test_evaluate_expr():
    e = C.AffExpr(terms=[C.Term("x", 2.0), C.Term("M", np.eye(2) * (1 + 1j))],
                  const=0.5, const_params=[(3.0, "p")])
    val = C.evaluate_expr(e, {"x": 1.5, "M": np.diag([1.0, 2.0])}, {"p": -1.0})
    assert val == pytest.approx(3.0 + (3 + 3j) + 0.5 - 3.0)


def test_dump_program_lists_everything():
    p = _abs_sum_program(False)
    text = C.dump_program(p)
    assert "scalar u" in text and "max" in text and "l1" in text


# --- property: embedding equivalence under random Hermitian perturbations ----


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=10_000), st.integers(min_value=2, max_value=6))
def test_embedding_psd_equivalence_property(seed, n):
    rng = np.random.default_rng(seed)
    M = _rand_hermitian(rng, n)
    w_min = np.linalg.eigvalsh(M).min()
    S = C.hermitian_real_embedding(M)
    assert (np.linalg.eigvalsh(S).min() >= -1e-9) == (w_min >= -1e-9)
    # exact eigenvalue doubling, not just sign agreement
    assert np.allclose(np.sort(np.linalg.eigvalsh(S))[::2],
                       np.sort(np.linalg.eigvalsh(M)), atol=1e-9)
