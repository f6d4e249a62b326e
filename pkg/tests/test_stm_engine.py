import math

import numpy as np
import pytest

from src import stm_engine
from src.errors import BudgetExceeded, DivergenceError, InvalidTolerance, NonpositiveL
from src.graph_spectra import CentralizedNetwork, make_graph


def _diag_quadratic(h):
    h = np.asarray(h, dtype=float)
    return (lambda x: 0.5 * float(h @ (x - 1.0) ** 2)), (lambda x: h * (x - 1.0))


# ==========================================================
# Schedule Tests
# Function under test: stm_engine.stm_step_coeffs(A_k, L, mu, radicand)
# ==========================================================

def test_first_step_is_one_over_L():
    alpha, A = stm_engine.stm_step_coeffs(0.0, 4.0, 0.5)
    assert alpha == pytest.approx(0.25)
    assert A == pytest.approx(0.25)


def test_convex_schedule_grows_quadratically():
    sched = stm_engine.schedule(1.0, 0.0, 200)
    for k in range(1, 201):
        assert sched.As[k] >= k * k / 4.0 - 1e-12


def test_strongly_convex_schedule_grows_geometrically():
    sched = stm_engine.schedule(1.0, 0.01, 300)
    assert sched.As[300] / sched.As[200] >= (1 + math.sqrt(0.01) / 2) ** 100


@pytest.mark.parametrize("radicand", ["printed", "squared"])
@pytest.mark.parametrize("L, mu", [(1.0, 0.0), (10.0, 0.1), (0.5, 0.5)])
def test_schedule_residual_is_tiny(radicand, L, mu):
    A = 0.0
    for _ in range(300):
        alpha, A_next = stm_engine.stm_step_coeffs(A, L, mu, radicand)
        assert stm_engine.schedule_residual(A, alpha, L, mu, radicand) <= 1e-10
        A = A_next


def test_radicand_modes_agree_without_strong_convexity():
    assert stm_engine.stm_step_coeffs(3.0, 2.0, 0.0, "printed") == stm_engine.stm_step_coeffs(3.0, 2.0, 0.0, "squared")


def test_radicand_modes_differ_with_strong_convexity():
    printed = stm_engine.stm_step_coeffs(3.0, 2.0, 1.0, "printed")[0]
    squared = stm_engine.stm_step_coeffs(3.0, 2.0, 1.0, "squared")[0]
    assert squared > printed


def test_nonpositive_L_rejected():
    with pytest.raises(NonpositiveL):
        stm_engine.stm_step_coeffs(0.0, 0.0, 0.0)


def test_schedule_length():
    assert stm_engine.schedule(1.0, 0.0, 7).N == 7


# ==========================================================
# Iteration Budget Tests
# ==========================================================

def test_iteration_budget_convex():
    """√(LR²/ε) with L = 1, R = 1, ε = 1e-4 is 100."""
    assert stm_engine.iteration_budget(1.0, 0.0, 1.0, 1e-4) == 100


def test_iteration_budget_uses_linear_rate_when_better():
    N = stm_engine.iteration_budget(1.0, 0.5, 1.0, 1e-8)
    assert N == math.ceil(math.sqrt(2.0) * math.log(1e8))


def test_iteration_budget_is_capped():
    assert stm_engine.iteration_budget(1.0, 0.0, 1.0, 1e-12, cap=50) == 50


def test_iteration_budget_rejects_bad_eps():
    with pytest.raises(InvalidTolerance):
        stm_engine.iteration_budget(1.0, 0.0, 1.0, 0.0)


def test_complexity_bounds_rounds_scale_with_sqrt_chi():
    low = stm_engine.complexity_bounds("primal", 1.0, 1.0, 1e-4, chi=1.0)
    high = stm_engine.complexity_bounds("primal", 1.0, 1.0, 1e-4, chi=16.0)
    assert high["rounds"] == pytest.approx(4 * low["rounds"])
    assert stm_engine.complexity_bounds("dual", 1.0, 1.0, 1e-4)["rounds"] == pytest.approx(100.0)


def test_complexity_bounds_stochastic_adds_oracle_term():
    det = stm_engine.complexity_bounds("dual", 1.0, 1.0, 1e-2)
    sto = stm_engine.complexity_bounds("dual_stochastic", 1.0, 1.0, 1e-2, sigma_sq=1.0)
    assert sto["oracle_calls"] > det["oracle_calls"]


def test_complexity_bounds_unknown_kind():
    with pytest.raises(ValueError):
        stm_engine.complexity_bounds("hybrid", 1.0, 1.0, 1e-2)


# ==========================================================
# Batch Rule Tests
# ==========================================================

def test_batch_size_is_one_without_noise():
    assert stm_engine.batch_size_rule(3, 0.0, 5.0, 10.0, 0.0, 1e-3, 100, 0.1) == 1


def test_batch_size_formula():
    r = stm_engine.batch_size_rule(0, 2.0, 1.0, 1.0, 0.0, 0.1, 10, 0.1)
    assert r == math.ceil(4.0 * math.log(100) / 0.1)


def test_batch_size_shrinks_with_strong_convexity():
    plain = stm_engine.batch_size_rule(0, 1.0, 2.0, 4.0, 0.0, 0.1, 10, 0.1)
    damped = stm_engine.batch_size_rule(0, 1.0, 2.0, 4.0, 1.0, 0.1, 10, 0.1)
    assert damped < plain


@pytest.mark.parametrize("beta", [0.0, 1.0])
def test_batch_size_rejects_bad_beta(beta):
    with pytest.raises(InvalidTolerance):
        stm_engine.batch_size_rule(0, 1.0, 1.0, 1.0, 0.0, 0.1, 10, beta)


def test_batched_grad_averages_batch():
    oracle = lambda x, iteration, start, count: np.arange(count, dtype=float)[:, None] + x
    assert stm_engine.batched_grad(oracle, np.zeros(1), 5) == pytest.approx([2.0])


# ==========================================================
# STM Convergence Tests
# ==========================================================

def test_stm_sublinear_guarantee():
    """f(x_N) − f* ≤ R²/(2A_N) ≤ 2LR²/N² for every N."""
    n = 30
    f, grad = _diag_quadratic(np.geomspace(1e-6, 1.0, n))
    result = stm_engine.stm(grad, 1.0, 0.0, np.zeros(n), 300, f=f, f_star=0.0)
    trace = result.trace
    bound = n / (2 * trace["A_k"])
    assert (trace["f_gap"] <= bound + 1e-12).all()


def test_stm_linear_convergence():
    f, grad = _diag_quadratic(np.geomspace(0.01, 1.0, 10))
    result = stm_engine.stm(grad, 1.0, 0.01, np.zeros(10), 400, f=f, f_star=0.0)
    assert result.trace["f_gap"].iloc[-1] <= 1e-10


def test_literal_line4_converges_without_strong_convexity():
    """Both line-4 forms coincide when mu = 0."""
    f, grad = _diag_quadratic([0.5, 1.0])
    a = stm_engine.stm(grad, 1.0, 0.0, np.zeros(2), 50, f=f, f_star=0.0, line4="corrected")
    b = stm_engine.stm(grad, 1.0, 0.0, np.zeros(2), 50, f=f, f_star=0.0, line4="literal")
    assert np.allclose(a.x, b.x)


def test_stm_trace_columns():
    f, grad = _diag_quadratic([1.0])
    result = stm_engine.stm(grad, 1.0, 0.0, np.zeros(1), 5, f=f, f_star=0.0)
    assert list(result.trace.columns) == ["k", "A_k", "alpha_k", "r_k", "f_gap", "grad_norm", "rounds", "oracle_calls"]
    assert list(result.trace["k"]) == [1, 2, 3, 4, 5]


def test_stm_tracks_z_excursion():
    f, grad = _diag_quadratic([0.1, 1.0])
    result = stm_engine.stm(grad, 1.0, 0.0, np.zeros(2), 30, x_star=np.ones(2))
    assert result.z_excursion is not None
    assert result.z_excursion <= 3.0


def test_callback_stops_early():
    f, grad = _diag_quadratic([1.0])
    result = stm_engine.run_similar_triangles(
        lambda k, x, alpha, A: (grad(x), 1), 1.0, 0.0, np.zeros(1), 100,
        callback=lambda info: info.k == 3,
    )
    assert result.iterations == 3
    assert result.stopped_early


def test_divergence_detected():
    """A wrong-sign gradient drives the gap up and trips the guard."""
    f, grad = _diag_quadratic([1.0])
    with pytest.raises(DivergenceError):
        stm_engine.run_similar_triangles(
            lambda k, x, alpha, A: (-grad(x), 1), 1.0, 0.0, np.zeros(1), 200,
            gap=lambda t: f(t.x), divergence_factor=100.0,
        )


def test_unknown_line4_mode_rejected():
    with pytest.raises(ValueError):
        stm_engine.stm(lambda x: x, 1.0, 0.0, np.zeros(1), 1, line4="sideways")


# ==========================================================
# Batched STM Tests
# ==========================================================

def test_bstm_without_noise_matches_stm():
    f, grad = _diag_quadratic([0.5, 1.0])
    oracle = lambda x, iteration, start, count: np.tile(grad(x), (count, 1))
    a = stm_engine.stm(grad, 1.0, 0.0, np.zeros(2), 40)
    b = stm_engine.bstm(oracle, 1.0, 0.0, 0.0, np.zeros(2), 1e-3, 0.1, 2.0, N=40)
    assert np.allclose(a.x, b.x)
    assert b.oracle_calls == 40


def test_bstm_reaches_accuracy_with_noise():
    from src.problem_oracles import StochasticOracleConfig, make_quadratic_instance, primal_sampler

    p = make_quadratic_instance(seed=0, m=1, n=4, mu=0.0, L=1.0)
    sample = primal_sampler(p, 0, StochasticOracleConfig(sigma=1.0, master_seed=5))
    f = lambda x: p.family.value(0, x)
    R = float(np.linalg.norm(p.known_opt[0]))
    result = stm_engine.bstm(
        sample, p.L, 0.0, 1.0, np.zeros(4), 1e-2, 0.1, R, n_constant=2, c_b=4,
        f=f, f_star=p.known_opt[1],
    )
    assert f(result.x) - p.known_opt[1] <= 1e-2


def test_bstm_success_rate_and_oracle_budget():
    """At least 18 of 20 seeds reach ε; oracle calls stay within 4x the leading-order count."""
    from src.problem_oracles import StochasticOracleConfig, make_quadratic_instance, primal_sampler

    p = make_quadratic_instance(seed=0, m=1, n=4, mu=0.0, L=1.0)
    x_star, f_star = p.known_opt
    R = float(np.linalg.norm(x_star))
    bound = stm_engine.complexity_bounds("primal_stochastic", p.L, R, 1e-2, sigma_sq=1.0, beta=0.1)["oracle_calls"]
    successes = 0
    for seed in range(20):
        sample = primal_sampler(p, 0, StochasticOracleConfig(sigma=1.0, master_seed=seed))
        result = stm_engine.bstm(sample, p.L, 0.0, 1.0, np.zeros(4), 1e-2, 0.1, R, n_constant=2, c_b=2)
        successes += p.family.value(0, result.x) - f_star <= 1e-2
        assert result.oracle_calls <= 4.0 * bound
    assert successes >= 18



# ==========================================================
# Chebyshev Solver Tests
# ==========================================================

def test_chebyshev_two_node_example(two_node_graph):
    """(I + 2W̄)x = (1, 0) has solution (0.6, 0.4); one iteration plus the residual round."""
    net = CentralizedNetwork(two_node_graph)
    result = stm_engine.chebyshev_quadratic_solve(net, np.array([[1.0], [0.0]]), 1.0, 2.0, 1e-12)
    assert result.x[:, 0] == pytest.approx([0.6, 0.4])
    assert result.iterations == 1
    assert net.rounds == 2


def test_chebyshev_matches_direct_solve():
    g = make_graph("path", 6)
    net = CentralizedNetwork(g)
    rhs = np.random.default_rng(1).normal(size=(6, 2))
    result = stm_engine.chebyshev_quadratic_solve(net, rhs, 2.0, 5.0, 1e-10)
    direct = np.linalg.solve(2.0 * np.eye(6) + 5.0 * g.laplacian, rhs)
    assert np.allclose(result.x, direct, atol=1e-9)
    assert net.rounds == result.iterations + 1


def test_chebyshev_consensus_rhs_is_free(path4):
    net = CentralizedNetwork(path4)
    result = stm_engine.chebyshev_quadratic_solve(net, np.ones((4, 1)), 2.0, 3.0, 1e-12)
    assert np.allclose(result.x, 0.5)
    assert result.iterations == 0


def test_chebyshev_budget_exceeded_keeps_partial_solution():
    g = make_graph("path", 10)
    net = CentralizedNetwork(g)
    rhs = np.random.default_rng(2).normal(size=(10, 1))
    with pytest.raises(BudgetExceeded) as excinfo:
        stm_engine.chebyshev_quadratic_solve(net, rhs, 1.0, 100.0, 1e-12, budget=2)
    assert excinfo.value.iterations == 2
    assert excinfo.value.solution.shape == (10, 1)


def test_quadratic_penalty_counts_overruns():
    g = make_graph("path", 10)
    penalty = stm_engine.QuadraticPenalty(CentralizedNetwork(g), coeff=50.0, budget=1)
    z = penalty.solve(np.random.default_rng(3).normal(size=(10, 1)), 1.0, 0.0)
    assert z.shape == (10, 1)
    assert penalty.budget_exceeded == 1


def test_composite_z_step_without_penalty_is_closed_form(two_node_graph):
    """With coeff = 0 the z-step is (z₀ + Σα(μx̃ − g)) / (1 + μΣα)."""
    penalty = stm_engine.QuadraticPenalty(CentralizedNetwork(two_node_graph), coeff=0.0)
    history = [(np.array([[1.0], [1.0]]), np.array([[2.0], [0.0]]))]
    z = stm_engine.composite_z_step(history, [0.5], np.zeros((2, 1)), 1.0, penalty)
    assert z[:, 0] == pytest.approx([(0.5 * (1 - 2)) / 1.5, 0.5 / 1.5])


def test_composite_z_step_with_penalty_matches_scalar_solve(two_node_graph):
    """Along v = (1, −1)/√2, W̄v = 2v: z = (z₀ − αg)/(1 + 2cα·2) = 1.5/7 for z₀ = 2, g = 1, α = 0.5, c = 3."""
    v = np.array([[1.0], [-1.0]]) / np.sqrt(2.0)
    penalty = stm_engine.QuadraticPenalty(CentralizedNetwork(two_node_graph), coeff=3.0)
    z = stm_engine.composite_z_step([(np.zeros((2, 1)), 1.0 * v)], [0.5], 2.0 * v, 0.0, penalty)
    assert z == pytest.approx(1.5 / 7.0 * v, abs=1e-6)
    assert penalty.solves == 1


def test_composite_z_step_ignores_penalty_on_consensus(two_node_graph):
    penalty = stm_engine.QuadraticPenalty(CentralizedNetwork(two_node_graph), coeff=3.0)
    free = stm_engine.QuadraticPenalty(CentralizedNetwork(two_node_graph), coeff=0.0)
    history = [(np.ones((2, 1)), np.full((2, 1), 0.4))]
    anchor = np.full((2, 1), 1.5)
    z = stm_engine.composite_z_step(history, [0.5], anchor, 1.0, penalty)
    assert z == pytest.approx(stm_engine.composite_z_step(history, [0.5], anchor, 1.0, free), abs=1e-10)


def test_composite_z_step_folded_anchor_matches_full_history(two_node_graph):
    """Folding earlier terms into the anchor with A_total gives the same step."""
    penalty = stm_engine.QuadraticPenalty(CentralizedNetwork(two_node_graph), coeff=2.0)
    rng = np.random.default_rng(4)
    history = [(rng.normal(size=(2, 1)), rng.normal(size=(2, 1))) for _ in range(3)]
    alphas = [0.5, 0.8, 1.1]
    z0 = np.zeros((2, 1))
    full = stm_engine.composite_z_step(history, alphas, z0, 0.5, penalty)
    folded = z0 + sum(a * (0.5 * xt - g) for a, (xt, g) in zip(alphas[:2], history[:2]))
    step = stm_engine.composite_z_step(history[2:], alphas[2:], folded, 0.5, penalty, A_total=sum(alphas))
    assert step == pytest.approx(full, abs=1e-10)



def test_composite_step_requires_corrected_mode(two_node_graph):
    penalty = stm_engine.QuadraticPenalty(CentralizedNetwork(two_node_graph), coeff=1.0)
    with pytest.raises(ValueError):
        stm_engine.run_similar_triangles(
            lambda k, x, alpha, A: (x, 1), 1.0, 0.0, np.zeros((2, 1)), 1,
            line4="literal", penalty=penalty,
        )
