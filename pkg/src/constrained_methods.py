"""
Decentralized methods for min F(𝐱) = (1/m)Σ f_k(x_k) subject to consensus.

Primal route: the penalty c·𝐱ᵀ(W̄⊗I)𝐱 with c = R_y²/ε, minimised by STM with
the penalty inside the z-step (composite) or folded into the gradient (fused).

Dual route: STM on ψ(y) = Σ_k φ_k([√W̄ y]_k) run in the variable ŷ = √W̄ y, so
that only W̄ itself is ever applied. Dual iterations work on the summed
objective m·F; certificates are reported on the averaged scale.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from src.config import HARD_ITERATION_CAP
from src.errors import DimensionMismatch, InvalidTolerance, NotConverged, NotStronglyConvex
from src.graph_spectra import (
    CentralizedNetwork,
    LaplacianGraph,
    apply_block,
    as_blocks,
    consensus_residual,
    sqrt_laplacian,
)
from src.problem_oracles import (
    ProblemInstance,
    StochasticOracleConfig,
    conjugate_argmax,
    dual_constants,
    dual_radius,
    dual_sampler,
    objective,
    primal_grad,
    primal_sampler,
    stacked_optimum,
)
from src.report import RunReport
from src.stm_engine import (
    QuadraticPenalty,
    batch_size_rule,
    batched_grad,
    iteration_budget,
    run_similar_triangles,
)

WEAK_DUALITY_SLACK = 1e-9

# ‖√W̄x̄‖ ≤ 2R/A_N with A_N ≥ (N+1)²/(4L), so N + 1 ≥ √(8LR²/ε) certifies both gap and feasibility
DUAL_RATE_CONSTANT = 8.0


# ==========================================================
# Domain Types
# ==========================================================

@dataclass(frozen=True, eq=False)
class PenaltyProblem:
    base: ProblemInstance
    graph: LaplacianGraph
    eps: float
    R_y: float
    penalty_coeff: float

    @property
    def smoothness(self) -> float:
        """Smoothness of F + c·𝐱ᵀW𝐱; used as the fused-mode step constant."""
        return self.base.L / self.base.m + 2.0 * self.penalty_coeff * self.graph.lambda_max

    def penalty_value(self, X) -> float:
        X = as_blocks(X, self.graph.m)
        return self.penalty_coeff * float(np.vdot(X, apply_block(self.graph, X)))

    def objective(self, X) -> float:
        return objective(self.base, X) + self.penalty_value(X)


@dataclass(frozen=True)
class Certificate:
    duality_gap: float | None
    feasibility: float
    f_gap: float | None
    lagrangian_gap: float | None = None


@dataclass
class MethodResult:
    x: np.ndarray
    certificate: Certificate
    report: RunReport
    trace: pd.DataFrame
    y_hat: np.ndarray | None = None
    grad_norm: float | None = None


@dataclass(frozen=True)
class MethodSettings:
    """Everything a registered method needs beyond the instance and graph."""
    eps: float
    beta: float = 0.1
    mode: str = "composite"
    n_constant: float = 1.0
    c_b: float = 1.0
    N: int | None = None
    line4: str = "corrected"
    radicand: str = "printed"
    inner_budget: int | None = None
    stochastic: StochasticOracleConfig = field(default_factory=StochasticOracleConfig)
    seed: int | None = None
    config_hash: str = ""


# ==========================================================
# Certificates
# ==========================================================

def certificate(p: ProblemInstance, g: LaplacianGraph, X, y=None, y_hat=None, R_y: float | None = None) -> Certificate:
    """
    Duality gap, feasibility ‖√W𝐱‖ and objective gap.

    The dual side is given either as raw y (mapped through √W̄, validation
    path) or directly as ŷ = √W̄ y blocks; Ψ = (1/m)Σ_k φ_k(ŷ_k). The
    Lagrangian gap F(𝐱) + Ψ goes negative whenever 𝐱 is off consensus, so
    the reported duality gap adds R_y·‖√W𝐱‖: it is nonnegative for any 𝐱
    and any ŷ in the image of W̄, bounds F(𝐱) − F* from above and equals
    F(𝐱) + Ψ on consensus. Evaluated diagnostically: nothing is charged to
    round or oracle counters.
    """
    X = np.asarray(X, dtype=float)
    if X.shape != (p.m, p.n):
        raise DimensionMismatch(f"Primal point must be ({p.m}, {p.n}), got {X.shape}")

    F = objective(p, X)
    f_gap = F - p.known_opt[1] if p.known_opt is not None else None
    feasibility = consensus_residual(g, X)

    if y is not None:
        Y = np.asarray(y, dtype=float)
        if Y.shape != (p.m, p.n):
            raise DimensionMismatch(f"Dual point must be ({p.m}, {p.n}), got {Y.shape}")
        y_hat = sqrt_laplacian(g) @ Y

    duality_gap = lagrangian_gap = None
    if y_hat is not None:
        Y_hat = np.asarray(y_hat, dtype=float)
        if Y_hat.shape != (p.m, p.n):
            raise DimensionMismatch(f"Dual point must be ({p.m}, {p.n}), got {Y_hat.shape}")
        responses = np.stack([conjugate_argmax(p, k, Y_hat[k]) for k in range(p.m)])
        psi = float(np.mean([Y_hat[k] @ responses[k] - p.family.value(k, responses[k]) for k in range(p.m)]))
        R_y = dual_radius(p, g) if R_y is None else R_y
        lagrangian_gap = F + psi
        duality_gap = lagrangian_gap + R_y * feasibility
        if duality_gap < -WEAK_DUALITY_SLACK:
            logging.warning(f"Duality gap {duality_gap:.3e} is negative: R_y = {R_y:.3e} underestimates the dual radius")

    return Certificate(duality_gap=duality_gap, feasibility=feasibility, f_gap=f_gap, lagrangian_gap=lagrangian_gap)


def _certified(cert: Certificate, eps: float, R_y: float) -> bool:
    feasibility_ok = R_y == 0 or cert.feasibility <= eps / R_y
    if cert.duality_gap is not None:
        value_ok = -WEAK_DUALITY_SLACK <= cert.duality_gap <= eps
        if cert.f_gap is not None:
            value_ok = value_ok and cert.f_gap <= eps
    elif cert.f_gap is not None:
        value_ok = cert.f_gap <= eps
    else:
        value_ok = False
    return bool(value_ok and feasibility_ok)


def _build_report(method: str, network, cert: Certificate, eps: float, R_y: float,
                  settings: MethodSettings | None, extras: dict) -> RunReport:
    seed = settings.seed if settings is not None else None
    config_hash = settings.config_hash if settings is not None else ""
    return RunReport(
        config_hash=config_hash,
        method=method,
        rounds=int(network.rounds),
        oracle_calls_per_node=int(network.oracle_calls.max()),
        duality_gap=cert.duality_gap,
        feasibility=cert.feasibility,
        f_gap=cert.f_gap,
        success=_certified(cert, eps, R_y),
        seed=seed,
        extras={
            "eps": eps,
            "R_y": R_y,
            "lagrangian_gap": cert.lagrangian_gap,
            "weak_duality_violation": cert.duality_gap is not None and cert.duality_gap < -WEAK_DUALITY_SLACK,
            **extras,
        },
    )


def _counter(network):
    return lambda: (int(network.rounds), int(network.oracle_calls.max()))


# ==========================================================
# Primal route: penalty methods
# ==========================================================

def penalty_lift(p: ProblemInstance, g: LaplacianGraph, eps: float, R_y: float | None = None) -> PenaltyProblem:
    """Attach the consensus penalty with coefficient R_y²/ε."""
    if eps <= 0:
        raise InvalidTolerance(f"eps must be positive, got {eps}")
    if p.m != g.m:
        raise DimensionMismatch(f"Instance has {p.m} nodes, graph has {g.m}")
    if R_y is None:
        R_y = dual_radius(p, g)
    if R_y < 0:
        raise InvalidTolerance(f"R_y must be nonnegative, got {R_y}")
    return PenaltyProblem(base=p, graph=g, eps=eps, R_y=R_y, penalty_coeff=R_y ** 2 / eps)


def _primal_radius(pp: PenaltyProblem) -> float:
    p = pp.base
    X_star = stacked_optimum(p)
    if X_star is not None:
        return float(np.linalg.norm(X_star))
    if p.mu > 0:
        # strong convexity of the penalised objective bounds the distance from 𝐱⁰ = 0
        grads = np.stack([primal_grad(p, k, np.zeros(p.n)) for k in range(p.m)]) / p.m
        return float(np.linalg.norm(grads)) / (p.mu / p.m)
    logging.warning("No optimum known and mu = 0: using R = 1")
    return 1.0


def _run_penalty(method: str, pp: PenaltyProblem, mode: str, gradient_term, network,
                 settings: MethodSettings, N: int | None, extras: dict) -> MethodResult:
    p, g = pp.base, pp.graph
    m = p.m
    network = CentralizedNetwork(g) if network is None else network
    c = pp.penalty_coeff

    L_F, mu_F = p.L / m, p.mu / m
    R = _primal_radius(pp)

    if mode == "composite":
        L_run = L_F
        L_h = 2.0 * c * g.lambda_max
        inner_accuracy = pp.eps ** 3 / (L_F * L_h ** 2 * R ** 4) if L_h > 0 and R > 0 else 0.0
        penalty = QuadraticPenalty(network, c, inner_accuracy, settings.inner_budget)
    elif mode == "fused":
        L_run = pp.smoothness
        penalty = None
    else:
        raise ValueError(f"Unknown penalty mode '{mode}', expected composite or fused")

    if N is None:
        N = settings.N if settings.N is not None else iteration_budget(L_run, mu_F, R, pp.eps, settings.n_constant)

    def step_gradient(k, X_tilde, alpha, A_next):
        G, r = gradient_term(network, k, X_tilde, alpha, A_next, N, mu_F)
        if mode == "fused":
            G = G + 2.0 * c * network.mix(X_tilde)
        return G, r

    f_star = p.known_opt[1] if p.known_opt is not None else None
    gap = (lambda t: objective(p, t.x) - f_star) if f_star is not None else None

    logging.info(f"{method} ({mode}): N={N}, m={m}, penalty coefficient {c:.4g}")
    result = run_similar_triangles(
        step_gradient, L_run, mu_F, np.zeros((m, p.n)), N,
        line4=settings.line4, radicand=settings.radicand, penalty=penalty,
        gap=gap, counter=_counter(network),
    )

    X = result.x
    y_hat = None
    if p.mu > 0:
        # penalised stationarity gives multipliers λ = −2·c·m·W̄𝐱
        y_hat = -2.0 * c * m * apply_block(g, X)
    cert = certificate(p, g, X, y_hat=y_hat, R_y=pp.R_y)

    report = _build_report(method, network, cert, pp.eps, pp.R_y, settings, {
        "mode": mode,
        "iterations": result.iterations,
        "penalty_coeff": c,
        "inner_iterations": penalty.inner_iterations if penalty is not None else 0,
        "inner_budget_exceeded": penalty.budget_exceeded if penalty is not None else 0,
        "chi": g.chi,
        **extras,
    })
    logging.info(f"{method} done: rounds={report.rounds}, feasibility={cert.feasibility:.3e}, f_gap={cert.f_gap}")
    return MethodResult(x=X, certificate=cert, report=report, trace=result.trace, y_hat=y_hat)


def pstm(pp: PenaltyProblem, mode: str = "composite", N: int | None = None, network=None,
         settings: MethodSettings | None = None) -> MethodResult:
    """Penalty STM with exact local gradients."""
    settings = settings or MethodSettings(eps=pp.eps, mode=mode)
    p = pp.base

    def gradient_term(net, k, X_tilde, alpha, A_next, N_total, mu_F):
        return net.local(lambda node, x: primal_grad(p, node, x), X_tilde) / p.m, 1

    return _run_penalty("pstm", pp, mode, gradient_term, network, settings, N, {})


def pbstm(pp: PenaltyProblem, cfg: StochasticOracleConfig, eps: float | None = None, beta: float = 0.1,
          mode: str = "composite", N: int | None = None, network=None,
          settings: MethodSettings | None = None) -> MethodResult:
    """
    Penalty STM with mini-batched stochastic local gradients.

    Node noise of variance σ² enters ∇F through a 1/m factor, so the batch
    rule sees σ_F² = σ²/m. Every node draws the same batch size.
    """
    eps = pp.eps if eps is None else eps
    settings = settings or MethodSettings(eps=eps, beta=beta, mode=mode, stochastic=cfg)
    p = pp.base
    samplers = [primal_sampler(p, k, cfg) for k in range(p.m)]
    sigma_F = cfg.sigma / math.sqrt(p.m)

    def gradient_term(net, k, X_tilde, alpha, A_next, N_total, mu_F):
        r = batch_size_rule(k, sigma_F, alpha, A_next, mu_F, eps, N_total, settings.beta, settings.c_b)
        G = net.local(lambda node, x: batched_grad(samplers[node], x, r, k), X_tilde, calls=r)
        return G / p.m, r

    return _run_penalty("pbstm", pp, mode, gradient_term, network, settings, N, {
        "sigma": cfg.sigma,
        "master_seed": cfg.master_seed,
    })


# ==========================================================
# Dual route
# ==========================================================

def _dual_smoothness(p: ProblemInstance, g: LaplacianGraph) -> float:
    # a single node has W̄ = 0; any positive constant is valid
    return g.lambda_max / p.mu if g.lambda_max > 0 else 1.0 / p.mu


def _require_dual(p: ProblemInstance, g: LaplacianGraph):
    if p.mu <= 0:
        raise NotStronglyConvex(f"The dual route needs mu > 0, got mu={p.mu}")
    if p.m != g.m:
        raise DimensionMismatch(f"Instance has {p.m} nodes, graph has {g.m}")


def _run_dual_averaged(method: str, p: ProblemInstance, g: LaplacianGraph, eps: float, N: int | None,
                       response_term, network, settings: MethodSettings, extras: dict) -> MethodResult:
    """
    STM on ψ in ŷ form with α-weighted averaging of the primal responses.

    One W̄ application per iteration: ẑ ← ẑ − α·W̄𝐱(ŷ̃).
    """
    _require_dual(p, g)
    network = CentralizedNetwork(g) if network is None else network
    m = p.m

    R_y = dual_radius(p, g)
    L_psi = _dual_smoothness(p, g)
    if N is None:
        if eps is None or eps <= 0:
            raise InvalidTolerance(f"Need N or a positive eps, got eps={eps}")
        R_sum, eps_sum = m * R_y, m * eps
        N = max(1, math.ceil(settings.n_constant * math.sqrt(DUAL_RATE_CONSTANT * L_psi * R_sum ** 2 / eps_sum)))
        if N > HARD_ITERATION_CAP:
            logging.warning(f"{method}: iteration count {N} capped at {HARD_ITERATION_CAP}")
            N = HARD_ITERATION_CAP
    if N < 1:
        raise ValueError(f"{method} averages at least one response, got N={N}")

    state = {"last": None, "xsum": np.zeros((m, p.n)), "A": 0.0}

    def step_gradient(k, Y_tilde, alpha, A_next):
        responses, r = response_term(network, k, Y_tilde, alpha, A_next, N)
        state["last"] = responses
        return network.mix(responses), r

    def accumulate(info):
        state["xsum"] = state["xsum"] + info.alpha * state["last"]
        state["A"] = info.A_next

    f_star = p.known_opt[1] if p.known_opt is not None else None

    def gap(triple):
        if f_star is None or state["A"] == 0:
            return None
        return objective(p, state["xsum"] / state["A"]) - f_star

    logging.info(f"{method}: N={N}, m={m}, L_psi={L_psi:.4g}, R_y={R_y:.4g}")
    result = run_similar_triangles(
        step_gradient, L_psi, 0.0, np.zeros((m, p.n)), N,
        line4=settings.line4, radicand=settings.radicand,
        gap=gap, callback=accumulate, counter=_counter(network),
    )

    X = state["xsum"] / state["A"]
    y_hat = result.x
    cert = certificate(p, g, X, y_hat=y_hat, R_y=R_y)
    report = _build_report(method, network, cert, eps if eps is not None else float("inf"), R_y, settings, {
        "iterations": result.iterations,
        "L_psi": L_psi,
        "chi": g.chi,
        **extras,
    })
    logging.info(f"{method} done: rounds={report.rounds}, duality_gap={cert.duality_gap:.3e}")
    return MethodResult(x=X, certificate=cert, report=report, trace=result.trace, y_hat=y_hat)


def _conjugate_responses(p: ProblemInstance):
    def response_term(net, k, Y_tilde, alpha, A_next, N_total):
        return net.local(lambda node, lam: conjugate_argmax(p, node, lam), Y_tilde), 1
    return response_term


def pdstm(p: ProblemInstance, g: LaplacianGraph, N: int | None = None, eps: float | None = None,
          network=None, settings: MethodSettings | None = None) -> MethodResult:
    """Primal-dual STM from y⁰ = 0; rounds equal iterations."""
    if eps is None and settings is not None:
        eps = settings.eps
    settings = settings or MethodSettings(eps=eps if eps is not None else float("inf"))
    return _run_dual_averaged("pdstm", p, g, eps, N, _conjugate_responses(p), network, settings, {})


def spdstm(p: ProblemInstance, g: LaplacianGraph, cfg: StochasticOracleConfig, eps: float, beta: float = 0.1,
           N: int | None = None, network=None, settings: MethodSettings | None = None) -> MethodResult:
    """
    PDSTM with mini-batched stochastic conjugate responses.

    Dual gradient noise has variance σ_ψ² = λmax·σ_φ²; batch sizes follow
    batch_size_rule with that variance.
    """
    settings = settings or MethodSettings(eps=eps, beta=beta, stochastic=cfg)
    sigma_psi = math.sqrt(g.lambda_max * cfg.sigma_phi ** 2)
    samplers = [dual_sampler(p, k, cfg) for k in range(p.m)]

    def response_term(net, k, Y_tilde, alpha, A_next, N_total):
        r = batch_size_rule(k, sigma_psi, alpha, A_next, 0.0, eps, N_total, settings.beta, settings.c_b)
        return net.local(lambda node, lam: batched_grad(samplers[node], lam, r, k), Y_tilde, calls=r), r

    return _run_dual_averaged("spdstm", p, g, eps, N, response_term, network, settings, {
        "sigma_phi": cfg.sigma_phi,
        "master_seed": cfg.master_seed,
    })


def dual_sc_solve(p: ProblemInstance, g: LaplacianGraph, eps: float, network=None,
                  settings: MethodSettings | None = None, budget: int | None = None) -> MethodResult:
    """
    Strongly convex dual route: STM(L_ψ, μ_ψ) until ‖∇ψ(ŷ)‖ ≤ ε/R_y.

    ‖∇ψ(ŷ)‖ = ‖√W̄ 𝐱(ŷ)‖ is checked at every iterate, costing one extra
    response and one extra round. Raises NotConverged at the budget.
    """
    _require_dual(p, g)
    if eps <= 0:
        raise InvalidTolerance(f"eps must be positive, got {eps}")
    settings = settings or MethodSettings(eps=eps)
    network = CentralizedNetwork(g) if network is None else network
    m = p.m

    R_y = dual_radius(p, g)
    target = eps / R_y if R_y > 0 else eps
    respond = lambda Y: network.local(lambda node, lam: conjugate_argmax(p, node, lam), Y)
    grad_norm_at = lambda X: math.sqrt(max(float(np.vdot(X, network.mix(X))), 0.0))

    Y_hat = np.zeros((m, p.n))
    X = respond(Y_hat)
    grad_norm = grad_norm_at(X)
    iterations = 0
    trace = None

    if grad_norm > target:
        constants = dual_constants(p, g)
        L_psi, mu_psi = constants.L_psi, constants.mu_psi
        R_sum, eps_sum = m * R_y, m * eps
        if budget is None:
            log_term = math.log(max(2.0 * L_psi ** 2 * R_sum ** 4 / eps_sum ** 2, math.e))
            budget = math.ceil(settings.n_constant * math.sqrt(L_psi / mu_psi) * (2.0 + log_term))
            budget = min(budget, HARD_ITERATION_CAP)

        state = {"X": X, "norm": grad_norm}

        def step_gradient(k, Y_tilde, alpha, A_next):
            return network.mix(respond(Y_tilde)), 1

        def check(info):
            state["X"] = respond(info.triple.x)
            state["norm"] = grad_norm_at(state["X"])
            return state["norm"] <= target

        logging.info(f"dual_sc_solve: budget={budget}, L_psi={L_psi:.4g}, mu_psi={mu_psi:.4g}")
        result = run_similar_triangles(
            step_gradient, L_psi, mu_psi, Y_hat, budget,
            line4=settings.line4, radicand=settings.radicand,
            callback=check, counter=_counter(network),
        )
        if not result.stopped_early:
            raise NotConverged(
                f"Dual gradient norm {state['norm']:.3e} above target {target:.3e} after {budget} iterations"
            )
        Y_hat, X, grad_norm = result.x, state["X"], state["norm"]
        iterations, trace = result.iterations, result.trace

    cert = certificate(p, g, X, y_hat=Y_hat, R_y=R_y)
    primal_gap_bound = float(np.vdot(X, Y_hat)) / m
    report = _build_report("dual_sc_solve", network, cert, eps, R_y, settings, {
        "iterations": iterations,
        "grad_norm": grad_norm,
        "grad_norm_target": target,
        "primal_gap_bound": primal_gap_bound,
        "chi": g.chi,
    })
    logging.info(f"dual_sc_solve done: {iterations} iterations, grad norm {grad_norm:.3e}")
    if trace is None:
        trace = pd.DataFrame(columns=["k", "A_k", "alpha_k", "r_k", "f_gap", "grad_norm", "rounds", "oracle_calls"])
    return MethodResult(x=X, certificate=cert, report=report, trace=trace, y_hat=Y_hat, grad_norm=grad_norm)


# ==========================================================
# Registry
# ==========================================================

def _registered_pstm(p, g, settings, network=None):
    return pstm(penalty_lift(p, g, settings.eps), settings.mode, network=network, settings=settings)


def _registered_pbstm(p, g, settings, network=None):
    return pbstm(penalty_lift(p, g, settings.eps), settings.stochastic, settings.eps, settings.beta,
                 settings.mode, network=network, settings=settings)


def _registered_pdstm(p, g, settings, network=None):
    return pdstm(p, g, settings.N, settings.eps, network=network, settings=settings)


def _registered_spdstm(p, g, settings, network=None):
    return spdstm(p, g, settings.stochastic, settings.eps, settings.beta, settings.N,
                  network=network, settings=settings)


def _registered_dual_sc(p, g, settings, network=None):
    return dual_sc_solve(p, g, settings.eps, network=network, settings=settings)


METHODS = {
    "pstm": _registered_pstm,
    "pbstm": _registered_pbstm,
    "pdstm": _registered_pdstm,
    "spdstm": _registered_spdstm,
    "dual_sc_solve": _registered_dual_sc,
}


def run_method(name: str, p: ProblemInstance, g: LaplacianGraph, settings: MethodSettings, network=None) -> MethodResult:
    if name not in METHODS:
        raise ValueError(f"Unknown method '{name}', expected one of {sorted(METHODS)}")
    return METHODS[name](p, g, settings, network)
