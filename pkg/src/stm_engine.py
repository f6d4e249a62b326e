"""
Similar Triangles Method (STM): coefficient schedule, the deterministic and
batched-stochastic iterations, the composite z-step for a quadratic graph
penalty, and the Chebyshev solver used for that step.

The iteration works on plain n-vectors and on stacked (m, n) arrays alike.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from src.config import DIVERGENCE_FACTOR, HARD_ITERATION_CAP, INNER_TOL_FLOOR
from src.errors import BudgetExceeded, DivergenceError, InvalidTolerance, NonpositiveL
from src.report import trace_frame

RADICAND_MODES = ("printed", "squared")
LINE4_MODES = ("corrected", "literal")


# ==========================================================
# Domain Types
# ==========================================================

@dataclass
class StmSchedule:
    L: float
    mu: float
    alphas: list = field(default_factory=lambda: [0.0])
    As: list = field(default_factory=lambda: [0.0])
    batch_sizes: list = field(default_factory=lambda: [0])

    @property
    def N(self) -> int:
        return len(self.alphas) - 1


@dataclass
class IterateTriple:
    x: np.ndarray
    z: np.ndarray
    x_tilde: np.ndarray


@dataclass
class StepInfo:
    """What the iteration hands to a callback after step k → k+1."""
    k: int
    alpha: float
    A_next: float
    triple: IterateTriple
    grad: np.ndarray
    batch_size: int


@dataclass
class StmResult:
    x: np.ndarray
    triple: IterateTriple
    schedule: StmSchedule
    trace: pd.DataFrame
    oracle_calls: int
    iterations: int
    stopped_early: bool = False
    z_excursion: float | None = None


# ==========================================================
# Coefficient schedule
# ==========================================================

def stm_step_coeffs(A_k: float, L: float, mu: float, radicand: str = "printed") -> tuple:
    """
    Next step size and partial sum from the line-2 recurrence.

    radicand="printed" uses (1+A_kμ)/(4L²) under the root; "squared" uses
    (1+A_kμ)²/(4L²). The two agree when μ = 0 or A_k = 0.
    """
    if L <= 0:
        raise NonpositiveL(f"Smoothness constant must be positive, got {L}")
    if A_k < 0 or mu < 0:
        raise ValueError(f"Need A_k >= 0 and mu >= 0, got A_k={A_k}, mu={mu}")
    if radicand not in RADICAND_MODES:
        raise ValueError(f"Unknown radicand mode '{radicand}'")

    b = 1.0 + A_k * mu
    head = b / (4.0 * L * L) if radicand == "printed" else b * b / (4.0 * L * L)
    alpha = b / (2.0 * L) + math.sqrt(head + A_k * b / L)
    return alpha, A_k + alpha


def schedule_residual(A_k: float, alpha_next: float, L: float, mu: float, radicand: str = "printed") -> float:
    """Relative residual of (α − (1+A_kμ)/(2L))² = radicand + A_k(1+A_kμ)/L."""
    b = 1.0 + A_k * mu
    head = b / (4.0 * L * L) if radicand == "printed" else b * b / (4.0 * L * L)
    lhs = (alpha_next - b / (2.0 * L)) ** 2
    rhs = head + A_k * b / L
    return abs(lhs - rhs) / max(lhs, rhs, 1e-300)


def schedule(L: float, mu: float, N: int, radicand: str = "printed") -> StmSchedule:
    sched = StmSchedule(L=L, mu=mu)
    for _ in range(N):
        alpha, A_next = stm_step_coeffs(sched.As[-1], L, mu, radicand)
        sched.alphas.append(alpha)
        sched.As.append(A_next)
        sched.batch_sizes.append(1)
    return sched


# ==========================================================
# Iteration counts and complexity expressions
# ==========================================================

def iteration_budget(L: float, mu: float, R: float, eps: float, n_constant: float = 1.0, cap: int | None = None) -> int:
    """
    n_constant · min(√(LR²/ε), √(L/μ)·ln(LR²/ε)), rounded up and clamped to [1, cap].
    """
    if eps <= 0:
        raise InvalidTolerance(f"eps must be positive, got {eps}")
    cap = HARD_ITERATION_CAP if cap is None else cap

    ratio = L * R * R / eps
    bound = math.sqrt(ratio)
    if mu > 0:
        bound = min(bound, math.sqrt(L / mu) * math.log(max(ratio, math.e)))

    N = max(1, math.ceil(n_constant * bound))
    if N > cap:
        logging.warning(f"Iteration budget {N} capped at {cap}")
        N = cap
    return N


def complexity_bounds(kind: str, L: float, R: float, eps: float, mu: float = 0.0,
                      sigma_sq: float = 0.0, beta: float = 0.1, chi: float = 1.0) -> dict:
    """
    Leading-order iteration, oracle and round counts with all hidden constants 1.

    kind: "primal" / "primal_stochastic" (L, R are the primal constants) or
    "dual" / "dual_stochastic" (L, R are L_psi and R_y; sigma_sq is sigma_psi²).
    Primal rounds carry the √χ inner-solve factor; dual rounds are one per iteration.
    """
    N = math.sqrt(L * R * R / eps)
    if mu > 0:
        N = min(N, math.sqrt(L / mu) * math.log(max(L * R * R / eps, math.e)))
    N = max(N, 1.0)

    oracle = N
    if kind.endswith("stochastic"):
        oracle = N + sigma_sq * R * R * math.log(N / beta) / (eps * eps)

    if kind.startswith("primal"):
        rounds = N * math.sqrt(chi)
    elif kind.startswith("dual"):
        rounds = N
    else:
        raise ValueError(f"Unknown complexity kind '{kind}'")

    return {"iterations": N, "oracle_calls": oracle, "rounds": rounds}


# ==========================================================
# Mini-batching
# ==========================================================

def batch_size_rule(k: int, sigma: float, alpha_next: float, A_next: float, mu: float,
                    eps: float, N: int, beta: float, c_b: float = 1.0) -> int:
    """r = max(1, ⌈c_b·σ²·α_{k+1}·ln(N/β) / ((1+A_{k+1}μ)·ε)⌉)."""
    if eps <= 0:
        raise InvalidTolerance(f"eps must be positive, got {eps}")
    if not 0 < beta < 1:
        raise InvalidTolerance(f"beta must lie in (0, 1), got {beta}")
    if N < 1 or c_b <= 0:
        raise InvalidTolerance(f"Need N >= 1 and c_b > 0, got N={N}, c_b={c_b}")

    if sigma == 0:
        return 1
    r = c_b * sigma * sigma * alpha_next * math.log(N / beta) / ((1.0 + A_next * mu) * eps)
    return max(1, math.ceil(r))


def batched_grad(stoch_oracle, x, r: int, lineage: int = 0) -> np.ndarray:
    """
    Mean of r stochastic gradients with batch indices 0..r−1 of iteration `lineage`.

    stoch_oracle(x, iteration, start, count) returns a (count, n) array.
    """
    return np.mean(stoch_oracle(x, lineage, 0, r), axis=0)


# ==========================================================
# Chebyshev solver for (scale·I + coeff·W̄⊗I) x = rhs
# ==========================================================

@dataclass
class ChebyshevResult:
    x: np.ndarray
    iterations: int
    residual: float


def chebyshev_quadratic_solve(network, rhs, scale: float, coeff: float, tol: float,
                              budget: int | None = None, lambda_bounds: tuple | None = None) -> ChebyshevResult:
    """
    Solve (scale·I + coeff·W̄⊗I) x = rhs with Chebyshev semi-iteration.

    Starts from rhs/scale, which is exact on the consensus subspace, so the
    residual lives in the image of W̄ and the reduced bounds
    [scale + coeff·λmin⁺, scale + coeff·λmax] apply. Every operator
    application is one `network.mix`, i.e. one communication round.
    """
    graph = network.graph
    lo_w, hi_w = lambda_bounds if lambda_bounds is not None else (graph.lambda_min_plus, graph.lambda_max)

    x = np.asarray(rhs, dtype=float) / scale
    if coeff == 0 or hi_w == 0:
        return ChebyshevResult(x=x, iterations=0, residual=0.0)

    r = -(coeff / scale) * network.mix(rhs)
    residual = float(np.linalg.norm(r))
    if residual <= tol:
        return ChebyshevResult(x=x, iterations=0, residual=residual)

    lmin, lmax = scale + coeff * lo_w, scale + coeff * hi_w
    if budget is None:
        kappa = lmax / lmin
        budget = max(1, math.ceil(math.sqrt(kappa) * math.log(2.0 * residual / tol)))

    d = (lmax + lmin) / 2
    c = (lmax - lmin) / 2
    alpha = None
    p = None

    k = 0
    while residual > tol and k < budget:
        if k == 0:
            p = r.copy()
            alpha = 1.0 / d
        else:
            beta = 0.5 * (c * alpha) ** 2
            if k > 1:
                beta *= 0.5
            alpha = 1.0 / (d - beta / alpha)
            p = r + beta * p

        x = x + alpha * p
        r = r - alpha * (scale * p + coeff * network.mix(p))
        residual = float(np.linalg.norm(r))
        k += 1

    if residual > tol:
        raise BudgetExceeded(
            f"Chebyshev stopped at residual {residual:.3e} > {tol:.3e} after {k} iterations",
            achieved=residual,
            iterations=k,
            solution=x,
        )
    return ChebyshevResult(x=x, iterations=k, residual=residual)


# ==========================================================
# Composite z-step for h(𝐱) = c·𝐱ᵀ(W̄⊗I)𝐱
# ==========================================================

class QuadraticPenalty:
    """
    Graph penalty h(𝐱) = coeff·𝐱ᵀ(W̄⊗I)𝐱 handled inside the z-step.

    inner_accuracy is the objective accuracy δ demanded of each auxiliary
    solve; the residual tolerance follows from the (1+μA)-strong convexity of
    the auxiliary quadratic. Counters accumulate over a run.
    """

    def __init__(self, network, coeff: float, inner_accuracy: float = INNER_TOL_FLOOR, budget: int | None = None):
        self.network = network
        self.coeff = coeff
        self.inner_accuracy = max(inner_accuracy, INNER_TOL_FLOOR)
        self.budget = budget
        self.inner_iterations = 0
        self.solves = 0
        self.budget_exceeded = 0

    @property
    def lipschitz(self) -> float:
        return 2.0 * self.coeff * self.network.graph.lambda_max

    def solve(self, accumulator, A_next: float, mu: float) -> np.ndarray:
        """argmin_z ½‖z‖²(1+μA) − ⟨accumulator, z⟩ + A·h(z)."""
        scale = 1.0 + mu * A_next
        tol = math.sqrt(2.0 * self.inner_accuracy * scale)
        self.solves += 1
        try:
            result = chebyshev_quadratic_solve(
                self.network, accumulator, scale, 2.0 * self.coeff * A_next, tol, self.budget
            )
        except BudgetExceeded as e:
            self.budget_exceeded += 1
            self.inner_iterations += e.iterations
            logging.warning(f"Inner solve over budget: {e}")
            return e.solution
        self.inner_iterations += result.iterations
        return result.x


def composite_z_step(linear_history, alpha_seq, z_anchor, mu: float, penalty: QuadraticPenalty,
                     A_total: float | None = None) -> np.ndarray:
    """
    Minimise Σ_l α_l{⟨g_l, z − x̃_l⟩ + h(z) + (μ/2)‖z − x̃_l‖²} + ½‖z − z_anchor‖².

    linear_history is a sequence of (x̃_l, g_l) pairs matching alpha_seq.
    z_anchor may already fold in earlier terms as z⁰ + Σ α_l(μx̃_l − g_l);
    A_total is then the weight of the whole history (default Σ alpha_seq).
    With penalty.coeff = 0 this is the closed-form line-4 step.
    """
    accumulator = np.array(z_anchor, dtype=float)
    for alpha, (x_tilde, g) in zip(alpha_seq, linear_history):
        accumulator = accumulator + alpha * (mu * x_tilde - g)
    A_total = float(np.sum(alpha_seq)) if A_total is None else A_total
    return penalty.solve(accumulator, A_total, mu)



# ==========================================================
# The iteration
# ==========================================================

def run_similar_triangles(step_gradient, L: float, mu: float, x0, N: int, *,
                          line4: str = "corrected", radicand: str = "printed",
                          penalty: QuadraticPenalty | None = None, gap=None, callback=None,
                          counter=None, x_star=None, divergence_factor: float | None = None) -> StmResult:
    """
    Core STM loop shared by every method.

    Parameters
    ----------
    step_gradient : callable (k, x_tilde, alpha, A_next) -> (gradient, batch size)
    penalty       : optional QuadraticPenalty solved inside the z-step
    gap           : optional callable (triple) -> objective gap, traced and guarded
    callback      : optional callable (StepInfo) -> truthy to stop early
    counter       : optional callable () -> (rounds, oracle_calls) for the trace
    x_star        : optional minimiser; tracks max ‖z^k − x*‖ / ‖x⁰ − x*‖

    Returns
    -------
    StmResult with the last iterate, schedule and per-iteration trace
    """
    if line4 not in LINE4_MODES:
        raise ValueError(f"Unknown line-4 mode '{line4}'")
    if penalty is not None and line4 != "corrected":
        raise ValueError("The composite z-step exists only in corrected mode")
    divergence_factor = DIVERGENCE_FACTOR if divergence_factor is None else divergence_factor

    x = np.array(x0, dtype=float)
    z = x.copy()
    accumulator = x.copy()
    triple = IterateTriple(x=x, z=z, x_tilde=x.copy())
    sched = StmSchedule(L=L, mu=mu)
    rows = []
    total_calls = 0
    stopped = False

    gap0 = gap(triple) if gap is not None else None
    R0 = float(np.linalg.norm(x - x_star)) if x_star is not None else None
    excursion = 0.0

    A = 0.0
    for k in range(N):
        alpha, A_next = stm_step_coeffs(A, L, mu, radicand)
        x_tilde = (A * x + alpha * z) / A_next
        g, r = step_gradient(k, x_tilde, alpha, A_next)
        total_calls += r

        if penalty is not None:
            z = composite_z_step([(x_tilde, g)], [alpha], accumulator, mu, penalty, A_total=A_next)
            accumulator = accumulator + alpha * (mu * x_tilde - g)
        elif line4 == "corrected":
            z = ((1.0 + A * mu) * z + alpha * (mu * x_tilde - g)) / (1.0 + A_next * mu)
        else:
            z = z - alpha / (1.0 + mu) * (g - mu * x_tilde)

        x = (A * x + alpha * z) / A_next
        A = A_next

        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"Non-finite iterate at k={k + 1}")

        sched.alphas.append(alpha)
        sched.As.append(A)
        sched.batch_sizes.append(r)
        triple = IterateTriple(x=x, z=z, x_tilde=x_tilde)

        if R0:
            excursion = max(excursion, float(np.linalg.norm(z - x_star)) / R0)

        if callback is not None and callback(StepInfo(k + 1, alpha, A, triple, g, r)):
            stopped = True

        f_gap = gap(triple) if gap is not None else None
        if f_gap is not None and gap0 is not None and f_gap > divergence_factor * max(gap0, 1e-12):
            raise DivergenceError(f"Objective gap {f_gap:.3e} exceeds {divergence_factor:g} x initial gap {gap0:.3e}")

        rounds, calls = counter() if counter is not None else (0, total_calls)
        rows.append({
            "k": k + 1,
            "A_k": A,
            "alpha_k": alpha,
            "r_k": r,
            "f_gap": f_gap,
            "grad_norm": float(np.linalg.norm(g)),
            "rounds": rounds,
            "oracle_calls": calls,
        })

        if stopped:
            break

    if R0 and excursion > 3.0:
        logging.warning(f"Mirror sequence strayed to {excursion:.2f} R from the minimiser")

    return StmResult(
        x=x,
        triple=triple,
        schedule=sched,
        trace=trace_frame(rows),
        oracle_calls=total_calls,
        iterations=sched.N,
        stopped_early=stopped,
        z_excursion=excursion if R0 else None,
    )


def stm(grad_oracle, L: float, mu: float, x0, N: int, f=None, f_star: float | None = None,
        line4: str = "corrected", radicand: str = "printed", x_star=None) -> StmResult:
    """Deterministic STM with a plain gradient oracle x -> ∇f(x)."""
    def step_gradient(k, x_tilde, alpha, A_next):
        return grad_oracle(x_tilde), 1

    gap = None
    if f is not None and f_star is not None:
        gap = lambda t: f(t.x) - f_star

    result = run_similar_triangles(step_gradient, L, mu, x0, N, line4=line4, radicand=radicand, gap=gap, x_star=x_star)
    logging.info(f"STM finished {result.iterations} iterations")
    return result


def bstm(stoch_oracle, L: float, mu: float, sigma: float, x0, eps: float, beta: float, R: float,
         N: int | None = None, n_constant: float = 1.0, c_b: float = 1.0, f=None, f_star: float | None = None,
         line4: str = "corrected", radicand: str = "printed") -> StmResult:
    """
    STM with mini-batched stochastic gradients.

    The batch at step k follows batch_size_rule; samples of step k carry
    lineage iteration k and batch indices 0..r_k−1.
    """
    if N is None:
        N = iteration_budget(L, mu, R, eps, n_constant)

    def step_gradient(k, x_tilde, alpha, A_next):
        r = batch_size_rule(k, sigma, alpha, A_next, mu, eps, N, beta, c_b)
        return batched_grad(stoch_oracle, x_tilde, r, k), r

    gap = None
    if f is not None and f_star is not None:
        gap = lambda t: f(t.x) - f_star

    result = run_similar_triangles(step_gradient, L, mu, x0, N, line4=line4, radicand=radicand, gap=gap)
    logging.info(f"BSTM finished {result.iterations} iterations, {result.oracle_calls} oracle calls")
    return result
