"""
Finite-sum problem instances and their four oracle kinds.

F(𝐱) = (1/m)Σ_k f_k(x_k). Each node k owns f_k and answers:
  - primal_grad / stochastic_primal_grad           ∇f_k(x) (+ noise)
  - conjugate_argmax / stochastic_conjugate_argmax ∇φ_k(lam) = argmax_x {⟨lam,x⟩ − f_k(x)} (+ noise)

Noise is keyed by lineage (master_seed, stream, node, iteration, batch_index)
through a counter-based Philox stream, so results never depend on call order.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.special

from src.errors import (
    DimensionMismatch,
    MissingCurvature,
    NotStronglyConvex,
    OracleFailure,
    SingularInstance,
)
from src.graph_spectra import LaplacianGraph
from src.report import compute_hash


# ==========================================================
# Component families
# ==========================================================

class QuadraticFamily:
    """f_k(x) = ½(x − b_k)ᵀH_k(x − b_k)."""

    name = "quadratic"

    def __init__(self, H: np.ndarray, b: np.ndarray):
        self.H = H
        self.b = b
        self._factors = {}

    def value(self, k, x):
        d = x - self.b[k]
        return 0.5 * float(d @ self.H[k] @ d)

    def grad(self, k, x):
        return self.H[k] @ (x - self.b[k])

    def conjugate_argmax(self, k, lam):
        if k not in self._factors:
            self._factors[k] = scipy.linalg.cho_factor(self.H[k])
        return scipy.linalg.cho_solve(self._factors[k], lam) + self.b[k]

    def params(self) -> dict:
        return {"H": self.H.tolist(), "b": self.b.tolist()}


class LogisticFamily:
    """f_k(x) = (1/s)Σ_i log(1 + exp(−y_i a_iᵀx)) + (reg/2)‖x‖²."""

    name = "logistic"

    def __init__(self, A: np.ndarray, y: np.ndarray, reg: float, newton_tol: float = 1e-10):
        self.A = A
        self.y = y
        self.reg = reg
        self.newton_tol = newton_tol

    def value(self, k, x):
        margins = self.y[k] * (self.A[k] @ x)
        return float(np.mean(np.logaddexp(0.0, -margins))) + 0.5 * self.reg * float(x @ x)

    def grad(self, k, x):
        margins = self.y[k] * (self.A[k] @ x)
        weights = -self.y[k] * scipy.special.expit(-margins)
        return self.A[k].T @ weights / self.A[k].shape[0] + self.reg * x

    def hessian(self, k, x):
        s = scipy.special.expit(self.A[k] @ x)
        curvature = s * (1.0 - s)
        n = x.shape[0]
        return (self.A[k].T * curvature) @ self.A[k] / self.A[k].shape[0] + self.reg * np.eye(n)

    def _newton(self, value, grad, hess, x0, target):
        # damped Newton on value(x) − ⟨target, x⟩
        x = x0.copy()
        for _ in range(100):
            g = grad(x) - target
            if np.linalg.norm(g) <= self.newton_tol:
                return x
            step = scipy.linalg.solve(hess(x), g, assume_a="pos")
            base = value(x) - target @ x
            t = 1.0
            while value(x - t * step) - target @ (x - t * step) > base - 0.25 * t * (g @ step) and t > 1e-12:
                t *= 0.5
            x = x - t * step
        raise OracleFailure(f"Newton solve stalled at gradient norm {np.linalg.norm(grad(x) - target):.3e}")

    def conjugate_argmax(self, k, lam):
        return self._newton(
            lambda x: self.value(k, x),
            lambda x: self.grad(k, x),
            lambda x: self.hessian(k, x),
            np.zeros_like(lam),
            lam,
        )

    def params(self) -> dict:
        return {"reg": self.reg}


# ==========================================================
# Domain Types
# ==========================================================

@dataclass(frozen=True, eq=False)
class ProblemInstance:
    m: int
    n: int
    family: object = field(repr=False)
    L: float
    mu: float
    seed: int | None = None
    M: float | None = None
    known_opt: tuple | None = field(default=None, repr=False)
    singular: bool = False
    generator: dict = field(default_factory=dict, repr=False)

    @property
    def family_name(self) -> str:
        return self.family.name


@dataclass(frozen=True)
class StochasticOracleConfig:
    sigma: float = 0.0
    sigma_phi: float = 0.0
    delta_bias: float = 0.0
    master_seed: int = 0


@dataclass(frozen=True)
class DualConstants:
    L_psi: float
    mu_psi: float
    sigma_psi_sq: float
    R_y: float


# ==========================================================
# Instance construction
# ==========================================================

def _quadratic_optimum(H: np.ndarray, b: np.ndarray):
    """
    Minimum-norm minimiser of Σ_k ½(x − b_k)ᵀH_k(x − b_k) and the averaged optimal value.

    A sum of PSD quadratics is bounded below, so a minimiser exists whenever the
    linear term lies in the range of ΣH_k; otherwise None.
    """
    m = H.shape[0]
    H_sum = H.sum(axis=0)
    rhs = np.einsum("kij,kj->i", H, b)
    x_star = scipy.linalg.lstsq(H_sum, rhs)[0]
    if np.linalg.norm(H_sum @ x_star - rhs) > 1e-9 * max(np.linalg.norm(rhs), 1.0):
        return None
    f_star = float(np.mean([0.5 * (x_star - b[k]) @ H[k] @ (x_star - b[k]) for k in range(m)]))
    return x_star, f_star


def quadratic_instance(H, b, seed: int | None = None, generator: dict | None = None) -> ProblemInstance:
    """Build a quadratic instance from explicit H_k (m, n, n) and b_k (m, n)."""
    H = np.asarray(H, dtype=float)
    b = np.asarray(b, dtype=float)
    if H.ndim != 3 or H.shape[1] != H.shape[2] or b.shape != H.shape[:2]:
        raise DimensionMismatch(f"H must be (m, n, n) and b (m, n); got {H.shape} and {b.shape}")
    if not np.allclose(H, np.transpose(H, (0, 2, 1))):
        raise DimensionMismatch("Every H_k must be symmetric")

    spectra = np.array([scipy.linalg.eigh(Hk, eigvals_only=True) for Hk in H])
    mu = max(float(spectra[:, 0].min()), 0.0)
    L = float(spectra[:, -1].max())

    known_opt = _quadratic_optimum(H, b)
    H_sum_spectrum = scipy.linalg.eigh(H.sum(axis=0), eigvals_only=True)
    singular = bool(H_sum_spectrum[0] <= 1e-12 * max(H_sum_spectrum[-1], 1.0))
    if singular:
        logging.warning("Summed Hessian is singular: x* is the minimum-norm minimiser")
    if known_opt is None:
        logging.warning("Linear term lies outside the range of the summed Hessians: known optimum omitted")

    return ProblemInstance(
        m=H.shape[0],
        n=H.shape[1],
        family=QuadraticFamily(H, b),
        L=L,
        mu=mu,
        seed=seed,
        known_opt=known_opt,
        singular=singular,
        generator=generator or {"family": "explicit", **QuadraticFamily(H, b).params()},
    )


def make_quadratic_instance(seed: int, m: int, n: int, mu: float, L: float) -> ProblemInstance:
    """
    Random quadratic instance with every H_k spectrum inside [mu, L].

    When n ≥ 2 the extremes mu and L are attained by every H_k. mu == L
    gives H_k = L·I exactly. Deterministic in seed.
    """
    if not (0 <= mu <= L) or L <= 0:
        raise SingularInstance(f"Need 0 <= mu <= L and L > 0, got mu={mu}, L={L}")
    if m < 1 or n < 1:
        raise DimensionMismatch(f"Need m, n >= 1, got m={m}, n={n}")

    rng = np.random.default_rng(seed)
    H = np.empty((m, n, n))
    for k in range(m):
        if mu == L:
            H[k] = L * np.eye(n)
            continue
        Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
        eigenvalues = rng.uniform(mu, L, size=n)
        if n >= 2:
            eigenvalues[0], eigenvalues[-1] = mu, L
        H[k] = (Q * eigenvalues) @ Q.T
        H[k] = 0.5 * (H[k] + H[k].T)
    b = rng.normal(size=(m, n))

    p = quadratic_instance(
        H, b, seed=seed,
        generator={"family": "quadratic", "seed": seed, "m": m, "n": n, "mu": mu, "L": L},
    )
    # report the configured curvature, not the rounding-perturbed extremes
    return ProblemInstance(
        m=m, n=n, family=p.family, L=L, mu=mu, seed=seed,
        known_opt=p.known_opt, singular=p.singular, generator=p.generator,
    )


def make_logistic_instance(seed: int, m: int, n: int, samples_per_node: int = 20, mu: float = 0.1) -> ProblemInstance:
    """Per-node ℓ2-regularised logistic losses on synthetic separable-ish data."""
    if mu <= 0:
        raise NotStronglyConvex("Logistic instances need a positive regulariser mu")

    rng = np.random.default_rng(seed)
    x_true = rng.normal(size=n)
    A = rng.normal(size=(m, samples_per_node, n)) / math.sqrt(n)
    y = np.sign(A @ x_true + 0.1 * rng.normal(size=(m, samples_per_node)))
    y[y == 0] = 1.0

    family = LogisticFamily(A, y, mu)
    L = max(float(scipy.linalg.eigh(A[k].T @ A[k], eigvals_only=True)[-1]) / (4 * samples_per_node) for k in range(m)) + mu

    x_star = family._newton(
        lambda x: np.mean([family.value(k, x) for k in range(m)]),
        lambda x: np.mean([family.grad(k, x) for k in range(m)], axis=0),
        lambda x: np.mean([family.hessian(k, x) for k in range(m)], axis=0),
        np.zeros(n),
        np.zeros(n),
    )
    f_star = float(np.mean([family.value(k, x_star) for k in range(m)]))

    return ProblemInstance(
        m=m, n=n, family=family, L=L, mu=mu, seed=seed,
        known_opt=(x_star, f_star),
        generator={"family": "logistic", "seed": seed, "m": m, "n": n,
                   "samples_per_node": samples_per_node, "mu": mu},
    )


# ==========================================================
# Deterministic oracles
# ==========================================================

def _check_node(p: ProblemInstance, k: int, v) -> np.ndarray:
    if not 0 <= k < p.m:
        raise DimensionMismatch(f"Node {k} outside [0, {p.m})")
    v = np.asarray(v, dtype=float)
    if v.shape != (p.n,):
        raise DimensionMismatch(f"Expected a vector of length {p.n}, got shape {v.shape}")
    return v


def component_value(p: ProblemInstance, k: int, x) -> float:
    return p.family.value(k, _check_node(p, k, x))


def primal_grad(p: ProblemInstance, k: int, x) -> np.ndarray:
    return p.family.grad(k, _check_node(p, k, x))


def conjugate_argmax(p: ProblemInstance, k: int, lam) -> np.ndarray:
    if p.mu <= 0:
        raise NotStronglyConvex(f"Conjugate maximiser is not unique when mu = {p.mu}")
    return p.family.conjugate_argmax(k, _check_node(p, k, lam))


def conjugate_value(p: ProblemInstance, k: int, lam) -> float:
    """φ_k(lam) = ⟨lam, x(lam)⟩ − f_k(x(lam))."""
    lam = _check_node(p, k, lam)
    x = conjugate_argmax(p, k, lam)
    return float(lam @ x) - p.family.value(k, x)


def objective(p: ProblemInstance, X) -> float:
    """F(𝐱) = (1/m)Σ_k f_k(x_k)."""
    X = np.asarray(X, dtype=float).reshape(p.m, p.n)
    return float(np.mean([p.family.value(k, X[k]) for k in range(p.m)]))


def dual_value(p: ProblemInstance, Lam) -> float:
    """Ψ on the averaged scale: (1/m)Σ_k φ_k(λ_k)."""
    Lam = np.asarray(Lam, dtype=float).reshape(p.m, p.n)
    return float(np.mean([conjugate_value(p, k, Lam[k]) for k in range(p.m)]))


def stacked_optimum(p: ProblemInstance) -> np.ndarray | None:
    """x* replicated on every node, or None when unknown."""
    if p.known_opt is None:
        return None
    return np.tile(p.known_opt[0], (p.m, 1))


# ==========================================================
# Stochastic oracles
# ==========================================================

def _stream_key(master_seed: int, stream: str, node: int, iteration: int) -> int:
    digest = compute_hash({"seed": int(master_seed), "stream": stream, "node": int(node), "iter": int(iteration)})
    return int(digest[:32], 16)


def lineage_normals(master_seed: int, stream: str, node: int, iteration: int, start: int, count: int, n: int) -> np.ndarray:
    """
    Standard normal samples start..start+count−1 of one lineage stream, shape (count, n).

    Sample i occupies Philox counter blocks [i·B, (i+1)·B), B = ceil(n/4), and is
    turned into normals by the inverse CDF, so any sub-range is reproducible on
    its own.
    """
    blocks = -(-n // 4)
    bitgen = np.random.Philox(key=_stream_key(master_seed, stream, node, iteration))
    if start:
        bitgen.advance(start * blocks)
    words = bitgen.random_raw(count * 4 * blocks).reshape(count, 4 * blocks)[:, :n]
    uniforms = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return scipy.special.ndtri(uniforms)


def primal_sampler(p: ProblemInstance, k: int, cfg: StochasticOracleConfig):
    """
    Vectorised stochastic primal oracle for node k.

    Returns sample(x, iteration, start, count) -> (count, n) array of
    ∇f_k(x) + ζ_i, with ζ Gaussian of per-coordinate variance sigma²/n.
    """
    bias = np.full(p.n, cfg.delta_bias / math.sqrt(p.n))

    def sample(x, iteration: int, start: int, count: int) -> np.ndarray:
        g = primal_grad(p, k, x) + bias
        if cfg.sigma == 0:
            return np.tile(g, (count, 1))
        noise = lineage_normals(cfg.master_seed, "primal", k, iteration, start, count, p.n)
        return g + (cfg.sigma / math.sqrt(p.n)) * noise

    return sample


def dual_sampler(p: ProblemInstance, k: int, cfg: StochasticOracleConfig):
    """Vectorised stochastic dual oracle: conjugate_argmax plus sigma_phi noise."""

    def sample(lam, iteration: int, start: int, count: int) -> np.ndarray:
        x = conjugate_argmax(p, k, lam)
        if cfg.sigma_phi == 0:
            return np.tile(x, (count, 1))
        noise = lineage_normals(cfg.master_seed, "dual", k, iteration, start, count, p.n)
        return x + (cfg.sigma_phi / math.sqrt(p.n)) * noise

    return sample


def stochastic_primal_grad(p: ProblemInstance, k: int, x, cfg: StochasticOracleConfig, lineage: tuple) -> np.ndarray:
    iteration, batch_index = lineage
    return primal_sampler(p, k, cfg)(x, iteration, batch_index, 1)[0]


def stochastic_conjugate_argmax(p: ProblemInstance, k: int, lam, cfg: StochasticOracleConfig, lineage: tuple) -> np.ndarray:
    iteration, batch_index = lineage
    return dual_sampler(p, k, cfg)(lam, iteration, batch_index, 1)[0]


# ==========================================================
# Dual constants
# ==========================================================

def dual_radius(p: ProblemInstance, g: LaplacianGraph, safety: float = 2.0) -> float:
    """
    R_y bound ‖∇F(𝐱*)‖/sqrt(λmin⁺) for the averaged objective.

    Without a known optimum the gradient at 𝐱⁰ = 0 stands in, scaled by `safety`.
    """
    if g.lambda_min_plus == 0:
        return 0.0
    if p.known_opt is not None:
        x_point, scale = p.known_opt[0], 1.0
    else:
        x_point, scale = np.zeros(p.n), safety
    grads = np.stack([p.family.grad(k, x_point) for k in range(p.m)]) / p.m
    return scale * float(np.linalg.norm(grads)) / math.sqrt(g.lambda_min_plus)


def dual_constants(p: ProblemInstance, g: LaplacianGraph, cfg: StochasticOracleConfig | None = None, safety: float = 2.0) -> DualConstants:
    if p.mu <= 0:
        raise MissingCurvature("L_psi = lambda_max/mu needs mu > 0")
    if not math.isfinite(p.L):
        raise MissingCurvature("mu_psi = lambda_min_plus/L needs a finite L")
    if p.m != g.m:
        raise DimensionMismatch(f"Instance has {p.m} nodes, graph has {g.m}")

    sigma_phi = cfg.sigma_phi if cfg is not None else 0.0
    return DualConstants(
        L_psi=g.lambda_max / p.mu,
        mu_psi=g.lambda_min_plus / p.L,
        sigma_psi_sq=g.lambda_max * sigma_phi ** 2,
        R_y=dual_radius(p, g, safety),
    )


# ==========================================================
# Validation helpers
# ==========================================================

def curvature_ratios(p: ProblemInstance, samples: int = 100, seed: int = 0) -> tuple:
    """
    Sampled secant ratios ⟨∇f_k(u)−∇f_k(v), u−v⟩/‖u−v‖² over random pairs.

    Returns (min, max); a valid instance has mu <= min and max <= L.
    """
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(samples):
        k = int(rng.integers(p.m))
        u, v = rng.normal(size=p.n), rng.normal(size=p.n)
        d = u - v
        ratios.append(float((p.family.grad(k, u) - p.family.grad(k, v)) @ d) / float(d @ d))
    return min(ratios), max(ratios)


# ==========================================================
# Serialization
# ==========================================================

def save_instance(p: ProblemInstance, path) -> None:
    header = {"m": p.m, "n": p.n, "mu": p.mu, "L": p.L, "family": p.generator.get("family"), "seed": p.seed}
    Path(path).write_text(json.dumps({"header": header, "generator": p.generator}, sort_keys=True, indent=2))


def instance_from_spec(spec: dict) -> ProblemInstance:
    family = spec.get("family")
    if family == "quadratic":
        return make_quadratic_instance(spec["seed"], spec["m"], spec["n"], spec["mu"], spec["L"])
    if family == "logistic":
        return make_logistic_instance(spec["seed"], spec["m"], spec["n"], spec.get("samples_per_node", 20), spec["mu"])
    if family == "explicit":
        return quadratic_instance(spec["H"], spec["b"])
    raise ValueError(f"Unknown problem family '{family}'")


def load_instance(path) -> ProblemInstance:
    with open(path, "r") as f:
        return instance_from_spec(json.load(f)["generator"])
