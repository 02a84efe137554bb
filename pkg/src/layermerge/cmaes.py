"""CMA-ES over the unit box, maximizing a black-box fitness.

Standard (mu/mu_w, lambda) CMA-ES with cumulative step-size adaptation and
rank-one + rank-mu covariance updates. Candidates are clamped to [0, 1] before
evaluation and the clamped points are what ``tell`` learns from. Internally the
strategy minimizes -F.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

STAGNATION_GENERATIONS = 30
STAGNATION_TOL = 1e-12
EIGEN_FLOOR = 1e-12


def default_pop_size(dim: int) -> int:
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    return 4 + int(math.floor(3 * math.log(dim)))


@dataclass
class CmaConfig:
    dim: int
    pop_size: int | None = None
    mu: int | None = None
    mean0: Sequence[float] | None = None
    sigma0: float = 0.3
    max_evals: int = 1600
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.pop_size is None:
            self.pop_size = default_pop_size(self.dim)
        if self.pop_size < 2:
            raise ValueError("pop_size must be >= 2")
        if self.mu is None:
            self.mu = self.pop_size // 2
        if not 1 <= self.mu <= self.pop_size:
            raise ValueError("mu must lie in [1, pop_size]")
        if self.mean0 is None:
            self.mean0 = [0.5] * self.dim
        if len(self.mean0) != self.dim:
            raise ValueError("mean0 length must equal dim")
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")

    @property
    def weights(self) -> np.ndarray:
        # w_i proportional to ln(mu + 1/2) - ln(i), strictly decreasing, sum 1
        raw = math.log(self.mu + 0.5) - np.log(np.arange(1, self.mu + 1))
        return raw / raw.sum()


@dataclass
class CmaState:
    config: CmaConfig
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int = 0
    eig_basis: np.ndarray = field(default=None)
    eig_scale: np.ndarray = field(default=None)
    eigen_generation: int = -1

    # strategy constants
    mu_eff: float = 0.0
    c_sigma: float = 0.0
    d_sigma: float = 0.0
    c_c: float = 0.0
    c_1: float = 0.0
    c_mu: float = 0.0
    chi_n: float = 0.0

    @classmethod
    def initial(cls, config: CmaConfig) -> "CmaState":
        n = config.dim
        w = config.weights
        mu_eff = 1.0 / float(np.sum(w**2))
        c_sigma = (mu_eff + 2) / (n + mu_eff + 5)
        d_sigma = 1 + 2 * max(0.0, math.sqrt((mu_eff - 1) / (n + 1)) - 1) + c_sigma
        c_c = (4 + mu_eff / n) / (n + 4 + 2 * mu_eff / n)
        c_1 = 2 / ((n + 1.3) ** 2 + mu_eff)
        c_mu = min(1 - c_1, 2 * (mu_eff - 2 + 1 / mu_eff) / ((n + 2) ** 2 + mu_eff))
        chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n**2))
        state = cls(
            config=config,
            mean=np.clip(np.asarray(config.mean0, dtype=np.float64), 0.0, 1.0),
            sigma=float(config.sigma0),
            cov=np.eye(n),
            p_sigma=np.zeros(n),
            p_c=np.zeros(n),
            mu_eff=mu_eff,
            c_sigma=c_sigma,
            d_sigma=d_sigma,
            c_c=c_c,
            c_1=c_1,
            c_mu=c_mu,
            chi_n=chi_n,
        )
        state._refresh_eigen(force=True)
        return state

    def _refresh_eigen(self, force: bool = False) -> None:
        n = self.config.dim
        # lazy decomposition: O(n^2) amortized per generation
        lag = max(1, int(1 / (10 * n * (self.c_1 + self.c_mu))))
        if not force and self.generation - self.eigen_generation < lag:
            return
        if not np.all(np.isfinite(self.cov)):
            raise FloatingPointError("covariance matrix has non-finite entries")
        self.cov = (self.cov + self.cov.T) / 2
        vals, vecs = np.linalg.eigh(self.cov)
        if vals.min() < EIGEN_FLOOR:
            vals = np.maximum(vals, EIGEN_FLOOR)
            self.cov = (vecs * vals) @ vecs.T
            self.cov = (self.cov + self.cov.T) / 2
        self.eig_basis = vecs
        self.eig_scale = np.sqrt(vals)
        self.eigen_generation = self.generation

    def invsqrt_cov(self) -> np.ndarray:
        return (self.eig_basis / self.eig_scale) @ self.eig_basis.T


def ask(state: CmaState) -> list[np.ndarray]:
    """Sample one population; deterministic in (seed, generation)."""
    cfg = state.config
    rng = np.random.default_rng([cfg.seed, state.generation])
    z = rng.standard_normal((cfg.pop_size, cfg.dim))
    steps = (z * state.eig_scale) @ state.eig_basis.T
    return [np.clip(state.mean + state.sigma * y, 0.0, 1.0) for y in steps]


def tell(state: CmaState, candidates: Sequence[np.ndarray], fitness: Sequence[float]) -> CmaState:
    cfg = state.config
    n = cfg.dim
    if len(candidates) != cfg.pop_size or len(fitness) != cfg.pop_size:
        raise ValueError(f"expected {cfg.pop_size} candidates, got {len(candidates)}")
    f = np.asarray(fitness, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite fitness value")

    order = np.argsort(-f, kind="stable")[: cfg.mu]
    w = cfg.weights
    x = np.asarray(candidates, dtype=np.float64)[order]
    y = (x - state.mean) / state.sigma
    y_w = w @ y

    state.mean = state.mean + state.sigma * y_w

    state.p_sigma = (1 - state.c_sigma) * state.p_sigma + math.sqrt(
        state.c_sigma * (2 - state.c_sigma) * state.mu_eff
    ) * (state.invsqrt_cov() @ y_w)
    norm_ps = float(np.linalg.norm(state.p_sigma))
    decay = math.sqrt(1 - (1 - state.c_sigma) ** (2 * (state.generation + 1)))
    h_sigma = 1.0 if norm_ps / decay < (1.4 + 2 / (n + 1)) * state.chi_n else 0.0

    state.p_c = (1 - state.c_c) * state.p_c + h_sigma * math.sqrt(state.c_c * (2 - state.c_c) * state.mu_eff) * y_w

    rank_one = np.outer(state.p_c, state.p_c)
    rank_mu = (y * w[:, None]).T @ y
    old_weight = 1 - state.c_1 - state.c_mu + (1 - h_sigma) * state.c_1 * state.c_c * (2 - state.c_c)
    state.cov = old_weight * state.cov + state.c_1 * rank_one + state.c_mu * rank_mu

    state.sigma *= math.exp((state.c_sigma / state.d_sigma) * (norm_ps / state.chi_n - 1))
    state.generation += 1
    state._refresh_eigen()
    return state


# -- driver -------------------------------------------------------------------


@dataclass
class TraceRow:
    generation: int
    best: float
    mean: float
    sigma: float
    evals: int

    def csv(self) -> str:
        return f"{self.generation},{self.best!r},{self.mean!r},{self.sigma!r},{self.evals}"


@dataclass
class RunResult:
    best_x: np.ndarray
    best_f: float
    evals: int
    generations: int
    stop_reason: str
    trace: list[TraceRow] = field(default_factory=list)


class CmaAborted(RuntimeError):
    def __init__(self, message: str, partial: RunResult):
        super().__init__(message)
        self.partial = partial


def run(
    config: CmaConfig,
    fitness: Callable[[np.ndarray], float],
    evaluations: Callable[[], int] | None = None,
    on_generation: Callable[[CmaState, TraceRow], None] | None = None,
) -> RunResult:
    """Maximize ``fitness`` until the evaluation cap or stagnation.

    ``evaluations`` reports budget consumption; by default every fitness call
    counts. The initial mean is always evaluated first, so at least one
    evaluation happens even with a cap of 0.
    """
    calls = 0

    def counted(x: np.ndarray) -> float:
        nonlocal calls
        value = float(fitness(x))
        calls += 1
        return value

    used = evaluations if evaluations is not None else (lambda: calls)
    state = CmaState.initial(config)
    best_x, best_f = state.mean.copy(), -math.inf
    trace: list[TraceRow] = []

    def result(reason: str) -> RunResult:
        return RunResult(best_x, best_f, used(), state.generation, reason, trace)

    try:
        best_f = counted(state.mean.copy())
        stale = 0
        while True:
            if used() >= config.max_evals:
                return result("budget")
            candidates = ask(state)
            scores = []
            for x in candidates:
                if used() >= config.max_evals:
                    return result("budget")
                f = counted(x)
                scores.append(f)
                if f > best_f:
                    best_x, best_f = x.copy(), f
            previous = trace[-1].best if trace else None
            tell(state, candidates, scores)
            row = TraceRow(state.generation, best_f, float(np.mean(scores)), state.sigma, used())
            trace.append(row)
            if on_generation is not None:
                on_generation(state, row)
            if previous is not None and best_f - previous <= STAGNATION_TOL:
                stale += 1
            else:
                stale = 0
            if stale >= STAGNATION_GENERATIONS:
                return result("stagnation")
    except Exception as exc:
        raise CmaAborted(f"search aborted at generation {state.generation}: {exc}", result("error")) from exc
