"""Outer search loop: one CMA-ES run per interpolation weight, best recipe overall.

A state directory holds everything needed to audit or resume a search::

    manifest.json            config echo, parent paths, results once complete
    cache.tsv                every evaluated (alpha, gates) with accuracies
    trace_alpha_0.90.csv     generation,best,mean,sigma,evals
    recipe_alpha_0.90.json   best recipe per alpha
    best_recipe.json         global best
"""

from __future__ import annotations

import json
import logging
import sys
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .cmaes import CmaAborted, CmaConfig, CmaState, TraceRow, run
from .evaluators import EvaluatorSpec, build_evaluator
from .objective import Budget, EvalCache, MergeObjective, TaskAccuracies, selection_key
from .recipe import DiscreteRecipe, RecipeRecord, n_dominated_layers, save_recipe, threshold
from .tensor_store import check_compatible, read_checkpoint

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)


class SearchError(RuntimeError):
    pass


@dataclass
class SearchConfig:
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    budget: int = 1600
    lam: float = 1.0
    seed: int = 0
    sigma0: float = 0.3
    mean0: float = 0.5
    pop_size: int | None = None
    parallel_alphas: bool = False
    model_m: str | None = None
    model_n: str | None = None
    evaluator: dict | None = None
    command_line: list[str] = field(default_factory=lambda: list(sys.argv))

    def __post_init__(self) -> None:
        self.alphas = tuple(float(a) for a in self.alphas)
        if not self.alphas:
            raise ValueError("alpha set is empty")
        for a in self.alphas:
            if not 0.5 <= a <= 1.0:
                raise ValueError(f"alpha {a} outside [0.5, 1.0]")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")


def alpha_seed(seed: int, alpha: float) -> int:
    return (seed + zlib.crc32(f"{alpha:.2f}".encode())) % 2**32


def alpha_tag(alpha: float) -> str:
    return f"{alpha:.2f}"


@dataclass
class AlphaOutcome:
    record: RecipeRecord
    stop_reason: str
    trace: list[TraceRow]
    degenerate: bool = False


@dataclass
class SearchResult:
    per_alpha: dict[float, RecipeRecord]
    best: RecipeRecord
    base: TaskAccuracies
    degenerate_alphas: tuple[float, ...] = ()
    failures: dict[float, str] = field(default_factory=dict)
    stop_reasons: dict[float, str] = field(default_factory=dict, compare=False)
    evaluator_calls: int = field(default=0, compare=False)
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def best_layers(self) -> set[int]:
        return n_dominated_layers(self.best.recipe)


def _record(recipe, acc, score, objective, budget, seed, x, provenance=None) -> RecipeRecord:
    return RecipeRecord(
        recipe=recipe,
        objective=score,
        acc_tp=acc.acc_tp,
        acc_tr=acc.acc_tr,
        lam=objective.lam,
        base_tp=objective.config.base_tp,
        evals_used=budget.used,
        seed=seed,
        continuous_gates=None if x is None else tuple(float(v) for v in x),
        provenance=provenance,
    )


def search_alpha(
    alpha: float,
    objective: MergeObjective,
    cfg: SearchConfig,
    trace_path: Path | None = None,
    on_generation: Callable[[CmaState, TraceRow], None] | None = None,
) -> AlphaOutcome:
    """CMA-ES over gates at a fixed alpha; returns the best recipe seen under the tie-break rule."""
    if objective.base is None:
        objective.measure_base()
    L = objective.m.layer_count
    seed = alpha_seed(cfg.seed, alpha)
    budget = Budget(cfg.budget)
    seen: dict[tuple[int, ...], tuple[DiscreteRecipe, TaskAccuracies, float, np.ndarray]] = {}

    def fitness(x: np.ndarray) -> float:
        recipe = DiscreteRecipe(threshold(x), alpha)
        acc, score = objective.evaluate(recipe, budget)
        if recipe.gates not in seen:
            seen[recipe.gates] = (recipe, acc, score, x.copy())
        return score

    trace_fh = trace_path.open("w", encoding="utf-8") if trace_path else None

    def generation_hook(state: CmaState, row: TraceRow) -> None:
        if trace_fh is not None:
            trace_fh.write(row.csv() + "\n")
            trace_fh.flush()
        if on_generation is not None:
            on_generation(state, row)

    config = CmaConfig(
        dim=L,
        pop_size=cfg.pop_size,
        mean0=[cfg.mean0] * L,
        sigma0=cfg.sigma0,
        max_evals=cfg.budget,
        seed=seed,
    )
    try:
        result = run(config, fitness, evaluations=lambda: budget.used, on_generation=generation_hook)
    except CmaAborted as exc:
        cause = exc.__cause__ if exc.__cause__ is not None else exc
        raise SearchError(f"alpha={alpha}: {cause}") from cause
    finally:
        if trace_fh is not None:
            trace_fh.close()

    recipe, acc, score, x = min(seen.values(), key=lambda item: selection_key(item[2], item[0]))
    record = _record(recipe, acc, score, objective, budget, seed, x, {"command": list(cfg.command_line)})
    return AlphaOutcome(record, result.stop_reason, result.trace, degenerate=alpha == 0.5)


def _global_key(record: RecipeRecord) -> tuple:
    return selection_key(record.objective, record.recipe) + (-record.recipe.alpha,)


def write_manifest(state_dir: Path, cfg: SearchConfig, num_layers: int, result: SearchResult | None = None) -> None:
    manifest = {"config": asdict(cfg), "num_layers": num_layers, "status": "running"}
    if result is not None:
        manifest.update(
            status="complete",
            base={"TP": result.base.acc_tp, "TR": result.base.acc_tr},
            per_alpha={alpha_tag(a): f"recipe_alpha_{alpha_tag(a)}.json" for a in result.per_alpha},
            traces={alpha_tag(a): f"trace_alpha_{alpha_tag(a)}.csv" for a in cfg.alphas},
            best="best_recipe.json",
            best_alpha=result.best.recipe.alpha,
            best_layers=sorted(result.best_layers),
            degenerate_alphas=list(result.degenerate_alphas),
            failures={alpha_tag(a): msg for a, msg in result.failures.items()},
            stop_reasons={alpha_tag(a): r for a, r in result.stop_reasons.items()},
            evaluator_calls=result.evaluator_calls,
            wall_clock_seconds=result.wall_clock,
        )
    (state_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def search_all(
    cfg: SearchConfig,
    objective: MergeObjective,
    state_dir: str | Path | None = None,
    on_generation: Callable[[float, CmaState, TraceRow], None] | None = None,
) -> SearchResult:
    """Independent searches for every alpha, then the best recipe across them."""
    started = time.perf_counter()
    calls_before = objective.evaluator_calls
    state = Path(state_dir) if state_dir is not None else None
    L = objective.m.layer_count
    if state is not None:
        state.mkdir(parents=True, exist_ok=True)
        write_manifest(state, cfg, L)
    base = objective.measure_base()

    def one(alpha: float) -> AlphaOutcome:
        hook = None if on_generation is None else (lambda s, row: on_generation(alpha, s, row))
        trace = state / f"trace_alpha_{alpha_tag(alpha)}.csv" if state is not None else None
        return search_alpha(alpha, objective, cfg, trace, hook)

    outcomes: dict[float, AlphaOutcome] = {}
    failures: dict[float, str] = {}
    errors: list[SearchError] = []
    if cfg.parallel_alphas:
        with ThreadPoolExecutor(max_workers=len(cfg.alphas)) as pool:
            futures = {a: pool.submit(one, a) for a in cfg.alphas}
        for a, fut in futures.items():
            try:
                outcomes[a] = fut.result()
            except SearchError as exc:
                errors.append(exc)
                failures[a] = str(exc)
    else:
        for a in cfg.alphas:
            try:
                outcomes[a] = one(a)
            except SearchError as exc:
                log.error("search failed: %s", exc)
                errors.append(exc)
                failures[a] = str(exc)
    if not outcomes:
        raise SearchError(f"all alpha searches failed: {failures}") from errors[0].__cause__

    per_alpha = {a: o.record for a, o in outcomes.items()}
    best = min(per_alpha.values(), key=_global_key)
    result = SearchResult(
        per_alpha=per_alpha,
        best=best,
        base=base,
        degenerate_alphas=tuple(a for a, o in outcomes.items() if o.degenerate),
        failures=failures,
        stop_reasons={a: o.stop_reason for a, o in outcomes.items()},
        evaluator_calls=objective.evaluator_calls - calls_before,
        wall_clock=time.perf_counter() - started,
    )
    if state is not None:
        for a, record in per_alpha.items():
            save_recipe(record, state / f"recipe_alpha_{alpha_tag(a)}.json")
        save_recipe(best, state / "best_recipe.json")
        write_manifest(state, cfg, L, result)
    return result


def open_search(cfg: SearchConfig, state_dir: str | Path | None = None, evaluator=None) -> MergeObjective:
    """Load parents from ``cfg`` paths and wire up evaluator and persistent cache."""
    if not cfg.model_m or not cfg.model_n:
        raise SearchError("both parent checkpoint paths are required")
    m, n = read_checkpoint(cfg.model_m), read_checkpoint(cfg.model_n)
    check_compatible(m, n)
    if evaluator is None:
        if cfg.evaluator is None:
            raise SearchError("no evaluator configured")
        spec = EvaluatorSpec(
            cfg.evaluator["kind"],
            tuple(cfg.evaluator.get("command", ())),
            tasks=tuple(cfg.evaluator.get("tasks", ("TP", "TR"))),
            options=dict(cfg.evaluator.get("options", {})),
        )
        evaluator = build_evaluator(spec, m, n, seed=cfg.seed)
    cache = EvalCache(Path(state_dir) / "cache.tsv" if state_dir is not None else None)
    return MergeObjective(m, n, evaluator, cache, lam=cfg.lam)


def check_cache_dimension(cache: EvalCache, num_layers: int) -> None:
    for _, bits in cache.keys():
        if len(bits) != num_layers:
            raise SearchError(f"dimension mismatch: cache holds {len(bits)}-layer recipes, model has {num_layers}")


def load_config(state_dir: str | Path) -> tuple[SearchConfig, int]:
    path = Path(state_dir) / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        cfg = SearchConfig(**manifest["config"])
        return cfg, int(manifest["num_layers"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SearchError(f"corrupt state file {path}: {exc}") from exc


def resume(state_dir: str | Path, objective: MergeObjective | None = None) -> SearchResult:
    """Continue an interrupted search from its state directory.

    The deterministic search is replayed from the start; every recipe already
    in the persisted cache is served without calling the evaluator.
    """
    state = Path(state_dir)
    cfg, num_layers = load_config(state)
    if objective is None:
        objective = open_search(cfg, state)
    elif objective.cache.path is None or objective.cache.path.resolve() != (state / "cache.tsv").resolve():
        objective.cache = EvalCache(state / "cache.tsv")
    if objective.m.layer_count != num_layers:
        raise SearchError(f"dimension mismatch: state has {num_layers} layers, model has {objective.m.layer_count}")
    check_cache_dimension(objective.cache, num_layers)
    return search_all(cfg, objective, state)
