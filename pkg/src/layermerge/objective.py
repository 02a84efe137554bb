"""Search objective: reasoning reward minus a penalty on perception degradation.

Accuracies are treated as exact decimals (or exact fractions when correct/total
counts are known), so F is computed without accumulated float error and ties
between recipes are real ties.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import TYPE_CHECKING

from .recipe import DiscreteRecipe, apply_recipe
from .tensor_store import Checkpoint

if TYPE_CHECKING:
    from .evaluators import Evaluator

TASKS = ("TP", "TR")


class EvaluationError(RuntimeError):
    """Evaluator failure, annotated with the recipe being scored."""


class BudgetExhausted(RuntimeError):
    pass


def _exact(x: float | Fraction) -> Fraction:
    if isinstance(x, Fraction):
        return x
    # shortest repr round-trips, so 0.589 is taken as 589/1000
    return Fraction(repr(float(x)))


@dataclass(frozen=True)
class TaskAccuracies:
    acc_tp: float
    acc_tr: float
    counts: dict[str, tuple[int, int]] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        for name, value in (("acc_tp", self.acc_tp), ("acc_tr", self.acc_tr)):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    @classmethod
    def from_counts(cls, tp: tuple[int, int], tr: tuple[int, int]) -> "TaskAccuracies":
        return cls(tp[0] / tp[1], tr[0] / tr[1], {"TP": tp, "TR": tr})

    def exact(self, task: str) -> Fraction:
        if self.counts and task in self.counts:
            correct, total = self.counts[task]
            return Fraction(correct, total)
        return _exact(self.acc_tp if task == "TP" else self.acc_tr)


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 1.0
    base_tp: float = 0.0

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if not 0.0 <= self.base_tp <= 1.0:
            raise ValueError(f"base_tp must lie in [0, 1], got {self.base_tp}")


def _tp_degradation_exact(cfg: ObjectiveConfig, acc_tp: float | Fraction) -> Fraction:
    return max(Fraction(0), _exact(cfg.base_tp) - _exact(acc_tp))


def tp_degradation(cfg: ObjectiveConfig, acc_tp: float | Fraction) -> float:
    return float(_tp_degradation_exact(cfg, acc_tp))


def objective_score(cfg: ObjectiveConfig, acc: TaskAccuracies) -> float:
    penalty = _exact(cfg.lam) * _tp_degradation_exact(cfg, acc.exact("TP"))
    return float(acc.exact("TR") - penalty)


def selection_key(score: float, recipe: DiscreteRecipe) -> tuple:
    """Sort key (ascending = better): higher F, then fewer N-dominated layers,
    then the lexicographically smaller gate vector."""
    return (-score, recipe.gates.count(0), recipe.gates)


# -- cache ------------------------------------------------------------------


def cache_key(recipe: DiscreteRecipe) -> tuple[int, str]:
    return (round(recipe.alpha * 100), recipe.bitstring)


class EvalCache:
    """Thread-safe map from (alpha in hundredths, gate bitstring) to accuracies.

    With a ``path`` every new entry is appended as
    ``alpha<TAB>bits<TAB>acc_tp<TAB>acc_tr<TAB>F`` and flushed immediately.
    """

    def __init__(self, path: str | Path | None = None):
        self._entries: dict[tuple[int, str], tuple[TaskAccuracies, float]] = {}
        self._lock = threading.Lock()
        self.path = Path(path) if path is not None else None
        if self.path is not None and self.path.exists():
            self._load(self.path)

    def _load(self, path: Path) -> None:
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            try:
                alpha, bits, tp, tr, score = parts
                if set(bits) - {"0", "1"}:
                    raise ValueError(f"bad bitstring {bits!r}")
                key = (round(float(alpha) * 100), bits)
                self._entries[key] = (TaskAccuracies(float(tp), float(tr)), float(score))
            except ValueError as exc:
                raise ValueError(f"corrupt cache file {path}:{lineno}: {exc}") from exc

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: tuple[int, str]) -> bool:
        return key in self._entries

    def keys(self) -> list[tuple[int, str]]:
        with self._lock:
            return list(self._entries)

    def get(self, key: tuple[int, str]) -> tuple[TaskAccuracies, float] | None:
        return self._entries.get(key)

    def put(self, key: tuple[int, str], acc: TaskAccuracies, score: float) -> None:
        with self._lock:
            if key in self._entries:
                return
            self._entries[key] = (acc, score)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(f"{key[0] / 100:.2f}\t{key[1]}\t{acc.acc_tp!r}\t{acc.acc_tr!r}\t{score!r}\n")
                    fh.flush()


class Budget:
    """Counts distinct recipe keys requested by one search, up to ``cap``."""

    def __init__(self, cap: int):
        if cap < 1:
            raise ValueError("budget must be >= 1")
        self.cap = cap
        self.seen: set[tuple[int, str]] = set()
        self._lock = threading.Lock()

    @property
    def used(self) -> int:
        return len(self.seen)

    @property
    def exhausted(self) -> bool:
        return self.used >= self.cap

    def charge(self, key: tuple[int, str]) -> None:
        with self._lock:
            if key in self.seen:
                return
            if len(self.seen) >= self.cap:
                raise BudgetExhausted(f"evaluation budget of {self.cap} exhausted")
            self.seen.add(key)


# -- recipe evaluation ------------------------------------------------------


class MergeObjective:
    """Scores discrete recipes for one parent pair through an evaluator and cache."""

    def __init__(
        self,
        m: Checkpoint,
        n: Checkpoint,
        evaluator: "Evaluator",
        cache: EvalCache | None = None,
        lam: float = 1.0,
    ):
        self.m, self.n = m, n
        self.evaluator = evaluator
        self.cache = cache if cache is not None else EvalCache()
        self.lam = lam
        self.base: TaskAccuracies | None = None
        self.evaluator_calls = 0
        self._calls_lock = threading.Lock()

    @property
    def config(self) -> ObjectiveConfig:
        if self.base is None:
            raise RuntimeError("base accuracies not measured; call measure_base() first")
        return ObjectiveConfig(self.lam, self.base.acc_tp)

    def _call_evaluator(self, ck: Checkpoint, what: str) -> TaskAccuracies:
        with self._calls_lock:
            self.evaluator_calls += 1
        try:
            acc = self.evaluator.evaluate(ck, list(TASKS))
        except Exception as exc:
            raise EvaluationError(f"evaluator failed on {what}: {exc}") from exc
        return TaskAccuracies(acc["TP"], acc["TR"])

    def measure_base(self) -> TaskAccuracies:
        """Evaluate the unmerged M once; stored under the identity-recipe key."""
        identity = DiscreteRecipe((1,) * self.m.layer_count, 1.0)
        key = cache_key(identity)
        hit = self.cache.get(key)
        if hit is not None:
            self.base = hit[0]
        else:
            self.base = self._call_evaluator(self.m, "base model M")
            self.cache.put(key, self.base, objective_score(ObjectiveConfig(self.lam, self.base.acc_tp), self.base))
        return self.base

    def evaluate(self, recipe: DiscreteRecipe, budget: Budget | None = None) -> tuple[TaskAccuracies, float]:
        cfg = self.config
        key = cache_key(recipe)
        if budget is not None:
            budget.charge(key)
        hit = self.cache.get(key)
        if hit is not None:
            return hit[0], objective_score(cfg, hit[0])
        merged = apply_recipe(self.m, self.n, recipe)
        acc = self._call_evaluator(merged, f"recipe alpha={recipe.alpha} gates={recipe.bitstring}")
        score = objective_score(cfg, acc)
        self.cache.put(key, acc, score)
        return acc, score


def evaluate_recipe(
    recipe: DiscreteRecipe,
    objective: MergeObjective,
    budget: Budget | None = None,
) -> tuple[TaskAccuracies, float]:
    return objective.evaluate(recipe, budget)
