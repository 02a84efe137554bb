"""Layer gating recipes and directional interpolation of attention parameters."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor_store import Checkpoint, CheckpointError, LayerParamGroup, TensorMeta, check_compatible

ALPHA_MIN, ALPHA_MAX = 0.5, 1.0
GATE_THRESHOLD = 0.5


class RecipeError(ValueError):
    pass


def clamp_gates(g: Sequence[float]) -> np.ndarray:
    return np.clip(np.asarray(g, dtype=np.float64), 0.0, 1.0)


def threshold(g: Sequence[float]) -> tuple[int, ...]:
    """Binarize continuous gates; a gate of exactly 0.5 maps to 1."""
    return tuple(int(v >= GATE_THRESHOLD) for v in clamp_gates(g))


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not ALPHA_MIN <= alpha <= ALPHA_MAX:
        raise RecipeError(f"alpha must lie in [{ALPHA_MIN}, {ALPHA_MAX}], got {alpha}")
    return alpha


@dataclass(frozen=True)
class DiscreteRecipe:
    gates: tuple[int, ...]
    alpha: float

    def __post_init__(self) -> None:
        gates = tuple(int(v) for v in self.gates)
        if any(v not in (0, 1) for v in gates):
            raise RecipeError(f"gates must be binary, got {self.gates}")
        object.__setattr__(self, "gates", gates)
        object.__setattr__(self, "alpha", _check_alpha(self.alpha))

    @classmethod
    def from_n_dominated(cls, layers: Sequence[int], num_layers: int, alpha: float) -> "DiscreteRecipe":
        layers = set(layers)
        bad = [i for i in layers if not 0 <= i < num_layers]
        if bad:
            raise RecipeError(f"layer indices {sorted(bad)} outside [0, {num_layers})")
        return cls(tuple(0 if i in layers else 1 for i in range(num_layers)), alpha)

    @property
    def num_layers(self) -> int:
        return len(self.gates)

    @property
    def bitstring(self) -> str:
        return "".join(str(v) for v in self.gates)

    @property
    def is_identity(self) -> bool:
        return self.alpha == 1.0 and all(self.gates)


def n_dominated_layers(recipe: DiscreteRecipe) -> set[int]:
    """Layers biased toward N (gate 0); the "selected" layers of a recipe."""
    return {i for i, v in enumerate(recipe.gates) if v == 0}


def modified_layers(recipe: DiscreteRecipe) -> set[int]:
    """Layers whose merged parameters differ from M when M and N differ everywhere.

    At alpha = 1 only N-dominated layers change; for alpha < 1 every layer is
    pulled partly toward the other parent.
    """
    if recipe.alpha == 1.0:
        return n_dominated_layers(recipe)
    return set(range(recipe.num_layers))


def layer_weights(gate: int, alpha: float) -> tuple[float, float]:
    """(weight on M, weight on N) for one layer."""
    if gate:
        return alpha, 1.0 - alpha
    return 1.0 - alpha, alpha


def interpolate(theta_m: np.ndarray, theta_n: np.ndarray, gate: int, alpha: float) -> np.ndarray:
    # float64 accumulation, single rounding to float32
    w_m, w_n = layer_weights(gate, alpha)
    out = w_m * np.asarray(theta_m, dtype=np.float64) + w_n * np.asarray(theta_n, dtype=np.float64)
    return out.astype(np.float32)


def merge_layer(theta_m: LayerParamGroup, theta_n: LayerParamGroup, gate: int, alpha: float) -> LayerParamGroup:
    alpha = _check_alpha(alpha)
    if theta_m.names != theta_n.names or theta_m.shapes != theta_n.shapes:
        raise CheckpointError(f"layer {theta_m.layer_index}: shape mismatch between parents")
    tensors = tuple(
        (name, interpolate(a, b, gate, alpha)) for (name, a), (_, b) in zip(theta_m.tensors, theta_n.tensors)
    )
    return LayerParamGroup(theta_m.layer_index, tensors)


def apply_recipe(m: Checkpoint, n: Checkpoint, recipe: DiscreteRecipe) -> Checkpoint:
    """Merge attention groups per recipe; every other tensor is copied from M.

    Layers whose merged values equal M (gate 1 at alpha 1) keep M's raw bytes
    and dtype, so the identity recipe reproduces M byte for byte.
    """
    check_compatible(m, n)
    if recipe.num_layers != m.layer_count:
        raise CheckpointError(f"recipe has {recipe.num_layers} gates but checkpoints have {m.layer_count} layers")

    replaced: dict[str, bytes] = {}
    for i, gate in enumerate(recipe.gates):
        w_m, w_n = layer_weights(gate, recipe.alpha)
        if w_m == 1.0:
            continue
        for name in m.layer_names(i):
            if w_n == 1.0 and n.metas[name].dtype == "F32":
                replaced[name] = n.raw(name)
            else:
                replaced[name] = interpolate(m.f32(name), n.f32(name), gate, recipe.alpha).astype("<f4").tobytes()
    return _rebuild(m, replaced)


def _rebuild(base: Checkpoint, replaced: dict[str, bytes]) -> Checkpoint:
    if not replaced:
        return Checkpoint(dict(base.metas), base.data, base.layer_count, base.name_template, dict(base.extra_metadata))
    order = sorted(base.metas.values(), key=lambda meta: (meta.data_offsets, meta.name))
    metas: dict[str, TensorMeta] = {}
    chunks: list[bytes] = []
    offset = 0
    for meta in order:
        if meta.name in replaced:
            raw, dtype = replaced[meta.name], "F32"
        else:
            raw, dtype = base.raw(meta.name), meta.dtype
        metas[meta.name] = TensorMeta(meta.name, dtype, meta.shape, (offset, offset + len(raw)))
        chunks.append(raw)
        offset += len(raw)
    return Checkpoint(metas, b"".join(chunks), base.layer_count, base.name_template, dict(base.extra_metadata))


def all_layer_recipe(num_layers: int, alpha: float) -> DiscreteRecipe:
    if num_layers < 1:
        raise RecipeError("num_layers must be >= 1")
    return DiscreteRecipe((0,) * num_layers, alpha)


def random_k_recipe(num_layers: int, k: int, alpha: float, seed: int) -> DiscreteRecipe:
    if not 0 <= k <= num_layers:
        raise RecipeError(f"k must lie in [0, {num_layers}], got {k}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(num_layers, size=k, replace=False) if k else []
    return DiscreteRecipe.from_n_dominated([int(i) for i in chosen], num_layers, alpha)


# -- recipe files -----------------------------------------------------------


@dataclass(frozen=True)
class RecipeRecord:
    recipe: DiscreteRecipe
    objective: float | None = None
    acc_tp: float | None = None
    acc_tr: float | None = None
    lam: float | None = None
    base_tp: float | None = None
    evals_used: int | None = None
    seed: int | None = None
    continuous_gates: tuple[float, ...] | None = None
    provenance: dict | None = field(default=None, compare=False)

    def to_json(self) -> str:
        gates = None if self.continuous_gates is None else [float(v) for v in self.continuous_gates]
        # field order is part of the file format
        payload = {
            "alpha": self.recipe.alpha,
            "gates": gates,
            "discrete": list(self.recipe.gates),
            "objective": self.objective,
            "acc_tp": self.acc_tp,
            "acc_tr": self.acc_tr,
            "lambda": self.lam,
            "base_tp": self.base_tp,
            "evals_used": self.evals_used,
            "seed": self.seed,
        }
        if self.provenance is not None:
            payload["provenance"] = self.provenance
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "RecipeRecord":
        try:
            payload = json.loads(text)
            recipe = DiscreteRecipe(tuple(payload["discrete"]), payload["alpha"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise RecipeError(f"malformed recipe file: {exc}") from exc
        gates = payload.get("gates")
        if gates is not None:
            gates = tuple(float(v) for v in gates)
            if len(gates) != recipe.num_layers:
                raise RecipeError("continuous gates and discrete gates differ in length")
        return cls(
            recipe=recipe,
            objective=payload.get("objective"),
            acc_tp=payload.get("acc_tp"),
            acc_tr=payload.get("acc_tr"),
            lam=payload.get("lambda"),
            base_tp=payload.get("base_tp"),
            evals_used=payload.get("evals_used"),
            seed=payload.get("seed"),
            continuous_gates=gates,
            provenance=payload.get("provenance"),
        )


def save_recipe(record: RecipeRecord | DiscreteRecipe, path: str | Path) -> None:
    if isinstance(record, DiscreteRecipe):
        record = RecipeRecord(record)
    Path(path).write_text(record.to_json() + "\n", encoding="utf-8")


def load_recipe(path: str | Path) -> RecipeRecord:
    return RecipeRecord.from_json(Path(path).read_text(encoding="utf-8"))
