"""Layer masking: scale attention-sublayer outputs by kappa and measure relative degradation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor_store import Checkpoint
from .toy import ProxyTaskSuite, ToyAttentionModel, proxy_counts

DEFAULT_KAPPAS = (1.0, 0.8, 0.6, 0.4, 0.2, 0.0)


@dataclass(frozen=True)
class MaskSpec:
    layers: frozenset[int]
    kappa: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", frozenset(int(i) for i in self.layers))
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in [0, 1], got {self.kappa}")

    def kappas(self, num_layers: int) -> np.ndarray:
        bad = sorted(i for i in self.layers if not 0 <= i < num_layers)
        if bad:
            raise IndexError(f"mask layer indices {bad} out of range [0, {num_layers})")
        k = np.ones(num_layers)
        k[sorted(self.layers)] = self.kappa
        return k


def masked_forward(model: ToyAttentionModel, spec: MaskSpec, tokens) -> np.ndarray:
    h0 = model.add_positions(model.embed_tokens(np.asarray(tokens)))
    return model.run(h0, spec.kappas(model.num_layers))


def mask_checkpoint(ck: Checkpoint, layers: Iterable[int], kappa: float, out_role: str = "o_proj") -> Checkpoint:
    """Scale the output projection of each listed layer by kappa.

    The attention output is linear in the output-projection weight and bias, so
    this is the checkpoint-level equivalent of scaling the sublayer output,
    usable with evaluators that only see files.
    """
    spec = MaskSpec(frozenset(layers), kappa)
    spec.kappas(ck.layer_count)
    arrays: dict[str, tuple[str, tuple[int, ...], bytes]] = {}
    targets = {name for i in spec.layers for name in ck.layer_names(i) if out_role in name}
    if spec.layers and not targets:
        raise ValueError(f"no tensors with role {out_role!r} in layers {sorted(spec.layers)}")
    for name, meta in ck.metas.items():
        if name in targets:
            scaled = (ck.f32(name).astype(np.float64) * kappa).astype("<f4")
            arrays[name] = ("F32", meta.shape, scaled.tobytes())
        else:
            arrays[name] = (meta.dtype, meta.shape, ck.raw(name))
    return Checkpoint.from_raw(arrays, ck.name_template, ck.layer_count)


def degradation(score_1: float, score_k: float) -> float:
    """Relative drop from the unmasked score; negative when masking helps."""
    if score_1 == 0:
        raise ZeroDivisionError("relative degradation undefined for a zero unmasked score")
    return (score_1 - score_k) / score_1


@dataclass
class DegradationCurve:
    kappas: list[float]
    scores: dict[str, list[float]]
    deltas: dict[str, list[float]]
    layers: list[int] = field(default_factory=list)
    errors: dict[float, str] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float, float, float]]:
        return [
            (metric, k, self.scores[metric][j], self.deltas[metric][j])
            for metric in self.scores
            for j, k in enumerate(self.kappas)
        ]

    def to_csv(self, header_comments: Sequence[str] = ()) -> str:
        lines = [f"# {c}" for c in header_comments]
        lines.append("metric,kappa,score,delta")
        lines += [f"{m},{k!r},{s!r},{d!r}" for m, k, s, d in self.rows()]
        return "\n".join(lines) + "\n"


def mask_sweep(
    score_at: Callable[[float], dict[str, float]],
    kappas: Sequence[float] = DEFAULT_KAPPAS,
    reasoning_metric: str | None = None,
    layers: Sequence[int] = (),
) -> DegradationCurve:
    """Score every kappa and compute each metric's degradation against kappa = 1.

    ``score_at(kappa)`` returns all metric scores for the masked model. When a
    reasoning metric is named and at least two other metrics exist, an
    ``Others`` metric (their unweighted mean) is added.
    """
    kappas = [float(k) for k in kappas]
    if not kappas:
        raise ValueError("empty kappa grid")
    for k in kappas:
        if not 0.0 <= k <= 1.0:
            raise ValueError(f"kappa {k} outside [0, 1]")

    errors: dict[float, str] = {}
    by_kappa: dict[float, dict[str, float]] = {}
    for k in dict.fromkeys(kappas + [1.0]):
        try:
            by_kappa[k] = dict(score_at(k))
        except Exception as exc:  # recorded per grid point
            errors[k] = f"{type(exc).__name__}: {exc}"
    if 1.0 in errors:
        raise RuntimeError(f"unmasked evaluation failed: {errors[1.0]}")

    metrics = list(by_kappa[1.0])
    if reasoning_metric is not None:
        others = [m for m in metrics if m != reasoning_metric]
        if len(others) >= 2:
            for values in by_kappa.values():
                values["Others"] = float(np.mean([values[m] for m in others]))
            metrics.append("Others")

    scores = {m: [by_kappa[k][m] if k in by_kappa else math.nan for k in kappas] for m in metrics}
    deltas = {
        m: [degradation(by_kappa[1.0][m], s) if not math.isnan(s) else math.nan for s in scores[m]]
        for m in metrics
    }
    return DegradationCurve(kappas, scores, deltas, sorted(layers), errors)


def proxy_scorer(model: ToyAttentionModel, suite: ProxyTaskSuite, layers: Iterable[int]) -> Callable[[float], dict[str, float]]:
    """Proxy-suite accuracies of ``model`` with ``layers`` masked at a given kappa."""
    layers = frozenset(layers)

    def score_at(kappa: float) -> dict[str, float]:
        counts = proxy_counts(model, suite, MaskSpec(layers, kappa).kappas(model.num_layers))
        return {f"{task}-proxy": c / n for task, (c, n) in counts.items()}

    return score_at
