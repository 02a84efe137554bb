"""Frame attribution at the answer step.

The target is the decision margin: the chosen option's logit minus the best
competing option's logit at the answer position. A frame's importance is the
summed absolute gradient-times-activation over its visual-token embeddings.
Frames occupy the first ``T*K`` positions of the input, followed by the text
prefix that ends right before the answer token.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .toy import ToyAttentionModel

GRAD_MODES = ("reverse", "finite-difference")
ORDERS = ("smooth-then-normalize", "normalize-then-smooth")


class AttributionError(ValueError):
    pass


@dataclass
class AttributionQuery:
    model: ToyAttentionModel
    frames: np.ndarray  # (T, K, d) projected frame embeddings
    prefix: Sequence[int]  # text tokens; the answer is predicted after the last one
    options: Sequence[int]
    chosen: int

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise AttributionError("frames must have shape (T, K, d) with T, K >= 1")
        if self.frames.shape[2] != self.model.dim:
            raise AttributionError(f"frame width {self.frames.shape[2]} != model width {self.model.dim}")
        if not np.all(np.isfinite(self.frames)):
            raise AttributionError("frame embeddings contain non-finite values")
        if len(self.prefix) < 1:
            raise AttributionError("prefix must contain at least one token")
        if len(set(self.options)) < 2:
            raise AttributionError("need at least two candidate options")
        if self.chosen not in self.options:
            raise AttributionError(f"chosen option {self.chosen} not among candidates {list(self.options)}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def inputs(self, frames: np.ndarray | None = None) -> np.ndarray:
        frames = self.frames if frames is None else frames
        T, K, d = frames.shape
        text = self.model.embed_tokens(np.asarray(self.prefix))
        return self.model.add_positions(np.concatenate([frames.reshape(T * K, d), text]))


def margin_from_logits(logits: np.ndarray, options: Sequence[int], chosen: int) -> tuple[float, int]:
    """(margin, strongest alternative) from the answer-position logits."""
    if chosen not in options:
        raise AttributionError(f"chosen option {chosen} not among candidates")
    others = [o for o in dict.fromkeys(options) if o != chosen]
    if not others:
        raise AttributionError("need at least two candidate options")
    rival = max(others, key=lambda o: logits[o])
    return float(logits[chosen] - logits[rival]), rival


def decision_margin(q: AttributionQuery) -> float:
    logits = q.model.run(q.inputs())[-1]
    return margin_from_logits(logits, q.options, q.chosen)[0]


def margin_gradient(q: AttributionQuery) -> tuple[float, np.ndarray]:
    """Margin and its gradient w.r.t. the frame embeddings, by backpropagation."""
    logits, cache = q.model.run(q.inputs(), keep=True)
    margin, rival = margin_from_logits(logits[-1], q.options, q.chosen)
    dlogits = np.zeros_like(logits)
    dlogits[-1, q.chosen] = 1.0
    dlogits[-1, rival] = -1.0
    dh0 = q.model.backward(cache, dlogits)
    # positions were added after the frame embeddings, so d/dV = d/dh0 on frame slots
    T, K, d = q.frames.shape
    return margin, dh0[: T * K].reshape(T, K, d)


def margin_gradient_fd(q: AttributionQuery, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of the margin w.r.t. every frame entry."""
    if h <= 0:
        raise AttributionError("finite-difference step must be positive")
    grad = np.zeros_like(q.frames)
    probe = q.frames.copy()
    for idx in np.ndindex(q.frames.shape):
        base = probe[idx]
        probe[idx] = base + h
        up = margin_from_logits(q.model.run(q.inputs(probe))[-1], q.options, q.chosen)[0]
        probe[idx] = base - h
        down = margin_from_logits(q.model.run(q.inputs(probe))[-1], q.options, q.chosen)[0]
        probe[idx] = base
        grad[idx] = (up - down) / (2 * h)
    return grad


def frame_importance(q: AttributionQuery, mode: str = "reverse", h: float = 1e-3) -> np.ndarray:
    if mode == "reverse":
        _, grad = margin_gradient(q)
    elif mode == "finite-difference":
        grad = margin_gradient_fd(q, h)
    else:
        raise AttributionError(f"unknown gradient mode {mode!r}; expected one of {GRAD_MODES}")
    if not np.all(np.isfinite(grad)):
        raise AttributionError("non-finite gradients")
    return np.abs(grad * q.frames).sum(axis=(1, 2))


def normalize(scores: Sequence[float]) -> np.ndarray:
    """Min-max scaling to [0, 1]; a constant profile maps to zeros."""
    x = np.asarray(scores, dtype=np.float64)
    if x.size == 0:
        raise AttributionError("empty score profile")
    span = x.max() - x.min()
    if span == 0:
        return np.zeros_like(x)
    return (x - x.min()) / span


def smooth(scores: Sequence[float], window: int = 5) -> np.ndarray:
    """Centered moving average; windows are truncated at the ends and averaged over what remains."""
    if window < 1 or window % 2 == 0:
        raise AttributionError(f"window must be a positive odd integer, got {window}")
    x = np.asarray(scores, dtype=np.float64)
    ones = np.ones(window)
    pad = np.zeros(window // 2)
    sums = np.convolve(np.concatenate([pad, x, pad]), ones, mode="valid")
    counts = np.convolve(np.concatenate([pad, np.ones_like(x), pad]), ones, mode="valid")
    return sums / counts


@dataclass
class AttributionResult:
    margin: float
    raw: np.ndarray
    smoothed: np.ndarray
    normalized: np.ndarray
    window: int
    order: str
    mode: str
    config: dict = field(default_factory=dict)

    def ranked_frames(self) -> list[int]:
        return [int(i) for i in np.argsort(-self.normalized, kind="stable")]

    def report(self) -> str:
        lines = [f"# {k}: {v}" for k, v in self.config.items()]
        lines += [
            f"# margin: {self.margin!r}",
            f"# window: {self.window}",
            f"# order: {self.order}",
            f"# grad_mode: {self.mode}",
            f"# ranked_frames: {' '.join(map(str, self.ranked_frames()))}",
            "frame,raw,smoothed,normalized",
        ]
        lines += [
            f"{t},{r!r},{s!r},{n!r}"
            for t, (r, s, n) in enumerate(zip(self.raw.tolist(), self.smoothed.tolist(), self.normalized.tolist()))
        ]
        return "\n".join(lines) + "\n"


def attribute(
    q: AttributionQuery,
    mode: str = "reverse",
    window: int = 5,
    order: str = "smooth-then-normalize",
    h: float = 1e-3,
) -> AttributionResult:
    if order not in ORDERS:
        raise AttributionError(f"unknown order {order!r}")
    margin = decision_margin(q)
    raw = frame_importance(q, mode, h)
    if order == "smooth-then-normalize":
        smoothed = smooth(raw, window)
        normalized = normalize(smoothed)
    else:
        smoothed = smooth(normalize(raw), window)
        normalized = normalize(smoothed)
    return AttributionResult(margin, raw, smoothed, normalized, window, order, mode)
