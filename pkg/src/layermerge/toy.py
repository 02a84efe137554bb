"""Desk-scale substrates for end-to-end runs.

Two families live here:

* ``PlantedLandscape``: a closed-form fitness over merged checkpoints whose
  optimum is a known set of N-dominated layers.
* ``ToyAttentionModel``: a small attention-only transformer (single head,
  residual stream, no MLP or norm) plus two proxy tasks, a majority-marker
  task standing in for perception and an order task standing in for
  reasoning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .objective import TaskAccuracies
from .tensor_store import Checkpoint, CheckpointError

# ---------------------------------------------------------------------------
# planted landscape
# ---------------------------------------------------------------------------

LANDSCAPE_TEMPLATE = "blk.{i}.attn"


def _layer_vector(ck: Checkpoint, index: int) -> np.ndarray:
    return np.concatenate([ck.f32(name).astype(np.float64).ravel() for name in ck.layer_names(index)])


@dataclass
class PlantedLandscape:
    """TR reward peaks when planted layers match N, TP reward when the rest match M.

    ``alpha_star`` moves both targets along the M-N segment: the TR target of a
    planted layer is ``alpha_star*N + (1-alpha_star)*M`` and the TP target of
    an unplanted layer is ``alpha_star*M + (1-alpha_star)*N``. With the default
    of 1.0 they are N and M themselves. ``require_distinct=False`` admits
    parent pairs that agree on some layers; gates there are then irrelevant.
    """

    m: Checkpoint
    n: Checkpoint
    planted: frozenset[int]
    tau: float = 1.0
    alpha_star: float = 1.0
    require_distinct: bool = True
    _tr_targets: dict[int, np.ndarray] = field(init=False, repr=False)
    _tp_targets: dict[int, np.ndarray] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        L = self.m.layer_count
        self.planted = frozenset(int(i) for i in self.planted)
        if not self.planted or len(self.planted) >= L:
            raise ValueError("planted set must be a non-empty proper subset of the layers")
        if any(not 0 <= i < L for i in self.planted):
            raise ValueError(f"planted layers must lie in [0, {L})")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        self._tr_targets, self._tp_targets = {}, {}
        for i in range(L):
            vm, vn = _layer_vector(self.m, i), _layer_vector(self.n, i)
            if vm.shape != vn.shape:
                raise CheckpointError(f"layer {i}: parents differ in size")
            if self.require_distinct and np.array_equal(vm, vn):
                raise ValueError(f"layer {i}: parents are identical")
            if i in self.planted:
                self._tr_targets[i] = self.alpha_star * vn + (1 - self.alpha_star) * vm
            else:
                self._tp_targets[i] = self.alpha_star * vm + (1 - self.alpha_star) * vn

    @property
    def num_layers(self) -> int:
        return self.m.layer_count

    @classmethod
    def generate(
        cls,
        num_layers: int = 12,
        planted: Sequence[int] = (2, 5, 7, 9),
        seed: int = 0,
        dim: int = 16,
        tau: float = 1.0,
        noise: float = 0.5,
        alpha_star: float = 1.0,
    ) -> "PlantedLandscape":
        rng = np.random.default_rng(seed)
        n_arrays = {"embed": rng.standard_normal(dim)}
        for i in range(num_layers):
            n_arrays[LANDSCAPE_TEMPLATE.format(i=i)] = rng.standard_normal(dim)
        m_arrays = {name: arr + noise * rng.standard_normal(dim) if name != "embed" else arr for name, arr in n_arrays.items()}
        m = Checkpoint.from_arrays(m_arrays, LANDSCAPE_TEMPLATE)
        n = Checkpoint.from_arrays(n_arrays, LANDSCAPE_TEMPLATE)
        return cls(m, n, frozenset(planted), tau, alpha_star)

    def evaluate(self, merged: Checkpoint) -> TaskAccuracies:
        return landscape_eval(merged, self)


def landscape_eval(merged: Checkpoint, land: PlantedLandscape) -> TaskAccuracies:
    if merged.layer_count != land.num_layers:
        raise CheckpointError(f"dimension mismatch: {merged.layer_count} layers vs {land.num_layers}")
    tr, tp = [], []
    for i in range(land.num_layers):
        v = _layer_vector(merged, i)
        target = land._tr_targets.get(i)
        bucket = tr
        if target is None:
            target, bucket = land._tp_targets[i], tp
        if v.shape != target.shape:
            raise CheckpointError(f"dimension mismatch at layer {i}")
        bucket.append(math.exp(-float(np.sum((v - target) ** 2)) / land.tau))
    return TaskAccuracies(acc_tp=float(np.mean(tp)), acc_tr=float(np.mean(tr)))


# ---------------------------------------------------------------------------
# toy attention model
# ---------------------------------------------------------------------------

TOY_TEMPLATE = "layers.{i}.self_attn.{role}"
ROLES = ("q_proj", "k_proj", "v_proj", "o_proj")

# vocabulary layout
TP_QUERY, TR_QUERY = 0, 1
MARK_A, MARK_B = 2, 3
MARK_X, MARK_Y = 4, 5
YES, NO = 6, 7
FIRST_FILLER = 8


@dataclass
class ToyAttentionModel:
    """Weights use the (out, in) convention: a projection is ``h @ W.T``."""

    embed: np.ndarray  # (vocab, d)
    pos: np.ndarray  # (n_ctx, d)
    layers: list[dict[str, np.ndarray]]  # q, k, v, o -> (d, d)
    readout: np.ndarray  # (vocab, d)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def dim(self) -> int:
        return self.embed.shape[1]

    @property
    def vocab(self) -> int:
        return self.embed.shape[0]

    @property
    def n_ctx(self) -> int:
        return self.pos.shape[0]

    @classmethod
    def random(
        cls, seed: int = 0, num_layers: int = 12, dim: int = 16, vocab: int = 32, n_ctx: int = 64, scale: float = 1.0
    ) -> "ToyAttentionModel":
        rng = np.random.default_rng(seed)
        w = scale / math.sqrt(dim)
        layers = [{r: w * rng.standard_normal((dim, dim)) for r in "qkvo"} for _ in range(num_layers)]
        return cls(
            embed=rng.standard_normal((vocab, dim)),
            pos=0.5 * rng.standard_normal((n_ctx, dim)),
            layers=layers,
            readout=w * rng.standard_normal((vocab, dim)),
        )

    # -- checkpoint conversion --------------------------------------------

    def to_checkpoint(self) -> Checkpoint:
        arrays = {"embed.weight": self.embed, "pos.weight": self.pos, "readout.weight": self.readout}
        for i, layer in enumerate(self.layers):
            for key, role in zip("qkvo", ROLES):
                arrays[f"layers.{i}.self_attn.{role}.weight"] = layer[key]
        return Checkpoint.from_arrays(arrays, TOY_TEMPLATE)

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "ToyAttentionModel":
        def get(name: str) -> np.ndarray:
            if name not in ck.metas:
                raise CheckpointError(f"toy checkpoint lacks tensor {name!r}")
            return ck.f32(name).astype(np.float64)

        layers = [
            {key: get(f"layers.{i}.self_attn.{role}.weight") for key, role in zip("qkvo", ROLES)}
            for i in range(ck.layer_count)
        ]
        return cls(get("embed.weight"), get("pos.weight"), layers, get("readout.weight"))

    # -- forward / backward ----------------------------------------------

    def embed_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.size == 0 or tokens.shape[-1] == 0:
            raise ValueError("empty token sequence")
        if tokens.min() < 0 or tokens.max() >= self.vocab:
            raise ValueError(f"token id out of range [0, {self.vocab})")
        if tokens.shape[-1] > self.n_ctx:
            raise ValueError(f"sequence longer than context window {self.n_ctx}")
        return self.embed[tokens]

    def add_positions(self, h0: np.ndarray) -> np.ndarray:
        return h0 + self.pos[: h0.shape[-2]]

    def run(self, h: np.ndarray, kappas: Sequence[float] | None = None, keep: bool = False):
        """Run the attention stack on input states ``h`` (..., n, d)."""
        n, d = h.shape[-2], h.shape[-1]
        kappas = np.ones(self.num_layers) if kappas is None else np.asarray(kappas, dtype=np.float64)
        causal = np.triu(np.ones((n, n), dtype=bool), k=1)
        cache = []
        for layer, kappa in zip(self.layers, kappas):
            q = h @ layer["q"].T
            k = h @ layer["k"].T
            v = h @ layer["v"].T
            scores = (q @ np.swapaxes(k, -1, -2)) / math.sqrt(d)
            scores = np.where(causal, -np.inf, scores)
            scores = scores - scores.max(axis=-1, keepdims=True)
            attn = np.exp(scores)
            attn = attn / attn.sum(axis=-1, keepdims=True)
            ctx = attn @ v
            out = ctx @ layer["o"].T
            if keep:
                cache.append((h, q, k, v, attn, ctx, kappa))
            h = h + kappa * out
        logits = h @ self.readout.T
        return (logits, cache) if keep else logits

    def backward(self, cache, dlogits: np.ndarray) -> np.ndarray:
        """Gradient of a scalar w.r.t. the stack input, given d(scalar)/d(logits)."""
        d = self.dim
        dh = dlogits @ self.readout
        for layer, (h, q, k, v, attn, ctx, kappa) in zip(reversed(self.layers), reversed(cache)):
            dout = kappa * dh
            dctx = dout @ layer["o"]
            dattn = dctx @ np.swapaxes(v, -1, -2)
            dv = np.swapaxes(attn, -1, -2) @ dctx
            dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
            dq = dscores @ k / math.sqrt(d)
            dk = np.swapaxes(dscores, -1, -2) @ q / math.sqrt(d)
            dh = dh + dq @ layer["q"] + dk @ layer["k"] + dv @ layer["v"]
        return dh


def toy_forward(model: ToyAttentionModel, tokens: Sequence[int] | np.ndarray, kappas=None) -> np.ndarray:
    """Logits at every position, shape (..., n, vocab)."""
    h0 = model.add_positions(model.embed_tokens(np.asarray(tokens)))
    return model.run(h0, kappas)


# ---------------------------------------------------------------------------
# proxy tasks
# ---------------------------------------------------------------------------


@dataclass
class ProxyTaskSuite:
    """Balanced proxy instances; every sequence ends with its task's query token."""

    tp_tokens: np.ndarray  # (n_tp, seq_len)
    tp_labels: np.ndarray  # MARK_A or MARK_B
    tr_tokens: np.ndarray  # (n_tr, seq_len)
    tr_labels: np.ndarray  # YES or NO

    @classmethod
    def generate(cls, seed: int = 0, n_tp: int = 55, n_tr: int = 177, seq_len: int = 24, vocab: int = 32):
        if vocab <= FIRST_FILLER:
            raise ValueError(f"vocabulary must exceed {FIRST_FILLER} tokens")
        if seq_len < 4:
            raise ValueError("seq_len must be >= 4")
        rng = np.random.default_rng(seed)
        body = seq_len - 1

        tp_tokens, tp_labels = [], []
        for i in range(n_tp):
            label = MARK_A if i % 2 == 0 else MARK_B
            other = MARK_B if label == MARK_A else MARK_A
            total = int(rng.choice([t for t in (3, 5, 7, 9) if t <= body]))
            major = int(rng.integers(total // 2 + 1, total + 1))
            seq = rng.integers(FIRST_FILLER, vocab, size=body)
            slots = rng.permutation(body)[:total]
            seq[slots[:major]] = label
            seq[slots[major:]] = other
            tp_tokens.append(np.append(seq, TP_QUERY))
            tp_labels.append(label)

        tr_tokens, tr_labels = [], []
        for i in range(n_tr):
            label = YES if i % 2 == 0 else NO
            first, second = sorted(rng.choice(body, size=2, replace=False))
            seq = rng.integers(FIRST_FILLER, vocab, size=body)
            seq[first], seq[second] = (MARK_X, MARK_Y) if label == YES else (MARK_Y, MARK_X)
            tr_tokens.append(np.append(seq, TR_QUERY))
            tr_labels.append(label)

        return cls(
            np.array(tp_tokens, dtype=np.int64).reshape(n_tp, seq_len),
            np.array(tp_labels, dtype=np.int64),
            np.array(tr_tokens, dtype=np.int64).reshape(n_tr, seq_len),
            np.array(tr_labels, dtype=np.int64),
        )


def _task_accuracy(logits: np.ndarray, labels: np.ndarray, choices: tuple[int, int]) -> tuple[int, int]:
    final = logits[:, -1, list(choices)]
    predicted = np.asarray(choices)[np.argmax(final, axis=-1)]
    return int(np.sum(predicted == labels)), len(labels)


def proxy_counts(model: ToyAttentionModel, suite: ProxyTaskSuite, kappas=None) -> dict[str, tuple[int, int]]:
    if len(suite.tp_labels) == 0 or len(suite.tr_labels) == 0:
        raise ValueError("empty task set")
    tp = _task_accuracy(toy_forward(model, suite.tp_tokens, kappas), suite.tp_labels, (MARK_A, MARK_B))
    tr = _task_accuracy(toy_forward(model, suite.tr_tokens, kappas), suite.tr_labels, (YES, NO))
    return {"TP": tp, "TR": tr}


def proxy_eval(model: ToyAttentionModel, suite: ProxyTaskSuite, kappas=None) -> TaskAccuracies:
    counts = proxy_counts(model, suite, kappas)
    return TaskAccuracies.from_counts(counts["TP"], counts["TR"])


# ---------------------------------------------------------------------------
# hand-wired model and parent pairs
# ---------------------------------------------------------------------------

# residual-stream channels of the wired model
_BIAS, _IS_X, _IS_Y, _IS_A, _IS_B = 0, 1, 2, 3, 4
_X_SEEN, _ANSWER, _VOTE_A, _VOTE_B = 7, 8, 9, 10
_SHARP = 30.0


def wired_toy_model(
    num_layers: int = 12,
    reasoning_layers: Sequence[int] = (2, 5, 7, 9),
    perception_layer: int | None = None,
    seed: int = 0,
    dim: int = 16,
    vocab: int = 32,
    n_ctx: int = 64,
) -> ToyAttentionModel:
    """A model that solves both proxy tasks exactly.

    The order task runs entirely through ``reasoning_layers``: the first one
    marks every position that has seen X, the others copy that mark from Y's
    position into the answer channel. The majority task runs through one
    uniform-attention layer outside that set.
    """
    reasoning = sorted(set(reasoning_layers))
    if len(reasoning) < 2:
        raise ValueError("need at least two reasoning layers")
    if any(not 0 <= i < num_layers for i in reasoning):
        raise ValueError("reasoning layers out of range")
    if perception_layer is None:
        perception_layer = next(i for i in range(num_layers) if i not in reasoning)
    if perception_layer in reasoning:
        raise ValueError("perception layer must not be a reasoning layer")
    if dim < 16:
        raise ValueError("wired model needs dim >= 16")

    rng = np.random.default_rng(seed)
    embed = np.zeros((vocab, dim))
    embed[:, _BIAS] = 1.0
    embed[MARK_X, _IS_X] = 1.0
    embed[MARK_Y, _IS_Y] = 1.0
    embed[MARK_A, _IS_A] = 1.0
    embed[MARK_B, _IS_B] = 1.0
    embed[FIRST_FILLER:, 11:16] = rng.standard_normal((vocab - FIRST_FILLER, 5))

    zeros = lambda: np.zeros((dim, dim))  # noqa: E731
    layers = [{r: zeros() for r in "qkvo"} for _ in range(num_layers)]
    beta = _SHARP * math.sqrt(dim)

    seen = layers[reasoning[0]]
    seen["q"][0, _BIAS] = beta
    seen["k"][0, _IS_X] = 1.0
    seen["v"][_X_SEEN, _IS_X] = 1.0
    seen["o"][_X_SEEN, _X_SEEN] = 1.0

    share = 1.0 / (len(reasoning) - 1)
    for i in reasoning[1:]:
        copy = layers[i]
        copy["q"][0, _BIAS] = beta
        copy["k"][0, _IS_Y] = 1.0
        copy["v"][_ANSWER, _X_SEEN] = 1.0
        copy["o"][_ANSWER, _ANSWER] = share

    vote = layers[perception_layer]
    vote["v"][_VOTE_A, _IS_A] = 10.0
    vote["v"][_VOTE_B, _IS_B] = 10.0
    vote["o"][_VOTE_A, _VOTE_A] = 1.0
    vote["o"][_VOTE_B, _VOTE_B] = 1.0

    readout = np.zeros((vocab, dim))
    readout[YES, _ANSWER] = 4.0
    readout[NO, _BIAS] = 2.0
    readout[MARK_A, _VOTE_A] = 1.0
    readout[MARK_B, _VOTE_B] = 1.0
    return ToyAttentionModel(embed, np.zeros((n_ctx, dim)), layers, readout)


def make_parent_pair(
    seed: int,
    num_layers: int,
    corrupt: Sequence[int],
    noise: float = 0.5,
    wired: bool = False,
    **model_kwargs,
) -> tuple[Checkpoint, Checkpoint]:
    """(M, N) where M is N plus Gaussian noise on the attention of ``corrupt`` layers.

    N is a seeded random toy model, or the wired model with its reasoning
    circuit on ``corrupt`` when ``wired`` is set.
    """
    corrupt = sorted(set(corrupt))
    if any(not 0 <= i < num_layers for i in corrupt):
        raise ValueError("corrupt layers out of range")
    if wired:
        base = wired_toy_model(num_layers, corrupt, seed=seed, **model_kwargs)
    else:
        base = ToyAttentionModel.random(seed, num_layers, **model_kwargs)
    n = base.to_checkpoint()
    rng = np.random.default_rng([seed, 1])
    damaged = {}
    for name in n.names():
        arr = n.f32(name)
        if noise and any(name.startswith(f"layers.{i}.self_attn.") for i in corrupt):
            arr = (arr.astype(np.float64) + noise * rng.standard_normal(arr.shape)).astype(np.float32)
        damaged[name] = arr
    m = Checkpoint.from_arrays(damaged, n.name_template)
    return m, n
