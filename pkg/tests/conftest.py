import sys
from pathlib import Path

import numpy as np
import pytest

from layermerge.tensor_store import DTYPE_SIZES, Checkpoint

FIXTURES = Path(__file__).parent / "fixtures"

_RAW_DTYPES = {"F64": "<f8", "F32": "<f4", "F16": "<f2", "I64": "<i8", "I32": "<i4", "I16": "<i2", "I8": "i1", "U8": "u1"}


def random_checkpoint(rng: np.random.Generator) -> Checkpoint:
    """Random layout: mixed dtypes, zero-size tensors, shuffled offsets, odd names."""
    num_layers = int(rng.integers(1, 6))
    tensors = {}
    for i in range(num_layers):
        for role in rng.choice(["q_proj", "k_proj", "v_proj", "o_proj", "q_proj.bias"], size=int(rng.integers(1, 4)), replace=False):
            tensors[f"layers.{i}.self_attn.{role}"] = None
    for j in range(int(rng.integers(0, 4))):
        tensors[f"extra_{j}.weight"] = None
    entries = []
    for name in tensors:
        dtype = str(rng.choice(list(DTYPE_SIZES)))
        shape = tuple(int(s) for s in rng.integers(0, 4, size=int(rng.integers(0, 3))))
        n = int(np.prod(shape, dtype=np.int64)) * DTYPE_SIZES[dtype]
        entries.append((name, dtype, shape, rng.bytes(n)))
    order = rng.permutation(len(entries))
    raw, offsets, pos = [], {}, 0
    for k in order:
        name, dtype, shape, data = entries[k]
        offsets[name] = (dtype, shape, (pos, pos + len(data)))
        raw.append(data)
        pos += len(data)
    from layermerge.tensor_store import TensorMeta

    metas = {name: TensorMeta(name, d, s, o) for name, (d, s, o) in offsets.items()}
    return Checkpoint(metas, b"".join(raw), num_layers)


def random_parents(seed: int, num_layers: int = 6, dim: int = 5, extra: bool = True) -> tuple[Checkpoint, Checkpoint]:
    rng = np.random.default_rng(seed)
    m_arrays, n_arrays = {}, {}
    for i in range(num_layers):
        for role in ("q_proj.weight", "k_proj.weight", "v_proj.weight", "o_proj.weight", "o_proj.bias"):
            shape = (dim,) if role.endswith("bias") else (dim, dim)
            name = f"layers.{i}.self_attn.{role}"
            m_arrays[name] = rng.standard_normal(shape).astype(np.float32)
            n_arrays[name] = rng.standard_normal(shape).astype(np.float32)
    if extra:
        m_arrays["embed.weight"] = rng.standard_normal((7, dim)).astype(np.float32)
        m_arrays["layers.0.mlp.weight"] = rng.standard_normal((dim, dim)).astype(np.float32)
        n_arrays["embed.weight"] = rng.standard_normal((7, dim)).astype(np.float32)
        n_arrays["layers.0.mlp.weight"] = rng.standard_normal((dim, dim)).astype(np.float32)
    return Checkpoint.from_arrays(m_arrays), Checkpoint.from_arrays(n_arrays)


@pytest.fixture
def stub_cmd():
    return [sys.executable, "-m", "layermerge.stub_evaluator"]


def ulp_distance(a, b) -> np.ndarray:
    """Distance in float32 steps; +0 and -0 coincide."""

    def ordered(x):
        bits = np.asarray(x, dtype=np.float32).view(np.int32).astype(np.int64)
        return np.where(bits >= 0, bits, -(2**31) - bits)

    return np.abs(ordered(a) - ordered(b))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
