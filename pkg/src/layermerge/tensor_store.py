"""Checkpoint container: a length-prefixed JSON header followed by a raw data buffer.

Layout::

    [u64 little-endian header length H][H bytes of UTF-8 JSON][data buffer]

The header maps each tensor name to ``{"data_offsets": [b, e], "dtype": tag,
"shape": [...]}``. Keys are sorted and no insignificant whitespace is emitted,
so identical checkpoints always serialize to identical bytes. An optional
``"__metadata__"`` entry (string values only) carries the layer count and the
layer name template.
"""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METADATA_KEY = "__metadata__"
DEFAULT_TEMPLATE = "layers.{i}.self_attn.{role}"

# element sizes in bytes; F32 is the merge dtype, F16/BF16 are converted on read
DTYPE_SIZES = {
    "F64": 8,
    "F32": 4,
    "F16": 2,
    "BF16": 2,
    "I64": 8,
    "I32": 4,
    "I16": 2,
    "I8": 1,
    "U8": 1,
    "BOOL": 1,
}
FLOAT_DTYPES = ("F32", "F16", "BF16")

_NUMPY_DTYPES = {
    "F64": "<f8",
    "F32": "<f4",
    "F16": "<f2",
    "I64": "<i8",
    "I32": "<i4",
    "I16": "<i2",
    "I8": "i1",
    "U8": "u1",
    "BOOL": "?",
}


class CheckpointError(ValueError):
    """Raised for malformed, inconsistent or incompatible checkpoints."""


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return DTYPE_SIZES[self.dtype] * self.numel

    def header_entry(self) -> dict:
        return {
            "data_offsets": list(self.data_offsets),
            "dtype": self.dtype,
            "shape": list(self.shape),
        }


@dataclass(frozen=True)
class LayerParamGroup:
    layer_index: int
    tensors: tuple[tuple[str, np.ndarray], ...]

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.tensors]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [arr.shape for _, arr in self.tensors]


def _template_regex(template: str, index: int) -> re.Pattern:
    if "{i}" not in template:
        raise CheckpointError(f"name template {template!r} has no '{{i}}' placeholder")
    pattern = re.escape(template)
    pattern = pattern.replace(re.escape("{i}"), str(index))
    pattern = pattern.replace(re.escape("{role}"), ".+")
    return re.compile(pattern)


@dataclass
class Checkpoint:
    """Named tensors over one contiguous byte buffer.

    Treated as immutable once built; every transformation returns a new object.
    """

    metas: dict[str, TensorMeta]
    data: bytes
    layer_count: int | None = None
    name_template: str = DEFAULT_TEMPLATE
    extra_metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        _validate(self.metas, len(self.data))
        if self.layer_count is None:
            self.layer_count = self.detect_layer_count()
        for i in range(self.layer_count):
            if not self.layer_names(i):
                raise CheckpointError(f"no tensors match template {self.name_template!r} at layer {i}")

    # -- construction -------------------------------------------------------

    @classmethod
    def from_arrays(
        cls,
        arrays: dict[str, np.ndarray],
        name_template: str = DEFAULT_TEMPLATE,
        layer_count: int | None = None,
    ) -> "Checkpoint":
        """Pack float32 arrays contiguously in lexicographic name order."""
        metas: dict[str, TensorMeta] = {}
        chunks: list[bytes] = []
        offset = 0
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            raw = arr.tobytes()
            metas[name] = TensorMeta(name, "F32", tuple(int(s) for s in arr.shape), (offset, offset + len(raw)))
            chunks.append(raw)
            offset += len(raw)
        return cls(metas, b"".join(chunks), layer_count, name_template)

    @classmethod
    def from_raw(
        cls,
        tensors: dict[str, tuple[str, tuple[int, ...], bytes]],
        name_template: str = DEFAULT_TEMPLATE,
        layer_count: int | None = None,
    ) -> "Checkpoint":
        metas: dict[str, TensorMeta] = {}
        chunks: list[bytes] = []
        offset = 0
        for name in sorted(tensors):
            dtype, shape, raw = tensors[name]
            metas[name] = TensorMeta(name, dtype, tuple(shape), (offset, offset + len(raw)))
            chunks.append(raw)
            offset += len(raw)
        return cls(metas, b"".join(chunks), layer_count, name_template)

    # -- access -------------------------------------------------------------

    def names(self) -> list[str]:
        return sorted(self.metas)

    def raw(self, name: str) -> bytes:
        begin, end = self.metas[name].data_offsets
        return self.data[begin:end]

    def array(self, name: str) -> np.ndarray:
        """Native-dtype view of a tensor (BF16 is widened to float32)."""
        meta = self.metas[name]
        raw = self.raw(name)
        if meta.dtype == "BF16":
            bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16
            return bits.view(np.float32).reshape(meta.shape)
        return np.frombuffer(raw, dtype=_NUMPY_DTYPES[meta.dtype]).reshape(meta.shape)

    def f32(self, name: str) -> np.ndarray:
        meta = self.metas[name]
        if meta.dtype not in FLOAT_DTYPES:
            raise CheckpointError(f"tensor {name!r} has non-float dtype {meta.dtype}")
        return np.asarray(self.array(name), dtype=np.float32)

    def layer_names(self, index: int) -> list[str]:
        regex = _template_regex(self.name_template, index)
        return sorted(n for n in self.metas if regex.fullmatch(n))

    def detect_layer_count(self) -> int:
        count = 0
        while self.layer_names(count):
            count += 1
        return count

    def attention_names(self) -> set[str]:
        names: set[str] = set()
        for i in range(self.layer_count):
            names.update(self.layer_names(i))
        return names

    def header_bytes(self) -> bytes:
        header = {name: meta.header_entry() for name, meta in self.metas.items()}
        metadata = dict(self.extra_metadata)
        metadata["layer_count"] = str(self.layer_count)
        metadata["name_template"] = self.name_template
        header[METADATA_KEY] = metadata
        return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")

    def to_bytes(self) -> bytes:
        header = self.header_bytes()
        return struct.pack("<Q", len(header)) + header + self.data

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.metas == other.metas
            and self.data == other.data
            and self.layer_count == other.layer_count
            and self.name_template == other.name_template
            and self.extra_metadata == other.extra_metadata
        )


def _validate(metas: dict[str, TensorMeta], buffer_len: int) -> None:
    spans = []
    for name, meta in metas.items():
        if meta.dtype not in DTYPE_SIZES:
            raise CheckpointError(f"tensor {name!r}: unknown dtype {meta.dtype!r}")
        if any(s < 0 for s in meta.shape):
            raise CheckpointError(f"tensor {name!r}: negative extent in shape {meta.shape}")
        begin, end = meta.data_offsets
        if begin < 0 or end < begin:
            raise CheckpointError(f"tensor {name!r}: bad data_offsets {meta.data_offsets}")
        if end - begin != meta.nbytes:
            raise CheckpointError(
                f"tensor {name!r}: size mismatch, offsets span {end - begin} bytes "
                f"but {meta.dtype}{list(meta.shape)} needs {meta.nbytes}"
            )
        if end > buffer_len:
            raise CheckpointError(f"tensor {name!r}: offsets {meta.data_offsets} out of range ({buffer_len} bytes)")
        spans.append((begin, end, name))
    spans.sort()
    reach, owner = 0, None
    for begin, end, name in spans:
        if end > begin:
            if begin < reach:
                raise CheckpointError(f"tensors {owner!r} and {name!r} have overlapping offsets")
            reach, owner = end, name
    max_end = max((e for _, e, _ in spans), default=0)
    if max_end != buffer_len:
        raise CheckpointError(f"data buffer is {buffer_len} bytes but tensors end at {max_end}")


def parse_checkpoint(blob: bytes, strict: bool = False) -> Checkpoint:
    if len(blob) < 8:
        raise CheckpointError("malformed header: file shorter than 8 bytes")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if 8 + header_len > len(blob):
        raise CheckpointError(f"malformed header: declared length {header_len} exceeds file size")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise CheckpointError("malformed header: top level is not an object")

    metadata = header.pop(METADATA_KEY, {}) or {}
    metas: dict[str, TensorMeta] = {}
    for name, entry in header.items():
        try:
            dtype = entry["dtype"]
            shape = tuple(int(s) for s in entry["shape"])
            begin, end = (int(o) for o in entry["data_offsets"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed header entry for {name!r}: {exc}") from exc
        if strict and dtype not in FLOAT_DTYPES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {dtype!r} in strict mode")
        metas[name] = TensorMeta(name, dtype, shape, (begin, end))

    metadata = {str(k): str(v) for k, v in metadata.items()}
    template = metadata.pop("name_template", DEFAULT_TEMPLATE)
    layer_count = metadata.pop("layer_count", None)
    try:
        layer_count = int(layer_count) if layer_count is not None else None
    except ValueError as exc:
        raise CheckpointError(f"malformed layer_count metadata {layer_count!r}") from exc
    return Checkpoint(metas, bytes(blob[8 + header_len :]), layer_count, template, metadata)


def read_checkpoint(path: str | Path, strict: bool = False) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), strict=strict)


def write_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    _validate(ck.metas, len(ck.data))
    Path(path).write_bytes(ck.to_bytes())


def layer_params(ck: Checkpoint, index: int) -> LayerParamGroup:
    """Float32 copies of every tensor in attention layer ``index``, sorted by name."""
    if not 0 <= index < ck.layer_count:
        raise CheckpointError(f"layer index out of range: {index} not in [0, {ck.layer_count})")
    names = ck.layer_names(index)
    if not names:
        raise CheckpointError(f"no tensors match template {ck.name_template!r} at layer {index}")
    return LayerParamGroup(index, tuple((n, ck.f32(n)) for n in names))


def check_compatible(m: Checkpoint, n: Checkpoint) -> None:
    """Raise CheckpointError unless ``m`` and ``n`` can be merged layer by layer."""
    if m.layer_count != n.layer_count:
        raise CheckpointError(f"layer-count mismatch: {m.layer_count} vs {n.layer_count}")
    for i in range(m.layer_count):
        names_m, names_n = m.layer_names(i), n.layer_names(i)
        if names_m != names_n:
            raise CheckpointError(f"layer {i}: tensor names differ ({names_m} vs {names_n})")
        for name in names_m:
            if m.metas[name].shape != n.metas[name].shape:
                raise CheckpointError(
                    f"layer {i}: shape mismatch for {name!r} ({m.metas[name].shape} vs {n.metas[name].shape})"
                )
