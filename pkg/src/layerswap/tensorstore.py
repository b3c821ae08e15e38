"""Reading and writing the safetensors container, plus layer grouping.

The container is an 8-byte little-endian header length, a UTF-8 JSON
header, then a flat payload. Tensor payloads are never read at open time;
:class:`CheckpointHandle` only keeps the parsed header.

The writer emits a canonical form: tensors sorted by name, ``__metadata__``
first, compact JSON, payload packed with no padding. Output bytes therefore
depend only on the name->entry map and the metadata map.
"""

from __future__ import annotations

import json
import math
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from .errors import ContainerFormatError, PreconditionError

DTYPE_SIZES = {
    "F64": 8,
    "F32": 4,
    "F16": 2,
    "BF16": 2,
    "I64": 8,
    "I32": 4,
    "I16": 2,
    "I8": 1,
    "U64": 8,
    "U32": 4,
    "U16": 2,
    "U8": 1,
    "BOOL": 1,
    "F8_E4M3": 1,
    "F8_E5M2": 1,
}
NUMERIC_DTYPES = ("F64", "F32", "F16", "BF16")

DEFAULT_CHUNK_BYTES = 4 << 20
METADATA_KEY = "__metadata__"

PRE = "pre"
POST = "post"
DEFAULT_LAYER_PATTERN = r"^model\.layers\.(\d+)\."
DEFAULT_PRE_PREFIXES = ("model.embed",)


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
        return self.data_offsets[1] - self.data_offsets[0]


@dataclass(frozen=True)
class CheckpointHandle:
    """Parsed header of one checkpoint file. Immutable; safe to share across threads."""

    path: Path
    metadata: Mapping[str, str]
    tensors: Mapping[str, TensorMeta]
    payload_start: int
    payload_length: int

    @property
    def names(self) -> list[str]:
        return sorted(self.tensors)

    def meta(self, name: str) -> TensorMeta:
        try:
            return self.tensors[name]
        except KeyError:
            raise PreconditionError(f"unknown tensor {name!r} in {self.path}") from None

    def iter_bytes(self, name: str, chunk_bytes: int = DEFAULT_CHUNK_BYTES) -> Iterator[bytes]:
        meta = self.meta(name)
        begin, end = meta.data_offsets
        chunk_bytes = max(1, int(chunk_bytes))
        # every call gets its own file object, so concurrent readers never share a position
        with open(self.path, "rb") as f:
            f.seek(self.payload_start + begin)
            remaining = end - begin
            while remaining > 0:
                buf = f.read(min(chunk_bytes, remaining))
                if not buf:
                    raise ContainerFormatError(
                        f"unexpected end of file reading {name!r}",
                        self.payload_start + end - remaining,
                    )
                remaining -= len(buf)
                yield buf

    def read_bytes(self, name: str) -> bytes:
        return b"".join(self.iter_bytes(name))


@dataclass(frozen=True)
class TensorRef:
    """Payload taken from a tensor of an open checkpoint, copied by the writer in chunks."""

    handle: CheckpointHandle
    name: str


TensorData = Union[bytes, bytearray, memoryview, TensorRef]


def _key_position(header: bytes, name: str) -> int:
    idx = header.find(json.dumps(name).encode("utf-8"))
    return 8 + max(idx, 0)


def _parse_entry(name: str, raw: Any, header: bytes, payload_length: int) -> TensorMeta:
    pos = _key_position(header, name)
    if not isinstance(raw, dict):
        raise ContainerFormatError(f"tensor {name!r}: entry is not an object", pos)
    dtype = raw.get("dtype")
    shape = raw.get("shape")
    offsets = raw.get("data_offsets")
    if not isinstance(dtype, str):
        raise ContainerFormatError(f"tensor {name!r}: missing or invalid dtype", pos)
    if not isinstance(shape, list) or not all(
        isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape
    ):
        raise ContainerFormatError(f"tensor {name!r}: invalid shape {shape!r}", pos)
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offsets)
    ):
        raise ContainerFormatError(f"tensor {name!r}: invalid data_offsets {offsets!r}", pos)
    begin, end = offsets
    if begin > end:
        raise ContainerFormatError(f"tensor {name!r}: data_offsets begin {begin} > end {end}", pos)
    if end > payload_length:
        raise ContainerFormatError(
            f"tensor {name!r}: data_offsets end {end} beyond payload length {payload_length}", pos
        )
    size = DTYPE_SIZES.get(dtype)
    if size is not None:
        expected = math.prod(shape) * size
        if end - begin != expected:
            raise ContainerFormatError(
                f"tensor {name!r}: size mismatch: expected {expected} bytes, got {end - begin}", pos
            )
    return TensorMeta(name, dtype, tuple(shape), (begin, end))


def _reject_duplicates(pairs: list[tuple[str, Any]]) -> dict:
    out: dict = {}
    for key, value in pairs:
        if key in out:
            raise ValueError(f"duplicate key {key!r}")
        out[key] = value
    return out


def open_checkpoint(path: str | os.PathLike) -> CheckpointHandle:
    """Parse and validate a checkpoint header without touching tensor payloads."""
    path = Path(path)
    file_size = path.stat().st_size
    with open(path, "rb") as f:
        prefix = f.read(8)
        if len(prefix) < 8:
            raise ContainerFormatError("malformed header length: file shorter than 8 bytes", 0)
        (header_len,) = struct.unpack("<Q", prefix)
        if header_len > file_size - 8:
            raise ContainerFormatError(
                f"malformed header length: {header_len} exceeds file size {file_size}", 0
            )
        header = f.read(header_len)
    try:
        text = header.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ContainerFormatError(f"header is not valid UTF-8: {e.reason}", 8 + e.start) from None
    try:
        parsed = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as e:
        pos = 8 + len(text[: e.pos].encode("utf-8"))
        raise ContainerFormatError(f"header is not valid JSON: {e.msg}", pos) from None
    except ValueError as e:
        raise ContainerFormatError(f"header is not valid JSON: {e}", 8) from None
    if not isinstance(parsed, dict):
        raise ContainerFormatError("header is not a JSON object", 8)

    payload_start = 8 + header_len
    payload_length = file_size - payload_start
    metadata = parsed.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise ContainerFormatError("__metadata__ must map strings to strings", _key_position(header, METADATA_KEY))

    tensors = {name: _parse_entry(name, raw, header, payload_length) for name, raw in parsed.items()}

    ordered = sorted(tensors.values(), key=lambda m: m.data_offsets)
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.data_offsets[0] < prev.data_offsets[1]:
            raise ContainerFormatError(
                f"tensors {prev.name!r} and {cur.name!r} have overlapping data_offsets",
                payload_start + cur.data_offsets[0],
            )
    return CheckpointHandle(path, dict(metadata), tensors, payload_start, payload_length)


# ---------------------------------------------------------------------------
# numeric decode


def _decode(buf: bytes, dtype: str) -> np.ndarray:
    if dtype == "F64":
        return np.frombuffer(buf, dtype="<f8").astype(np.float64)
    if dtype == "F32":
        with np.errstate(invalid="ignore"):
            return np.frombuffer(buf, dtype="<f4").astype(np.float64)
    if dtype == "F16":
        return np.frombuffer(buf, dtype="<f2").astype(np.float64)
    if dtype == "BF16":
        widened = np.frombuffer(buf, dtype="<u2").astype("<u4") << 16
        # signalling NaN payloads trip the FP invalid flag on widening
        with np.errstate(invalid="ignore"):
            return widened.view("<f4").astype(np.float64)
    raise PreconditionError(f"unsupported dtype for numeric decode: {dtype}")


def iter_tensor_f64(
    handle: CheckpointHandle,
    name: str,
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
    align: int = 1,
) -> Iterator[np.ndarray]:
    """Yield the tensor as float64 chunks in storage order.

    Every chunk except the last holds a multiple of ``align`` elements, so
    downstream fixed-size blocking does not depend on ``chunk_bytes``.
    """
    meta = handle.meta(name)
    if meta.dtype not in NUMERIC_DTYPES:
        raise PreconditionError(f"unsupported dtype for numeric decode: {meta.dtype} ({name})")
    itemsize = DTYPE_SIZES[meta.dtype]
    elems = max(align, (chunk_bytes // itemsize) // align * align)
    for buf in handle.iter_bytes(name, elems * itemsize):
        yield _decode(buf, meta.dtype)


def read_tensor_f64(handle: CheckpointHandle, name: str, chunk_bytes: int = DEFAULT_CHUNK_BYTES) -> np.ndarray:
    """Decode a whole tensor to a flat float64 array. F16/BF16/F32 decode exactly."""
    parts = list(iter_tensor_f64(handle, name, chunk_bytes))
    if not parts:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# writing


def _entry_nbytes(data: TensorData) -> int:
    if isinstance(data, TensorRef):
        return data.handle.meta(data.name).nbytes
    return memoryview(data).nbytes


def canonical_header(entries: Mapping[str, tuple[str, Sequence[int], int]], metadata: Mapping[str, str] | None) -> bytes:
    """Header bytes for ``name -> (dtype, shape, nbytes)`` in canonical layout."""
    header: dict[str, Any] = {}
    if metadata:
        header[METADATA_KEY] = {k: metadata[k] for k in sorted(metadata)}
    offset = 0
    for name in sorted(entries):
        dtype, shape, nbytes = entries[name]
        header[name] = {"dtype": dtype, "shape": list(shape), "data_offsets": [offset, offset + nbytes]}
        offset += nbytes
    return json.dumps(header, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def write_checkpoint(
    entries: Iterable[tuple[str, str, Sequence[int], TensorData]],
    metadata: Mapping[str, str] | None,
    path: str | os.PathLike,
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
) -> None:
    """Write ``(name, dtype, shape, data)`` entries in canonical form.

    ``data`` is raw little-endian bytes or a :class:`TensorRef`, whose bytes
    are streamed from the referenced file without decoding. The file is
    written to a temporary sibling and renamed into place.
    """
    table: dict[str, tuple[str, tuple[int, ...], TensorData]] = {}
    for name, dtype, shape, data in entries:
        if name == METADATA_KEY:
            raise PreconditionError(f"{METADATA_KEY} is reserved")
        if name in table:
            raise PreconditionError(f"duplicate tensor name {name!r}")
        shape = tuple(int(d) for d in shape)
        if any(d < 0 for d in shape):
            raise PreconditionError(f"tensor {name!r}: negative dimension in {shape}")
        size = DTYPE_SIZES.get(dtype)
        nbytes = _entry_nbytes(data)
        if size is not None and nbytes != math.prod(shape) * size:
            raise PreconditionError(
                f"tensor {name!r}: size mismatch: expected {math.prod(shape) * size} bytes, got {nbytes}"
            )
        table[name] = (dtype, shape, data)
    if metadata:
        for k, v in metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise PreconditionError("metadata must map strings to strings")

    header = canonical_header(
        {n: (d, s, _entry_nbytes(data)) for n, (d, s, data) in table.items()}, metadata
    )
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for name in sorted(table):
                data = table[name][2]
                if isinstance(data, TensorRef):
                    for buf in data.handle.iter_bytes(data.name, chunk_bytes):
                        f.write(buf)
                else:
                    f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def rewrite_canonical(handle: CheckpointHandle, path: str | os.PathLike, metadata: Mapping[str, str] | None = None) -> None:
    """Re-emit ``handle`` in canonical form, optionally with replacement metadata."""
    entries = [(m.name, m.dtype, m.shape, TensorRef(handle, m.name)) for m in handle.tensors.values()]
    write_checkpoint(entries, handle.metadata if metadata is None else metadata, path)


# ---------------------------------------------------------------------------
# layer grouping


@dataclass(frozen=True)
class LayerMap:
    """Assignment of every tensor name to ``"pre"``, ``"post"`` or a layer index."""

    layer_of: Mapping[str, int | str]
    num_layers: int
    _members: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        members: dict[int | str, list[str]] = {}
        for name, group in self.layer_of.items():
            members.setdefault(group, []).append(name)
        for names in members.values():
            names.sort()
        self._members.update(members)

    def names(self, group: int | str) -> list[str]:
        """Tensor names of ``group`` in name order."""
        return list(self._members.get(group, []))

    def groups(self, include_empty: bool = False) -> list[int | str]:
        order: list[int | str] = [PRE, *range(self.num_layers), POST]
        return [g for g in order if include_empty or self._members.get(g)]


def group_layers(
    handle: CheckpointHandle | Iterable[str],
    layer_pattern: str = DEFAULT_LAYER_PATTERN,
    pre_prefixes: Sequence[str] = DEFAULT_PRE_PREFIXES,
) -> LayerMap:
    """Partition tensor names into transformer layers, ``pre`` and ``post``.

    Names matching ``layer_pattern`` (one integer capture group) go to that
    layer. Remaining names starting with one of ``pre_prefixes`` go to
    ``pre``; everything else goes to ``post``.
    """
    names = handle.names if isinstance(handle, CheckpointHandle) else sorted(handle)
    try:
        regex = re.compile(layer_pattern)
    except re.error as e:
        raise PreconditionError(f"invalid layer pattern {layer_pattern!r}: {e}") from None
    if regex.groups != 1:
        raise PreconditionError(f"layer pattern must have exactly one capture group: {layer_pattern!r}")

    layer_of: dict[str, int | str] = {}
    indices: set[int] = set()
    for name in names:
        m = regex.search(name)
        if m:
            try:
                idx = int(m.group(1))
            except ValueError:
                raise PreconditionError(f"layer pattern captured non-integer {m.group(1)!r} in {name!r}") from None
            layer_of[name] = idx
            indices.add(idx)
        elif any(name.startswith(p) for p in pre_prefixes):
            layer_of[name] = PRE
        else:
            layer_of[name] = POST
    if not indices:
        raise PreconditionError(f"layer pattern {layer_pattern!r} matched no tensor names")
    num_layers = max(indices) + 1
    if len(indices) != num_layers:
        missing = sorted(set(range(num_layers)) - indices)
        raise PreconditionError(f"layer indices not contiguous: missing {missing}")
    return LayerMap(layer_of, num_layers)


def load_layer_config(path: str | os.PathLike) -> dict:
    """Read ``{"layer_pattern": ..., "pre_prefixes": [...]}`` from a JSON file."""
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    out = {
        "layer_pattern": raw.get("layer_pattern", DEFAULT_LAYER_PATTERN),
        "pre_prefixes": tuple(raw.get("pre_prefixes", DEFAULT_PRE_PREFIXES)),
    }
    if not isinstance(out["layer_pattern"], str) or not all(isinstance(p, str) for p in out["pre_prefixes"]):
        raise PreconditionError(f"invalid layer config in {path}")
    return out
