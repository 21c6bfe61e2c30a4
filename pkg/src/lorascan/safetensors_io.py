"""Reader and writer for the safetensors container, plus LoRA pair extraction.

Layout: an 8-byte little-endian header length ``N``, ``N`` bytes of UTF-8
JSON, then the data region. Each header entry maps a tensor name to
``{"dtype", "shape", "data_offsets": [begin, end]}`` with offsets relative to
the start of the data region. An optional ``__metadata__`` entry holds a
string-to-string map.

Decoded values are always float64; F16 and BF16 widen exactly.
"""

from __future__ import annotations

import enum
import json
import logging
import re
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    DuplicateName,
    MalformedHeader,
    OffsetMismatch,
    OrphanTensor,
    RankMismatch,
    TruncatedFile,
    UnsupportedDtype,
)

logger = logging.getLogger(__name__)

DTYPE_SIZES = {"F64": 8, "F32": 4, "F16": 2, "BF16": 2}
METADATA_KEY = "__metadata__"
DEFAULT_LAYER = 21

_LE_FORMATS = {"F64": "<f8", "F32": "<f4", "F16": "<f2", "BF16": "<u2"}


@dataclass(eq=False)
class TensorRecord:
    """One named tensor. ``values`` is the flat row-major float64 payload."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        self.shape = tuple(int(s) for s in self.shape)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        if self.dtype not in DTYPE_SIZES:
            raise UnsupportedDtype(f"tensor {self.name!r}: unsupported dtype {self.dtype!r}")
        if int(np.prod(self.shape, dtype=np.int64)) != self.values.size:
            raise ValueError(
                f"tensor {self.name!r}: shape {self.shape} does not hold {self.values.size} values"
            )

    @classmethod
    def from_array(cls, name: str, array: np.ndarray, dtype: str = "F32") -> "TensorRecord":
        array = np.asarray(array)
        return cls(name, dtype, array.shape, array.reshape(-1))

    def to_array(self) -> np.ndarray:
        return self.values.reshape(self.shape)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TensorRecord):
            return NotImplemented
        return (
            self.name == other.name
            and self.dtype == other.dtype
            and self.shape == other.shape
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    def __repr__(self) -> str:
        return f"TensorRecord(name={self.name!r}, dtype={self.dtype}, shape={self.shape})"


@dataclass
class SafetensorsContainer:
    tensors: dict[str, TensorRecord]
    metadata: dict[str, str] | None = None


# --- scalar codecs -----------------------------------------------------------


def _decode(raw: bytes, dtype: str) -> np.ndarray:
    arr = np.frombuffer(raw, dtype=_LE_FORMATS[dtype])
    # signalling NaN payloads trip the invalid flag on widening; they stay NaN
    with np.errstate(invalid="ignore"):
        if dtype == "BF16":
            return (arr.astype(np.uint32) << 16).view(np.float32).astype(np.float64)
        return arr.astype(np.float64)


def _round_to_odd_f32(values: np.ndarray) -> np.ndarray:
    """float64 -> float32 with round-to-odd.

    Avoids double rounding when the result is rounded again to bfloat16:
    float32 carries 16 more mantissa bits than bfloat16.
    """
    with np.errstate(over="ignore"):
        f32 = values.astype(np.float32)
    back = f32.astype(np.float64)
    inexact = (back != values) & np.isfinite(values)
    if not inexact.any():
        return f32
    # step toward zero where RNE rounded away from it (also maps overflowed inf to max finite)
    away = inexact & (np.abs(back) > np.abs(values))
    f32 = f32.copy()
    f32[away] = np.nextafter(f32[away], np.float32(0))
    bits = f32.view(np.uint32).copy()
    bits[inexact] |= np.uint32(1)
    return bits.view(np.float32)


def float_to_bf16_bits(values: np.ndarray) -> np.ndarray:
    """Round float64 values to the nearest bfloat16 (ties to even); return raw bits."""
    values = np.asarray(values, dtype=np.float64)
    bits = _round_to_odd_f32(values).view(np.uint32)
    nan = np.isnan(values)
    lsb = (bits >> 16) & np.uint32(1)
    rounded = (bits + np.uint32(0x7FFF) + lsb) >> 16
    out = rounded.astype(np.uint16)
    # quiet NaN, sign preserved
    out[nan] = ((bits[nan] >> 16) | np.uint32(0x0040)).astype(np.uint16)
    return out


def _encode(values: np.ndarray, dtype: str) -> bytes:
    if dtype == "BF16":
        return float_to_bf16_bits(values).astype("<u2").tobytes()
    with np.errstate(over="ignore"):
        return np.asarray(values, dtype=np.float64).astype(_LE_FORMATS[dtype]).tobytes()


def quantize(values: np.ndarray, dtype: str) -> np.ndarray:
    """Values as they would read back after being stored as ``dtype``."""
    return _decode(_encode(np.asarray(values, dtype=np.float64).reshape(-1), dtype), dtype).reshape(
        np.shape(values)
    )


# --- container ---------------------------------------------------------------


def load_container(data: bytes) -> SafetensorsContainer:
    """Decode a whole container, keeping ``__metadata__`` if present."""
    data = memoryview(data)
    if len(data) < 8:
        raise TruncatedFile(f"need 8 bytes for the header length, got {len(data)}", offset=0)
    (header_len,) = struct.unpack_from("<Q", data, 0)
    data_start = 8 + header_len
    if data_start > len(data):
        raise TruncatedFile(
            f"header claims {header_len} bytes but only {len(data) - 8} follow", offset=8
        )
    try:
        header = json.loads(bytes(data[8:data_start]).decode("utf-8"), object_pairs_hook=_unique_keys)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid UTF-8 JSON: {exc}", offset=8) from exc
    if not isinstance(header, dict):
        raise MalformedHeader("header must be a JSON object", offset=8)

    metadata = header.pop(METADATA_KEY, None)
    if metadata is not None and not (
        isinstance(metadata, dict)
        and all(isinstance(k, str) and isinstance(v, str) for k, v in metadata.items())
    ):
        raise MalformedHeader("__metadata__ must be a string-to-string map", offset=8)

    data_len = len(data) - data_start
    spans = []
    for name, entry in header.items():
        if not isinstance(entry, dict):
            raise MalformedHeader(f"entry for {name!r} is not an object", offset=8)
        missing = {"dtype", "shape", "data_offsets"} - entry.keys()
        if missing:
            raise MalformedHeader(f"entry for {name!r} lacks {sorted(missing)}", offset=8)
        dtype, shape, offsets = entry["dtype"], entry["shape"], entry["data_offsets"]
        if dtype not in DTYPE_SIZES:
            raise UnsupportedDtype(f"tensor {name!r} has unsupported dtype {dtype!r}", offset=8)
        if not (isinstance(shape, list) and all(_is_uint(s) for s in shape)):
            raise MalformedHeader(f"tensor {name!r} has invalid shape {shape!r}", offset=8)
        if not (isinstance(offsets, list) and len(offsets) == 2 and all(map(_is_uint, offsets))):
            raise MalformedHeader(f"tensor {name!r} has invalid data_offsets {offsets!r}", offset=8)
        begin, end = offsets
        expected = int(np.prod(shape, dtype=np.int64)) * DTYPE_SIZES[dtype]
        if end < begin or end - begin != expected:
            raise OffsetMismatch(
                f"tensor {name!r}: offsets [{begin}, {end}] do not span {expected} bytes",
                offset=data_start + begin,
            )
        if end > data_len:
            raise TruncatedFile(
                f"tensor {name!r} ends at data byte {end}, data region has {data_len}",
                offset=data_start + min(begin, data_len),
            )
        spans.append((begin, end, name, dtype, tuple(shape)))

    spans.sort()
    for prev, cur in zip(spans, spans[1:]):
        if cur[0] < prev[1]:
            raise OffsetMismatch(
                f"tensors {prev[2]!r} and {cur[2]!r} overlap", offset=data_start + cur[0]
            )

    tensors = {}
    by_name = {s[2]: s for s in spans}
    for name in header:
        begin, end, _, dtype, shape = by_name[name]
        raw = bytes(data[data_start + begin : data_start + end])
        tensors[name] = TensorRecord(name, dtype, shape, _decode(raw, dtype))
    return SafetensorsContainer(tensors, dict(metadata) if metadata is not None else None)


def _unique_keys(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise DuplicateName(f"duplicate header key {key!r}", offset=8)
        out[key] = value
    return out


def _is_uint(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool) and x >= 0


def parse_safetensors(data: bytes) -> dict[str, TensorRecord]:
    """Decode every tensor in ``data``; ``__metadata__`` is ignored."""
    return load_container(data).tensors


def emit_safetensors(
    records: Iterable[TensorRecord],
    dtype_out: str | None = "F32",
    metadata: Mapping[str, str] | None = None,
) -> bytes:
    """Serialize ``records`` in order with gapless offsets.

    With ``dtype_out=None`` each record keeps its own dtype. The header is
    padded with spaces to a multiple of 8 bytes, as the reference writer does.
    """
    if dtype_out is not None and dtype_out not in DTYPE_SIZES:
        raise UnsupportedDtype(f"unsupported output dtype {dtype_out!r}")
    header: dict[str, object] = {}
    if metadata is not None:
        header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    chunks = []
    pos = 0
    for rec in records:
        if rec.name in header:
            raise DuplicateName(f"duplicate tensor name {rec.name!r}")
        dtype = dtype_out or rec.dtype
        raw = _encode(rec.values, dtype)
        header[rec.name] = {
            "dtype": dtype,
            "shape": list(rec.shape),
            "data_offsets": [pos, pos + len(raw)],
        }
        chunks.append(raw)
        pos += len(raw)
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    blob += b" " * (-len(blob) % 8)
    return struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


# --- LoRA naming convention --------------------------------------------------


class Projection(str, enum.Enum):
    Q = "q"
    K = "k"
    V = "v"
    O = "o"  # noqa: E741

    @classmethod
    def parse_set(cls, spec: str | Iterable[str]) -> frozenset["Projection"]:
        items = list(spec.replace(",", "")) if isinstance(spec, str) else list(spec)
        return frozenset(cls(p.value if isinstance(p, Projection) else str(p).lower()) for p in items)


ALL_PROJECTIONS = frozenset(Projection)
_PROJ_ORDER = {p: i for i, p in enumerate(Projection)}

_LORA_NAME = re.compile(
    r"(?:^|\.)layers\.(?P<layer>\d+)\.self_attn\.(?P<proj>[qkvo])_proj\.lora_(?P<factor>[AB])\.weight$"
)


def parse_lora_name(name: str) -> tuple[int, Projection, str] | None:
    """``(layer, projection, "A"|"B")`` for a LoRA factor name, else ``None``."""
    m = _LORA_NAME.search(name)
    if m is None:
        return None
    return int(m["layer"]), Projection(m["proj"]), m["factor"]


@dataclass
class LoraPair:
    """Factor pair of one projection: the update is ``B @ A``.

    ``A`` is rank x input dim, ``B`` is output dim x rank.
    """

    layer_index: int
    projection: Projection
    A: np.ndarray
    B: np.ndarray
    names: tuple[str, str] = field(default=("", ""), repr=False)

    @property
    def rank(self) -> int:
        return self.A.shape[0]


def extract_lora_pairs(
    tensors: Mapping[str, TensorRecord],
    layer_filter: int | None = DEFAULT_LAYER,
    projections: Iterable[Projection] = ALL_PROJECTIONS,
) -> list[LoraPair]:
    """Group LoRA factors into pairs, ordered by layer then q, k, v, o.

    Names are matched on suffix; anything that does not look like an
    attention LoRA factor is skipped with a single aggregated warning.
    """
    wanted = frozenset(Projection(p) for p in projections)
    found: dict[tuple[int, Projection], dict[str, TensorRecord]] = {}
    skipped = []
    for name, rec in tensors.items():
        parsed = parse_lora_name(name)
        if parsed is None:
            skipped.append(name)
            continue
        layer, proj, factor = parsed
        if proj not in wanted or (layer_filter is not None and layer != layer_filter):
            continue
        found.setdefault((layer, proj), {})[factor] = rec
    if skipped:
        logger.warning(
            "skipped %d tensor(s) not matching the LoRA attention naming convention (e.g. %r)",
            len(skipped),
            skipped[0],
        )

    pairs = []
    for key in sorted(found, key=lambda lp: (lp[0], _PROJ_ORDER[lp[1]])):
        factors = found[key]
        if len(factors) != 2:
            (lone,) = factors.values()
            raise OrphanTensor(f"{lone.name!r} has no matching lora_{'B' if 'A' in factors else 'A'}")
        a_rec, b_rec = factors["A"], factors["B"]
        for rec in (a_rec, b_rec):
            if len(rec.shape) != 2 or min(rec.shape) < 1:
                raise RankMismatch(f"{rec.name!r} must be a non-empty 2-D matrix, got shape {rec.shape}")
        A, B = a_rec.to_array(), b_rec.to_array()
        if A.shape[0] != B.shape[1]:
            raise RankMismatch(
                f"{a_rec.name!r} has rank {A.shape[0]} but {b_rec.name!r} has rank {B.shape[1]}"
            )
        pairs.append(LoraPair(key[0], key[1], A, B, names=(a_rec.name, b_rec.name)))
    return pairs


def lora_tensor_name(
    layer: int, projection: Projection | str, factor: str, prefix: str = "base_model.model.model"
) -> str:
    """PEFT-style tensor name, e.g. ``...layers.21.self_attn.q_proj.lora_A.weight``."""
    p = Projection(projection).value
    return f"{prefix}.layers.{layer}.self_attn.{p}_proj.lora_{factor}.weight"
