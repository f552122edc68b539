"""Checkpoint tensor containers.

File layout: an 8-byte little-endian unsigned header length N, N bytes of
JSON mapping tensor name -> {"dtype", "shape", "data_offsets"}, then a raw
little-endian data region. Offsets are relative to the end of the header.
Supported dtypes are F32, F16 and BF16; every read widens to float32
(both half formats embed losslessly in f32).

Iteration over a TensorMap always follows lexicographic tensor-name order,
which fixes the flattening order used by the kinship metrics.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_HEADER_BYTES = 100 * 1024 * 1024

_DTYPE_SIZES = {"F32": 4, "F16": 2, "BF16": 2}


class TensorStoreError(ValueError):
    """Malformed container or incompatible tensor layouts."""


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str  # F32 | F16 | BF16
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def num_elements(self) -> int:
        n = 1
        for dim in self.shape:
            n *= dim
        return n

    @property
    def num_bytes(self) -> int:
        return self.data_offsets[1] - self.data_offsets[0]


def _widen(raw: bytes, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    if dtype == "F32":
        arr = np.frombuffer(raw, dtype="<f4")
    elif dtype == "F16":
        arr = np.frombuffer(raw, dtype="<f2").astype(np.float32)
    elif dtype == "BF16":
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16
        arr = bits.view(np.float32)
    else:
        raise TensorStoreError(f"unsupported element type {dtype!r}")
    return arr.reshape(shape).astype(np.float32, copy=False)


def _narrow(arr: np.ndarray, dtype: str) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if dtype == "F32":
        return arr.astype("<f4").tobytes()
    if dtype == "F16":
        return arr.astype("<f2").tobytes()
    if dtype == "BF16":
        bits = arr.view(np.uint32)
        # round to nearest even in the upper 16 bits
        rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
        return rounded.astype("<u2").tobytes()
    raise TensorStoreError(f"unsupported element type {dtype!r}")


class TensorMap:
    """Named collection of dense tensors, read lazily and widened to f32.

    Immutable after construction; per-tensor reads are independent and safe
    to issue concurrently.
    """

    def __init__(self, metas: list[TensorMeta], reader):
        self._metas = {m.name: m for m in sorted(metas, key=lambda m: m.name)}
        if len(self._metas) != len(metas):
            raise TensorStoreError("duplicate tensor names in container")
        self._reader = reader

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray],
                    dtypes: dict[str, str] | str = "F32") -> "TensorMap":
        data = {k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()}
        metas = []
        offset = 0
        for name in sorted(data):
            dtype = dtypes if isinstance(dtypes, str) else dtypes[name]
            nbytes = data[name].size * _DTYPE_SIZES[dtype]
            metas.append(TensorMeta(name, dtype, tuple(data[name].shape),
                                    (offset, offset + nbytes)))
            offset += nbytes
        return cls(metas, lambda name: data[name])

    @property
    def metas(self) -> list[TensorMeta]:
        return list(self._metas.values())

    def names(self) -> list[str]:
        return list(self._metas)

    def meta(self, name: str) -> TensorMeta:
        return self._metas[name]

    def get(self, name: str) -> np.ndarray:
        """Tensor values as float32, in stored shape."""
        return self._reader(name)

    def items(self):
        """Iterate (name, f32 array) in lexicographic name order."""
        for name in self._metas:
            yield name, self.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self._metas

    def __len__(self) -> int:
        return len(self._metas)

    @property
    def num_parameters(self) -> int:
        return sum(m.num_elements for m in self._metas.values())

    def flatten(self) -> np.ndarray:
        """All parameters as one f32 vector, canonical order (name-sorted,
        row-major within each tensor)."""
        if not self._metas:
            return np.empty(0, dtype=np.float32)
        return np.concatenate([arr.reshape(-1) for _, arr in self.items()])


def _parse_header(blob: bytes) -> tuple[list[TensorMeta], dict]:
    def reject_dupes(pairs):
        d = {}
        for k, v in pairs:
            if k in d:
                raise TensorStoreError(f"duplicate tensor name {k!r} in header")
            d[k] = v
        return d

    try:
        header = json.loads(blob.decode("utf-8"), object_pairs_hook=reject_dupes)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TensorStoreError(f"malformed header JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise TensorStoreError("header is not a JSON object")

    metadata = header.pop("__metadata__", {})
    metas = []
    for name, entry in header.items():
        if not isinstance(entry, dict):
            raise TensorStoreError(f"tensor {name!r}: header entry is not an object")
        try:
            dtype = entry["dtype"]
            shape = entry["shape"]
            offsets = entry["data_offsets"]
        except KeyError as exc:
            raise TensorStoreError(f"tensor {name!r}: missing header field {exc}") from exc
        if dtype not in _DTYPE_SIZES:
            raise TensorStoreError(f"tensor {name!r}: unsupported element type {dtype!r}")
        if not isinstance(shape, list) or any(
                not isinstance(d, int) or d < 0 for d in shape):
            raise TensorStoreError(f"tensor {name!r}: invalid shape {shape!r}")
        if (not isinstance(offsets, list) or len(offsets) != 2
                or any(not isinstance(o, int) or o < 0 for o in offsets)
                or offsets[1] < offsets[0]):
            raise TensorStoreError(f"tensor {name!r}: invalid data_offsets {offsets!r}")
        meta = TensorMeta(name, dtype, tuple(shape), (offsets[0], offsets[1]))
        if meta.num_bytes != meta.num_elements * _DTYPE_SIZES[dtype]:
            raise TensorStoreError(
                f"tensor {name!r}: size mismatch, {meta.num_bytes} bytes declared "
                f"for shape {shape} {dtype}")
        metas.append(meta)
    return metas, metadata


def load_tensor_map(path: str | Path) -> TensorMap:
    """Load a container; tensor data is memory-mapped and read lazily."""
    path = Path(path)
    with path.open("rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise TensorStoreError(f"{path}: truncated file, no header length")
        (header_len,) = struct.unpack("<Q", prefix)
        if header_len > MAX_HEADER_BYTES:
            raise TensorStoreError(
                f"{path}: header length {header_len} exceeds cap {MAX_HEADER_BYTES}")
        blob = fh.read(header_len)
        if len(blob) < header_len:
            raise TensorStoreError(f"{path}: truncated header")
    metas, _ = _parse_header(blob)

    data_start = 8 + header_len
    data_len = path.stat().st_size - data_start
    spans = sorted((m.data_offsets for m in metas))
    for (b0, e0), (b1, _) in zip(spans, spans[1:]):
        if b1 < e0:
            raise TensorStoreError(f"{path}: overlapping tensor data offsets")
    for m in metas:
        if m.data_offsets[1] > data_len:
            raise TensorStoreError(
                f"{path}: tensor {m.name!r} data out of range (truncated file?)")

    if data_len > 0:
        region = np.memmap(path, dtype=np.uint8, mode="r",
                           offset=data_start, shape=(data_len,))
    else:
        region = np.empty(0, dtype=np.uint8)
    meta_by_name = {m.name: m for m in metas}

    def read(name: str) -> np.ndarray:
        m = meta_by_name[name]
        raw = region[m.data_offsets[0]:m.data_offsets[1]].tobytes()
        return _widen(raw, m.dtype, m.shape)

    return TensorMap(metas, read)


def save_tensor_map(tmap: TensorMap, path: str | Path,
                    metadata: dict[str, str] | None = None) -> None:
    """Write a container; values round-trip through each tensor's declared
    element type (bit-exact for F32)."""
    path = Path(path)
    chunks = []
    header: dict = {}
    if metadata:
        header["__metadata__"] = dict(metadata)
    offset = 0
    for name, arr in tmap.items():
        dtype = tmap.meta(name).dtype
        raw = _narrow(arr, dtype)
        header[name] = {
            "dtype": dtype,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def check_compatible(maps: list[TensorMap]) -> None:
    """All maps must share name sets, shapes and element types.

    Reports the first differing tensor (by name order); tensors present in
    one map but not another are a hard error.
    """
    if len(maps) < 2:
        raise TensorStoreError("need at least 2 tensor maps to compare")
    first = maps[0]
    for other in maps[1:]:
        for name in sorted(set(first.names()) | set(other.names())):
            if name not in other:
                raise TensorStoreError(f"tensor {name!r} missing from one model")
            if name not in first:
                raise TensorStoreError(f"tensor {name!r} missing from one model")
            ma, mb = first.meta(name), other.meta(name)
            if ma.shape != mb.shape:
                raise TensorStoreError(
                    f"tensor {name!r}: shape mismatch {ma.shape} vs {mb.shape}")
            if ma.dtype != mb.dtype:
                raise TensorStoreError(
                    f"tensor {name!r}: element type mismatch {ma.dtype} vs {mb.dtype}")
