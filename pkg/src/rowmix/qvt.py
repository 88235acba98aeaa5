"""QVT tensor files.

One UTF-8 JSON header line followed by the raw little-endian payload in
row-major order::

    {"dims": [4, 16], "dtype": "i8", "tags": ["W8", ...], "scales": [...]}\\n
    <payload bytes>

``f64`` is accepted alongside ``f32`` and ``i8`` so that checkpoints of
float64 latent weights round-trip losslessly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .quant import PrecisionTag, QuantizedMatrix, as_bits

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i8": np.dtype("i1"), "i64": np.dtype("<i8")}


@dataclass
class QvtTensor:
    data: np.ndarray
    tags: list[str] | None = None
    scales: list[float] | None = None


def _header(arr: np.ndarray, dtype: str, tags=None, scales=None) -> bytes:
    head = {"dims": [int(d) for d in arr.shape], "dtype": dtype}
    if tags is not None:
        head["tags"] = list(tags)
    if scales is not None:
        head["scales"] = [float(s) for s in scales]
    return (json.dumps(head, separators=(",", ":")) + "\n").encode("utf-8")


def dumps(arr, dtype: str = "f32", tags=None, scales=None) -> bytes:
    if dtype not in DTYPES:
        raise ValueError(f"unsupported QVT dtype {dtype!r}")
    a = np.ascontiguousarray(np.asarray(arr).astype(DTYPES[dtype]))
    return _header(a, dtype, tags, scales) + a.tobytes(order="C")


def loads(buf: bytes) -> QvtTensor:
    nl = buf.find(b"\n")
    if nl < 0:
        raise ValueError("QVT header is not newline-terminated")
    try:
        head = json.loads(buf[:nl].decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"bad QVT header: {exc}") from exc
    dtype = head.get("dtype")
    if dtype not in DTYPES:
        raise ValueError(f"unsupported QVT dtype {dtype!r}")
    dims = tuple(int(d) for d in head["dims"])
    payload = buf[nl + 1:]
    dt = DTYPES[dtype]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(payload) != expected:
        raise ValueError(f"QVT payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    return QvtTensor(data, head.get("tags"), head.get("scales"))


def save(path, arr, dtype: str = "f32", tags=None, scales=None) -> Path:
    path = Path(path)
    path.write_bytes(dumps(arr, dtype, tags, scales))
    return path


def load(path) -> QvtTensor:
    return loads(Path(path).read_bytes())


def save_quantized(path, q: QuantizedMatrix) -> Path:
    tags = [PrecisionTag(int(b)).name for b in q.row_bits]
    return save(path, q.codes, "i8", tags=tags, scales=q.row_scales)


def load_quantized(path) -> QuantizedMatrix:
    t = load(path)
    if t.data.ndim != 2 or t.tags is None or t.scales is None:
        raise ValueError(f"{path} is not a quantized matrix (needs i8 codes, tags and scales)")
    return QuantizedMatrix(t.data, as_bits(t.tags), np.asarray(t.scales))
