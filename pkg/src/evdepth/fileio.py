"""Binary file formats: ``.etsr`` tensors, ``.evt`` event streams, ``.edck``
checkpoints.

All three are little-endian with a 4-byte magic and must round-trip
bit-exactly:

  .etsr  "ETSR" | u32 version=1 | u8 dtype (0=f32, 1=f64) | u32 rank
         | rank x u32 dims | row-major payload
  .evt   "EVNT" | u32 version=1 | u32 count | u16 H | u16 W | f64 t0 | f64 t1
         | count x { f64 t, u16 x, u16 y, i8 polarity, i8 pad }
  .edck  "EDCK" | u32 version=1 | u32 param count
         | per param { u16 name length, utf8 name, u8 dtype, u32 rank,
                       rank x u32 dims, payload }
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .events import EventStream

TENSOR_MAGIC = b"ETSR"
EVENT_MAGIC = b"EVNT"
CHECKPOINT_MAGIC = b"EDCK"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

_EVENT_RECORD = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"),
                          ("polarity", "i1"), ("pad", "i1")])


def _dtype_code(arr: np.ndarray) -> int:
    code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    return code


def _encode_tensor(arr: np.ndarray) -> bytes:
    code = _dtype_code(arr)
    head = struct.pack("<BI", code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    payload = np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()
    return head + dims + payload


def _decode_tensor(buf: memoryview, pos: int) -> tuple[np.ndarray, int]:
    code, rank = struct.unpack_from("<BI", buf, pos)
    pos += 5
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = _CODE_DTYPES.get(code)
    if dtype is None:
        raise ValueError(f"unknown dtype code {code}")
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims).copy()
    pos += count * dtype.itemsize
    return arr, pos


def save_tensor(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    blob = TENSOR_MAGIC + struct.pack("<I", FORMAT_VERSION) + _encode_tensor(arr)
    Path(path).write_bytes(blob)


def load_tensor(path) -> np.ndarray:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:4]) != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a tensor file (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported tensor file version {version}")
    arr, _ = _decode_tensor(buf, 8)
    return arr


def save_events(path, stream: EventStream) -> None:
    n = len(stream)
    rec = np.zeros(n, dtype=_EVENT_RECORD)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["polarity"] = stream.polarity
    head = EVENT_MAGIC + struct.pack("<IIHHdd", FORMAT_VERSION, n,
                                     stream.height, stream.width,
                                     stream.t0, stream.t1)
    Path(path).write_bytes(head + rec.tobytes())


def load_events(path) -> EventStream:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:4]) != EVENT_MAGIC:
        raise ValueError(f"{path}: not an event file (bad magic)")
    version, count, h, w, t0, t1 = struct.unpack_from("<IIHHdd", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported event file version {version}")
    rec = np.frombuffer(buf, dtype=_EVENT_RECORD, count=count, offset=4 + struct.calcsize("<IIHHdd"))
    return EventStream(rec["t"].copy(), rec["x"].astype(np.int64),
                       rec["y"].astype(np.int64), rec["polarity"].copy(),
                       h, w, t0, t1)


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    """Write a name -> array mapping; iteration order is preserved on load."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for name, arr in params.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name!r}")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(_encode_tensor(np.asarray(arr)))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:4]) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = bytes(buf[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        arr, pos = _decode_tensor(buf, pos)
        params[name] = arr
    return params
