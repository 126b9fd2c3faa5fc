"""Binary checkpoint container.

A checkpoint is a flat name -> array mapping (model parameters, probe,
optimizer moments, counters as 0-d arrays) serialized as a sequence of
records behind a small versioned header. Everything is little-endian and
written via a temp file + rename so a crash mid-write never clobbers the
previous checkpoint. Round trips are bit-exact.
"""

import os

import numpy as np

MAGIC = b"SPLATCKPT"
VERSION = 1

# dtype code -> numpy little-endian spec; f8 covers every learnable tensor,
# i8 covers counters, f4 is kept for compactness of exported extras.
_DTYPES = {0: "<f8", 1: "<i8", 2: "<f4"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _write_u64(f, n):
    f.write(int(n).to_bytes(8, "little"))


def _read_u64(f):
    raw = f.read(8)
    if len(raw) != 8:
        raise ValueError("checkpoint truncated")
    return int.from_bytes(raw, "little")


def save(path, tensors):
    """Write a {name: array-like} mapping; scalars become 0-d arrays."""
    path = os.fspath(path)
    seen = set()
    records = []
    for name, value in tensors.items():
        if name in seen:
            raise ValueError(f"duplicate checkpoint tensor {name!r}")
        seen.add(name)
        arr = np.asarray(value)
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float64)
        records.append((name, arr))  # tobytes() below C-orders any layout

    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        _write_u64(f, VERSION)
        _write_u64(f, len(records))
        for name, arr in records:
            blob = name.encode("utf-8")
            _write_u64(f, len(blob))
            f.write(blob)
            _write_u64(f, _CODES[arr.dtype])
            _write_u64(f, arr.ndim)
            for dim in arr.shape:
                _write_u64(f, dim)
            f.write(arr.tobytes())
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load(path):
    """Read a checkpoint back into a {name: ndarray} dict."""
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version = _read_u64(f)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        count = _read_u64(f)
        out = {}
        for _ in range(count):
            name = f.read(_read_u64(f)).decode("utf-8")
            code = _read_u64(f)
            if code not in _DTYPES:
                raise ValueError(f"{path}: unknown dtype code {code}")
            dtype = np.dtype(_DTYPES[code])
            shape = tuple(_read_u64(f) for _ in range(_read_u64(f)))
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = f.read(n * dtype.itemsize)
            if len(raw) != n * dtype.itemsize:
                raise ValueError(f"{path}: checkpoint truncated in {name!r}")
            out[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return out
