"""Array conventions and the LDNT tensor container.

All feature maps are C-contiguous NCHW float32; float64 only appears in
gradient checking. Byte sizes are always element_count * dtype_width, no
hidden padding or alignment.
"""

import struct

import numpy as np

F32 = np.float32
F64 = np.float64

_LDNT_MAGIC = b"LDNT"
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES_BY_KIND = {"f4": 1, "f8": 2}


def nbytes(shape, dtype=F32) -> int:
    """Logical byte size of a dense row-major tensor."""
    n = 1
    for e in shape:
        n *= int(e)
    return n * np.dtype(dtype).itemsize


def as_f32(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=F32)
    return x


def check_activation(x, name="tensor"):
    """Feature maps must be contiguous NCHW f32/f64 with positive extents."""
    if x.ndim != 4:
        raise ValueError(f"{name}: expected NCHW, got shape {x.shape}")
    if x.dtype not in (np.dtype(F32), np.dtype(F64)):
        raise ValueError(f"{name}: expected float32/float64, got {x.dtype}")
    if min(x.shape) <= 0:
        raise ValueError(f"{name}: non-positive extent in {x.shape}")
    return x


def write_ldnt(path, arr):
    """Serialize one tensor: magic, u8 dtype code, u8 rank, LE u32 extents, LE data."""
    arr = np.asarray(arr)  # ascontiguousarray would promote rank-0 to rank-1
    kind = arr.dtype.str.lstrip("<>|=")
    if kind not in _CODES_BY_KIND:
        raise ValueError(f"LDNT stores float32/float64 tensors, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank exceeds the u8 header field")
    with open(path, "wb") as f:
        f.write(_LDNT_MAGIC)
        f.write(struct.pack("<BB", _CODES_BY_KIND[kind], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr).astype(
            arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_ldnt(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _LDNT_MAGIC:
        raise ValueError(f"{path}: not an LDNT tensor file (magic {raw[:4]!r})")
    if len(raw) < 6:
        raise ValueError(f"{path}: truncated header")
    code, rank = struct.unpack("<BB", raw[4:6])
    if code not in _DTYPE_CODES:
        raise ValueError(f"{path}: bad dtype code {code}")
    off = 6 + 4 * rank
    if len(raw) < off:
        raise ValueError(f"{path}: truncated extents")
    shape = struct.unpack(f"<{rank}I", raw[6:off])
    dt = _DTYPE_CODES[code]
    want = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if rank else dt.itemsize
    payload = raw[off:]
    if len(payload) != want:
        raise ValueError(f"{path}: truncated payload "
                         f"({len(payload)}B, expected {want}B for {shape})")
    return np.frombuffer(payload, dtype=dt).reshape(shape).copy()
