"""Binary containers: ``.vol3`` volumes and ``RECORRCKPT`` checkpoints.

Both are little-endian. A ``.vol3`` file is::

    16 bytes  magic  b"RECORRVOL3" + six NUL bytes
    u32 x 4   C, D, H, W
    f32 x 3   spacing (z, y, x)
    u32       dtype code (0 = f32)
    f32 ...   values, index ((c*D + z)*H + y)*W + x

A checkpoint is ``b"RECORRCKPT"``, a u32 version, then records of
``(u32 name_len, name, u32 rank, u32 dims[rank], f32 values)`` until EOF.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .volume import Volume

VOL_MAGIC = b"RECORRVOL3" + b"\0" * 6
CKPT_MAGIC = b"RECORRCKPT"
CKPT_VERSION = 1
DTYPE_F32 = 0

_VOL_HEADER = struct.Struct("<4I3fI")


def encode_vol3(vol: Volume) -> bytes:
    C, D, H, W = vol.values.shape
    header = VOL_MAGIC + _VOL_HEADER.pack(C, D, H, W, *vol.spacing, DTYPE_F32)
    return header + np.ascontiguousarray(vol.values, dtype="<f4").tobytes()


def decode_vol3(buf: bytes) -> Volume:
    n_head = len(VOL_MAGIC) + _VOL_HEADER.size
    if len(buf) < n_head or buf[: len(VOL_MAGIC)] != VOL_MAGIC:
        raise DataError("not a .vol3 file (bad magic)")
    C, D, H, W, sz, sy, sx, code = _VOL_HEADER.unpack_from(buf, len(VOL_MAGIC))
    if code != DTYPE_F32:
        raise DataError(f"unsupported .vol3 dtype code {code}")
    count = C * D * H * W
    if len(buf) - n_head != 4 * count:
        raise DataError(f".vol3 payload has {len(buf) - n_head} bytes, expected {4 * count}")
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=n_head).reshape(C, D, H, W)
    return Volume(values.astype(np.float32), (sz, sy, sx))


def write_vol3(path, vol) -> None:
    if not isinstance(vol, Volume):
        vol = Volume(np.asarray(vol))
    Path(path).write_bytes(encode_vol3(vol))


def read_vol3(path) -> Volume:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing volume file: {path}")
    return decode_vol3(path.read_bytes())


def encode_checkpoint(entries: dict) -> bytes:
    """Serialize ``{name: array}`` (insertion order kept) to checkpoint bytes."""
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> dict:
    if buf[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    pos = len(CKPT_MAGIC)
    (version,) = struct.unpack_from("<I", buf, pos)
    if version != CKPT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    pos += 4
    entries = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            entries[name] = arr.reshape(shape).astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise DataError(f"truncated checkpoint: {exc}") from exc
    return entries


def save_checkpoint(path, entries: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(entries))


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing checkpoint: {path}")
    return decode_checkpoint(path.read_bytes())
