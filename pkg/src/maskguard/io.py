"""On-disk formats: SCKT tensor checkpoints, binary PPM/PGM, small CSV helpers.

SCKT layout (all integers little-endian)::

    b"SCKT"  u32 version  u32 count
    repeated count times:
        u32 name_len  name (UTF-8)  u32 rank  u64 dims[rank]  f64 data[prod(dims)]
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError
from .tensor import Tensor

MAGIC = b"SCKT"
VERSION = 1


def encode_checkpoint(tensors: Mapping[str, Tensor | np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def decode_checkpoint(blob: bytes) -> dict[str, Tensor]:
    if blob[:4] != MAGIC:
        raise InputError("not an SCKT checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise InputError(f"unsupported SCKT version {version}")
    pos = 12
    out: dict[str, Tensor] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).astype(np.float64)
        pos += 8 * size
        if name in out:
            raise InputError(f"duplicate tensor name {name!r}")
        out[name] = Tensor(data.reshape(dims))
    if pos != len(blob):
        raise InputError("trailing bytes after last tensor")
    return out


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path: str | Path) -> dict[str, Tensor]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# netpbm


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to bytes, clamping out-of-range values."""
    return np.round((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 127.5 - 1.0


def encode_ppm(rgb: np.ndarray) -> bytes:
    """``rgb``: uint8 array (H, W, 3)."""
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8 or rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InputError(f"PPM needs uint8 (H, W, 3), got {rgb.dtype} {rgb.shape}")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    gray = np.asarray(gray)
    if gray.dtype != np.uint8 or gray.ndim != 2:
        raise InputError(f"PGM needs uint8 (H, W), got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes()


def _parse_netpbm(blob: bytes, magic: bytes) -> tuple[int, int, bytes]:
    if blob[:2] != magic:
        raise InputError(f"expected {magic.decode()} header")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise InputError("only 8-bit netpbm is supported")
    return w, h, blob[pos:]


def decode_ppm(blob: bytes) -> np.ndarray:
    w, h, raw = _parse_netpbm(blob, b"P6")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).copy()


def decode_pgm(blob: bytes) -> np.ndarray:
    w, h, raw = _parse_netpbm(blob, b"P5")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h).reshape(h, w).copy()


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_ppm(rgb))


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_pgm(gray))


def read_ppm(path: str | Path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def read_pgm(path: str | Path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def mask_to_uint8(mask: np.ndarray) -> np.ndarray:
    return np.round(np.clip(mask, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# csv


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
