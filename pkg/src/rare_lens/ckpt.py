"""Binary checkpoint formats: named f32 blobs, fixed headers, CRC32 footers.

Three artifact files share one blob codec:

  vlm.ckpt      "RLVM" | u16 version | u32 L, heads, D, vocab | blobs | crc32
  classes.ckpt  "RLCE" | u16 version | u32 C, D, d_v, d_t | f64 kappa
                | blobs | class-name JSON block | crc32
  adapter.ckpt  "RLAD" | u16 version | u32 D, heads | blobs
                | u32 paired class-table crc | crc32

All integers little-endian. The crc32 covers every byte before it; loaders
reject mismatches. Weights are stored f32, so training stages round their
results through f32 before downstream use — that makes resumed runs
bit-identical to uninterrupted ones.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ChecksumError, PairingError

VERSION = 1


def _blob_bytes(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    head = struct.pack("<I", len(raw)) + raw
    head += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f4").tobytes()


def _encode_blobs(weights: dict[str, Tensor]) -> bytes:
    out = struct.pack("<I", len(weights))
    for name in sorted(weights):
        out += _blob_bytes(name, weights[name].array)
    return out


def _decode_blobs(buf: bytes, offset: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    blobs: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset : offset + name_len].decode()
        offset += name_len
        (ndim,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=offset)
        offset += 4 * size
        blobs[name] = arr.astype(np.float64).reshape(shape)
    return blobs, offset


def weights_crc(weights: dict[str, Tensor]) -> int:
    """Canonical checksum of a weight set (name-sorted f32 blob bytes)."""
    return zlib.crc32(_encode_blobs(weights))


def round_f32(weights: dict[str, Tensor]) -> dict[str, Tensor]:
    """Round every tensor through storage precision (f32) in f64 carriers."""
    return {
        name: Tensor(t.array.astype(np.float32).astype(np.float64),
                     requires_grad=t.requires_grad)
        for name, t in weights.items()
    }


def file_crc(path) -> int:
    return zlib.crc32(Path(path).read_bytes())


def _finish(path, body: bytes) -> None:
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def _checked_body(path, magic: bytes) -> bytes:
    buf = Path(path).read_bytes()
    if len(buf) < 10 or buf[:4] != magic:
        raise ChecksumError(f"{path}: bad magic (expected {magic!r})")
    body, (stored,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != stored:
        raise ChecksumError(f"{path}: CRC mismatch, file is corrupt")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != VERSION:
        raise ChecksumError(f"{path}: unsupported version {version}")
    return body


# -- vlm.ckpt ---------------------------------------------------------------


def save_vlm(path, layers: int, heads: int, dim: int, vocab: int,
             weights: dict[str, Tensor]) -> None:
    body = b"RLVM" + struct.pack("<HIIII", VERSION, layers, heads, dim, vocab)
    body += _encode_blobs(weights)
    _finish(path, body)


def load_vlm(path) -> tuple[tuple[int, int, int, int], dict[str, np.ndarray]]:
    body = _checked_body(path, b"RLVM")
    layers, heads, dim, vocab = struct.unpack_from("<IIII", body, 6)
    blobs, _ = _decode_blobs(body, 22)
    return (layers, heads, dim, vocab), blobs


# -- classes.ckpt -----------------------------------------------------------


def save_classes(path, n_classes: int, dim: int, d_v: int, d_t: int,
                 kappa: float, weights: dict[str, Tensor],
                 class_names: list[str]) -> None:
    body = b"RLCE" + struct.pack("<HIIIId", VERSION, n_classes, dim, d_v, d_t, kappa)
    body += _encode_blobs(weights)
    names_json = json.dumps(class_names).encode()
    body += struct.pack("<I", len(names_json)) + names_json
    _finish(path, body)


def load_classes(path):
    body = _checked_body(path, b"RLCE")
    n_classes, dim, d_v, d_t, kappa = struct.unpack_from("<IIIId", body, 6)
    blobs, offset = _decode_blobs(body, 30)
    (names_len,) = struct.unpack_from("<I", body, offset)
    names = json.loads(body[offset + 4 : offset + 4 + names_len].decode())
    return (n_classes, dim, d_v, d_t, kappa), blobs, names


# -- adapter.ckpt -----------------------------------------------------------


def save_adapter(path, dim: int, heads: int, weights: dict[str, Tensor],
                 table_crc: int) -> None:
    body = b"RLAD" + struct.pack("<HII", VERSION, dim, heads)
    body += _encode_blobs(weights)
    body += struct.pack("<I", table_crc)
    _finish(path, body)


def load_adapter(path, expect_table_crc: int | None = None):
    body = _checked_body(path, b"RLAD")
    dim, heads = struct.unpack_from("<II", body, 6)
    blobs, offset = _decode_blobs(body, 14)
    (table_crc,) = struct.unpack_from("<I", body, offset)
    if expect_table_crc is not None and table_crc != expect_table_crc:
        raise PairingError(
            f"{path}: adapter was trained against class table crc {table_crc}, "
            f"but {expect_table_crc} was supplied"
        )
    return (dim, heads), blobs, table_crc
