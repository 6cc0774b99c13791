"""Binary container shared by checkpoints, inferred latent states and dataset caches.

Layout (all integers little-endian)::

    b"LTMC"  u32 version
    u32 header_len   header bytes (UTF-8, one ``key=value`` per line)
    u32 n_tensors
    repeat n_tensors:
        u32 name_len  name bytes (UTF-8)
        u32 rank      rank x u64 dims
        float32 data, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LTMC"
VERSION = 1


class ContainerError(ValueError):
    pass


def format_header(header: dict) -> str:
    lines = []
    for key, value in header.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise ContainerError(f"header entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}")
    return "\n".join(lines)


def parse_header(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ContainerError(f"malformed header line {line!r}")
        out[key] = value
    return out


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    hbytes = format_header(header).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())
    tmp.replace(path)


def read_container(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    try:
        return _decode(data, path)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        if isinstance(e, ContainerError):
            raise
        raise ContainerError(f"{path}: truncated or corrupt container ({e})") from None


def _decode(data: bytes, path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise ContainerError(f"{path}: not an LTMC container")
    off = 4
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = parse_header(data[off:off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        tensors[name] = arr.astype(np.float32)
    if off != len(data):
        raise ContainerError(f"{path}: {len(data) - off} trailing bytes")
    return header, tensors
