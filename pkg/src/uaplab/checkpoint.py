"""Binary checkpoint format.

Layout (little-endian)::

    b"UAPM" | u16 version | u16 len + utf-8 arch_id | u32 num_classes
    | 3 x u32 input dims | u64 parameter count | f32 x count | u32 crc32

The CRC covers every byte before it.  Parameters are stored as float32,
which is also the dtype registry models train in, so a round trip is exact.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError, CorruptCheckpoint, VersionMismatch
from .models import ClassifierModel, build_model
from .provenance import atomic_write_bytes

MAGIC = b"UAPM"
FORMAT_VERSION = 1


def checkpoint_bytes(model: ClassifierModel) -> bytes:
    arch = model.arch_id.encode("utf-8")
    params = model.flat_parameters().astype("<f4")
    parts = [
        MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<H", len(arch)), arch,
        struct.pack("<I", model.num_classes),
        struct.pack("<3I", *model.input_shape),
        struct.pack("<Q", params.size),
        params.tobytes(),
    ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: ClassifierModel, path) -> Path:
    path = Path(path)
    try:
        atomic_write_bytes(path, checkpoint_bytes(model))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def parse_checkpoint(blob: bytes) -> tuple[str, int, tuple, np.ndarray]:
    if len(blob) < 4 + 2 + 2 + 4 + 12 + 8 + 4:
        raise CorruptCheckpoint("checkpoint is truncated")
    if blob[:4] != MAGIC:
        raise CorruptCheckpoint("not a uaplab checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpoint("checksum mismatch")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    off = 6
    (n,) = struct.unpack_from("<H", body, off)
    off += 2
    arch_id = body[off:off + n].decode("utf-8")
    off += n
    (num_classes,) = struct.unpack_from("<I", body, off)
    off += 4
    dims = struct.unpack_from("<3I", body, off)
    off += 12
    (count,) = struct.unpack_from("<Q", body, off)
    off += 8
    if len(body) - off != 4 * count:
        raise CorruptCheckpoint("parameter payload length does not match header")
    params = np.frombuffer(body, dtype="<f4", count=count, offset=off)
    return arch_id, num_classes, dims, params


def load_checkpoint(path) -> ClassifierModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    arch_id, num_classes, dims, params = parse_checkpoint(blob)
    model = build_model(arch_id, num_classes, dims, seed=0)
    model.load_flat_parameters(params.astype(np.float32))
    return model
