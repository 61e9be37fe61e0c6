"""
Checkpoint Format - CTCK binary container for named float tensors

Layout (little-endian):
    b"CTCK" | u32 version
    repeated: u32 name_len | utf-8 name | u32 rank | u64 extents[rank] | f32 payload
"""
import logging
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from app.core.exceptions import FormatError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CTCK"
CHECKPOINT_VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def encode_checkpoint(tensors: Dict[str, np.ndarray]) -> bytes:
    """Serialise tensors in insertion order."""
    chunks = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION)]
    for name, array in tensors.items():
        raw_name = name.encode("utf-8")
        array = np.asarray(array)
        chunks.append(_U32.pack(len(raw_name)))
        chunks.append(raw_name)
        chunks.append(_U32.pack(array.ndim))
        chunks.extend(_U64.pack(extent) for extent in array.shape)
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> Dict[str, np.ndarray]:
    """Parse a CTCK blob; raises FormatError on any inconsistency."""
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a CTCK checkpoint (bad magic)")
    if len(blob) < 8:
        raise FormatError("truncated checkpoint header")
    (version,) = _U32.unpack_from(blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")

    tensors: Dict[str, np.ndarray] = {}
    offset = 8
    try:
        while offset < len(blob):
            (name_len,) = _U32.unpack_from(blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise FormatError("truncated tensor name")
            offset += name_len
            (rank,) = _U32.unpack_from(blob, offset)
            offset += 4
            shape = tuple(_U64.unpack_from(blob, offset + 8 * i)[0] for i in range(rank))
            offset += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            end = offset + 4 * count
            if end > len(blob):
                raise FormatError(f"truncated payload for {name!r}")
            tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
            offset = end
    except struct.error as e:
        raise FormatError(f"truncated checkpoint: {e}") from e
    except UnicodeDecodeError as e:
        raise FormatError(f"invalid tensor name: {e}") from e
    return tensors


def save_checkpoint(tensors: Dict[str, np.ndarray], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(tensors))
    logger.info(f"Checkpoint written: {path} ({len(tensors)} tensors)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
