"""
CTCK checkpoint container
"""
import numpy as np
import pytest

from app.core.checkpoint import (
    CHECKPOINT_MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from app.core.exceptions import FormatError


def test_round_trip_keeps_names_order_and_values(tmp_path, rng):
    tensors = {
        "lfe.conv.k3.weight": rng.normal(size=(2, 1, 3, 3, 3)).astype(np.float32),
        "lfe.bn.running_var": np.ones(4, dtype=np.float32),
        "scalar": np.array(3.5, dtype=np.float32),
    }
    path = save_checkpoint(tensors, tmp_path / "ckpt" / "a.ctck")
    loaded = load_checkpoint(path)
    assert list(loaded) == list(tensors)
    for name, array in tensors.items():
        np.testing.assert_array_equal(loaded[name], array)
        assert loaded[name].shape == array.shape


def test_header_layout():
    blob = encode_checkpoint({"w": np.zeros((2, 3), dtype=np.float32)})
    assert blob[:4] == CHECKPOINT_MAGIC
    assert int.from_bytes(blob[4:8], "little") == 1
    # name_len + name + rank + 2 extents + 6 floats
    assert len(blob) == 8 + 4 + 1 + 4 + 16 + 24


def test_bad_magic_rejected():
    blob = encode_checkpoint({"w": np.zeros(2, dtype=np.float32)})
    with pytest.raises(FormatError):
        decode_checkpoint(b"XXXX" + blob[4:])


def test_bad_version_rejected():
    blob = bytearray(encode_checkpoint({"w": np.zeros(2, dtype=np.float32)}))
    blob[4] = 9
    with pytest.raises(FormatError):
        decode_checkpoint(bytes(blob))


def test_truncated_payload_rejected():
    blob = encode_checkpoint({"w": np.zeros((4, 4), dtype=np.float32)})
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:-3])
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:10])
