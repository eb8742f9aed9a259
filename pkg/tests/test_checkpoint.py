import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rmfsr import checkpoint as ck


def _ckpt(tensors=None):
    tensors = tensors if tensors is not None else {
        "b": np.arange(6, dtype=np.float64).reshape(2, 3),
        "a": np.ones(4, dtype=np.float32),
        "s": np.array(2.5),
    }
    return ck.Checkpoint(config={"model": {"channels": [8, 8]}}, tensors=tensors, step=12, seed=3,
                         extra={"adam_t": 12})


arrays = hnp.arrays(
    dtype=st.sampled_from([np.float32, np.float64]),
    shape=hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
    elements=st.floats(-1e6, 1e6, width=32),
)


@given(st.dictionaries(st.text("abcdefgh.", min_size=1, max_size=6), arrays, max_size=5))
def test_round_trip(tensors):
    out = ck.from_bytes(ck.to_bytes(_ckpt(tensors)))
    assert set(out.tensors) == set(tensors)
    for k, v in tensors.items():
        assert out.tensors[k].dtype == v.dtype and out.tensors[k].shape == v.shape
        np.testing.assert_array_equal(out.tensors[k], v)
    assert out.step == 12 and out.seed == 3 and out.extra == {"adam_t": 12}


def test_bytes_are_canonical():
    a = _ckpt()
    b = _ckpt(dict(reversed(list(a.tensors.items()))))
    assert ck.to_bytes(a) == ck.to_bytes(b)


def test_file_round_trip(tmp_path):
    ck.save(tmp_path / "x.ckpt", _ckpt())
    out = ck.load(tmp_path / "x.ckpt")
    assert out.config == {"model": {"channels": [8, 8]}}
    assert not (tmp_path / "x.ckpt.tmp").exists()


def test_bad_magic():
    data = bytearray(ck.to_bytes(_ckpt()))
    data[:4] = b"NOPE"
    with pytest.raises(ck.BadMagicError):
        ck.from_bytes(bytes(data))


def test_version_mismatch():
    data = bytearray(ck.to_bytes(_ckpt()))
    data[4:8] = struct.pack("<I", ck.VERSION + 1)
    with pytest.raises(ck.VersionMismatchError):
        ck.from_bytes(bytes(data))


@pytest.mark.parametrize("cut", [3, 20, -1, -40])
def test_truncation(cut):
    data = ck.to_bytes(_ckpt())
    with pytest.raises(ck.TruncatedCheckpointError):
        ck.from_bytes(data[:cut])


def test_errors_share_a_base():
    for e in (ck.BadMagicError, ck.VersionMismatchError, ck.TruncatedCheckpointError):
        assert issubclass(e, ck.CheckpointError)


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        ck.to_bytes(_ckpt({"i": np.arange(3)}))
