import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffpali import checkpoint
from diffpali.checkpoint import CorruptCheckpointError, decode, encode
from diffpali.lora import attach_policy
from diffpali.tensor import make_rng

shapes = st.lists(st.integers(1, 4), min_size=0, max_size=3).map(tuple)


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text("abcdefgh._", min_size=1, max_size=8), shapes, max_size=5), st.integers(0, 999))
def test_round_trip_bit_exact(spec, seed):
    rng = make_rng(seed)
    tensors = {k: rng.standard_normal(s).astype(np.float32) for k, s in spec.items()}
    raw = encode(tensors, {"seed": seed})
    back, meta = decode(raw)
    assert meta == {"seed": seed} and list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape and back[k].tobytes() == tensors[k].tobytes()
    assert encode(back, meta) == raw


def test_layout_parses_independently():
    tensors = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "v": np.array([-1.5], np.float32)}
    raw = encode(tensors, {"k": 1})
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + hlen])
    assert header["metadata"] == {"k": 1}
    entries = {e["name"]: e for e in header["tensors"]}
    assert entries["w"] == {"name": "w", "shape": [2, 3], "dtype": "f32", "offset": 0, "length": 24}
    body = raw[8 + hlen:]
    assert struct.unpack("<6f", body[0:24]) == tuple(range(6))
    assert struct.unpack("<f", body[24:28]) == (-1.5,)


@pytest.mark.parametrize("cut", [0, 4, 12, -3])
def test_truncated(cut):
    raw = encode({"w": np.ones((4, 4), np.float32)}, {})
    with pytest.raises(CorruptCheckpointError):
        decode(raw[:cut])


def test_bad_dtype_and_garbage_header():
    raw = encode({"w": np.ones(2, np.float32)}, {})
    with pytest.raises(CorruptCheckpointError):
        decode(raw.replace(b'"f32"', b'"f64"'))
    junk = struct.pack("<Q", 5) + b"{oops"
    with pytest.raises(CorruptCheckpointError):
        decode(junk)


def test_save_is_atomic_and_clean(tmp_path):
    path = tmp_path / "sub" / "x.ckpt"
    checkpoint.save(path, {"w": np.zeros(3, np.float32)}, {})
    checkpoint.save(path, {"w": np.ones(3, np.float32)}, {})
    assert [p.name for p in path.parent.iterdir()] == ["x.ckpt"]
    np.testing.assert_array_equal(checkpoint.load(path)[0]["w"], np.ones(3))


def test_model_round_trip(tmp_path, tiny_model):
    attach_policy(tiny_model, ("w_q", "w_v"), rank=4, rng=make_rng(1))
    for ad in tiny_model.adapters().values():
        ad.b.data = make_rng(2).standard_normal(ad.b.shape).astype(np.float32)
    path = tmp_path / "m.ckpt"
    checkpoint.save_model(path, tiny_model, {"step": 7})
    loaded, meta = checkpoint.load_model(path)
    assert meta["step"] == 7 and meta["lora"]["dec.0.w_q"] == {"rank": 4, "alpha": 8.0}
    px = make_rng(3).random((8, 8, 3)).astype(np.float32)
    np.testing.assert_array_equal(tiny_model.forward(px, [1, 5]).data, loaded.forward(px, [1, 5]).data)
    assert loaded.lambdas() == tiny_model.lambdas()
    checkpoint.save_model(tmp_path / "again.ckpt", loaded, {"step": 7})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_model_tensor_set_mismatch(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    checkpoint.save_model(path, tiny_model)
    tensors, meta = checkpoint.load(path)
    del tensors["unembed"]
    checkpoint.save(path, tensors, meta)
    with pytest.raises(CorruptCheckpointError):
        checkpoint.load_model(path)
