import numpy as np
import pytest

from hact.checkpoint import MAGIC, Checkpoint, CheckpointError


def _sample(rng):
    return Checkpoint(
        {"name": "x", "nested": {"b": [1, 2], "a": 0.1}},
        {"p/w": rng.normal(size=(3, 4)), "p/b": rng.normal(size=4), "s": np.array(2.5)},
    )


def test_byte_round_trip(rng):
    ck = _sample(rng)
    data = ck.to_bytes()
    assert data.startswith(MAGIC)
    back = Checkpoint.from_bytes(data)
    assert back.header == ck.header
    assert list(back.tensors) == list(ck.tensors)
    for k, v in ck.tensors.items():
        np.testing.assert_array_equal(back.tensors[k], v)
    assert back.to_bytes() == data


def test_equal_state_gives_equal_bytes():
    a = _sample(np.random.default_rng(1)).to_bytes()
    b = _sample(np.random.default_rng(1)).to_bytes()
    assert a == b


def test_group_strips_prefix(rng):
    assert set(_sample(rng).group("p")) == {"w", "b"}


def test_corruption_is_detected(rng):
    data = _sample(rng).to_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        Checkpoint.from_bytes(data[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        Checkpoint.from_bytes(data + b"\0")


def test_save_and_load(tmp_path, rng):
    ck = _sample(rng)
    ck.save(tmp_path / "a.ckpt")
    assert not (tmp_path / "a.ckpt.tmp").exists()
    assert Checkpoint.load(tmp_path / "a.ckpt").to_bytes() == ck.to_bytes()
