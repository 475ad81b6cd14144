import struct

import numpy as np
import pytest

from dlanac import checkpoint as ckpt


def _sample(rng):
    return ckpt.Checkpoint(
        meta={"stage": "train", "epoch": 3, "nested": {"b": [1, 2], "a": 0.5}},
        tensors={"w": rng.standard_normal((3, 4)).astype(np.float32),
                 "b": np.arange(5, dtype=np.float32),
                 "scalar": np.array(2.5, dtype=np.float32)},
    )


def test_roundtrip_is_bit_exact(tmp_path, rng):
    ck = _sample(rng)
    ckpt.save(ck, tmp_path / "a.ck")
    back = ckpt.load(tmp_path / "a.ck")
    assert back.meta == ck.meta
    assert set(back.tensors) == set(ck.tensors)
    for k, v in ck.tensors.items():
        assert back.tensors[k].dtype == np.float32 and back.tensors[k].shape == v.shape
        assert back.tensors[k].tobytes() == v.tobytes()


def test_save_load_save_identical_bytes(tmp_path, rng):
    ckpt.save(_sample(rng), tmp_path / "a.ck")
    ckpt.save(ckpt.load(tmp_path / "a.ck"), tmp_path / "b.ck")
    assert (tmp_path / "a.ck").read_bytes() == (tmp_path / "b.ck").read_bytes()


def test_no_temp_file_left(tmp_path, rng):
    ckpt.save(_sample(rng), tmp_path / "a.ck")
    assert [p.name for p in tmp_path.iterdir()] == ["a.ck"]


def test_version_bump_rejected(rng):
    buf = bytearray(ckpt.dumps(_sample(rng)))
    struct.pack_into("<I", buf, len(ckpt.MAGIC), ckpt.FORMAT_VERSION + 1)
    with pytest.raises(ckpt.CheckpointError, match="version 2 is not supported"):
        ckpt.loads(bytes(buf))


@pytest.mark.parametrize("mangle", [
    lambda b: b[:-40],
    lambda b: b[:60] + bytes([b[60] ^ 1]) + b[61:],
    lambda b: b"NOTACKPT" + b[8:],
    lambda b: b[:10],
])
def test_corruption_detected(mangle, rng):
    with pytest.raises(ckpt.IntegrityError):
        ckpt.loads(mangle(ckpt.dumps(_sample(rng))))


def test_prefix_selection(rng):
    ck = ckpt.Checkpoint(tensors={"opt.m.a": np.zeros(1), "opt.v.a": np.ones(1), "w": np.zeros(2)})
    assert set(ck.with_prefix("opt.m.")) == {"a"}
