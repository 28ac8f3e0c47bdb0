import numpy as np
import pytest

from ecg.checkpoint import CheckpointError, load_params, save_params
from ecg.tensor import Tensor


def random_params(rng):
    return {
        "lm.embed": Tensor(rng.normal(size=(7, 4))),
        "ret.layer0.w_gate": Tensor(rng.normal(size=(1, 4))),
        "ret.layer0.b_gate": Tensor(rng.normal(size=(1,))),
        "scale.alpha": Tensor(np.array(1.0)),
    }


def test_round_trip_values_match_float32(tmp_path):
    rng = np.random.default_rng(0)
    params = random_params(rng)
    path = tmp_path / "model.ckpt"
    save_params(params, path)
    loaded = load_params(path)
    assert set(loaded) == set(params)
    for name, tensor in params.items():
        np.testing.assert_array_equal(loaded[name].data, tensor.data.astype(np.float32).astype(np.float64))
        assert loaded[name].shape == tensor.shape


def test_file_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    params = random_params(rng)
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_params(params, first)
    save_params(load_params(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_header_and_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_params({}, path)
    blob = path.read_bytes()
    assert blob[:4] == b"ECGP"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert len(blob) == 8


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOPE" + b"\x01\x00\x00\x00")
    with pytest.raises(CheckpointError, match="magic"):
        load_params(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_params({"w": Tensor(np.ones((3, 3)))}, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_params(path)


def test_load_as_float32(tmp_path):
    path = tmp_path / "m.ckpt"
    save_params({"w": Tensor(np.ones((2, 2)))}, path)
    loaded = load_params(path, dtype=np.float32)
    assert loaded["w"].dtype == np.float32
