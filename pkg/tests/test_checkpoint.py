"""Checkpoint container: bit-exact round trips, atomicity, corruption."""

import numpy as np
import pytest

from splatskin import checkpoint


def _payload(rng):
    return {
        "enc/w0": rng.standard_normal((17, 5)),
        "enc/b0": rng.standard_normal(5),
        "probe": rng.random((4, 8, 3)).astype(np.float32),
        "adam/m/enc/w0": rng.standard_normal((17, 5)),
        "iteration": np.asarray(1234, dtype=np.int64),
        "empty": np.zeros((0, 3)),
    }


def test_round_trip_is_bit_exact(tmp_path):
    data = _payload(np.random.default_rng(0))
    path = tmp_path / "model.ckpt"
    checkpoint.save(path, data)
    back = checkpoint.load(path)
    assert set(back) == set(data)
    for name, arr in data.items():
        assert back[name].dtype == np.asarray(arr).dtype
        assert back[name].shape == np.asarray(arr).shape
        np.testing.assert_array_equal(back[name], arr)


def test_scalars_and_plain_lists_are_coerced(tmp_path):
    path = tmp_path / "s.ckpt"
    checkpoint.save(path, {"lr": 1e-3, "dims": [3, 4, 5]})
    back = checkpoint.load(path)
    assert back["lr"].shape == ()
    assert back["lr"] == 1e-3
    np.testing.assert_array_equal(back["dims"], [3, 4, 5])


def test_no_temp_file_left_behind(tmp_path):
    path = tmp_path / "model.ckpt"
    checkpoint.save(path, _payload(np.random.default_rng(1)))
    assert [p.name for p in tmp_path.iterdir()] == ["model.ckpt"]


def test_overwrite_replaces_previous_contents(tmp_path):
    path = tmp_path / "model.ckpt"
    checkpoint.save(path, {"x": np.zeros(3)})
    checkpoint.save(path, {"y": np.ones(2)})
    back = checkpoint.load(path)
    assert set(back) == {"y"}


def test_rejects_non_checkpoint_and_truncated_files(tmp_path):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"PNG\x00not a checkpoint")
    with pytest.raises(ValueError, match="not a checkpoint"):
        checkpoint.load(junk)

    path = tmp_path / "model.ckpt"
    checkpoint.save(path, _payload(np.random.default_rng(2)))
    blob = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(blob[: len(blob) - 7])
    with pytest.raises(ValueError, match="truncated"):
        checkpoint.load(tmp_path / "cut.ckpt")


def test_rejects_future_version(tmp_path):
    path = tmp_path / "model.ckpt"
    checkpoint.save(path, {"x": np.zeros(1)})
    blob = bytearray(path.read_bytes())
    blob[len(checkpoint.MAGIC)] = 99
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="version"):
        checkpoint.load(path)
