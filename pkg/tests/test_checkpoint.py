import numpy as np
import pytest

from qa2mn.autodiff import Tensor
from qa2mn.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)


def _sample_params(rng):
    return {
        "kge.E_ent": Tensor(rng.normal(size=(7, 4))),
        "kge.W_e2r": rng.normal(size=(4, 4)),
        "enc.b": Tensor(rng.normal(size=(12,))),
        "scalar": np.asarray(3.25),
    }


def test_round_trip_f8(tmp_path):
    rng = np.random.default_rng(0)
    params = _sample_params(rng)
    path = tmp_path / "model.qa2mn"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(params)
    for name, t in params.items():
        ref = t.data if isinstance(t, Tensor) else t
        assert loaded[name].dtype == np.float64
        assert np.array_equal(loaded[name], ref)


def test_round_trip_f4_is_float32_precision(tmp_path):
    rng = np.random.default_rng(1)
    params = _sample_params(rng)
    path = tmp_path / "model.qa2mn"
    save_checkpoint(path, params, dtype="f4")
    loaded = load_checkpoint(path)
    for name, t in params.items():
        ref = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float32)
        assert np.array_equal(loaded[name], ref.astype(np.float64))


def test_header_layout(tmp_path):
    path = tmp_path / "m.qa2mn"
    save_checkpoint(path, {"x": np.zeros(2)})
    raw = path.read_bytes()
    assert raw.startswith(MAGIC)
    assert raw[len(MAGIC)] == FORMAT_VERSION


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.qa2mn"
    path.write_bytes(b"NOPE!" + bytes(16))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "m.qa2mn"
    save_checkpoint(path, {"x": np.zeros(2)})
    raw = bytearray(path.read_bytes())
    raw[len(MAGIC)] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_truncated_blob_rejected(tmp_path):
    path = tmp_path / "m.qa2mn"
    save_checkpoint(path, {"x": np.arange(10.0)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_unknown_dtype_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "m.qa2mn", {"x": np.zeros(2)}, dtype="f2")


def test_deterministic_bytes(tmp_path):
    rng = np.random.default_rng(2)
    params = _sample_params(rng)
    p1, p2 = tmp_path / "a.qa2mn", tmp_path / "b.qa2mn"
    save_checkpoint(p1, params)
    save_checkpoint(p2, params)
    assert p1.read_bytes() == p2.read_bytes()
