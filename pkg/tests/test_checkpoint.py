"""Checkpoint binary format: exact round trips and corruption handling."""

import json
import struct

import numpy as np
import pytest

from gradmask import checkpoint, data, nn
from gradmask.checkpoint import (
    FORMAT_VERSION, MAGIC, load_checkpoint, save_checkpoint, spec_from_dict,
    spec_to_dict,
)
from gradmask.errors import CheckpointError
from gradmask.nn import Conv, Dense, Flatten, MaxPool, ModelSpec, ReLU, TrainedModel


@pytest.fixture(scope="module")
def trained():
    ds = data.synthetic_blobs(32, 10, seed=4)
    spec = ModelSpec((1, 8, 8), (Conv(1, 4), ReLU(), MaxPool(), Flatten(),
                                 Dense(64, 10)), "squeezed-sigmoid", 10,
                     train_temperature=20.0)
    model, _ = nn.train(spec, ds.images, ds.labels,
                        nn.TrainConfig(epochs=2, batch_size=32))
    return model, ds


def test_round_trip_bit_identical(tmp_path, trained):
    model, ds = trained
    path = tmp_path / "m.ckpt"
    written = save_checkpoint(model, path)
    assert written == path.stat().st_size
    loaded = load_checkpoint(path)
    assert loaded.spec == model.spec
    assert loaded.inference_temperature == model.inference_temperature
    assert set(loaded.params) == set(model.params)
    for k in model.params:
        assert np.array_equal(loaded.params[k].data, model.params[k].data)
    a = nn.predict_probs(model, ds.images[:8])
    b = nn.predict_probs(loaded, ds.images[:8])
    assert np.array_equal(a, b)


def test_save_is_byte_deterministic(tmp_path, trained):
    model, _ = trained
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, p1)
    save_checkpoint(model, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_spec_dict_round_trip(trained):
    model, _ = trained
    d = spec_to_dict(model.spec)
    json.dumps(d)  # must be plain JSON data
    assert spec_from_dict(d) == model.spec


def test_rejects_bad_magic(tmp_path, trained):
    model, _ = trained
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    blob = bytearray(path.read_bytes())
    blob[:2] = b"XX"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_rejects_unknown_version(tmp_path, trained):
    model, _ = trained
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    blob = bytearray(path.read_bytes())
    blob[len(MAGIC):len(MAGIC) + 4] = struct.pack("<I", FORMAT_VERSION + 9)
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_rejects_truncation(tmp_path, trained):
    model, _ = trained
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-9])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_rejects_trailing_garbage(tmp_path, trained):
    model, _ = trained
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_rejects_corrupt_description(tmp_path, trained):
    model, _ = trained
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    blob = bytearray(path.read_bytes())
    desc_start = len(MAGIC) + 4 + 8
    blob[desc_start] = ord("#")  # breaks the leading '{'
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="description"):
        load_checkpoint(path)


def test_rejects_param_shape_mismatch(tmp_path, trained):
    """A well-formed file whose tensors do not fit the declared spec."""
    model, _ = trained
    path = tmp_path / "m.ckpt"
    wrong = {k: nn.Tensor(np.zeros(np.asarray(t.data.shape) + (1 if k.endswith("weight") else 0)))
             for k, t in model.params.items()}
    forged = TrainedModel(model.spec, wrong, model.inference_temperature)
    save_checkpoint(forged, path)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)


def test_rejects_param_name_mismatch(tmp_path, trained):
    model, _ = trained
    path = tmp_path / "m.ckpt"
    renamed = {("bogus" if k == "layer0.weight" else k): t
               for k, t in model.params.items()}
    forged = TrainedModel(model.spec, renamed, model.inference_temperature)
    save_checkpoint(forged, path)
    with pytest.raises(CheckpointError, match="names"):
        load_checkpoint(path)


def test_preserves_all_head_kinds(tmp_path):
    for head in ("linear", "squeezed-sigmoid", "squeezed-tanh"):
        spec = ModelSpec((1, 8, 8), (Flatten(), Dense(64, 10)), head, 10,
                         train_temperature=5.0)
        params = nn.init_params(spec, np.random.default_rng(2))
        model = TrainedModel(spec, params, inference_temperature=1.0)
        path = tmp_path / f"{head}.ckpt"
        save_checkpoint(model, path)
        assert load_checkpoint(path).spec.head == head
