"""Distillation pipeline and model zoo lifecycle."""

import json
import os

import numpy as np
import pytest

from gradmask import data, defenses, nn
from gradmask.defenses import DESK_PROTOCOL, ZooProtocol, build_zoo, distill, load_zoo
from gradmask.errors import ConfigError

TINY = ZooProtocol(temperature=5.0, widths=(2, 2, 4, 4), dense=(12, 12),
                   dropout_p=0.0, epochs=2, squeezed_epochs=2, batch_size=40)


@pytest.fixture(scope="module")
def corpus():
    return data.synthetic_blobs(80, 10, seed=1), data.synthetic_blobs(30, 10, seed=2)


@pytest.fixture(scope="module")
def zoo(tmp_path_factory, corpus):
    train, test = corpus
    out = tmp_path_factory.mktemp("zoo")
    manifest, models = build_zoo(out, train, test, TINY)
    return out, manifest, models


def test_zoo_writes_all_files(zoo):
    out, manifest, models = zoo
    expected = {"normal.ckpt", "distilled.ckpt", "distilled-teacher.ckpt",
                "squeezed-sigmoid.ckpt", "squeezed-tanh.ckpt", "manifest.json"}
    assert expected <= set(os.listdir(out))
    assert set(manifest["variants"]) == set(defenses.VARIANTS)
    assert set(models) == set(defenses.VARIANTS) | {defenses.TEACHER_NAME}


def test_manifest_records_dataset_identity(zoo, corpus):
    _, manifest, _ = zoo
    train, test = corpus
    ds = manifest["dataset"]
    assert ds["train_hash"] == train.content_hash()
    assert ds["test_hash"] == test.content_hash()
    assert ds["train_count"] == 80 and ds["test_count"] == 30
    for info in manifest["variants"].values():
        assert 0.0 <= info["test_accuracy"] <= 1.0
        assert np.isfinite(info["epoch_losses"]).all()


def test_zoo_refuses_overwrite_without_force(zoo, corpus):
    out, _, _ = zoo
    train, test = corpus
    with pytest.raises(ConfigError, match="force"):
        build_zoo(out, train, test, TINY)


def test_zoo_load_round_trip(zoo):
    out, manifest, models = zoo
    manifest2, models2 = load_zoo(out)
    assert manifest2 == manifest
    for name, model in models.items():
        for k, t in model.params.items():
            assert np.array_equal(t.data, models2[name].params[k].data)


def test_zoo_rebuild_is_deterministic(tmp_path, corpus, zoo):
    train, test = corpus
    out_prev, _, _ = zoo
    out = tmp_path / "again"
    build_zoo(out, train, test, TINY)
    a = (out / "manifest.json").read_bytes()
    b = (out_prev / "manifest.json").read_bytes()
    assert a == b
    for name in ("normal.ckpt", "squeezed-tanh.ckpt"):
        assert (out / name).read_bytes() == (out_prev / name).read_bytes()


def test_zoo_force_rebuilds(zoo, corpus):
    out, _, _ = zoo
    train, test = corpus
    manifest, _ = build_zoo(out, train, test, TINY, force=True)
    assert set(manifest["variants"]) == set(defenses.VARIANTS)


def test_load_zoo_requires_manifest(tmp_path):
    with pytest.raises(ConfigError, match="manifest"):
        load_zoo(tmp_path)


def test_variant_temperatures():
    shape, k = (1, 8, 8), 10
    assert TINY.spec_for("normal", shape, k).train_temperature == 1.0
    assert TINY.spec_for("distilled", shape, k).train_temperature == 5.0
    assert TINY.spec_for("squeezed-sigmoid", shape, k).head == "squeezed-sigmoid"
    assert TINY.spec_for("squeezed-tanh", shape, k).train_temperature == 5.0


def test_squeezed_training_overrides():
    cfg = DESK_PROTOCOL.train_config_for("squeezed-sigmoid")
    base = DESK_PROTOCOL.train_config_for("normal")
    assert cfg.learning_rate > base.learning_rate
    assert cfg.epochs > base.epochs
    assert cfg.seed == base.seed


def test_distill_requires_high_temperature(corpus):
    train, _ = corpus
    spec = TINY.spec_for("normal", (1, 8, 8), 10)  # T = 1
    with pytest.raises(ConfigError, match="temperature"):
        distill(spec, train.images, train.labels,
                TINY.train_config_for("distilled"))


def test_distill_student_differs_from_teacher(corpus):
    train, _ = corpus
    spec = TINY.spec_for("distilled", (1, 8, 8), 10)
    result = distill(spec, train.images, train.labels,
                     TINY.train_config_for("distilled"))
    assert result.teacher.spec == result.student.spec
    assert result.teacher.inference_temperature == 1.0
    assert result.student.inference_temperature == 1.0
    assert any(not np.array_equal(result.teacher.params[k].data,
                                  result.student.params[k].data)
               for k in result.teacher.params)


def test_soft_labels_flatten_with_temperature(corpus, zoo):
    train, _ = corpus
    _, _, models = zoo
    teacher = models[defenses.TEACHER_NAME]
    hot = defenses.soft_labels(teacher, train.images[:16], temperature=1.0)
    soft = defenses.soft_labels(teacher, train.images[:16], temperature=20.0)
    assert np.allclose(hot.sum(1), 1.0) and np.allclose(soft.sum(1), 1.0)
    ent_hot = -(hot * np.log(np.maximum(hot, 1e-300))).sum(1).mean()
    ent_soft = -(soft * np.log(np.maximum(soft, 1e-300))).sum(1).mean()
    assert ent_soft > ent_hot
