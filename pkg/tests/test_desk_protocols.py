"""Code-path check of the CIFAR-10 protocols on fabricated CIFAR-format batches.

The pixels come from synthetic blobs, so the numbers say nothing about the
real criteria; this only proves the protocols run end to end.
"""
import pickle

import numpy as np
import pytest

from maplab import experiments as ex
from maplab.augment import AugPolicy
from maplab.datasets import DatasetSpec, load_dataset
from maplab.nets import BackboneSpec, build_model
from maplab.teacherbank import TeacherCheckpoint


def _write_fake_cifar(root, per_class_train, per_class_test):
    base = root / "cifar-10-batches-py"
    base.mkdir(parents=True)

    def encode(n, split):
        ds = load_dataset(DatasetSpec("synthetic-blobs", num_classes=10, image_shape=(32, 32, 3), n=n, seed=1,
                                      spread=0.1, split=split))
        perm = np.random.default_rng(0).permutation(n)
        raw = (ds.images[perm] * 255).round().astype(np.uint8).transpose(0, 3, 1, 2).reshape(n, -1)
        return raw, ds.labels[perm].tolist()

    raw, labels = encode(per_class_train * 10, "train")
    for i, chunk in enumerate(np.array_split(np.arange(len(labels)), 5)):
        with open(base / f"data_batch_{i + 1}", "wb") as fh:
            pickle.dump({b"data": raw[chunk], b"labels": [labels[j] for j in chunk]}, fh)
    raw, labels = encode(per_class_test * 10, "test")
    with open(base / "test_batch", "wb") as fh:
        pickle.dump({b"data": raw, b"labels": labels}, fh)


@pytest.fixture(scope="module")
def fake_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cifar")
    _write_fake_cifar(root, per_class_train=110, per_class_test=20)
    cache = tmp_path_factory.mktemp("cache")
    mp = pytest.MonkeyPatch()
    mp.setenv("MAPLAB_DATA_ROOT", str(root))
    mp.setenv("MAPLAB_CACHE_DIR", str(cache))
    # pre-seed the teacher cache with untrained teachers so no teacher training runs here
    cfg = ex.desk_config(root)
    for i, level in enumerate((0.2, 0.4, 0.6, 0.8)):
        model = build_model(BackboneSpec("convnet-tiny", (32, 32, 3)), 10, seed=i).eval()
        TeacherCheckpoint(model, level, level, AugPolicy(cfg.aug_kind), 0, 0).save(ex.desk_teacher_path(level, cfg))
    yield root
    mp.undo()


def test_cifar_root_found(fake_root):
    assert ex.cifar_root() == fake_root


def test_decoupled_and_early_protocols_run(fake_root):
    res = ex.decoupled_vs_standard(seeds=(0,), steps=60, ipc=100)
    assert res["teacher"].achieved_acc == 0.4
    assert 0 <= res["acc_decoupled"] <= 1 and 0 <= res["acc_standard"] <= 1
    assert res["decoupled"][0].train_size == 1000
    curves = ex.early_acceleration(res["decoupled"], seeds=(0,), before=500)
    # eval points before 500 within a 60-step budget: the grid point 50 and the final step
    assert curves["points"] == [50, 60]
    assert len(curves["A"]) == len(curves["B"]) == 2


def test_extreme_ipc_and_level_sweep_run(fake_root):
    res = ex.extreme_ipc_check(seeds=(0,), steps=4)
    assert len(res["A"]) == len(res["B"]) == 1
    sweep = ex.teacher_level_sweep(seeds=(0, 1), steps=3)
    assert sweep["top1"].shape == (2, 4)
