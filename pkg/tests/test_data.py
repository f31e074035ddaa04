import numpy as np
import pytest
import torch
from PIL import Image

from pmg.data import (
    SyntheticSpec,
    TransformConfig,
    batch_iterator,
    eval_transform,
    export_image_folder,
    load_batch,
    load_image_folder,
    make_synthetic,
    make_synthetic_splits,
    train_transform,
)
from pmg.errors import ConfigError, DatasetItemError, DivisibilityError


def _folder(root, classes=("b", "a", "c"), per=2):
    for c in classes:
        (root / c).mkdir(parents=True)
        for i in range(per):
            Image.fromarray(np.full((10, 10, 3), 40 * i, dtype=np.uint8)).save(root / c / f"{i}.png")
    return root


def test_folder_counts_and_mapping(tmp_path):
    root = _folder(tmp_path / "d")
    a, b = load_image_folder(root), load_image_folder(root)
    assert a.num_classes == 3 and len(a) == 6
    assert a.class_names == ["a", "b", "c"] == b.class_names
    assert a.items == b.items


def test_folder_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image_folder(tmp_path / "missing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetItemError):
        load_image_folder(tmp_path / "empty")
    root = _folder(tmp_path / "bad", classes=("x",))
    (root / "x" / "broken.png").write_bytes(b"not an image")
    with pytest.raises(DatasetItemError, match="broken.png"):
        load_image_folder(root)


def test_eval_transform_deterministic():
    img = np.random.default_rng(0).integers(0, 256, (90, 90, 3), dtype=np.uint8)
    assert torch.equal(eval_transform(img), eval_transform(img))
    assert eval_transform(img).shape == (3, 64, 64)


def test_forced_flip_twice_restores():
    img = np.random.default_rng(1).integers(0, 256, (80, 80, 3), dtype=np.uint8)
    plain = train_transform(img, np.random.default_rng(5), force_flip=False)
    flipped = train_transform(img, np.random.default_rng(5), force_flip=True)
    assert torch.equal(flipped.flip(-1), plain)


def test_crop_larger_than_resize():
    img = np.zeros((8, 8, 3), dtype=np.uint8)
    with pytest.raises(ConfigError):
        eval_transform(img, TransformConfig(64, 80))
    with pytest.raises(ConfigError):
        train_transform(img, np.random.default_rng(0), TransformConfig(64, 80))


def test_synthetic_counts_and_determinism():
    spec = SyntheticSpec(num_classes=8, image_size=64, samples_per_class=16, seed=7)
    a, b = make_synthetic(spec), make_synthetic(spec)
    assert len(a) == 128 and a.num_classes == 8
    assert all(np.array_equal(x[0], y[0]) and x[1] == y[1] for x, y in zip(a.items, b.items))
    assert np.bincount(a.labels).tolist() == [16] * 8


def test_synthetic_divisibility():
    with pytest.raises(DivisibilityError):
        make_synthetic(SyntheticSpec(image_size=60))


def test_synthetic_classes_differ_only_in_texture():
    ds = make_synthetic(SyntheticSpec())
    assert ds.meta["texture_nn_acc"] == 1.0
    assert ds.meta["mean_color_acc"] <= 2 / ds.num_classes


def test_splits_share_textures_and_stats():
    train, test = make_synthetic_splits(SyntheticSpec(samples_per_class=4), 3)
    assert len(test) == 24 and test.mean == train.mean and test.std == train.std
    assert not np.array_equal(train.items[0][0], test.items[0][0])


def test_batch_sizes_and_order():
    sizes = [len(b) for b in batch_iterator(10, 4, 0, 0)]
    assert sizes == [4, 4, 2]
    a = [b.tolist() for b in batch_iterator(10, 4, 3, 1)]
    assert a == [b.tolist() for b in batch_iterator(10, 4, 3, 1)]
    assert a != [b.tolist() for b in batch_iterator(10, 4, 4, 1)]


def test_singleton_batch_dropped():
    assert [len(b) for b in batch_iterator(9, 4, 0, 0)] == [4, 4]


def test_train_batch_deterministic():
    ds = make_synthetic(SyntheticSpec(samples_per_class=1))
    a = load_batch(ds, [0, 1, 2], TransformConfig(), train=True, run_seed=3, epoch=1, batch=2)
    b = load_batch(ds, [0, 1, 2], TransformConfig(), train=True, run_seed=3, epoch=1, batch=2)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_export_roundtrip(tmp_path):
    ds = make_synthetic(SyntheticSpec(samples_per_class=1))
    back = load_image_folder(export_image_folder(ds, tmp_path / "out"))
    assert len(back) == len(ds)
    assert np.array_equal(back.image(0), ds.image(0))
