import numpy as np
import pytest
import torch

from vitdfq.toy_data import ShapesDataset, toy_splits, render, shape_mask, CLASSES, PIXEL_MEAN, PIXEL_STD
from vitdfq.exceptions import ConfigurationError


def test_dataset_is_deterministic():
    a = ShapesDataset(50, seed=7)
    b = ShapesDataset(50, seed=7)
    assert torch.equal(a.images, b.images)
    assert torch.equal(a.labels, b.labels)
    assert not torch.equal(a.images, ShapesDataset(50, seed=8).images)


def test_shapes_and_range():
    ds = ShapesDataset(200, image_side=32, seed=0)
    assert ds.images.shape == (200, 3, 32, 32)
    assert ds.images.dtype == torch.float32
    assert ds.labels.dtype == torch.int64
    assert set(ds.labels.tolist()) == set(range(len(CLASSES)))
    lo, hi = (0 - PIXEL_MEAN) / PIXEL_STD, (1 - PIXEL_MEAN) / PIXEL_STD
    assert ds.images.min() >= lo and ds.images.max() <= hi


def test_every_class_draws_something():
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    for label in range(len(CLASSES)):
        assert shape_mask(label, xx - 16, yy - 16, 10).sum() > 10
        img = render(label, 32, rng)
        assert img.shape == (3, 32, 32)
    with pytest.raises(ConfigurationError):
        shape_mask(len(CLASSES), xx, yy, 10)


def test_splits_differ():
    train, test = toy_splits(num_train=20, num_test=10, seed=0)
    assert len(train) == 20 and len(test) == 10
    assert train.name == 'shapes-train' and test.name == 'shapes-test'
    assert not torch.equal(train.images[:10], test.images)


def test_subset():
    ds = ShapesDataset(30, seed=0)
    images, labels = ds.subset(5, seed=1)
    assert images.shape[0] == 5
    again, _ = ds.subset(5, seed=1)
    assert torch.equal(images, again)


def test_empty_dataset():
    ds = ShapesDataset(0, seed=0)
    assert ds.images.shape == (0, 3, 32, 32)


def test_image_folder(tmp_path):
    from PIL import Image
    from vitdfq.toy_data import load_image_folder

    rng = np.random.default_rng(0)
    for cls in ['a_cls', 'b_cls']:
        (tmp_path / cls).mkdir()
        for i in range(3):
            pixels = rng.integers(0, 256, size=(40, 60, 3), dtype=np.uint8)
            Image.fromarray(pixels).save(tmp_path / cls / f'{i}.png')

    images, labels = load_image_folder(str(tmp_path), image_side=16, per_class=2, seed=0)
    assert images.shape == (4, 3, 16, 16)
    assert labels.tolist() == [0, 0, 1, 1]
    again, _ = load_image_folder(str(tmp_path), image_side=16, per_class=2, seed=0)
    assert torch.equal(images, again)
    with pytest.raises(ConfigurationError):
        load_image_folder(str(tmp_path / 'missing'))
