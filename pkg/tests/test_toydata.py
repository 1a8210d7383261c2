import numpy as np
import pytest
import torch

from zsq_forge.toydata import (IMAGE_SHAPE, PATTERNS, dataset_manifest, generate_toy_dataset, random_crop,
                               random_flip)


@pytest.fixture(scope="module")
def toy():
    return generate_toy_dataset(3, classes=10, per_class_train=10, per_class_test=4)


def test_shapes_and_balance(toy):
    train, test = toy
    assert train.images.shape == (100,) + IMAGE_SHAPE and test.images.shape == (40,) + IMAGE_SHAPE
    assert torch.bincount(train.labels).tolist() == [10] * 10
    assert len(PATTERNS) == 10


def test_generation_is_deterministic(toy):
    again = generate_toy_dataset(3, classes=10, per_class_train=10, per_class_test=4)
    assert again[0].digest() == toy[0].digest() and again[1].digest() == toy[1].digest()
    other = generate_toy_dataset(4, classes=10, per_class_train=10, per_class_test=4)
    assert other[0].digest() != toy[0].digest()


def test_train_split_is_standardized(toy):
    train, _ = toy
    x = train.images.double()
    assert np.allclose(x.mean(dim=(0, 2, 3)).numpy(), 0, atol=1e-5)
    assert np.allclose(x.std(dim=(0, 2, 3), unbiased=False).numpy(), 1, atol=1e-4)


def test_bounds_are_normalized_pixel_limits(toy):
    train, _ = toy
    lo, hi = train.bounds()
    assert bool((train.images >= lo - 1e-5).all()) and bool((train.images <= hi + 1e-5).all())


def test_manifest_fields(toy):
    m = dataset_manifest(*toy)
    assert m["seed"] == 3 and m["train_count"] == 100 and m["classes"] == 10
    assert len(m["normalization"]["mean"]) == 3


def test_invalid_arguments():
    with pytest.raises(ValueError):
        generate_toy_dataset(0, classes=11)
    with pytest.raises(ValueError):
        generate_toy_dataset(0, per_class_train=0)


def test_augmentations_preserve_shape_and_are_seeded():
    x = torch.randn(5, 3, 8, 8)
    a = random_crop(x, 2, torch.Generator().manual_seed(0))
    b = random_crop(x, 2, torch.Generator().manual_seed(0))
    assert a.shape == x.shape and torch.equal(a, b)
    assert torch.equal(random_crop(x, 0, torch.Generator()), x)
    f = random_flip(x, torch.Generator().manual_seed(0))
    assert all(torch.equal(f[i], x[i]) or torch.equal(f[i], x[i].flip(-1)) for i in range(5))
