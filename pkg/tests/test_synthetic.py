import numpy as np
import pytest

from synthetic import ClassTexture, SyntheticSceneSpec, class_proportions, generate_synthetic_dataset, write_synthetic_dataset
from tiling import read_scene


def test_deterministic():
    a = generate_synthetic_dataset(SyntheticSceneSpec(seed=7, scene_size=128), 2)
    b = generate_synthetic_dataset(SyntheticSceneSpec(seed=7, scene_size=128), 2)
    for x, y in zip(a, b):
        assert np.array_equal(x.pixels, y.pixels) and np.array_equal(x.mask, y.mask)
    c = generate_synthetic_dataset(SyntheticSceneSpec(seed=8, scene_size=128), 1)
    assert not np.array_equal(a[0].pixels, c[0].pixels)


def test_scene_index_is_independent():
    three = generate_synthetic_dataset(SyntheticSceneSpec(seed=1, scene_size=64), 3)
    one = generate_synthetic_dataset(SyntheticSceneSpec(seed=1, scene_size=64), 1)
    assert np.array_equal(three[0].pixels, one[0].pixels)


def test_mask_range_and_shape():
    (s,) = generate_synthetic_dataset(SyntheticSceneSpec(num_classes=4, scene_size=512), 1)
    assert s.pixels.shape == (3, 512, 512) and s.pixels.dtype == np.uint8
    assert set(np.unique(s.mask)) <= {0, 1, 2, 3}
    (nir,) = generate_synthetic_dataset(SyntheticSceneSpec(channels=4, scene_size=64), 1)
    assert nir.pixels.shape[0] == 4


def test_uniform_weights_balance_classes():
    scenes = [generate_synthetic_dataset(SyntheticSceneSpec(num_classes=4, scene_size=1024, seed=s), 1)[0]
              for s in range(10)]
    shares = class_proportions(scenes, 4).groupby('class')['pixels'].sum()
    shares = shares / shares.sum()
    assert ((shares - 0.25).abs() < 0.10).all()


def test_class_weights_shift_proportions():
    spec = SyntheticSceneSpec(num_classes=2, scene_size=256, class_weights=(4.0, 1.0))
    (s,) = generate_synthetic_dataset(spec, 1)
    assert (s.mask == 0).mean() > 0.5


def test_bad_specs():
    with pytest.raises(ValueError):
        SyntheticSceneSpec(num_classes=1)
    with pytest.raises(ValueError):
        SyntheticSceneSpec(num_classes=3, class_weights=(1.0, 1.0))
    with pytest.raises(ValueError):
        SyntheticSceneSpec(num_classes=2, texture_params=(ClassTexture((1, 2, 3)),))


def test_write_and_read_back(tmp_path):
    scenes = generate_synthetic_dataset(SyntheticSceneSpec(scene_size=64), 2)
    summary = write_synthetic_dataset(scenes, tmp_path, 4)
    assert (tmp_path / 'class_summary.csv').exists()
    assert len(summary) == 8
    back = read_scene(tmp_path / 'synth001.png')
    assert np.array_equal(back.pixels, scenes[1].pixels)
    assert np.array_equal(back.mask, scenes[1].mask)
