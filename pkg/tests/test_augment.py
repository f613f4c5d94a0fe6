import numpy as np
import pytest
import torch

from augment import (AugmentationConfig, AugmentationError, AugmentationPipeline, TransformSpec, ViewPairDataset,
                     apply_view, build_index_label, make_view_pair, to_tensor)


def image(h=64, w=64, c=3, seed=0):
    return torch.rand(c, h, w, generator=torch.Generator().manual_seed(seed))


def test_build_index_label():
    idx = build_index_label(2, 2)
    assert idx.coords.tolist() == [[[0, 0], [1, 1]], [[0, 1], [0, 1]]]
    assert build_index_label(256, 256).at(100, 37) == (100, 37)
    idx = build_index_label(1, 5)
    assert idx.coords[0].tolist() == [[0] * 5] and idx.coords[1].tolist() == [[0, 1, 2, 3, 4]]
    assert idx.valid_mask.all()
    with pytest.raises(ValueError):
        build_index_label(0, 3)


def test_identity_pipeline(rng):
    x = image()
    idx = build_index_label(64, 64)
    out, out_idx = apply_view(x, idx, AugmentationPipeline([]), rng)
    assert torch.equal(out, x) and torch.equal(out_idx.coords, idx.coords)


def test_hflip(rng):
    out, idx = apply_view(image(w=48), build_index_label(64, 48), AugmentationPipeline([TransformSpec('hflip')]), rng)
    for c in range(48):
        assert (idx.coords[1, :, c] == 47 - c).all()
    assert torch.equal(out, image(w=48).flip(-1))


def test_crop_then_resize_maps_centre(rng):
    pipeline = AugmentationPipeline([TransformSpec('crop_resize', params={'window': (10, 20, 64, 64)})], output_size=224)
    _, idx = apply_view(image(256, 256), build_index_label(256, 256), pipeline, rng)
    assert idx.shape == (224, 224)
    row, col = idx.at(112, 112)
    assert abs(row - 42) <= 1 and abs(col - 52) <= 1
    # nearest resampling: stored coordinates are real source positions inside the window
    assert idx.coords[0].min() >= 10 and idx.coords[0].max() <= 73
    assert idx.coords[1].min() >= 20 and idx.coords[1].max() <= 83
    for r in range(0, 224, 37):
        for c in range(0, 224, 41):
            want = (10 + (r + 0.5) * 64 / 224 - 0.5, 20 + (c + 0.5) * 64 / 224 - 0.5)
            got = idx.at(r, c)
            assert abs(got[0] - want[0]) <= 1 and abs(got[1] - want[1]) <= 1


def test_photometric_ops_leave_index(rng):
    cfg = AugmentationConfig(view_size=64, jitter_p=1.0, blur_p=1.0, noise_p=1.0, grayscale_p=1.0)
    ops = [op for op in cfg.t2().ops if op.kind == 'photometric']
    idx = build_index_label(64, 64)
    out, out_idx = apply_view(image(), idx, AugmentationPipeline(ops), rng)
    assert torch.equal(out_idx.coords, idx.coords)
    assert out.shape == (3, 64, 64) and 0 <= float(out.min()) and float(out.max()) <= 1


def test_grayscale_keeps_extra_band(rng):
    x = image(c=4)
    out, _ = apply_view(x, build_index_label(64, 64), AugmentationPipeline([TransformSpec('grayscale')]), rng)
    assert torch.allclose(out[0], out[1]) and torch.allclose(out[1], out[2])
    assert not torch.allclose(out[3], out[0])


def test_rotation_composes_with_index(rng):
    x = image(32, 32)
    spec = [TransformSpec('rotate90', params={'k': 1}), TransformSpec('vflip')]
    out, idx = apply_view(x, build_index_label(32, 32), AugmentationPipeline(spec), rng)
    for r in range(32):
        for c in range(0, 32, 5):
            sr, sc = idx.at(r, c)
            assert torch.equal(out[:, r, c], x[:, sr, sc])


def test_t1_and_t2():
    cfg = AugmentationConfig(view_size=64)
    assert [op.name for op in cfg.t1().ops] == ['crop_resize']
    assert [op.name for op in cfg.t2().ops] == ['crop_resize', 'hflip', 'vflip', 'rotate90', 'color_jitter',
                                                'gaussian_blur', 'noise', 'grayscale']
    assert set(cfg.t1().kinds) == {'spatial'}
    assert cfg.t2().kinds == ['spatial'] * 4 + ['photometric'] * 4
    pair = make_view_pair(image(96, 96), cfg.t1(), cfg.t2(), np.random.default_rng(3))
    (a, ia), (b, ib) = pair.view_a, pair.view_b
    assert a.shape == b.shape == (3, 64, 64) and ia.shape == ib.shape == (64, 64)
    assert int(ia.coords.max()) < 96 and int(ib.coords.min()) >= 0


def test_without_resize_coords_are_exact(rng):
    """Flips and rotations alone move pixels without resampling."""
    x = image(48, 48)
    ops = [TransformSpec('hflip', 0.5), TransformSpec('vflip', 0.5), TransformSpec('rotate90')]
    for _ in range(20):
        out, idx = apply_view(x, build_index_label(48, 48), AugmentationPipeline(ops), rng)
        assert torch.equal(out, x[:, idx.coords[0], idx.coords[1]])


def test_same_seed_same_views():
    cfg = AugmentationConfig(view_size=64)
    a = make_view_pair(image(80, 80), cfg.t1(), cfg.t2(), np.random.default_rng([4, 1]))
    b = make_view_pair(image(80, 80), cfg.t1(), cfg.t2(), np.random.default_rng([4, 1]))
    assert torch.equal(a.view_b[0], b.view_b[0]) and torch.equal(a.view_b[1].coords, b.view_b[1].coords)


def test_errors(rng):
    with pytest.raises(ValueError):
        TransformSpec('shear')
    with pytest.raises(ValueError):
        TransformSpec('hflip', p=1.5)
    with pytest.raises(ValueError):
        apply_view(image(), build_index_label(32, 32), AugmentationPipeline([]), rng)
    crop = TransformSpec('crop_resize', params={'window': (40, 40, 64, 64)})
    with pytest.raises(AugmentationError):
        apply_view(image(), build_index_label(64, 64), AugmentationPipeline([crop]), rng)


def test_to_tensor():
    assert float(to_tensor(np.full((3, 2, 2), 255, dtype=np.uint8)).max()) == 1.0
    assert float(to_tensor(np.full((3, 2, 2), 65535, dtype=np.uint16)).min()) == 1.0


def test_view_pair_dataset(tiled_data):
    _, manifests = tiled_data
    cfg = AugmentationConfig(view_size=32)
    ds = ViewPairDataset(manifests['pretrain'], cfg.t1(), cfg.t2(), seed=1)
    first = ds[2]
    assert first['view_a'].shape == (3, 32, 32) and first['index_b'].shape == (2, 32, 32)
    assert torch.equal(ds[2]['view_b'], first['view_b'])
    ds.set_epoch(1)
    assert not torch.equal(ds[2]['view_b'], first['view_b'])
