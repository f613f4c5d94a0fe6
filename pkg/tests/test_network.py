from dataclasses import replace

import pytest
import torch

from network import (GROUPS, CheckpointError, ModelConfig, ProjectionHead, build_model, forward_decoder,
                     forward_encoder, load_checkpoint, parameter_groups, project, read_checkpoint, save_checkpoint)


def batch(n=2, c=3, size=64, seed=0):
    return torch.rand(n, c, size, size, generator=torch.Generator().manual_seed(seed))


def test_encoder_shapes():
    cfg = ModelConfig(arch='small', encoder_channels=256, downsamples=4, decoder_channels=32)
    model = build_model(cfg, 0)
    feats = forward_encoder(model, batch())
    assert feats.out.shape == (2, 256, 4, 4)
    assert forward_decoder(model, feats).shape == (2, 32, 64, 64)
    assert model(batch()).shape == (2, cfg.num_classes, 64, 64)


def test_encoder_rejects_bad_inputs(desk_model):
    model = build_model(desk_model, 0)
    with pytest.raises(ValueError, match='bands'):
        forward_encoder(model, batch(c=4))
    with pytest.raises(ValueError, match='divisible'):
        forward_encoder(model, batch(size=60))


def test_zero_encoder_gives_zero_features(desk_model):
    model = build_model(desk_model, 0).eval()
    with torch.no_grad():
        for name, p in model.encoder.named_parameters():
            p.zero_()
        for m in model.encoder.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.running_mean.zero_()
    assert float(forward_encoder(model, batch()).out.abs().max()) == 0.0


def test_batch_independent_in_eval(desk_model):
    model = build_model(desk_model, 0).eval()
    x = batch(n=1)
    with torch.no_grad():
        pair = model(torch.cat([x, x]))
        single = model(x)
    assert torch.allclose(pair[0], pair[1]) and torch.allclose(pair[0], single[0], atol=1e-6)


def test_projection_head():
    head = ProjectionHead(3, 3, 3)
    with torch.no_grad():
        for fc in (head.fc1, head.fc2):
            fc.weight.copy_(torch.eye(3))
            fc.bias.zero_()
    v = torch.tensor([[0.5, 0.0, 2.0]])
    assert torch.equal(project(head, v), v)
    assert torch.equal(project(head, -v), torch.zeros_like(v))

    torch.manual_seed(1)
    head = ProjectionHead(3, 2, 2)
    x = torch.randn(4, 3)
    want = torch.clamp(x @ head.fc1.weight.T + head.fc1.bias, min=0) @ head.fc2.weight.T + head.fc2.bias
    assert torch.allclose(project(head, x), want)
    with pytest.raises(ValueError):
        project(head, torch.randn(4, 5))


def test_parameter_groups(desk_model):
    model = build_model(desk_model, 0, with_heads=True)
    assert set(parameter_groups(model)) == set(GROUPS)
    assert all(n.startswith('decoder.1.') for n in parameter_groups(model)['decoder.1'])
    assert set(parameter_groups(build_model(desk_model, 0))) == set(GROUPS) - {'proj_global', 'proj_local'}


def test_same_seed_same_weights(desk_model):
    a, b = build_model(desk_model, 3).state_dict(), build_model(desk_model, 3).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_checkpoint_round_trip(tmp_path, desk_model):
    model = build_model(desk_model, 0, with_heads=True)
    save_checkpoint(model, tmp_path / 'm.ckpt', {'epoch': 3, 'config_hash': 'abc'})
    bundle = read_checkpoint(tmp_path / 'm.ckpt')
    assert bundle.meta == {'epoch': 3, 'config_hash': 'abc'}
    state = model.state_dict()
    assert all(torch.equal(state[k], t) for k, t in bundle.tensors().items())
    fresh = build_model(desk_model, 1, with_heads=True)
    assert load_checkpoint(tmp_path / 'm.ckpt', fresh, GROUPS)['epoch'] == 3
    assert all(torch.equal(state[k], v) for k, v in fresh.state_dict().items())
    assert not list(tmp_path.glob('*.tmp'))


@pytest.mark.parametrize('groups', [
    ('encoder',),
    ('encoder', 'decoder.1', 'decoder.2'),
    ('encoder', 'decoder.1', 'decoder.2', 'decoder.3'),
])
def test_partial_loading(tmp_path, desk_model, groups):
    source = build_model(desk_model, 0, with_heads=True)
    with torch.no_grad():
        for p in source.parameters():
            p.add_(1.0)
    save_checkpoint(source, tmp_path / 'm.ckpt', {})
    target = build_model(desk_model, 5)
    reference = build_model(desk_model, 5).state_dict()
    load_checkpoint(tmp_path / 'm.ckpt', target, groups)
    bundle = read_checkpoint(tmp_path / 'm.ckpt')
    for group, tensors in parameter_groups(target).items():
        for name, t in tensors.items():
            if group in groups:
                assert torch.equal(t, bundle.groups[group][name])
            else:
                assert torch.equal(t, reference[name])


def test_band_mismatch_keeps_fresh_first_conv(tmp_path, desk_model):
    save_checkpoint(build_model(desk_model, 0), tmp_path / 'rgb.ckpt', {})
    nir = build_model(replace(desk_model, in_channels=4), 1)
    first = nir.encoder.blocks[0][0].weight.clone()
    load_checkpoint(tmp_path / 'rgb.ckpt', nir, ['encoder'])
    assert torch.equal(nir.encoder.blocks[0][0].weight, first)
    source = read_checkpoint(tmp_path / 'rgb.ckpt').groups['encoder']
    assert torch.equal(nir.encoder.blocks[1][0].weight, source['encoder.blocks.1.0.weight'])


def test_checkpoint_errors(tmp_path, desk_model):
    model = build_model(desk_model, 0)
    path = save_checkpoint(model, tmp_path / 'm.ckpt', {})
    with pytest.raises(CheckpointError, match='unknown'):
        load_checkpoint(path, model, ['backbone'])
    with pytest.raises(CheckpointError, match='no groups'):
        load_checkpoint(path, model, ['proj_local'])
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    (tmp_path / 'bad.ckpt').write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match='checksum'):
        read_checkpoint(tmp_path / 'bad.ckpt')
    (tmp_path / 'junk.ckpt').write_bytes(b'not a checkpoint')
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / 'junk.ckpt')
    (tmp_path / 'short.ckpt').write_bytes(path.read_bytes()[:12])
    with pytest.raises(CheckpointError, match='truncated'):
        read_checkpoint(tmp_path / 'short.ckpt')
    wide = build_model(replace(desk_model, decoder_channels=32), 0)
    with pytest.raises(CheckpointError, match='shape'):
        load_checkpoint(path, wide, ['decoder.1'])
