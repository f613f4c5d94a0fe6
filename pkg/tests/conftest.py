import os
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

from glcnet import GLCNetConfig
from network import ModelConfig
from run_config import load_config
from synthetic import SyntheticSceneSpec, generate_synthetic_dataset, write_synthetic_dataset
from tiling import SplitSpec, build_manifest, tile_scenes

DESK = ROOT / 'configs' / 'desk.txt'


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow end-to-end tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def desk_model():
    return ModelConfig(arch='small', in_channels=3, num_classes=4, encoder_channels=16,
                       downsamples=3, decoder_channels=16, proj_dim=8)


@pytest.fixture
def desk_glcnet():
    return GLCNetConfig(region_size=16, regions_per_sample=2, batch_size=4, epochs=1, lr=0.001)


@pytest.fixture
def desk_config(tmp_path):
    return load_config(DESK, [f'data.data_root={tmp_path / "data"}'], environ={})


@pytest.fixture(scope='session')
def tiled_data(tmp_path_factory):
    """Three 128x128 synthetic scenes cut into 64x64 tiles: 12 tiles, one scene held out."""
    root = tmp_path_factory.mktemp('data')
    scenes = generate_synthetic_dataset(SyntheticSceneSpec(num_classes=4, scene_size=128, seed=3), 3)
    write_synthetic_dataset(scenes, root / 'scenes', 4)
    tile_scenes(root / 'scenes', root / 'tiles', 64)
    manifests = build_manifest(root / 'tiles', SplitSpec(test_scenes=['synth002']), 0.5, seed=0)
    return root, manifests


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def chdir(tmp_path):
    old = os.getcwd()
    os.chdir(tmp_path)
    yield tmp_path
    os.chdir(old)
