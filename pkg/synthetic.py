"""Seeded synthetic land-cover scenes standing in for real imagery at desk scale."""
from dataclasses import dataclass
from pathlib import Path
import logging

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter

from tiling import RasterScene, MASK_TAG, write_raster

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassTexture:
    color: tuple            # one mean value per band, 0-255
    noise_std: float = 12.0
    stripe_period: float = 8.0
    stripe_angle: float = 0.0
    stripe_amplitude: float = 20.0


@dataclass
class SyntheticSceneSpec:
    num_classes: int = 4
    scene_size: int = 512
    seed: int = 0
    channels: int = 3
    class_weights: tuple = None     # uniform when None
    texture_params: tuple = None    # one ClassTexture per class; drawn from seed when None
    blob_scale: float = 8.0         # smoothing sigma of the class fields, pixels

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.channels not in (3, 4):
            raise ValueError(f"channels must be 3 or 4, got {self.channels}")
        if self.scene_size < 1:
            raise ValueError(f"scene_size must be positive, got {self.scene_size}")
        if self.class_weights is not None:
            if len(self.class_weights) != self.num_classes or min(self.class_weights) <= 0:
                raise ValueError(f"class_weights must be {self.num_classes} positive numbers, "
                                 f"got {self.class_weights}")
        if self.texture_params is not None and len(self.texture_params) != self.num_classes:
            raise ValueError(f"expected {self.num_classes} textures, got {len(self.texture_params)}")

    def textures(self):
        if self.texture_params is not None:
            return list(self.texture_params)
        return default_textures(self.num_classes, self.channels, self.seed)


def default_textures(num_classes, channels, seed):
    rng = np.random.default_rng([seed, 7919])
    return [
        ClassTexture(
            color=tuple(rng.uniform(40, 215, size=channels).round(1).tolist()),
            noise_std=float(rng.uniform(6, 16)),
            stripe_period=float(rng.uniform(4, 16)),
            stripe_angle=float(rng.uniform(0, np.pi)),
            stripe_amplitude=float(rng.uniform(5, 30)),
        )
        for _ in range(num_classes)
    ]


def class_map(spec, rng):
    size = spec.scene_size
    fields = np.stack([
        gaussian_filter(rng.standard_normal((size, size)), spec.blob_scale, mode='wrap')
        for _ in range(spec.num_classes)
    ])
    fields /= fields.reshape(spec.num_classes, -1).std(axis=1)[:, None, None]
    if spec.class_weights is not None:
        weights = np.asarray(spec.class_weights, dtype=float)
        fields += np.log(weights / weights.mean())[:, None, None]
    return fields.argmax(axis=0)


def render(mask, textures, channels, rng):
    size_r, size_c = mask.shape
    rows, cols = np.mgrid[0:size_r, 0:size_c].astype(float)
    image = np.zeros((channels, size_r, size_c))
    for k, tex in enumerate(textures):
        where = mask == k
        if not where.any():
            continue
        phase = (cols * np.cos(tex.stripe_angle) + rows * np.sin(tex.stripe_angle)) / tex.stripe_period
        pattern = tex.stripe_amplitude * np.sin(2 * np.pi * phase)
        for c in range(channels):
            image[c][where] = tex.color[c] + pattern[where]
        image[:, where] += rng.normal(0, tex.noise_std, size=(channels, int(where.sum())))
    # slow illumination drift across the scene
    light = gaussian_filter(rng.standard_normal((size_r, size_c)), max(size_r, size_c) / 8, mode='wrap')
    light *= 15 / (light.std() + 1e-12)
    return np.clip(image + light, 0, 255).round().astype(np.uint8)


def generate_synthetic_dataset(spec: SyntheticSceneSpec, n_scenes=1):
    """n_scenes scenes with masks; scene i depends only on (spec, i)."""
    textures = spec.textures()
    scenes = []
    for i in range(n_scenes):
        rng = np.random.default_rng([spec.seed, i])
        mask = class_map(spec, rng)
        pixels = render(mask, textures, spec.channels, rng)
        scenes.append(RasterScene(pixels, mask=mask.astype(np.int64), name=f'synth{i:03d}',
                                  meta={'seed': spec.seed, 'index': i}))
    return scenes


def class_proportions(scenes, num_classes):
    records = []
    for scene in scenes:
        counts = np.bincount(scene.mask.ravel(), minlength=num_classes)
        for k, n in enumerate(counts):
            records.append({'scene': scene.name, 'class': k, 'pixels': int(n),
                            'proportion': n / scene.mask.size})
    return pd.DataFrame(records)


def write_synthetic_dataset(scenes, out_dir, num_classes):
    """Scenes as <name>.png / <name>_mask.png plus class_summary.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        write_raster(out_dir / f'{scene.name}.png', scene.pixels)
        write_raster(out_dir / f'{scene.name}{MASK_TAG}.png', scene.mask.astype(np.uint8))
    summary = class_proportions(scenes, num_classes)
    summary.to_csv(out_dir / 'class_summary.csv', index=False)
    logger.info("wrote %d synthetic scenes to %s", len(scenes), out_dir)
    return summary
