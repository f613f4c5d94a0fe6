"""Two-view augmentation that carries each pixel's original coordinates along.

An IndexLabel stores, for every output pixel, the (row, col) it came from in
the untransformed image. Spatial ops move image and index together; the
image is resampled bilinearly and the index by nearest neighbour, so stored
coordinates are always real source positions. Photometric ops touch the
image only.
"""
from dataclasses import dataclass, field
import logging
import math

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torch.utils.data import Dataset

from tiling import read_raster

logger = logging.getLogger(__name__)

SPATIAL = ('crop_resize', 'hflip', 'vflip', 'rotate90')
PHOTOMETRIC = ('color_jitter', 'gaussian_blur', 'noise', 'grayscale')
AUGMENT_STREAM = 1


class AugmentationError(RuntimeError):
    pass


@dataclass
class IndexLabel:
    coords: torch.Tensor        # (2, H, W) long: source row, source col
    valid_mask: torch.Tensor    # (H, W) bool

    @property
    def shape(self):
        return tuple(self.coords.shape[1:])

    def at(self, row, col):
        return int(self.coords[0, row, col]), int(self.coords[1, row, col])


def build_index_label(height, width):
    if height < 1 or width < 1:
        raise ValueError(f"index label needs a positive size, got {height}x{width}")
    rows, cols = torch.meshgrid(torch.arange(height), torch.arange(width), indexing='ij')
    return IndexLabel(torch.stack([rows, cols]), torch.ones(height, width, dtype=torch.bool))


@dataclass
class TransformSpec:
    name: str
    p: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in SPATIAL + PHOTOMETRIC:
            raise ValueError(f"unknown transform '{self.name}'")
        if not 0 <= self.p <= 1:
            raise ValueError(f"transform '{self.name}' has probability {self.p} outside [0, 1]")

    @property
    def kind(self):
        return 'spatial' if self.name in SPATIAL else 'photometric'


@dataclass
class AugmentationPipeline:
    ops: list
    output_size: int = None     # square output side; None keeps the input size
    rgb_bands: tuple = (0, 1, 2)
    max_retries: int = 10

    @property
    def kinds(self):
        return [op.kind for op in self.ops]


@dataclass
class AugmentationConfig:
    view_size: int = 224
    crop_scale: tuple = (0.2, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    rotate_p: float = 1.0
    jitter_p: float = 0.8
    brightness: float = 0.8
    contrast: float = 0.8
    saturation: float = 0.8
    hue: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    noise_p: float = 0.5
    noise_std: tuple = (0.0, 0.05)
    grayscale_p: float = 0.2
    rgb_bands: tuple = (0, 1, 2)

    def crop(self):
        return TransformSpec('crop_resize', 1.0, {'scale': tuple(self.crop_scale), 'ratio': tuple(self.crop_ratio)})

    def t1(self):
        """Random crop followed by resize, nothing else."""
        return AugmentationPipeline([self.crop()], self.view_size, tuple(self.rgb_bands))

    def t2(self):
        ops = [
            self.crop(),
            TransformSpec('hflip', self.flip_p),
            TransformSpec('vflip', self.flip_p),
            TransformSpec('rotate90', self.rotate_p),
            TransformSpec('color_jitter', self.jitter_p, {
                'brightness': self.brightness, 'contrast': self.contrast,
                'saturation': self.saturation, 'hue': self.hue}),
            TransformSpec('gaussian_blur', self.blur_p, {'sigma': tuple(self.blur_sigma)}),
            TransformSpec('noise', self.noise_p, {'std': tuple(self.noise_std)}),
            TransformSpec('grayscale', self.grayscale_p),
        ]
        return AugmentationPipeline(ops, self.view_size, tuple(self.rgb_bands))


# ---------- spatial ----------

def _resize_pair(image, index, size):
    if image.shape[-2:] == size:
        return image, index
    image = F.interpolate(image[None], size=size, mode='bilinear', align_corners=False)[0]
    coords = F.interpolate(index.coords[None].double(), size=size, mode='nearest-exact')[0].long()
    valid = F.interpolate(index.valid_mask[None, None].double(), size=size, mode='nearest-exact')[0, 0] > 0.5
    return image, IndexLabel(coords, valid)


def _sample_window(height, width, params, rng, max_retries):
    if 'window' in params:
        top, left, h, w = params['window']
        if h < 1 or w < 1 or top < 0 or left < 0 or top + h > height or left + w > width:
            raise AugmentationError(f"crop window {params['window']} does not fit a {height}x{width} image")
        return top, left, h, w
    lo, hi = params.get('scale', (0.2, 1.0))
    log_ratio = np.log(params.get('ratio', (3 / 4, 4 / 3)))
    for _ in range(max_retries):
        area = height * width * rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(area * ratio)))
        h = int(round(math.sqrt(area / ratio)))
        if 1 <= w <= width and 1 <= h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    raise AugmentationError(f"no valid crop window for a {height}x{width} image after {max_retries} tries")


def crop_resize(image, index, params, rng, pipeline):
    top, left, h, w = _sample_window(*image.shape[-2:], params, rng, pipeline.max_retries)
    image = image[:, top:top + h, left:left + w]
    index = IndexLabel(index.coords[:, top:top + h, left:left + w],
                       index.valid_mask[top:top + h, left:left + w])
    size = pipeline.output_size
    return _resize_pair(image, index, (size, size) if size else (h, w))


def hflip(image, index, params, rng, pipeline):
    return image.flip(-1), IndexLabel(index.coords.flip(-1), index.valid_mask.flip(-1))


def vflip(image, index, params, rng, pipeline):
    return image.flip(-2), IndexLabel(index.coords.flip(-2), index.valid_mask.flip(-2))


def rotate90(image, index, params, rng, pipeline):
    k = int(params['k']) if 'k' in params else int(rng.integers(0, 4))
    dims = (-2, -1)
    return (torch.rot90(image, k, dims),
            IndexLabel(torch.rot90(index.coords, k, dims), torch.rot90(index.valid_mask, k, dims)))


# ---------- photometric ----------

def _split_rgb(image, rgb_bands):
    rgb_bands = list(rgb_bands)
    if image.shape[0] < 3 or max(rgb_bands) >= image.shape[0]:
        return None
    return rgb_bands


def color_jitter(image, index, params, rng, pipeline):
    rgb = _split_rgb(image, pipeline.rgb_bands)
    factors = {
        'brightness': rng.uniform(max(0, 1 - params['brightness']), 1 + params['brightness']),
        'contrast': rng.uniform(max(0, 1 - params['contrast']), 1 + params['contrast']),
        'saturation': rng.uniform(max(0, 1 - params['saturation']), 1 + params['saturation']),
        'hue': rng.uniform(-params['hue'], params['hue']),
    }
    names = list(factors)
    image = image.clone()
    for j in rng.permutation(len(names)):
        name = names[j]
        f = factors[name]
        if name == 'brightness':
            image = image * f
        elif name == 'contrast':
            reference = TF.rgb_to_grayscale(image[rgb]).mean() if rgb else image.mean()
            image = f * image + (1 - f) * reference
        elif rgb and name == 'saturation':
            image[rgb] = TF.adjust_saturation(image[rgb].clamp(0, 1), f)
        elif rgb and name == 'hue':
            image[rgb] = TF.adjust_hue(image[rgb].clamp(0, 1), f)
        image = image.clamp(0, 1)
    return image, index


def grayscale(image, index, params, rng, pipeline):
    """Luminance of the RGB bands; any other band gets the same mean shift."""
    rgb = _split_rgb(image, pipeline.rgb_bands)
    if rgb is None:
        return image.mean(0, keepdim=True).expand_as(image).clone(), index
    gray = TF.rgb_to_grayscale(image[rgb], num_output_channels=3)
    shift = gray.mean() - image[rgb].mean()
    out = (image + shift).clamp(0, 1)
    out[rgb] = gray
    return out, index


def gaussian_blur(image, index, params, rng, pipeline):
    sigma = float(rng.uniform(*params.get('sigma', (0.1, 2.0))))
    kernel = 2 * math.ceil(3 * sigma) + 1
    kernel = min(kernel, 2 * ((min(image.shape[-2:]) - 1) // 2) + 1)
    if kernel < 3:
        return image, index
    return TF.gaussian_blur(image, [kernel, kernel], [sigma, sigma]), index


def noise(image, index, params, rng, pipeline):
    std = float(rng.uniform(*params.get('std', (0.0, 0.05))))
    gen = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
    return (image + std * torch.randn(image.shape, generator=gen, dtype=image.dtype)).clamp(0, 1), index


TRANSFORMS = {
    'crop_resize': crop_resize,
    'hflip': hflip,
    'vflip': vflip,
    'rotate90': rotate90,
    'color_jitter': color_jitter,
    'gaussian_blur': gaussian_blur,
    'noise': noise,
    'grayscale': grayscale,
}


def apply_view(image, index: IndexLabel, pipeline: AugmentationPipeline, rng):
    """One augmented view of image (C, H, W float in [0, 1]) and its index label."""
    if tuple(image.shape[-2:]) != index.shape:
        raise ValueError(f"image {tuple(image.shape[-2:])} and index label {index.shape} are not aligned")
    for op in pipeline.ops:
        # draw the coin even at p == 1 so streams stay aligned when p changes
        if rng.random() >= op.p:
            continue
        image, index = TRANSFORMS[op.name](image, index, op.params, rng, pipeline)
    if pipeline.output_size and tuple(image.shape[-2:]) != (pipeline.output_size,) * 2:
        image, index = _resize_pair(image, index, (pipeline.output_size,) * 2)
    return image, index


@dataclass
class ViewPair:
    view_a: tuple   # (image, IndexLabel) from t1
    view_b: tuple   # (image, IndexLabel) from t2
    source_id: int


def make_view_pair(image, t1, t2, rng, source_id=0):
    index = build_index_label(*image.shape[-2:])
    return ViewPair(apply_view(image, index, t1, rng), apply_view(image, index, t2, rng), source_id)


def to_tensor(array):
    """uint8 / uint16 / float (C, H, W) array as float32 in [0, 1]."""
    array = np.asarray(array)
    if array.dtype == np.uint8:
        scale = 255.0
    elif array.dtype == np.uint16:
        scale = 65535.0
    else:
        scale = 1.0
    return torch.from_numpy(array.astype(np.float32) / scale)


class ViewPairDataset(Dataset):
    """View pairs of manifest tiles; sample i in epoch e is seeded by (seed, e, i)."""

    def __init__(self, manifest, t1, t2, seed=0):
        self.paths = [tile for tile, _ in manifest.paths()]
        self.t1 = t1
        self.t2 = t2
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        image = to_tensor(read_raster(self.paths[i])[0])
        rng = np.random.default_rng([self.seed, AUGMENT_STREAM, self.epoch, i])
        pair = make_view_pair(image, self.t1, self.t2, rng, source_id=i)
        (img_a, idx_a), (img_b, idx_b) = pair.view_a, pair.view_b
        return {
            'view_a': img_a, 'index_a': idx_a.coords, 'valid_a': idx_a.valid_mask,
            'view_b': img_b, 'index_b': idx_b.coords, 'valid_b': idx_b.valid_mask,
            'source_id': i,
        }
