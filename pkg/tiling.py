"""Cut large scenes into fixed-size tiles and organise them into split manifests."""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import repeat
from pathlib import Path
import logging
import math
import os

import numpy as np
import rasterio
from PIL import Image

logger = logging.getLogger(__name__)

SPLITS = ('pretrain', 'finetune', 'test')
IMAGE_SUFFIXES = ('.tif', '.tiff', '.png', '.jpg', '.jpeg')
MASK_TAG = '_mask'
SCENE_SEP = '__'


@dataclass
class RasterScene:
    pixels: np.ndarray                  # (C, H, W)
    channel_names: list = None
    mask: np.ndarray = None             # (H, W) class ids
    nodata_value: float = None
    name: str = 'scene'
    meta: dict = field(default_factory=dict)  # carried through untouched

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] not in (3, 4):
            raise ValueError(f"scene '{self.name}' must be (C, H, W) with 3 or 4 bands, "
                             f"got shape {self.pixels.shape}")
        if self.channel_names is None:
            self.channel_names = [f'band{i + 1}' for i in range(self.pixels.shape[0])]
        if len(self.channel_names) != self.pixels.shape[0]:
            raise ValueError(f"scene '{self.name}' has {self.pixels.shape[0]} bands "
                             f"but {len(self.channel_names)} channel names")
        if self.mask is not None and self.mask.shape != self.pixels.shape[1:]:
            raise ValueError(f"scene '{self.name}': mask {self.mask.shape} does not match "
                             f"pixels {self.pixels.shape[1:]}")

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]

    def check_classes(self, num_classes):
        if self.mask is None:
            return
        bad = np.unique(self.mask[(self.mask < 0) | (self.mask >= num_classes)])
        if len(bad):
            raise ValueError(f"scene '{self.name}' has class ids {bad.tolist()} outside [0, {num_classes})")


@dataclass
class Tile:
    pixels: np.ndarray
    mask: np.ndarray
    row: int
    col: int


def grid_positions(size, crop_size, stride):
    return range(0, size - crop_size + 1, stride)


def tile_raster(scene: RasterScene, crop_size, stride=None, num_classes=None):
    """Tiles in row-major order; edge remainders that do not fill a crop are dropped.

    With num_classes the mask must hold ids in [0, num_classes).
    """
    if num_classes is not None:
        scene.check_classes(num_classes)
    stride = crop_size if stride is None else stride
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if crop_size > min(scene.height, scene.width):
        raise ValueError(f"scene '{scene.name}' is {scene.height}x{scene.width}, "
                         f"smaller than crop size {crop_size}")
    tiles = []
    for r in grid_positions(scene.height, crop_size, stride):
        for c in grid_positions(scene.width, crop_size, stride):
            window = np.s_[r:r + crop_size, c:c + crop_size]
            tiles.append(Tile(
                pixels=scene.pixels[(slice(None),) + window].copy(),
                mask=None if scene.mask is None else scene.mask[window].copy(),
                row=r, col=c,
            ))
    return tiles


def stitch_tiles(tiles, crop_size):
    """Inverse of tile_raster for stride == crop_size, over the covered grid."""
    height = max(t.row for t in tiles) + crop_size
    width = max(t.col for t in tiles) + crop_size
    out = np.zeros((tiles[0].pixels.shape[0], height, width), dtype=tiles[0].pixels.dtype)
    for t in tiles:
        out[:, t.row:t.row + crop_size, t.col:t.col + crop_size] = t.pixels
    return out


# ---------- raster IO ----------

def mask_path_for(path):
    path = Path(path)
    for suffix in ('.png', '.tif', '.tiff'):
        candidate = path.with_name(path.stem + MASK_TAG + suffix)
        if candidate.exists():
            return candidate
    return None


def read_raster(path):
    """(C, H, W) for images, (H, W) for single-band files."""
    path = Path(path)
    if path.suffix.lower() in ('.tif', '.tiff'):
        with rasterio.open(path) as src:
            data = src.read()
            nodata = src.nodata
            names = [d or f'band{i + 1}' for i, d in enumerate(src.descriptions)]
            meta = {'crs': str(src.crs) if src.crs else None, 'transform': tuple(src.transform)}
    else:
        with Image.open(path) as img:
            data = np.asarray(img)
        data = data[None] if data.ndim == 2 else data.transpose(2, 0, 1)
        nodata = None
        names = {3: ['red', 'green', 'blue']}.get(data.shape[0], [f'band{i + 1}' for i in range(data.shape[0])])
        meta = {}
    return data, names, nodata, meta


def read_scene(path):
    path = Path(path)
    pixels, names, nodata, meta = read_raster(path)
    mask_file = mask_path_for(path)
    mask = None
    if mask_file is not None:
        mask = read_raster(mask_file)[0][0].astype(np.int64)
    return RasterScene(pixels, names, mask, nodata, name=path.stem, meta=meta)


def find_scenes(scene_dir):
    scene_dir = Path(scene_dir)
    found = sorted(p for p in scene_dir.rglob('*')
                   if p.suffix.lower() in IMAGE_SUFFIXES and not p.stem.endswith(MASK_TAG))
    if not found:
        raise ValueError(f"no scenes ({', '.join(IMAGE_SUFFIXES)}) found under {scene_dir}")
    return found


def tile_suffix(array):
    channels = 1 if array.ndim == 2 else array.shape[0]
    return '.png' if array.dtype == np.uint8 and channels in (1, 3, 4) else '.tif'


def write_raster(path, array):
    """Lossless: PNG for 8-bit data with up to 4 bands, TIFF otherwise."""
    path = Path(path)
    if path.suffix == '.png':
        hwc = array if array.ndim == 2 else array.transpose(1, 2, 0)
        if hwc.ndim == 3 and hwc.shape[2] == 1:
            hwc = hwc[..., 0]
        Image.fromarray(np.ascontiguousarray(hwc)).save(path)
        return
    chw = array[None] if array.ndim == 2 else array
    profile = dict(driver='GTiff', width=chw.shape[2], height=chw.shape[1],
                   count=chw.shape[0], dtype=chw.dtype.name, compress='lzw')
    with rasterio.open(path, 'w', **profile) as dst:
        dst.write(chw)


def tile_name(scene_name, row, col):
    return f'{scene_name}{SCENE_SEP}r{row:05d}_c{col:05d}'


def scene_of(tile_path):
    return Path(tile_path).stem.rsplit(SCENE_SEP, 1)[0]


def _tile_one_scene(path, out_dir, crop_size, stride, num_classes):
    scene = read_scene(path)
    written = []
    for t in tile_raster(scene, crop_size, stride, num_classes):
        name = tile_name(scene.name, t.row, t.col)
        tile_path = out_dir / (name + tile_suffix(t.pixels))
        write_raster(tile_path, t.pixels)
        mask_file = None
        if t.mask is not None:
            mask = t.mask.astype(np.uint8) if t.mask.max() < 256 else t.mask.astype(np.uint16)
            mask_file = out_dir / (name + MASK_TAG + tile_suffix(mask))
            write_raster(mask_file, mask)
        written.append((tile_path, mask_file))
    logger.info("tiled %s (%dx%d): %d tiles", scene.name, scene.height, scene.width, len(written))
    return written


def tile_scenes(scene_dir, out_dir, crop_size, stride=None, workers=1, num_classes=None):
    """Tile every scene under scene_dir into out_dir. Output is the same for any worker count."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = find_scenes(scene_dir)
    args = (paths, repeat(out_dir), repeat(crop_size), repeat(stride), repeat(num_classes))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            per_scene = list(pool.map(_tile_one_scene, *args))
    else:
        per_scene = list(map(_tile_one_scene, *args))
    return [entry for entries in per_scene for entry in entries]


# ---------- manifests ----------

@dataclass
class DatasetManifest:
    """Tile/mask pairs of one split. Paths are stored relative to `root`.

    source_size is the size of the pool a fraction was taken from.
    """
    entries: list
    split: str
    crop_size: int
    label_fraction: float = 1.0
    seed: int = 0
    source_size: int = None
    root: Path = Path('.')

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split '{self.split}', expected one of {SPLITS}")
        if not 0 < self.label_fraction <= 1:
            raise ValueError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if self.split == 'finetune' and any(m is None for _, m in self.entries):
            raise ValueError("every finetune entry needs a mask")
        if self.source_size is None:
            self.source_size = len(self.entries)
        self.root = Path(self.root)

    def __len__(self):
        return len(self.entries)

    def paths(self):
        return [(self.root / t, None if m is None else self.root / m) for t, m in self.entries]

    def dumps(self):
        lines = [f'# split={self.split} crop_size={self.crop_size} label_fraction={self.label_fraction!r} '
                 f'seed={self.seed} source_size={self.source_size}']
        lines += [f"{t}\t{'-' if m is None else m}" for t, m in self.entries]
        return '\n'.join(lines) + '\n'

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='\n') as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path) as f:
            lines = f.read().splitlines()
        if not lines or not lines[0].startswith('# '):
            raise ValueError(f"{path} is not a manifest (missing header line)")
        fields = dict(kv.split('=', 1) for kv in lines[0][2:].split())
        entries = []
        for line in lines[1:]:
            tile, mask = line.split('\t')
            entries.append((tile, None if mask == '-' else mask))
        return cls(entries, fields['split'], int(fields['crop_size']), float(fields['label_fraction']),
                   int(fields['seed']), int(fields['source_size']), root=path.parent)


def subset_size(n, fraction):
    """max(1, floor(fraction * n)); the whole pool for fraction 1."""
    if fraction >= 1:
        return n
    return min(n, max(1, math.floor(fraction * n + 1e-9)))


def seeded_choice(entries, count, seed):
    order = np.random.default_rng(seed).permutation(len(entries))
    return [entries[i] for i in sorted(order[:count].tolist())]


def finetune_split(labeled_pool: DatasetManifest, label_fraction):
    """The fine-tune subset: label_fraction of the whole training pool, drawn from its labeled tiles."""
    if not 0 < label_fraction <= 1:
        raise ValueError(f"label_fraction must be in (0, 1], got {label_fraction}")
    count = subset_size(labeled_pool.source_size, label_fraction)
    if count > len(labeled_pool):
        logger.warning("only %d labeled tiles available, %d requested for fine-tuning",
                       len(labeled_pool), count)
        count = len(labeled_pool)
    chosen = seeded_choice(labeled_pool.entries, count, [labeled_pool.seed, 2])
    return DatasetManifest(chosen, 'finetune', labeled_pool.crop_size, label_fraction,
                           labeled_pool.seed, labeled_pool.source_size, labeled_pool.root)


@dataclass
class SplitSpec:
    """Which scenes feed the test split; all remaining scenes feed pretraining.

    test_scenes names the held-out scenes explicitly; otherwise
    round(test_fraction * n_scenes) scenes are drawn by seeded shuffle.
    test_size optionally subsamples the test tiles (seeded).
    pretrain_fraction shrinks the pretrain split without touching the others.
    """
    test_scenes: list = None
    test_fraction: float = 0.0
    test_size: int = None
    pretrain_fraction: float = 1.0


def _relative(path, root):
    return Path(os.path.relpath(path, root)).as_posix()


def _test_scenes(scenes, splits, seed):
    if splits.test_scenes is not None:
        unknown = set(splits.test_scenes) - set(scenes)
        if unknown:
            raise ValueError(f"test scenes not found among tiles: {sorted(unknown)}")
        chosen = set(splits.test_scenes)
    else:
        n_test = int(round(splits.test_fraction * len(scenes)))
        if splits.test_fraction > 0:
            n_test = max(1, n_test)
        chosen = set(seeded_choice(scenes, n_test, [seed, 0]))
    if len(chosen) >= len(scenes):
        raise ValueError(f"all {len(scenes)} scenes were assigned to the test split; none left to train on")
    return chosen


def build_manifest(tile_dir, splits: SplitSpec, label_fraction, seed, crop_size=None):
    """Split the tiles of tile_dir into manifests rooted at tile_dir's parent.

    Returns {'pretrain', 'finetune', 'test', 'labeled_pool'}. Test tiles come
    from held-out scenes only, so finetune and test never share a tile.
    """
    tile_dir = Path(tile_dir)
    if not 0 < label_fraction <= 1:
        raise ValueError(f"label_fraction must be in (0, 1], got {label_fraction}")
    if not 0 < splits.pretrain_fraction <= 1:
        raise ValueError(f"pretrain_fraction must be in (0, 1], got {splits.pretrain_fraction}")
    tiles = []
    if tile_dir.is_dir():
        tiles = sorted(p for p in tile_dir.iterdir() if p.is_file()
                       and p.suffix.lower() in IMAGE_SUFFIXES and not p.stem.endswith(MASK_TAG))
    if not tiles:
        raise ValueError(f"no tiles found in {tile_dir}")
    if crop_size is None:
        crop_size = read_raster(tiles[0])[0].shape[-1]

    root = tile_dir.parent
    entries = []
    for t in tiles:
        mask = mask_path_for(t)
        entries.append((_relative(t, root), None if mask is None else _relative(mask, root)))

    held_out = _test_scenes(sorted({scene_of(t) for t, _ in entries}), splits, seed)
    pool = [e for e in entries if scene_of(e[0]) not in held_out]
    test = [e for e in entries if scene_of(e[0]) in held_out and e[1] is not None]
    if splits.test_size is not None and splits.test_size < len(test):
        test = seeded_choice(test, splits.test_size, [seed, 3])
    pretrain = pool
    if splits.pretrain_fraction < 1:
        pretrain = seeded_choice(pool, subset_size(len(pool), splits.pretrain_fraction), [seed, 1])

    labeled_pool = DatasetManifest([e for e in pool if e[1] is not None], 'pretrain', crop_size,
                                   1.0, seed, source_size=len(pool), root=root)
    manifests = {
        'pretrain': DatasetManifest(pretrain, 'pretrain', crop_size, 1.0, seed, root=root),
        'finetune': finetune_split(labeled_pool, label_fraction),
        'test': DatasetManifest(test, 'test', crop_size, 1.0, seed, root=root),
        'labeled_pool': labeled_pool,
    }
    logger.info("manifests: %s", ', '.join(f'{k}={len(v)}' for k, v in manifests.items()))
    return manifests


def save_manifests(manifests, out_dir):
    """Write <name>.txt for every manifest plus a plain-text split summary."""
    out_dir = Path(out_dir)
    for name, manifest in manifests.items():
        manifest.save(out_dir / f'{name}.txt')
    lines = []
    for name, manifest in manifests.items():
        scenes = sorted({scene_of(t) for t, _ in manifest.entries})
        lines.append(f'{name}\ttiles={len(manifest)}\tsource_size={manifest.source_size}'
                     f'\tscenes={len(scenes)}\t{",".join(scenes)}')
    with open(out_dir / 'splits_stats.txt', 'w', newline='\n') as f:
        f.write('\n'.join(lines) + '\n')
