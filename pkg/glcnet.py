"""Global style and local matching contrastive pretraining.

The global module contrasts style vectors (channel-wise mean and variance of
the encoder map) of two views of each image. The local module picks regions
in one view, finds the regions with the same source centre in the other view
through the index labels, and contrasts their mean decoder features. The
total loss mixes both with weight lam.
"""
from dataclasses import dataclass, asdict, field
from pathlib import Path
import logging
import math

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader
from tqdm import tqdm

from augment import AugmentationConfig, IndexLabel, ViewPairDataset
from contrastive import ContrastiveConfig, nt_xent
from network import build_model, forward_decoder, forward_encoder, project, save_checkpoint

logger = logging.getLogger(__name__)

ABLATIONS = {
    'full': {},
    'nostyle': {'nostyle': True},
    'noglobe': {'noglobe': True},
    'nolocal': {'nolocal': True},
    'nostyle_and_nolocal': {'nostyle': True, 'nolocal': True},
}
LOSS_COLUMNS = ['epoch', 'step', 'L_G', 'L_L', 'L_total', 'lr']
REGION_STREAM = 2


class DivergenceError(RuntimeError):
    def __init__(self, epoch, step, value):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, step {step}")
        self.epoch, self.step, self.value = epoch, step, value


@dataclass
class GLCNetConfig:
    lam: float = 0.5
    temperature: float = 0.5
    include_positive_in_denominator: bool = False
    region_size: int = 48           # s_p
    regions_per_sample: int = 4     # n_p
    region_retries: int = 0         # 0 means 10 * n_p
    batch_size: int = 64
    epochs: int = 400
    lr: float = 0.01
    weight_decay: float = 0.0
    style_mode: str = 'variance'    # variance | std
    nostyle: bool = False
    noglobe: bool = False
    nolocal: bool = False
    workers: int = 0

    def problems(self, view_size=None):
        found = []
        if not 0 <= self.lam <= 1:
            found.append(f"lam must be in [0, 1], got {self.lam}")
        if not self.temperature > 0:
            found.append(f"temperature must be positive, got {self.temperature}")
        if self.regions_per_sample < 1:
            found.append(f"regions_per_sample must be >= 1, got {self.regions_per_sample}")
        if self.region_size < 1 or (view_size is not None and self.region_size > view_size):
            found.append(f"region_size {self.region_size} must be in [1, view size {view_size}]")
        if self.batch_size < 2:
            found.append(f"batch_size must be >= 2, got {self.batch_size}")
        if self.style_mode not in ('variance', 'std'):
            found.append(f"style_mode must be variance or std, got '{self.style_mode}'")
        if self.noglobe and self.nolocal:
            found.append("noglobe and nolocal together leave nothing to train")
        return found

    def validate(self, view_size=None):
        found = self.problems(view_size)
        if found:
            raise ValueError('; '.join(found))
        return self

    @property
    def method(self):
        return 'simclr' if self.nostyle and self.nolocal else 'glcnet'

    @property
    def contrastive(self):
        return ContrastiveConfig(self.temperature, self.include_positive_in_denominator)


@dataclass
class LossReport:
    epoch: int
    step: int
    L_G: float
    L_L: float
    L_total: float
    lr: float
    local_skips: int = 0


# ---------- global style module ----------

def extract_style(feature_map, mode='variance'):
    """concat(channel means, channel variances) of a (C, h, w) or (N, C, h, w) map.

    Variance uses the population divisor h * w. mode='std' takes the square
    root instead.
    """
    if feature_map.shape[-1] * feature_map.shape[-2] < 1:
        raise ValueError(f"feature map has empty spatial extent {tuple(feature_map.shape[-2:])}")
    flat = feature_map.flatten(-2)
    mean = flat.mean(-1)
    spread = flat.var(-1, unbiased=False)
    if mode == 'std':
        spread = (spread + 1e-8).sqrt()
    elif mode != 'variance':
        raise ValueError(f"unknown style mode '{mode}'")
    return torch.cat([mean, spread], dim=-1)


def global_features(feature_maps, nostyle=False, mode='variance'):
    if nostyle:
        return feature_maps.flatten(-2).mean(-1)
    return extract_style(feature_maps, mode)


def global_style_loss(maps_a, maps_b, head, cfg: GLCNetConfig):
    """NT-Xent over projected global vectors of the two views (N maps each)."""
    f_a = global_features(maps_a, cfg.nostyle, cfg.style_mode)
    f_b = global_features(maps_b, cfg.nostyle, cfg.style_mode)
    if head is not None:
        f_a, f_b = project(head, f_a), project(head, f_b)
    return nt_xent(f_a, f_b, cfg.contrastive)


# ---------- local matching module ----------

@dataclass
class LocalRegionSpec:
    center: tuple           # (row, col) in original-image coordinates
    size: int               # s_p
    rect_a: tuple           # (top, left) in view a
    rect_b: tuple           # (top, left) in view b
    drift: int = 0          # inward shift applied to rect_b
    match_distance: float = 0.0

    def rect(self, view):
        top, left = self.rect_a if view == 'a' else self.rect_b
        return top, left, self.size, self.size

    def contains_a(self, row, col):
        top, left = self.rect_a
        return top <= row < top + self.size and left <= col < left + self.size


def select_local_regions(index_a: IndexLabel, index_b: IndexLabel, s_p, n_p, rng,
                         max_retries=None, max_distance=None):
    """Up to n_p matched s_p x s_p regions between two views of one sample.

    A candidate rectangle is drawn uniformly inside view a; its centre may not
    fall inside an earlier region of view a. The view-b centre is the valid
    pixel whose stored source coordinate is nearest to that of the view-a
    centre; candidates farther than max_distance (default min(s_p/4, 1) px)
    are dropped, as are those whose view-b rectangle must shift inward by
    more than s_p/2 to fit.
    """
    (ha, wa), (hb, wb) = index_a.shape, index_b.shape
    if s_p > min(ha, wa, hb, wb):
        raise ValueError(f"region size {s_p} does not fit views {ha}x{wa} and {hb}x{wb}")
    max_retries = max_retries or 10 * n_p
    max_distance = min(s_p / 4, 1.0) if max_distance is None else max_distance
    half = s_p // 2
    source_b = index_b.coords.reshape(2, -1).T.double()
    valid_b = index_b.valid_mask.reshape(-1)

    regions = []
    for _ in range(max_retries):
        if len(regions) == n_p:
            break
        top, left = int(rng.integers(0, ha - s_p + 1)), int(rng.integers(0, wa - s_p + 1))
        row, col = top + half, left + half
        if not index_a.valid_mask[row, col] or any(r.contains_a(row, col) for r in regions):
            continue
        target = index_a.coords[:, row, col].double()
        dist = (source_b - target).pow(2).sum(1).sqrt().masked_fill(~valid_b, math.inf)
        j = int(dist.argmin())
        if dist[j] > max_distance:
            continue
        rb, cb = divmod(j, wb)
        top_b = min(max(rb - half, 0), hb - s_p)
        left_b = min(max(cb - half, 0), wb - s_p)
        drift = max(abs(top_b - (rb - half)), abs(left_b - (cb - half)))
        if drift > s_p / 2:
            continue
        regions.append(LocalRegionSpec(index_a.at(row, col), s_p, (top, left), (top_b, left_b),
                                       drift, float(dist[j])))
    if not regions:
        logger.debug("no matching local region found after %d tries", max_retries)
    return regions


def extract_local_features(decoder_map, rects):
    """Per-channel mean of decoder_map (C, H, W) over each (top, left, height, width) rect."""
    _, height, width = decoder_map.shape
    out = []
    for top, left, h, w in rects:
        if top < 0 or left < 0 or h < 1 or w < 1 or top + h > height or left + w > width:
            raise ValueError(f"rect {(top, left, h, w)} is outside the {height}x{width} map")
        out.append(decoder_map[:, top:top + h, left:left + w].mean(dim=(1, 2)))
    if not out:
        return decoder_map.new_zeros((0, decoder_map.shape[0]))
    return torch.stack(out)


def local_matching_loss(features_a, features_b, head, cfg: GLCNetConfig):
    """NT-Xent over the 2 N_L projected region features; every other region is a negative.

    With fewer than two matched pairs there are no negatives: the step
    contributes 0 and a warning is logged.
    """
    if features_a.shape[0] < 2:
        logger.warning("only %d matched region pair(s) in batch; local loss skipped", features_a.shape[0])
        return features_a.new_zeros(()) + 0 * features_a.sum()
    if head is not None:
        features_a, features_b = project(head, features_a), project(head, features_b)
    return nt_xent(features_a, features_b, cfg.contrastive)


def total_loss(l_g, l_l, lam, noglobe=False, nolocal=False):
    """lam * L_G + (1 - lam) * L_L; an ablated module drops out and the other gets weight 1."""
    if not 0 <= lam <= 1:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    if noglobe:
        return l_l
    if nolocal:
        return l_g
    return lam * l_g + (1 - lam) * l_l


# ---------- pretraining loop ----------

def build_pretrain_model(model_cfg, cfg: GLCNetConfig, seed):
    c_e = model_cfg.encoder_out_channels
    return build_model(model_cfg, seed, with_heads=True, global_input_dim=c_e if cfg.nostyle else 2 * c_e)


def batch_regions(batch, cfg: GLCNetConfig, rng):
    out = []
    for i in range(batch['view_a'].shape[0]):
        out.append(select_local_regions(
            IndexLabel(batch['index_a'][i], batch['valid_a'][i]),
            IndexLabel(batch['index_b'][i], batch['valid_b'][i]),
            cfg.region_size, cfg.regions_per_sample, rng, cfg.region_retries or None))
    return out


def pretrain_losses(model, batch, cfg: GLCNetConfig, rng):
    """(L_G, L_L, samples without a region) for one batch; disabled terms are None."""
    enc_a = forward_encoder(model, batch['view_a'])
    enc_b = forward_encoder(model, batch['view_b'])
    l_g = l_l = None
    if not cfg.noglobe:
        l_g = global_style_loss(enc_a.out, enc_b.out, model.proj_global, cfg)
    skips = 0
    if not cfg.nolocal:
        regions = batch_regions(batch, cfg, rng)
        dec_a, dec_b = forward_decoder(model, enc_a), forward_decoder(model, enc_b)
        feats_a, feats_b = [], []
        for i, found in enumerate(regions):
            skips += not found
            feats_a.append(extract_local_features(dec_a[i], [r.rect('a') for r in found]))
            feats_b.append(extract_local_features(dec_b[i], [r.rect('b') for r in found]))
        l_l = local_matching_loss(torch.cat(feats_a), torch.cat(feats_b), model.proj_local, cfg)
    return l_g, l_l, skips


@dataclass
class PretrainResult:
    checkpoint: Path
    reports: list = field(default_factory=list)
    loss_log: Path = None

    @property
    def best_loss(self):
        return min(r.L_total for r in self.reports)


def write_loss_log(reports, path):
    frame = pd.DataFrame([asdict(r) for r in reports], columns=LOSS_COLUMNS + ['local_skips'])
    frame.to_csv(path, index=False)
    return frame


def run_pretraining(manifest, model, cfg: GLCNetConfig, aug: AugmentationConfig, seed, out_dir,
                    meta=None, max_steps=None, progress=True):
    """Pretrain model on the manifest tiles; keeps the lowest-loss epoch as out_dir/pretrained.ckpt.

    One LossReport per epoch holds the epoch means of L_G, L_L and L_total.
    Random streams are split by role: view augmentation is seeded per
    (seed, epoch, sample), batch order by seed, region selection per
    (seed, epoch, step).
    """
    cfg.validate(aug.view_size)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = ViewPairDataset(manifest, aug.t1(), aug.t2(), seed)
    if len(dataset) < 2:
        raise ValueError(f"need at least 2 tiles to pretrain, manifest has {len(dataset)}")
    loader = DataLoader(dataset, batch_size=min(cfg.batch_size, len(dataset)), shuffle=True,
                        drop_last=True, num_workers=cfg.workers,
                        generator=torch.Generator().manual_seed(seed))
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=cfg.epochs)
    checkpoint, log_path = out_dir / 'pretrained.ckpt', out_dir / 'pretrain_loss.csv'
    meta = dict(meta or {}, seed=seed, method=cfg.method, glcnet=asdict(cfg))

    reports, best, step = [], math.inf, 0
    logger.info("pretraining %s on %d tiles for %d epochs", cfg.method, len(dataset), cfg.epochs)
    for epoch in tqdm(range(cfg.epochs), desc='pretrain', disable=not progress):
        dataset.set_epoch(epoch)
        model.train()
        lr = optimizer.param_groups[0]['lr']
        sums, n_steps, skips = np.zeros(3), 0, 0
        for i, batch in enumerate(loader):
            rng = np.random.default_rng([seed, REGION_STREAM, epoch, i])
            l_g, l_l, batch_skips = pretrain_losses(model, batch, cfg, rng)
            loss = total_loss(l_g, l_l, cfg.lam, cfg.noglobe, cfg.nolocal)
            if not torch.isfinite(loss):
                write_loss_log(reports, log_path)
                raise DivergenceError(epoch, step, float(loss))
            optimizer.zero_grad()
            if loss.requires_grad:
                loss.backward()
                optimizer.step()
            sums += [0.0 if l_g is None else float(l_g), 0.0 if l_l is None else float(l_l), float(loss)]
            n_steps += 1
            skips += batch_skips
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        scheduler.step()
        if n_steps == 0:
            break
        l_g_mean, l_l_mean, _ = sums / n_steps
        # epoch means keep the exact affine mix
        report = LossReport(epoch, step, l_g_mean, l_l_mean,
                            float(total_loss(l_g_mean, l_l_mean, cfg.lam, cfg.noglobe, cfg.nolocal)), lr, skips)
        reports.append(report)
        if skips:
            logger.warning("epoch %d: %d samples had no matching local region", epoch, skips)
        logger.info("epoch %d: L_G=%.4f L_L=%.4f L=%.4f lr=%.2e", epoch, report.L_G, report.L_L,
                    report.L_total, lr)
        if report.L_total < best:
            best = report.L_total
            save_checkpoint(model, checkpoint, dict(meta, epoch=epoch, loss=best))
        if max_steps is not None and step >= max_steps:
            break
    write_loss_log(reports, log_path)
    return PretrainResult(checkpoint, reports, log_path)
