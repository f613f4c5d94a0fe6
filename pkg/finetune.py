"""Supervised fine-tuning on a labeled fraction, and OA / Kappa / F1 evaluation."""
from dataclasses import dataclass, field
from pathlib import Path
import logging

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from augment import to_tensor
from network import load_checkpoint
from tiling import read_raster

logger = logging.getLogger(__name__)


@dataclass
class FinetuneSchedule:
    epochs: int = 150
    batch_size: int = 16
    lr: float = 0.001
    gamma: float = 0.98         # per-epoch multiplicative decay
    load_groups: tuple = ('encoder',)
    ignore_classes: tuple = ()
    workers: int = 0

    def problems(self):
        found = []
        if self.epochs < 1:
            found.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            found.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            found.append(f"lr must be positive, got {self.lr}")
        if not 0 < self.gamma <= 1:
            found.append(f"gamma must be in (0, 1], got {self.gamma}")
        return found

    def lr_at(self, epoch):
        return self.lr * self.gamma ** epoch


class SegmentationDataset(Dataset):
    def __init__(self, manifest):
        self.entries = manifest.paths()
        missing = [str(t) for t, m in self.entries if m is None]
        if missing:
            raise ValueError(f"{len(missing)} tiles have no mask, e.g. {missing[0]}")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        tile, mask = self.entries[i]
        return to_tensor(read_raster(tile)[0]), torch.from_numpy(read_raster(mask)[0][0].astype(np.int64))


@dataclass
class FinetuneResult:
    model: torch.nn.Module
    log: pd.DataFrame
    meta: dict = field(default_factory=dict)


def finetune(model, pretrain_bundle, load_groups, manifest, schedule: FinetuneSchedule, seed, progress=True):
    """Train model (freshly initialised from the fine-tune seed) with per-pixel cross-entropy.

    Only load_groups come from pretrain_bundle; an empty set is the
    from-scratch baseline. Every parameter is trained afterwards and the
    final-epoch model is returned.
    """
    load_groups = tuple(load_groups or ())
    if load_groups and pretrain_bundle is None:
        raise ValueError(f"groups {list(load_groups)} requested but no pretrained bundle given")
    if len(manifest) == 0:
        raise ValueError("fine-tune manifest is empty")
    pretrain_meta = {}
    if load_groups:
        pretrain_meta = load_checkpoint(pretrain_bundle, model, load_groups)

    dataset = SegmentationDataset(manifest)
    loader = DataLoader(dataset, batch_size=schedule.batch_size, shuffle=True, num_workers=schedule.workers,
                        generator=torch.Generator().manual_seed(seed))
    optimizer = torch.optim.Adam(model.parameters(), lr=schedule.lr)
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=schedule.gamma)

    rows = []
    logger.info("fine-tuning on %d tiles for %d epochs, loaded groups %s",
                len(dataset), schedule.epochs, list(load_groups) or 'none')
    for epoch in tqdm(range(schedule.epochs), desc='finetune', disable=not progress):
        model.train()
        lr = optimizer.param_groups[0]['lr']
        total, pixels = 0.0, 0
        for images, masks in loader:
            loss = F.cross_entropy(model(images), masks)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * masks.numel()
            pixels += masks.numel()
        scheduler.step()
        rows.append({'epoch': epoch, 'loss': total / pixels, 'lr': lr})
        logger.debug("finetune epoch %d: loss=%.4f lr=%.2e", epoch, rows[-1]['loss'], lr)
    meta = {'load_groups': list(load_groups), 'finetune_tiles': len(dataset), 'seed': seed,
            'label_fraction': manifest.label_fraction, 'source_size': manifest.source_size,
            'pretrain_meta': {k: pretrain_meta[k] for k in ('epoch', 'loss', 'method', 'config_hash')
                              if k in pretrain_meta}}
    return FinetuneResult(model, pd.DataFrame(rows, columns=['epoch', 'loss', 'lr']), meta)


# ---------- metrics ----------

@dataclass
class ConfusionMatrix:
    """Rows are actual classes, columns predicted classes."""
    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes):
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def update(self, actual, predicted):
        actual = np.asarray(actual).ravel().astype(np.int64)
        predicted = np.asarray(predicted).ravel().astype(np.int64)
        c = self.num_classes
        for name, ids in (('actual', actual), ('predicted', predicted)):
            bad = ids[(ids < 0) | (ids >= c)]
            if len(bad):
                raise ValueError(f"{name} class ids {np.unique(bad).tolist()} outside [0, {c})")
        self.counts += np.bincount(c * actual + predicted, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)


@dataclass
class MetricReport:
    oa: float
    kappa: float
    f1_per_class: np.ndarray
    precision_per_class: np.ndarray
    recall_per_class: np.ndarray
    support_per_class: np.ndarray
    macro_f1: float

    def frame(self, class_names=None):
        """One row per class and a final summary row."""
        n = len(self.f1_per_class)
        names = class_names or [str(k) for k in range(n)]
        rows = [{'class': names[k], 'support': int(self.support_per_class[k]),
                 'precision': self.precision_per_class[k], 'recall': self.recall_per_class[k],
                 'f1': self.f1_per_class[k], 'oa': np.nan, 'kappa': np.nan} for k in range(n)]
        rows.append({'class': 'all', 'support': int(self.support_per_class.sum()), 'precision': np.nan,
                     'recall': np.nan, 'f1': self.macro_f1, 'oa': self.oa, 'kappa': self.kappa})
        return pd.DataFrame(rows)


def _ratio(num, den, empty):
    return np.where(den > 0, num / np.where(den > 0, den, 1), empty)


def metrics_from_confusion(cm: ConfusionMatrix, ignore_classes=()):
    """OA = TP / N, Kappa = (OA - p_e) / (1 - p_e) with p_e = sum_c a_c b_c / N^2, one-vs-rest F1.

    Pixels whose actual class is ignored are dropped. A class with neither
    actual nor predicted pixels scores 1 on F1, precision and recall; one
    never predicted gets precision 0.
    """
    counts = cm.counts.astype(np.float64).copy()
    for k in ignore_classes:
        counts[k, :] = 0
    n = counts.sum()
    if n == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(counts)
    actual = counts.sum(1)
    predicted = counts.sum(0)
    oa = tp.sum() / n
    p_e = (actual * predicted).sum() / n ** 2
    kappa = 1.0 if p_e == 1 else (oa - p_e) / (1 - p_e)
    vacuous = (actual + predicted == 0).astype(np.float64)
    precision = _ratio(tp, predicted, vacuous)
    recall = _ratio(tp, actual, vacuous)
    f1 = _ratio(2 * tp, actual + predicted, 1.0)
    keep = [k for k in range(cm.num_classes) if k not in set(ignore_classes)]
    return MetricReport(float(oa), float(kappa), f1, precision, recall, actual.astype(np.int64),
                        float(f1[keep].mean()))


@torch.no_grad()
def evaluate(model, manifest, num_classes, batch_size=16, ignore_classes=(), workers=0, progress=True):
    if len(manifest) == 0:
        raise ValueError("test manifest is empty")
    model.eval()
    cm = ConfusionMatrix.empty(num_classes)
    loader = DataLoader(SegmentationDataset(manifest), batch_size=batch_size, num_workers=workers)
    for images, masks in tqdm(loader, desc='evaluate', disable=not progress):
        cm.update(masks.numpy(), model(images).argmax(1).numpy())
    report = metrics_from_confusion(cm, ignore_classes)
    logger.info("evaluated %d pixels: OA=%.4f Kappa=%.4f", cm.total, report.oa, report.kappa)
    return cm, report


def write_metrics(report: MetricReport, out_dir, class_names=None, extra=None):
    """metrics.csv (per class plus summary) and summary.txt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.frame(class_names).to_csv(out_dir / 'metrics.csv', index=False)
    lines = [f'OA\t{report.oa:.6f}', f'Kappa\t{report.kappa:.6f}', f'macro_F1\t{report.macro_f1:.6f}']
    lines += [f'{k}\t{v}' for k, v in (extra or {}).items()]
    with open(out_dir / 'summary.txt', 'w', newline='\n') as f:
        f.write('\n'.join(lines) + '\n')
