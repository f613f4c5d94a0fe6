"""Static figures from the CSVs a run leaves behind."""
from pathlib import Path
import logging

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import pandas as pd

logger = logging.getLogger(__name__)


def plot_losses(pretrain_log, finetune_log, path):
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    if pretrain_log is not None:
        for column in ('L_G', 'L_L', 'L_total'):
            axes[0].plot(pretrain_log['epoch'], pretrain_log[column], label=column)
        axes[0].legend()
    axes[0].set(title='pretraining', xlabel='epoch', ylabel='loss')
    if finetune_log is not None:
        axes[1].plot(finetune_log['epoch'], finetune_log['loss'])
    axes[1].set(title='fine-tuning', xlabel='epoch', ylabel='cross-entropy')
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_class_f1(frames, path):
    """frames: {label: metrics.csv frame}; one group of bars per class."""
    labels = list(frames)
    classes = [c for c in next(iter(frames.values()))['class'] if c != 'all']
    width = 0.8 / len(labels)
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(classes) * max(1, len(labels) / 2)), 4))
    for j, label in enumerate(labels):
        per_class = frames[label].set_index('class').loc[classes, 'f1']
        ax.bar([k + j * width for k in range(len(classes))], per_class.values, width, label=label)
    ax.set_xticks([k + 0.4 - width / 2 for k in range(len(classes))])
    ax.set_xticklabels(classes)
    ax.set(ylim=(0, 1), ylabel='F1')
    ax.legend(fontsize='small')
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _read(path):
    return pd.read_csv(path) if path.is_file() else None


def plot_run(run_dir):
    """Write run_dir/plots/*.png for the run and, if present, each ablation sub-run."""
    run_dir = Path(run_dir)
    out = run_dir / 'plots'
    runs = {'': run_dir}
    ablation = _read(run_dir / 'ablation.csv')
    if ablation is not None:
        runs = {name: run_dir / name for name in ablation['config']}
    written, metrics = [], {}
    for name, sub in runs.items():
        pretrain_log = _read(sub / 'pretrain' / 'pretrain_loss.csv')
        finetune_log = _read(sub / 'finetune' / 'log.csv')
        if pretrain_log is not None or finetune_log is not None:
            out.mkdir(parents=True, exist_ok=True)
            path = out / (f'{name}_losses.png' if name else 'losses.png')
            plot_losses(pretrain_log, finetune_log, path)
            written.append(path)
        frame = _read(sub / 'eval' / 'metrics.csv')
        if frame is not None:
            frame['class'] = frame['class'].astype(str)
            metrics[name or run_dir.name] = frame
    if metrics:
        out.mkdir(parents=True, exist_ok=True)
        path = out / 'class_f1.png'
        plot_class_f1(metrics, path)
        written.append(path)
    if not written:
        raise ValueError(f"nothing to plot under {run_dir}")
    logger.info("wrote %d plots to %s", len(written), out)
    return written
