#!/usr/bin/env python3
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import pandas as pd
from fire import Fire
from fire.core import FireExit

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from finetune import evaluate, finetune, write_metrics
from glcnet import ABLATIONS, build_pretrain_model, run_pretraining
from network import DECODER_GROUPS, build_model, load_checkpoint, save_checkpoint
from plots import plot_run
from run_config import ConfigError, RunDirLocked, load_config, run_lock
from synthetic import SyntheticSceneSpec, generate_synthetic_dataset, write_synthetic_dataset
from tiling import DatasetManifest, build_manifest, finetune_split, save_manifests, tile_scenes

logger = logging.getLogger('glcnet')

METHODS = {
    'glcnet': {},
    'simclr': {'nostyle': True, 'nolocal': True},
}
EVAL_GROUPS = ('encoder',) + DECODER_GROUPS + ('seg_head',)


def parse_groups(groups):
    """'encoder,decoder.1', a list, or 'none' for the from-scratch baseline."""
    if groups is None:
        return None
    if isinstance(groups, str):
        groups = [] if groups.strip().lower() in ('', 'none') else groups.split(',')
    return tuple(g.strip() for g in groups if g.strip())


class GLCNet(object):
    """Self-supervised pretraining, fine-tuning and evaluation for segmentation.

    Every command reads one config file (--config, default ./config.txt if
    present). Single values can be overridden with
    --overrides "pretrain.epochs=2;data.crop_size=64". The data root can
    also come from GLCNET_DATA_ROOT.

    Typical session:
        glcnet.py synth
        glcnet.py tile
        glcnet.py pretrain runs/a
        glcnet.py finetune runs/a
        glcnet.py evaluate runs/a
    """
    def __init__(self, config=None, overrides=None):
        super(GLCNet, self).__init__()
        if config is None and os.path.isfile('config.txt'):
            config = 'config.txt'
        self.config = load_config(config, overrides)
        logging.basicConfig(level=self.config.run.loglevel.upper(),
                            format='%(asctime)s %(levelname)s %(name)s: %(message)s')

    @property
    def data_root(self):
        return Path(self.config.data.data_root)

    @property
    def progress(self):
        return self.config.run.progress

    def _manifest(self, name):
        path = self.data_root / f'{name}.txt'
        if not path.is_file():
            raise ValueError(f"no {name} manifest at {path}; run the tile command first")
        return DatasetManifest.load(path)

    def synth(self, n_scenes=4, scene_size=512):
        """Write a labeled synthetic dataset to <data_root>/scenes."""
        data = self.config.data
        spec = SyntheticSceneSpec(num_classes=data.num_classes, scene_size=scene_size,
                                  seed=self.config.run.seed, channels=data.channels)
        out = self.data_root / 'scenes'
        with run_lock(self.data_root):
            self.config.write_snapshot(self.data_root)
            write_synthetic_dataset(generate_synthetic_dataset(spec, n_scenes), out, data.num_classes)
        print(f'wrote {n_scenes} scenes to {out}')

    def tile(self, scene_dir=None):
        """Tile the scenes and write pretrain / finetune / test manifests under data_root."""
        data = self.config.data
        scene_dir = Path(scene_dir) if scene_dir else self.data_root / 'scenes'
        with run_lock(self.data_root):
            self.config.write_snapshot(self.data_root)
            written = tile_scenes(scene_dir, data.tile_dir, data.crop_size, data.stride or None,
                                  self.config.run.workers, data.num_classes)
            manifests = build_manifest(data.tile_dir, data.split_spec(), data.label_fraction,
                                       self.config.run.seed, data.crop_size)
            save_manifests(manifests, self.data_root)
        counts = ', '.join(f'{k}={len(v)}' for k, v in manifests.items())
        print(f'wrote {len(written)} tiles to {data.tile_dir} ({counts})')

    def _pretrain(self, config, out_dir, max_steps=None):
        config.write_snapshot(out_dir)
        model = build_pretrain_model(config.model_config(), config.pretrain, config.run.seed)
        return run_pretraining(self._manifest('pretrain'), model, config.pretrain, config.augmentation,
                               config.run.seed, out_dir, meta={'config_hash': config.config_hash},
                               max_steps=max_steps, progress=self.progress)

    def pretrain(self, run_dir, method='glcnet', max_steps=None):
        """Pretrain into <run_dir>/pretrain. --method simclr drops the style and local terms."""
        if method not in METHODS:
            raise ValueError(f"unknown method '{method}', expected one of {list(METHODS)}")
        config = self.config.with_pretrain(**METHODS[method])
        problems = config.pretrain.problems(config.augmentation.view_size)
        if problems:
            raise ConfigError(problems)
        with run_lock(run_dir):
            result = self._pretrain(config, Path(run_dir) / 'pretrain', max_steps)
        print(f'pretrained {method}: best loss {result.best_loss:.4f}, wrote {result.checkpoint}')

    def _finetune(self, config, run_dir, pretrained=None):
        out = Path(run_dir) / 'finetune'
        config.write_snapshot(out)
        schedule = config.finetune
        if pretrained is None and schedule.load_groups:
            pretrained = Path(run_dir) / 'pretrain' / 'pretrained.ckpt'
        if pretrained is not None and not Path(pretrained).is_file():
            raise ValueError(f"pretrained bundle {pretrained} not found")
        manifest = finetune_split(self._manifest('labeled_pool'), config.data.label_fraction)
        model = build_model(config.model_config(), config.run.seed)
        result = finetune(model, pretrained, schedule.load_groups, manifest, schedule,
                          config.run.seed, self.progress)
        meta = dict(result.meta, config_hash=config.config_hash,
                    pretrained=None if pretrained is None else str(Path(pretrained).resolve()))
        save_checkpoint(result.model, out / 'model.ckpt', meta)
        result.log.to_csv(out / 'log.csv', index=False)
        with open(out / 'meta.json', 'w', newline='\n') as f:
            json.dump(meta, f, indent=2, sort_keys=True)
        return result

    def finetune(self, run_dir, load_groups=None, label_fraction=None, pretrained=None):
        """Fine-tune into <run_dir>/finetune.

        --load-groups encoder,decoder.1,decoder.2 picks what comes from the
        pretrained bundle (none: random init). --label-fraction re-draws the
        labeled subset from the full training pool. --pretrained takes a
        bundle from any other run.
        """
        config = self.config
        if load_groups is not None:
            config = replace(config, finetune=replace(config.finetune, load_groups=parse_groups(load_groups)))
        if label_fraction is not None:
            config = replace(config, data=replace(config.data, label_fraction=float(label_fraction)))
        problems = config.problems()
        if problems:
            raise ConfigError(problems)
        with run_lock(run_dir):
            result = self._finetune(config, run_dir, pretrained)
        print(f"fine-tuned on {result.meta['finetune_tiles']} tiles, final loss {result.log['loss'].iloc[-1]:.4f}")

    def _evaluate(self, config, run_dir, checkpoint=None):
        out = Path(run_dir) / 'eval'
        config.write_snapshot(out)
        checkpoint = checkpoint or Path(run_dir) / 'finetune' / 'model.ckpt'
        model = build_model(config.model_config(), config.run.seed)
        meta = load_checkpoint(checkpoint, model, EVAL_GROUPS)
        _, report = evaluate(model, self._manifest('test'), config.data.num_classes,
                             config.finetune.batch_size, config.finetune.ignore_classes,
                             config.run.workers, self.progress)
        write_metrics(report, out, list(config.data.class_names) or None,
                      extra={'config_hash': config.config_hash, 'checkpoint': Path(checkpoint).name,
                             'finetune_tiles': meta.get('finetune_tiles')})
        return report

    def evaluate(self, run_dir, checkpoint=None):
        """Score <run_dir>/finetune/model.ckpt (or --checkpoint) on the test manifest."""
        with run_lock(run_dir):
            report = self._evaluate(self.config, run_dir, checkpoint)
        print(f'OA {report.oa:.4f}  Kappa {report.kappa:.4f}  macro F1 {report.macro_f1:.4f}')

    def ablate(self, run_dir, configs=None, max_steps=None):
        """Pretrain, fine-tune and evaluate every ablation; writes <run_dir>/ablation.csv."""
        names = list(ABLATIONS) if configs is None else parse_groups(configs)
        unknown = set(names) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablations {sorted(unknown)}, expected some of {list(ABLATIONS)}")
        rows = []
        with run_lock(run_dir):
            for name in names:
                config = self.config.with_pretrain(**ABLATIONS[name])
                sub = Path(run_dir) / name
                logger.info("ablation %s", name)
                pretrained = self._pretrain(config, sub / 'pretrain', max_steps)
                self._finetune(config, sub)
                report = self._evaluate(config, sub)
                rows.append({'config': name, 'method': config.pretrain.method,
                             'config_hash': config.config_hash, 'pretrain_loss': pretrained.best_loss,
                             'oa': report.oa, 'kappa': report.kappa, 'macro_f1': report.macro_f1,
                             **{f'f1_{k}': f for k, f in enumerate(report.f1_per_class)}})
            table = pd.DataFrame(rows)
            table.to_csv(Path(run_dir) / 'ablation.csv', index=False)
        print(table[['config', 'oa', 'kappa', 'macro_f1']].to_string(index=False))

    def plot(self, run_dir):
        """Loss curves and per-class F1 bars from the CSVs under run_dir."""
        written = plot_run(run_dir)
        print(f'wrote {len(written)} plots to {Path(run_dir) / "plots"}')

    def show_config(self):
        """Print the resolved config and its hash."""
        print(self.config.render())
        print(f'# config_hash = {self.config.config_hash}')


def main(argv=None):
    try:
        Fire(GLCNet, command=argv)
    except FireExit as e:
        # usage errors exit 2 inside fire; --help exits 0
        return 1 if e.code == 2 else e.code
    except ConfigError as e:
        for problem in e.problems:
            print(f'error: {problem}', file=sys.stderr)
        return 1
    except (ValueError, RunDirLocked) as e:
        print(f'error: {e}', file=sys.stderr)
        return 1
    except Exception:
        logger.exception('internal error')
        return 2
    return 0


if __name__ == '__main__':
    sys.exit(main())
