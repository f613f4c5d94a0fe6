"""One INI file per run: defaults < file < environment < command-line overrides."""
from configparser import ConfigParser
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
import hashlib
import logging
import os

from augment import AugmentationConfig
from finetune import FinetuneSchedule
from glcnet import GLCNetConfig
from network import GROUPS, ModelConfig
from tiling import SplitSpec

logger = logging.getLogger(__name__)

ENV_OVERRIDES = {
    'GLCNET_DATA_ROOT': ('data', 'data_root'),
}
# set from [data] so the network always matches the tiles
DERIVED_MODEL_KEYS = ('in_channels', 'num_classes')
# element types of tuple keys whose default is empty
TUPLE_ITEMS = {
    ('data', 'class_names'): str,
    ('finetune', 'ignore_classes'): int,
}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__('\n'.join(self.problems))


class RunDirLocked(RuntimeError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    loglevel: str = 'INFO'
    progress: bool = True
    workers: int = 0


@dataclass
class DataConfig:
    data_root: str = 'data'
    crop_size: int = 256
    stride: int = 0                 # 0 means stride = crop_size
    channels: int = 3
    num_classes: int = 6
    class_names: tuple = ()
    label_fraction: float = 0.01
    test_fraction: float = 0.3
    test_size: int = 0              # 0 keeps every test tile
    pretrain_fraction: float = 1.0

    def problems(self):
        found = []
        if self.crop_size < 1:
            found.append(f"data.crop_size must be positive, got {self.crop_size}")
        if self.channels not in (3, 4):
            found.append(f"data.channels must be 3 or 4, got {self.channels}")
        if self.class_names and len(self.class_names) != self.num_classes:
            found.append(f"data.class_names has {len(self.class_names)} names for {self.num_classes} classes")
        for name in ('label_fraction', 'pretrain_fraction'):
            value = getattr(self, name)
            if not 0 < value <= 1:
                found.append(f"data.{name} must be in (0, 1], got {value}")
        if not 0 <= self.test_fraction < 1:
            found.append(f"data.test_fraction must be in [0, 1), got {self.test_fraction}")
        return found

    def split_spec(self):
        return SplitSpec(test_fraction=self.test_fraction, test_size=self.test_size or None,
                         pretrain_fraction=self.pretrain_fraction)

    @property
    def tile_dir(self):
        return Path(self.data_root) / 'tiles'


SECTIONS = {
    'run': RunSection,
    'data': DataConfig,
    'model': ModelConfig,
    'augmentation': AugmentationConfig,
    'pretrain': GLCNetConfig,
    'finetune': FinetuneSchedule,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    pretrain: GLCNetConfig = field(default_factory=GLCNetConfig)
    finetune: FinetuneSchedule = field(default_factory=FinetuneSchedule)

    def model_config(self):
        return replace(self.model, in_channels=self.data.channels, num_classes=self.data.num_classes)

    def with_pretrain(self, **changes):
        return replace(self, pretrain=replace(self.pretrain, **changes))

    def problems(self):
        found = self.data.problems()
        found += [f"pretrain: {p}" for p in self.pretrain.problems(self.augmentation.view_size)]
        found += [f"finetune: {p}" for p in self.finetune.problems()]
        unknown = set(self.finetune.load_groups) - set(GROUPS)
        if unknown:
            found.append(f"finetune.load_groups has unknown groups {sorted(unknown)}")
        stride = self.model.output_stride
        if self.augmentation.view_size % stride:
            found.append(f"augmentation.view_size {self.augmentation.view_size} is not a multiple "
                         f"of the encoder output stride {stride}")
        if len(self.augmentation.rgb_bands) != 3 or max(self.augmentation.rgb_bands) >= self.data.channels:
            found.append(f"augmentation.rgb_bands {self.augmentation.rgb_bands} must name 3 of the {self.data.channels} bands")
        return found

    def render(self):
        """Canonical INI text: fixed section order, keys sorted."""
        lines = []
        for section in SECTIONS:
            lines.append(f'[{section}]')
            values = getattr(self, section)
            for f in sorted(fields(values), key=lambda f: f.name):
                if section == 'model' and f.name in DERIVED_MODEL_KEYS:
                    continue
                lines.append(f'{f.name} = {render_value(getattr(values, f.name))}')
            lines.append('')
        return '\n'.join(lines)

    @property
    def config_hash(self):
        return hashlib.sha256(self.render().encode()).hexdigest()

    def write_snapshot(self, run_dir):
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / 'config.txt', 'w', newline='\n') as f:
            f.write(self.render())
        return run_dir / 'config.txt'


def render_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ', '.join(render_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(text, default, item=None):
    text = text.strip()
    if isinstance(default, bool):
        lowered = text.lower()
        if lowered in ('1', 'true', 'yes', 'on'):
            return True
        if lowered in ('0', 'false', 'no', 'off'):
            return False
        raise ValueError(f"not a boolean: '{text}'")
    if isinstance(default, tuple):
        item = item or (type(default[0]) if default else int)
        return tuple(item(part.strip()) for part in text.split(',') if part.strip())
    if isinstance(default, (int, float)):
        return type(default)(text)
    return text


def _apply(config, section, key, text, problems, source):
    if section not in SECTIONS:
        problems.append(f"{source}: unknown section [{section}]")
        return
    values = getattr(config, section)
    names = {f.name for f in fields(values)}
    if key not in names or (section == 'model' and key in DERIVED_MODEL_KEYS):
        problems.append(f"{source}: unknown key '{key}' in [{section}]")
        return
    try:
        setattr(values, key, parse_value(str(text), getattr(values, key), TUPLE_ITEMS.get((section, key))))
    except ValueError as e:
        problems.append(f"{source}: bad value for {section}.{key}: {e}")


def parse_overrides(overrides):
    """'section.key=value' items, given as a list or a ';'-separated string."""
    if not overrides:
        return []
    if isinstance(overrides, str):
        overrides = overrides.split(';')
    out = []
    for item in overrides:
        item = str(item).strip()
        if not item:
            continue
        dotted, sep, value = item.partition('=')
        section, dot, key = dotted.strip().partition('.')
        if not sep or not dot:
            raise ConfigError([f"override '{item}' is not of the form section.key=value"])
        out.append((section, key, value))
    return out


def load_config(path=None, overrides=None, environ=None):
    """Resolve a RunConfig, raising one ConfigError that lists every problem found."""
    config = RunConfig()
    problems = []
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"config file {path} not found"])
        parser = ConfigParser()
        parser.read(path)
        for section in parser.sections():
            for key, text in parser[section].items():
                _apply(config, section, key, text, problems, str(path))
    environ = os.environ if environ is None else environ
    for var, (section, key) in ENV_OVERRIDES.items():
        if var in environ:
            logger.debug("%s sets %s.%s", var, section, key)
            _apply(config, section, key, environ[var], problems, var)
    for section, key, value in parse_overrides(overrides):
        _apply(config, section, key, value, problems, 'override')
    try:
        # rerun the dataclass checks on the parsed values
        config.model = replace(config.model)
    except ValueError as e:
        problems.append(f"model: {e}")
    problems += config.problems()
    if problems:
        raise ConfigError(problems)
    return config


@contextmanager
def run_lock(run_dir):
    """Exclusive use of run_dir while the block runs."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / '.lock'
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunDirLocked(f"{run_dir} is in use by another run (remove {lock} if that run is gone)")
    with os.fdopen(fd, 'w') as f:
        f.write(str(os.getpid()))
    try:
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)
