"""Encoder-decoder segmentation network, projection heads and checkpoint bundles.

Parameters are addressed by group: encoder, decoder.1, decoder.2, decoder.3,
seg_head, proj_global, proj_local. Groups are also the unit of partial
loading when fine-tuning from a pretrained bundle.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple
import hashlib
import json
import logging
import os
import struct
import tempfile

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

logger = logging.getLogger(__name__)

GROUPS = ('encoder', 'decoder.1', 'decoder.2', 'decoder.3', 'seg_head', 'proj_global', 'proj_local')
DECODER_GROUPS = ('decoder.1', 'decoder.2', 'decoder.3')
MAGIC = b'GLCNETCK'
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    arch: str = 'resnet50'          # resnet50 | small
    in_channels: int = 3
    num_classes: int = 6
    encoder_channels: int = 64      # small arch only; resnet50 is fixed at 2048
    downsamples: int = 3            # small arch only; output stride = 2 ** downsamples
    decoder_channels: int = 256
    proj_dim: int = 128

    def __post_init__(self):
        if self.arch not in ('resnet50', 'small'):
            raise ValueError(f"unknown arch '{self.arch}', expected resnet50 or small")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ValueError(f"need in_channels >= 1 and num_classes >= 2, "
                             f"got {self.in_channels} and {self.num_classes}")
        if not 1 <= self.downsamples <= 4:
            raise ValueError(f"downsamples must be in [1, 4], got {self.downsamples}")

    @property
    def encoder_out_channels(self):
        return self.encoder_channels if self.arch == 'small' else 2048

    @property
    def output_stride(self):
        return 2 ** self.downsamples if self.arch == 'small' else 16


class EncoderOutput(NamedTuple):
    out: torch.Tensor           # (N, C_e, H/s, W/s)
    low_level: torch.Tensor     # early, higher-resolution features for the decoder
    input_size: tuple


def conv_bn_relu(c_in, c_out, kernel=3, stride=1, dilation=1):
    padding = dilation * (kernel // 2)
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=padding, dilation=dilation, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class SmallEncoder(nn.Module):
    """Four conv blocks; the last `downsamples` of them halve the resolution."""
    first_conv = 'blocks.0.0.weight'

    def __init__(self, in_channels, channels=64, downsamples=3):
        super().__init__()
        widths = [max(channels // 4, 4), max(channels // 2, 4), max(channels // 2, 4), channels]
        strides = [2 if i >= 4 - downsamples else 1 for i in range(4)]
        blocks, c_in = [], in_channels
        for width, stride in zip(widths, strides):
            blocks.append(conv_bn_relu(c_in, width, stride=stride))
            c_in = width
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = channels
        self.low_level_channels = widths[1]
        self.output_stride = 2 ** downsamples

    def forward(self, x):
        low = None
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i == 1:
                low = x
        return x, low


class ResNetEncoder(nn.Module):
    """torchvision ResNet-50 at output stride 16 (last stage dilated)."""
    first_conv = 'net.conv1.weight'

    def __init__(self, in_channels):
        super().__init__()
        net = torchvision.models.resnet50(weights=None, replace_stride_with_dilation=[False, False, True])
        if in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
        net.fc = nn.Identity()
        self.net = net
        self.out_channels = 2048
        self.low_level_channels = 256
        self.output_stride = 16

    def forward(self, x):
        n = self.net
        x = n.maxpool(n.relu(n.bn1(n.conv1(x))))
        low = n.layer1(x)
        x = n.layer4(n.layer3(n.layer2(low)))
        return x, low


class ContextStage(nn.Module):
    """decoder.1: parallel dilated branches plus image pooling over the deep features."""

    def __init__(self, c_in, c_out, rates=(1, 2, 3)):
        super().__init__()
        self.branches = nn.ModuleList(
            [conv_bn_relu(c_in, c_out, kernel=1)] +
            [conv_bn_relu(c_in, c_out, dilation=r) for r in rates[1:]])
        # no batch norm on a 1x1 map
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(c_in, c_out, 1), nn.ReLU(inplace=True))
        self.project = conv_bn_relu(c_out * (len(self.branches) + 1), c_out, kernel=1)

    def forward(self, x):
        pooled = self.pool(x).expand(-1, -1, *x.shape[-2:])
        return self.project(torch.cat([b(x) for b in self.branches] + [pooled], dim=1))


class FusionStage(nn.Module):
    """decoder.2: upsample the context features and fuse them with the low-level ones."""

    def __init__(self, c_low, c_out):
        super().__init__()
        c_skip = max(c_out // 4, 8)
        self.skip = conv_bn_relu(c_low, c_skip, kernel=1)
        self.fuse = conv_bn_relu(c_out + c_skip, c_out)

    def forward(self, x, low):
        x = F.interpolate(x, size=low.shape[-2:], mode='bilinear', align_corners=False)
        return self.fuse(torch.cat([x, self.skip(low)], dim=1))


class RefineStage(nn.Module):
    """decoder.3: last refinement conv, then upsampling to input resolution."""

    def __init__(self, c):
        super().__init__()
        self.refine = conv_bn_relu(c, c)

    def forward(self, x, size):
        return F.interpolate(self.refine(x), size=size, mode='bilinear', align_corners=False)


class ProjectionHead(nn.Module):
    """affine -> ReLU -> affine."""

    def __init__(self, input_dim, hidden_dim=None, output_dim=128):
        super().__init__()
        hidden_dim = hidden_dim or input_dim
        self.fc1 = nn.Linear(input_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, output_dim)
        self.input_dim, self.hidden_dim, self.output_dim = input_dim, hidden_dim, output_dim

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class SegmentationNet(nn.Module):
    def __init__(self, cfg: ModelConfig, with_heads=False, global_input_dim=None):
        super().__init__()
        self.cfg = cfg
        if cfg.arch == 'small':
            self.encoder = SmallEncoder(cfg.in_channels, cfg.encoder_channels, cfg.downsamples)
        else:
            self.encoder = ResNetEncoder(cfg.in_channels)
        c_e, c_d = self.encoder.out_channels, cfg.decoder_channels
        rates = (1, 2, 3) if cfg.arch == 'small' else (1, 6, 12, 18)
        self.decoder = nn.ModuleDict({
            '1': ContextStage(c_e, c_d, rates),
            '2': FusionStage(self.encoder.low_level_channels, c_d),
            '3': RefineStage(c_d),
        })
        self.seg_head = nn.Conv2d(c_d, cfg.num_classes, 1)
        if with_heads:
            # the global head sees style vectors (2 C_e) unless told otherwise
            self.proj_global = ProjectionHead(global_input_dim or 2 * c_e, output_dim=cfg.proj_dim)
            self.proj_local = ProjectionHead(c_d, output_dim=cfg.proj_dim)

    @property
    def output_stride(self):
        return self.encoder.output_stride

    def forward(self, x):
        return self.seg_head(forward_decoder(self, forward_encoder(self, x)))


def forward_encoder(model: SegmentationNet, images):
    n, c, h, w = images.shape
    if c != model.cfg.in_channels:
        raise ValueError(f"model expects {model.cfg.in_channels} bands, got {c}")
    s = model.output_stride
    if h % s or w % s:
        raise ValueError(f"input {h}x{w} is not divisible by the output stride {s}")
    out, low = model.encoder(images)
    return EncoderOutput(out, low, (h, w))


def forward_decoder(model: SegmentationNet, features: EncoderOutput):
    if features.out.shape[1] != model.encoder.out_channels:
        raise ValueError(f"decoder expects {model.encoder.out_channels} encoder channels, "
                         f"got {features.out.shape[1]}")
    x = model.decoder['1'](features.out)
    x = model.decoder['2'](x, features.low_level)
    return model.decoder['3'](x, features.input_size)


def project(head: ProjectionHead, features):
    if features.shape[-1] != head.input_dim:
        raise ValueError(f"projection head expects {head.input_dim} features, got {features.shape[-1]}")
    return head(features)


def build_model(cfg: ModelConfig, seed, with_heads=False, global_input_dim=None):
    """Fresh model whose initial weights depend only on (cfg, seed)."""
    torch.manual_seed(seed)
    return SegmentationNet(cfg, with_heads, global_input_dim)


def group_of(name):
    for group in GROUPS:
        if name.startswith(group + '.'):
            return group
    raise ValueError(f"tensor '{name}' belongs to no parameter group")


def parameter_groups(model):
    """state_dict split by group; batch-norm buffers travel with their layers."""
    groups = {}
    for name, tensor in model.state_dict().items():
        groups.setdefault(group_of(name), {})[name] = tensor
    return groups


def group_gradients(model):
    """Largest absolute gradient per group; parameters without a gradient count as 0."""
    out = {}
    for name, param in model.named_parameters():
        group = group_of(name)
        value = 0.0 if param.grad is None else float(param.grad.abs().max())
        out[group] = max(out.get(group, 0.0), value)
    return out


# ---------- checkpoint container ----------
#
# MAGIC (8 bytes) | version (uint32 LE) | header length (uint64 LE) |
# header JSON (utf-8, sorted keys) | sha256 of header (32 bytes) | tensor blob
#
# The header lists meta and, per tensor: group, name, dtype (numpy str,
# little-endian), shape, offset and nbytes into the blob, sha256 of its bytes.

@dataclass
class CheckpointBundle:
    groups: dict    # group -> {tensor name -> tensor}
    meta: dict

    def tensors(self):
        return {name: t for group in self.groups.values() for name, t in group.items()}


def _to_numpy(tensor):
    array = tensor.detach().cpu().contiguous().numpy()
    return array.astype(array.dtype.newbyteorder('<'), copy=False)


def save_checkpoint(model, path, meta):
    """Write atomically: a temp file in the same directory is renamed into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records, blobs, offset = [], [], 0
    groups = parameter_groups(model)
    for group in GROUPS:
        for name, tensor in groups.get(group, {}).items():
            raw = _to_numpy(tensor).tobytes()
            records.append({'group': group, 'name': name, 'dtype': _to_numpy(tensor).dtype.str,
                            'shape': list(tensor.shape), 'offset': offset, 'nbytes': len(raw),
                            'sha256': hashlib.sha256(raw).hexdigest()})
            blobs.append(raw)
            offset += len(raw)
    header = json.dumps({'meta': meta, 'groups': [g for g in GROUPS if g in groups], 'tensors': records},
                        sort_keys=True).encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(MAGIC + struct.pack('<IQ', FORMAT_VERSION, len(header)))
            f.write(header)
            f.write(hashlib.sha256(header).digest())
            for raw in blobs:
                f.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return path


def read_checkpoint(path):
    path = Path(path)
    with open(path, 'rb') as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint bundle")
    if len(data) < 20:
        raise CheckpointError(f"{path}: truncated after {len(data)} bytes")
    version, header_len = struct.unpack('<IQ', data[8:20])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = data[20:20 + header_len]
    digest = data[20 + header_len:52 + header_len]
    if hashlib.sha256(header).digest() != digest:
        raise CheckpointError(f"{path}: header checksum mismatch")
    header = json.loads(header)
    blob = memoryview(data)[52 + header_len:]
    groups = {g: {} for g in header['groups']}
    for rec in header['tensors']:
        raw = bytes(blob[rec['offset']:rec['offset'] + rec['nbytes']])
        if len(raw) != rec['nbytes'] or hashlib.sha256(raw).hexdigest() != rec['sha256']:
            raise CheckpointError(f"{path}: checksum mismatch in tensor '{rec['name']}'")
        array = np.frombuffer(raw, dtype=np.dtype(rec['dtype'])).reshape(rec['shape'])
        groups[rec['group']][rec['name']] = torch.from_numpy(array.copy())
    return CheckpointBundle(groups, header['meta'])


def load_checkpoint(path, model, groups):
    """Copy the named groups from the bundle into model; everything else is left as is.

    A first convolution whose band count differs from the bundle keeps its
    fresh initialisation.
    """
    groups = set(groups)
    unknown = groups - set(GROUPS)
    if unknown:
        raise CheckpointError(f"unknown parameter groups {sorted(unknown)}; valid groups are {GROUPS}")
    bundle = read_checkpoint(path)
    missing = groups - set(bundle.groups)
    if missing:
        raise CheckpointError(f"bundle {path} has no groups {sorted(missing)}")
    own = parameter_groups(model)
    absent = groups - set(own)
    if absent:
        raise CheckpointError(f"model has no groups {sorted(absent)}")
    first_conv = 'encoder.' + model.encoder.first_conv
    with torch.no_grad():
        for group in sorted(groups):
            for name, target in own[group].items():
                if name not in bundle.groups[group]:
                    raise CheckpointError(f"bundle {path} lacks tensor '{name}'")
                source = bundle.groups[group][name]
                if source.shape != target.shape:
                    if name == first_conv and source.shape[0] == target.shape[0]:
                        logger.warning("band count differs (%d in bundle, %d in model); "
                                       "first convolution keeps its fresh initialisation",
                                       source.shape[1], target.shape[1])
                        continue
                    raise CheckpointError(f"shape mismatch for '{name}': bundle {tuple(source.shape)}, "
                                          f"model {tuple(target.shape)}")
                target.copy_(source)
    logger.info("loaded groups %s from %s", sorted(groups), path)
    return bundle.meta
