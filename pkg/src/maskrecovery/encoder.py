"""Feature-pyramid encoder mapping an aligned face image to an extended-latent style code.

The same architecture serves as the baseline (autoencoding) encoder and the unmasking
encoder; the latter is always initialized from a trained baseline.
"""
import copy
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import torch
from torch import nn
from torch.nn import functional as F

from .generator import STYLE_DIM


class EncoderError(ValueError):
    pass


def default_style_groups(num_styles):
    """Contiguous (coarse, medium, fine) split; 3/4/rest for 14+ styles, proportional below."""
    if num_styles < 3:
        raise EncoderError(f"need at least 3 styles for coarse/medium/fine groups, got {num_styles}")
    if num_styles >= 14:
        coarse, medium = 3, 4
    else:
        coarse = max(1, round(num_styles * 3 / 18))
        medium = max(1, round(num_styles * 4 / 18))
    return (coarse, coarse + medium)


@dataclass(frozen=True)
class EncoderSpec:
    num_styles: int
    input_resolution: int = 256
    backbone_width: int = 32
    head_grid: int = 4
    # boundaries (b1, b2): coarse = [0, b1), medium = [b1, b2), fine = [b2, num_styles)
    style_groups: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        groups = self.style_groups or default_style_groups(self.num_styles)
        object.__setattr__(self, "style_groups", tuple(groups))
        b1, b2 = self.style_groups
        if not 0 < b1 < b2 < self.num_styles:
            raise EncoderError(f"style_groups {self.style_groups} do not partition {self.num_styles} styles")

    def groups(self):
        b1, b2 = self.style_groups
        return {"coarse": range(0, b1), "medium": range(b1, b2), "fine": range(b2, self.num_styles)}


class _ResBlock(nn.Module):
    def __init__(self, in_channel, out_channel, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channel, out_channel, 3, stride, 1)
        self.conv2 = nn.Conv2d(out_channel, out_channel, 3, 1, 1)
        self.shortcut = nn.Conv2d(in_channel, out_channel, 1, stride)

    def forward(self, x):
        out = F.leaky_relu(self.conv1(x), 0.2)
        out = self.conv2(out)
        return F.leaky_relu(out + self.shortcut(x), 0.2)


class _MapToStyle(nn.Module):
    def __init__(self, channel, grid):
        super().__init__()
        self.grid = grid
        self.conv = nn.Conv2d(channel, channel, 3, 1, 1)
        self.linear = nn.Linear(channel * grid * grid, STYLE_DIM)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x):
        x = F.leaky_relu(self.conv(x), 0.2)
        x = F.adaptive_avg_pool2d(x, self.grid)
        return self.linear(x.flatten(1))


class Encoder(nn.Module):
    """Residual backbone with four stages, a top-down feature pyramid on the last three,
    and one map-to-style head per style index. Coarse styles read the deepest pyramid
    level, medium styles the middle one and fine styles the shallowest."""

    def __init__(self, spec, latent_offset=None):
        super().__init__()
        self.spec = spec
        c = spec.backbone_width
        self.stem = nn.Conv2d(3, c, 3, 1, 1)
        self.stages = nn.ModuleList([
            _ResBlock(c, c, 2),
            _ResBlock(c, 2 * c, 2),
            _ResBlock(2 * c, 2 * c, 2),
            _ResBlock(2 * c, 2 * c, 2),
        ])
        self.lateral = nn.ModuleList([nn.Conv2d(ch, c, 1) for ch in (2 * c, 2 * c, 2 * c)])
        self.heads = nn.ModuleList(_MapToStyle(c, spec.head_grid) for _ in range(spec.num_styles))
        if latent_offset is None:
            latent_offset = torch.zeros(1, spec.num_styles, STYLE_DIM)
        self.register_buffer("latent_offset", latent_offset.reshape(1, spec.num_styles, STYLE_DIM).clone())

    def pyramid(self, x):
        x = F.leaky_relu(self.stem(x), 0.2)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        fine, medium, coarse = feats[1:]
        p_coarse = self.lateral[2](coarse)
        p_medium = self.lateral[1](medium) + F.interpolate(p_coarse, size=medium.shape[-2:], mode="bilinear", align_corners=False)
        p_fine = self.lateral[0](fine) + F.interpolate(p_medium, size=fine.shape[-2:], mode="bilinear", align_corners=False)
        return {"coarse": p_coarse, "medium": p_medium, "fine": p_fine}

    def forward(self, image):
        res = self.spec.input_resolution
        if image.ndim != 4 or image.shape[-2:] != (res, res):
            raise EncoderError(f"encoder expects (batch, 3, {res}, {res}) input, got {tuple(image.shape)}")
        levels = self.pyramid(image)
        styles = [None] * self.spec.num_styles
        for name, idx in self.spec.groups().items():
            for i in idx:
                styles[i] = self.heads[i](levels[name])
        w = torch.stack(styles, dim=1) + self.latent_offset
        if not torch.isfinite(w).all():
            raise EncoderError("non-finite style code; the encoder has diverged")
        return w


@dataclass
class EncoderParams:
    """An encoder together with its training provenance."""

    module: Encoder
    phase_tag: str = "baseline"
    lineage: list = field(default_factory=list)

    @property
    def spec(self):
        return self.module.spec


def build_encoder(spec, seed=0, latent_offset=None, dtype=torch.float32):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = Encoder(spec, latent_offset=latent_offset)
    return EncoderParams(module.to(dtype))


def encode(params, image):
    return params.module(image)


def initialize_from(source, phase_tag=None, dataset=None, target_spec=None):
    """Copy ``source`` into an independent encoder.

    ``phase_tag`` defaults to the source's; ``dataset`` is appended to the lineage.
    ``target_spec``, when given, must equal the source spec.
    """
    if target_spec is not None and target_spec != source.spec:
        raise EncoderError(f"cannot initialize {target_spec} from {source.spec}")
    module = copy.deepcopy(source.module)
    lineage = list(source.lineage)
    if dataset is not None:
        lineage.append(dataset)
    return EncoderParams(module, phase_tag=phase_tag or source.phase_tag, lineage=lineage)


def spec_to_dict(spec):
    d = dict(spec.__dict__)
    d["style_groups"] = list(spec.style_groups)
    return d


def spec_from_dict(d):
    d = dict(d)
    if d.get("style_groups") is not None:
        d["style_groups"] = tuple(d["style_groups"])
    return EncoderSpec(**d)


def with_resolution(spec, input_resolution):
    return replace(spec, input_resolution=input_resolution)
