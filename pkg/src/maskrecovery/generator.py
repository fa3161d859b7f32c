"""Fixed image generators mapping extended-latent style codes to face images.

Style codes are tensors of shape ``(batch, n_styles, 512)``; images are tensors of
shape ``(batch, 3, H, W)`` with values in ``[-1, 1]``.
"""
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn
from torch.nn import functional as F

from ._stylegan2 import StyleGAN2Synthesis

STYLE_DIM = 512
TOY_BASE_RESOLUTION = 8
PRETRAINED_DEPTHS = (14, 18)


class GeneratorError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    depth: int
    backend: str = "toy"
    weights_uri: Optional[str] = None
    seed: int = 0
    channels: int = 32

    @property
    def output_resolution(self):
        return output_resolution(self.backend, self.depth)


def output_resolution(backend, depth):
    if backend == "toy":
        return TOY_BASE_RESOLUTION * 2 ** (depth // 2)
    if backend == "pretrained":
        # StyleGAN2 consumes 2*log2(res) - 2 styles
        return 2 ** ((depth + 2) // 2)
    raise GeneratorError(f"unknown generator backend {backend!r}")


def check_code(w, depth):
    if w.ndim != 3 or w.shape[-1] != STYLE_DIM:
        raise GeneratorError(f"style code must have shape (batch, n_styles, {STYLE_DIM}), got {tuple(w.shape)}")
    if w.shape[1] != depth:
        raise GeneratorError(f"style code has {w.shape[1]} styles, generator expects {depth}")


class Generator(nn.Module):
    """Base class: frozen parameters, pure forward pass, fixed depth and resolution."""

    depth: int
    resolution: int

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return super().train(False)

    def train(self, mode=True):
        # the generator is never put in training mode
        return super().train(False)

    def mean_latent(self):
        raise NotImplementedError

    def forward(self, w):
        raise NotImplementedError


class _ToyLayer(nn.Module):
    def __init__(self, in_channel, out_channel, upsample):
        super().__init__()
        self.upsample = upsample
        self.affine = nn.Linear(STYLE_DIM, in_channel)
        self.weight = nn.Parameter(torch.randn(out_channel, in_channel, 3, 3))
        self.bias = nn.Parameter(torch.zeros(out_channel))
        nn.init.normal_(self.affine.weight, std=STYLE_DIM ** -0.5)
        nn.init.ones_(self.affine.bias)

    def forward(self, x, style):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        b, c, h, w = x.shape
        s = self.affine(style).view(b, 1, c, 1, 1)
        weight = self.weight[None] * s
        weight = weight * torch.rsqrt(weight.pow(2).sum([2, 3, 4], keepdim=True) + 1e-8)
        out = F.conv2d(x.reshape(1, b * c, h, w), weight.reshape(-1, c, 3, 3), padding=1, groups=b)
        out = out.view(b, -1, h, w) + self.bias.view(1, -1, 1, 1)
        return F.leaky_relu(out, 0.2)


class ToyGenerator(Generator):
    """Small progressive generator: a learned constant followed by one style-modulated
    3x3 convolution per style, with 2x upsampling before every odd layer."""

    def __init__(self, depth, seed=0, channels=32, dtype=torch.float32):
        super().__init__()
        if depth < 1:
            raise GeneratorError(f"toy generator depth must be >= 1, got {depth}")
        self.depth = depth
        self.resolution = output_resolution("toy", depth)
        rng = torch.Generator().manual_seed(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.const = nn.Parameter(torch.randn(1, channels, TOY_BASE_RESOLUTION, TOY_BASE_RESOLUTION, generator=rng))
            self.layers = nn.ModuleList(_ToyLayer(channels, channels, upsample=i % 2 == 1) for i in range(depth))
            self.to_rgb = nn.Conv2d(channels, 3, 1)
            # gain 2 spreads outputs over most of [-1, 1] before the tanh
            nn.init.normal_(self.to_rgb.weight, std=2 / channels ** 0.5)
            nn.init.zeros_(self.to_rgb.bias)
        self.to(dtype)
        self.freeze()

    def mean_latent(self):
        p = self.const
        return torch.zeros(1, self.depth, STYLE_DIM, dtype=p.dtype, device=p.device)

    def forward(self, w):
        check_code(w, self.depth)
        x = self.const.expand(w.shape[0], -1, -1, -1)
        for i, layer in enumerate(self.layers):
            x = layer(x, w[:, i])
        return torch.tanh(self.to_rgb(x))


class PretrainedGenerator(Generator):
    """Adapter around externally supplied StyleGAN2 weights.

    ``depth`` selects how many synthesis layers are used: 18 styles give the full
    1024x1024 network, 14 styles stop at the 256x256 output.
    """

    def __init__(self, weights_uri, depth, dtype=torch.float32, n_mean=4096):
        super().__init__()
        if depth % 2 or depth < 2:
            raise GeneratorError(f"pretrained depth must be an even number of styles, got {depth}")
        try:
            ckpt = torch.load(weights_uri, map_location="cpu", weights_only=True)
        except FileNotFoundError:
            raise GeneratorError(f"generator weights not found: {weights_uri}") from None
        except Exception as e:
            raise GeneratorError(f"cannot read generator weights {weights_uri}: {e}") from e
        state = ckpt.get("g_ema", ckpt) if isinstance(ckpt, dict) else None
        if not isinstance(state, dict):
            raise GeneratorError(f"{weights_uri} does not contain a generator state dict")
        try:
            self.net = StyleGAN2Synthesis.from_state_dict(state)
        except (KeyError, RuntimeError) as e:
            raise GeneratorError(f"corrupt generator weights {weights_uri}: {e}") from e
        if depth > self.net.n_latent:
            raise GeneratorError(
                f"depth {depth} needs a {output_resolution('pretrained', depth)}px network, "
                f"weights provide {self.net.size}px ({self.net.n_latent} styles)")
        self.depth = depth
        self.resolution = output_resolution("pretrained", depth)
        self.to(dtype)
        if isinstance(ckpt, dict) and "latent_avg" in ckpt:
            avg = ckpt["latent_avg"].reshape(-1, STYLE_DIM)[:1].to(dtype)
        else:
            with torch.no_grad(), torch.random.fork_rng(devices=[]):
                torch.manual_seed(0)
                avg = self.net.map(torch.randn(n_mean, STYLE_DIM, dtype=dtype)).mean(0, keepdim=True)
        self.register_buffer("latent_avg", avg.reshape(1, 1, STYLE_DIM))
        self.freeze()

    def mean_latent(self):
        return self.latent_avg.expand(1, self.depth, STYLE_DIM).clone()

    def forward(self, w):
        check_code(w, self.depth)
        # declared pixel range is [-1, 1]
        return self.net.synthesize(w, self.depth).clamp(-1, 1)


def build_generator(spec, dtype=torch.float32):
    """Construct a frozen generator from ``spec``; toy construction is deterministic in ``spec.seed``."""
    if spec.backend == "toy":
        return ToyGenerator(spec.depth, seed=spec.seed, channels=spec.channels, dtype=dtype)
    if spec.backend == "pretrained":
        if spec.depth not in PRETRAINED_DEPTHS:
            raise GeneratorError(f"unsupported pretrained depth {spec.depth}; expected one of {PRETRAINED_DEPTHS}")
        if not spec.weights_uri:
            raise GeneratorError("pretrained backend requires weights_uri")
        return PretrainedGenerator(spec.weights_uri, spec.depth, dtype=dtype)
    raise GeneratorError(f"unknown generator backend {spec.backend!r}")


def generate(g, w):
    """Render ``w`` with the frozen generator ``g``; gradients flow to ``w``."""
    return g(w)


class Resampled(Generator):
    """A generator whose output is resized to ``resolution`` (antialiased bilinear).

    Lets a 1024px generator be trained and scored against 256px aligned data.
    """

    def __init__(self, inner, resolution):
        super().__init__()
        self.inner = inner
        self.depth = inner.depth
        self.resolution = resolution

    def mean_latent(self):
        return self.inner.mean_latent()

    def forward(self, w):
        x = self.inner(w)
        if x.shape[-1] != self.resolution:
            x = F.interpolate(x, size=(self.resolution, self.resolution), mode="bilinear", align_corners=False,
                              antialias=True)
        return x


def at_resolution(g, resolution):
    return g if g.resolution == resolution else Resampled(g, resolution)
