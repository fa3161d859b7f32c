"""Frozen feature extractors used by the perceptual and identity losses and by the matchers.

Perceptual embedders return a list of feature tensors; identity embedders return
unit-norm vectors of shape ``(batch, dim)``.
"""
import torch
from torch import nn
from torch.nn import functional as F


class EmbedderError(ValueError):
    pass


class Embedder(nn.Module):
    kind = None
    input_resolution = None

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return super().train(False)

    def train(self, mode=True):
        return super().train(False)

    def prepare(self, image):
        if self.input_resolution and image.shape[-1] != self.input_resolution:
            image = F.interpolate(image, size=(self.input_resolution, self.input_resolution),
                                  mode="bilinear", align_corners=False, antialias=True)
        return image


class IdentityFeatures(Embedder):
    """Perceptual stand-in whose single feature map is the image itself."""

    kind = "perceptual"

    def forward(self, image):
        return [image]


class RandomConvFeatures(Embedder):
    """Small fixed random conv stack; every activation is one level of the feature stack."""

    kind = "perceptual"

    def __init__(self, widths=(8, 16), seed=0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            chans = (3,) + tuple(widths)
            self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, 2, 1) for a, b in zip(chans, chans[1:]))
        self.freeze()

    def forward(self, image):
        feats = []
        x = image
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


class RandomProjectionIdentity(Embedder):
    """Resize, flatten, project with a fixed Gaussian matrix, normalize."""

    kind = "identity"

    def __init__(self, input_resolution=16, dim=128, seed=0):
        super().__init__()
        self.input_resolution = input_resolution
        g = torch.Generator().manual_seed(seed)
        proj = torch.randn(3 * input_resolution ** 2, dim, generator=g)
        self.register_buffer("proj", proj / proj.shape[0] ** 0.5)

    def forward(self, image):
        x = self.prepare(image).flatten(1)
        return F.normalize(x @ self.proj.to(x.dtype), dim=1)


class DownsampledPixelIdentity(Embedder):
    """Structured toy matcher: area-downsampled pixels, mean-centred and normalized.

    ``region`` optionally restricts the embedding to a binary map at the input
    resolution (pixels outside are dropped).
    """

    kind = "identity"

    def __init__(self, input_resolution=8, region=None):
        super().__init__()
        self.input_resolution = input_resolution
        if region is not None:
            region = torch.as_tensor(region, dtype=torch.bool)
        self.register_buffer("region", region)

    def prepare(self, image):
        if image.shape[-1] != self.input_resolution:
            image = F.adaptive_avg_pool2d(image, self.input_resolution)
        return image

    def forward(self, image):
        x = self.prepare(image)
        if self.region is not None:
            x = x[..., self.region]
        x = x.flatten(1)
        x = x - x.mean(dim=1, keepdim=True)
        return F.normalize(x, dim=1)


class TorchScriptEmbedder(Embedder):
    """Adapter for exported pretrained networks (LPIPS backbones, ArcFace, FaceNet).

    The TorchScript module receives images in ``[-1, 1]`` resized to
    ``input_resolution``. Identity modules must return ``(batch, dim)`` vectors (they are
    normalized here); perceptual modules must return a tensor or a list of tensors.
    """

    def __init__(self, path, kind, input_resolution):
        super().__init__()
        if kind not in ("perceptual", "identity"):
            raise EmbedderError(f"unknown embedder kind {kind!r}")
        self.kind = kind
        self.input_resolution = input_resolution
        try:
            self.net = torch.jit.load(path, map_location="cpu")
        except (ValueError, RuntimeError, FileNotFoundError) as e:
            raise EmbedderError(f"cannot load {kind} embedder from {path}: {e}") from e
        self.freeze()

    def forward(self, image):
        out = self.net(self.prepare(image))
        if self.kind == "identity":
            return F.normalize(out.flatten(1), dim=1)
        return list(out) if isinstance(out, (list, tuple)) else [out]


def build_embedder(cfg):
    """Build an embedder from a config mapping with a ``type`` key."""
    cfg = dict(cfg)
    kind = cfg.pop("type")
    if kind == "identity-map":
        return IdentityFeatures()
    if kind == "random-conv":
        return RandomConvFeatures(widths=tuple(cfg.get("widths", (8, 16))), seed=cfg.get("seed", 0))
    if kind == "random-projection":
        return RandomProjectionIdentity(cfg.get("input_resolution", 16), cfg.get("dim", 128), cfg.get("seed", 0))
    if kind == "downsampled-pixels":
        return DownsampledPixelIdentity(cfg.get("input_resolution", 8))
    if kind == "torchscript":
        return TorchScriptEmbedder(cfg["weights_uri"], cfg["kind"], cfg["input_resolution"])
    raise EmbedderError(f"unknown embedder type {kind!r}")
