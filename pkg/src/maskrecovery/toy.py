"""Desk-scale synthetic faces rendered by the toy generator.

Each identity is a base style code; its images are small perturbations of that code,
so identity is visible in every region of the image. Nominal eye positions follow the
usual aligned-face layout and anchor the synthetic masks.
"""
from dataclasses import dataclass

import numpy as np
import torch

from . import data
from .generator import STYLE_DIM


def nominal_eyes(resolution):
    r = resolution
    return np.array([[0.34 * r, 0.36 * r], [0.66 * r, 0.36 * r]])


@dataclass
class ToyPairs:
    """Tensors ``T`` and ``M`` of shape (N, 3, R, R), boolean ``regions`` (N, R, R),
    ``codes`` (N, n_styles, 512) that generated ``T``, identities and eye positions."""

    T: torch.Tensor
    M: torch.Tensor
    regions: torch.Tensor
    codes: torch.Tensor
    identities: list
    eyes: np.ndarray

    def __len__(self):
        return self.T.shape[0]


def sample_codes(generator, n_identities, per_identity, seed=0, spread=0.5, scale=1.0, shared=False):
    """Identity base codes plus per-image perturbations around the generator mean.

    Each style is drawn independently; with ``shared`` one 512-d code is broadcast to
    every style instead, as when sampling a style-based generator from its single-latent
    space.
    """
    g = torch.Generator().manual_seed(seed)
    dtype = generator.mean_latent().dtype
    n = 1 if shared else generator.depth
    base = torch.randn(n_identities, 1, n, STYLE_DIM, generator=g, dtype=dtype) * scale
    noise = torch.randn(n_identities, per_identity, n, STYLE_DIM, generator=g, dtype=dtype)
    codes = (base + spread * scale * noise).expand(-1, -1, generator.depth, -1)
    return codes.reshape(-1, generator.depth, STYLE_DIM) + generator.mean_latent()


def toy_pairs(generator, n_identities, per_identity=1, seed=0, spread=0.5,
              templates=("rectangle", "surgical"), eye_jitter=0.0, prefix="id", shared=False):
    """Render faces and paint a random-colour mask on each one."""
    codes = sample_codes(generator, n_identities, per_identity, seed, spread, shared=shared)
    with torch.no_grad():
        T = generator(codes)
    rng = np.random.default_rng(seed)
    res = generator.resolution
    T_np = data.quantize(T.permute(0, 2, 3, 1).double().numpy())
    M_np, regions, eyes_all = [], [], []
    for img in T_np:
        eyes = nominal_eyes(res) + rng.normal(scale=eye_jitter, size=(2, 2))
        pair = data.apply_mask(img, data.random_mask_spec(rng, eyes, templates))
        M_np.append(pair.M)
        regions.append(pair.mask_region)
        eyes_all.append(eyes)
    identities = [f"{prefix}{i}" for i in range(n_identities) for _ in range(per_identity)]
    to_t = lambda a: torch.from_numpy(np.stack(a)).permute(0, 3, 1, 2).to(T.dtype)
    return ToyPairs(to_t(list(T_np)), to_t(M_np), torch.from_numpy(np.stack(regions)),
                    codes, identities, np.stack(eyes_all))
