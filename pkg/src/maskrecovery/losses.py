"""Loss terms for the baseline and unmasking encoders.

Every term is computed per image and returned with shape ``(batch,)``; composites
average over the batch. Norms are the plain (unsquared, unnormalized) l2 norm unless
``normalize=True``, which divides the squared sum by the element count first.
"""
import math
from dataclasses import dataclass

import torch

TERMS = ("L_R", "L_LPIPS", "L_ID", "L_LR")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.8
    beta: float = 0.1
    gamma: float = 1.0
    # weight of the pixel term; 1 in both composites, 0 only for ablations that drop it
    reconstruction: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "reconstruction"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise LossError(f"loss weight {name} must be finite and >= 0, got {v}")

    def coefficients(self):
        return {"L_R": self.reconstruction, "L_LPIPS": self.alpha, "L_ID": self.beta, "L_LR": self.gamma}


def _norm(x, normalize=False):
    x = x.flatten(1)
    if normalize:
        return torch.sqrt(x.pow(2).mean(dim=1))
    return torch.linalg.vector_norm(x, dim=1)


def _region(region, like):
    region = torch.as_tensor(region, device=like.device)
    if region.ndim == 2:
        region = region[None, None]
    elif region.ndim == 3:
        region = region[:, None]
    if region.shape[-2:] != like.shape[-2:]:
        raise LossError(f"region {tuple(region.shape[-2:])} does not match image {tuple(like.shape[-2:])}")
    if not region.flatten(1).any(dim=1).all():
        raise LossError("region mask is empty")
    return region.to(like.dtype)


def reconstruction_loss(target, output, region=None, normalize=False):
    """l2 norm of ``target - output``, optionally restricted to a binary region."""
    if target.shape != output.shape:
        raise LossError(f"shape mismatch {tuple(target.shape)} vs {tuple(output.shape)}")
    diff = target - output
    if region is not None:
        diff = diff * _region(region, diff)
    return _norm(diff, normalize)


def perceptual_loss(target, output, embedder, region=None, normalize=False):
    """l2 distance between the concatenated feature stacks of both images.

    With a region, both inputs are zeroed outside it before embedding.
    """
    if embedder.kind != "perceptual":
        raise LossError(f"perceptual loss needs a perceptual embedder, got {embedder.kind!r}")
    if target.shape != output.shape:
        raise LossError(f"shape mismatch {tuple(target.shape)} vs {tuple(output.shape)}")
    if region is not None:
        r = _region(region, target)
        target, output = target * r, output * r
    fa = embedder(target)
    fb = embedder(output)
    diff = torch.cat([(a - b).flatten(1) for a, b in zip(fa, fb)], dim=1)
    return _norm(diff, normalize)


def identity_loss(target_embedding, output_embedding, tol=1e-5):
    """``1 - cos`` between unit embeddings; lies in [0, 2]."""
    for e in (target_embedding, output_embedding):
        norms = torch.linalg.vector_norm(e.detach(), dim=1)
        if not torch.all((norms - 1).abs() <= tol):
            raise LossError(f"identity embeddings must be unit norm (max deviation {float((norms - 1).abs().max()):.2e})")
    return 1 - (target_embedding * output_embedding).sum(dim=1)


def latent_reconstruction_loss(w_ref, w, normalize=False):
    """l2 norm of the flattened difference between two style codes."""
    if w_ref.shape != w.shape:
        raise LossError(f"style code depth mismatch {tuple(w_ref.shape)} vs {tuple(w.shape)}")
    return _norm(w_ref - w, normalize)


def combine(terms, weights):
    """Weighted sum of per-term values; terms missing from ``terms`` contribute nothing."""
    coef = weights.coefficients()
    total = 0
    for name, value in terms.items():
        total = total + coef[name] * value
    return total


@dataclass
class LossResult:
    total: torch.Tensor
    terms: dict

    def breakdown(self):
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def _image_terms(target, output, perceptual, identity, normalize, region=None, id_target=None):
    terms = {
        "L_R": reconstruction_loss(target, output, region, normalize),
        "L_LPIPS": perceptual_loss(target, output, perceptual, region, normalize),
    }
    with torch.no_grad():
        e_target = identity(id_target if id_target is not None else target)
    terms["L_ID"] = identity_loss(e_target, identity(output))
    return terms


def baseline_loss(T, encoder, generator, weights, perceptual, identity, normalize=False):
    """``L_R + alpha L_LPIPS + beta L_ID`` for autoencoding ``T`` through ``generator(encoder(T))``."""
    output = generator(encoder(T))
    terms = _image_terms(T, output, perceptual, identity, normalize)
    terms = {k: v.mean() for k, v in terms.items()}
    return LossResult(combine(terms, weights), terms)


def unmasking_loss(T, M, encoder, frozen_encoder, generator, weights, perceptual, identity,
                   normalize=False):
    """Unmasking composite: image terms between ``T`` and ``g(f(M))`` plus the latent term
    ``||f0(T) - f(M)||`` with the frozen baseline encoder ``f0``."""
    w = encoder(M)
    output = generator(w)
    terms = _image_terms(T, output, perceptual, identity, normalize)
    with torch.no_grad():
        w_ref = frozen_encoder(T)
    terms["L_LR"] = latent_reconstruction_loss(w_ref, w, normalize)
    terms = {k: v.mean() for k, v in terms.items()}
    return LossResult(combine(terms, weights), terms)


def periorbital_loss(M, region, w_target, reference, encoder, generator, weights, perceptual,
                     identity, normalize=False):
    """Real-mask fine-tuning composite: pixel and perceptual terms on the visible periorbital
    region of ``M``, identity against an unmasked same-identity ``reference``, and the
    latent term against an estimated unmasked latent ``w_target``."""
    w = encoder(M)
    output = generator(w)
    terms = _image_terms(M, output, perceptual, identity, normalize, region=region, id_target=reference)
    terms["L_LR"] = latent_reconstruction_loss(w_target, w, normalize)
    terms = {k: v.mean() for k, v in terms.items()}
    return LossResult(combine(terms, weights), terms)
