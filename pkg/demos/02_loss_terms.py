# The four loss terms and the two composites on a single masked/unmasked pair.
import torch

from maskrecovery import losses
from maskrecovery.embedders import RandomConvFeatures, RandomProjectionIdentity
from maskrecovery.encoder import EncoderSpec, build_encoder, initialize_from
from maskrecovery.generator import GeneratorSpec, build_generator
from maskrecovery.toy import toy_pairs

g = build_generator(GeneratorSpec(depth=4, seed=7))
pairs = toy_pairs(g, n_identities=2, per_identity=2, seed=3)
T, M = pairs.T, pairs.M

perceptual = RandomConvFeatures(seed=1)   # stands in for a deep perceptual network
identity = RandomProjectionIdentity(seed=2)  # stands in for a face recognition network

# each term is per image; identical inputs give zero
print("L_R(T, T)   ", losses.reconstruction_loss(T, T))
print("L_R(T, M)   ", losses.reconstruction_loss(T, M))
print("L_LPIPS(T,M)", losses.perceptual_loss(T, M, perceptual))
e_T, e_M = identity(T), identity(M)
print("L_ID(T, M)  ", losses.identity_loss(e_T, e_M))
print("L_ID(e, -e) ", losses.identity_loss(e_T, -e_T))

# the baseline encoder f0 autoencodes T; the unmasking encoder f starts as a copy of f0
spec = EncoderSpec(num_styles=4, input_resolution=32, backbone_width=16)
f0 = build_encoder(spec, seed=0, latent_offset=g.mean_latent())
f = initialize_from(f0, phase_tag="unmasking")
weights = losses.LossWeights()  # alpha 0.8, beta 0.1, gamma 1.0

base = losses.baseline_loss(T, f0.module, g, weights, perceptual, identity)
print("baseline  ", {k: round(v, 4) for k, v in base.breakdown().items()})

# with f a fresh copy of f0, L_LR measures how far f0 moves between T and M
unmask = losses.unmasking_loss(T, M, f.module, f0.module, g, weights, perceptual, identity)
print("unmasking ", {k: round(v, 4) for k, v in unmask.breakdown().items()})

# dropping a term is a weight of zero
lr_only = losses.LossWeights(alpha=0, beta=0, gamma=1, reconstruction=0)
print("LR only   ", round(float(losses.combine(unmask.terms, lr_only).detach()), 4))
