# Render toy faces from the fixed generator and paint synthetic masks on them.
import os

import numpy as np
import torch

from maskrecovery import data
from maskrecovery.generator import GeneratorSpec, build_generator, generate
from maskrecovery.toy import nominal_eyes, sample_codes

out = os.environ.get("DEMO_OUT", "demo_out")
os.makedirs(out, exist_ok=True)

# a 4-style toy generator renders 32x32 faces; its weights come from the seed
g = build_generator(GeneratorSpec(depth=4, seed=7))
print("resolution", g.resolution, "styles", g.depth)

# two identities, three images each; every style drawn around the identity's base code
codes = sample_codes(g, n_identities=2, per_identity=3, seed=0)
with torch.no_grad():
    faces = generate(g, codes)            # (6, 3, 32, 32) in [-1, 1]
faces = faces.permute(0, 2, 3, 1).numpy()  # H x W x C for the data pipeline

# masks are polygons anchored on the eyes, measured in inter-eye distances
eyes = nominal_eyes(g.resolution)
rng = np.random.default_rng(0)
tiles = []
for i, T in enumerate(faces):
    template = ("rectangle", "surgical", "ffhq_black")[i % 3]
    color = tuple(int(c) for c in rng.integers(0, 256, 3))
    pair = data.apply_mask(T, data.MaskSpec(template, color, tuple(map(tuple, eyes))))
    # everything outside the footprint is copied bit for bit
    assert np.array_equal(pair.M[~pair.mask_region], T[~pair.mask_region])
    tiles.append(np.concatenate([pair.T, pair.M], axis=0))
    print(template, "covers", int(pair.mask_region.sum()), "pixels")

# the periorbital box is what stays visible above a mask
region = data.periorbital_region(eyes, faces.shape[1:3])
print("periorbital box", data.periorbital_box(eyes, faces.shape[1:3]), "pixels", int(region.sum()))

data.save_image(os.path.join(out, "faces_and_masks.png"), np.concatenate(tiles, axis=1))
print("wrote", os.path.join(out, "faces_and_masks.png"))
