# Load a StyleGAN2 checkpoint in the common g_ema layout at 14 styles (256px) or 18 (1024px).
# Without $MASKRECOVERY_EXTERNALS this writes a small random checkpoint with that layout.
import os
import tempfile

import torch

from maskrecovery._stylegan2 import StyleGAN2Synthesis
from maskrecovery.generator import GeneratorError, GeneratorSpec, build_generator

root = os.environ.get("MASKRECOVERY_EXTERNALS")
path = os.path.join(root, "weights", "stylegan2-ffhq-config-f.pt") if root else None
if not path or not os.path.exists(path):
    path = os.path.join(tempfile.mkdtemp(), "random_g_ema.pt")
    torch.manual_seed(0)
    net = StyleGAN2Synthesis(256, {2 ** k: 8 for k in range(2, 11)}, style_dim=512, n_mlp=2)
    torch.save({"g_ema": net.state_dict()}, path)
    print("no external weights; using a random 256px checkpoint at", path)

g = build_generator(GeneratorSpec(depth=14, backend="pretrained", weights_uri=path))
w = g.mean_latent()
print("depth 14 ->", tuple(g(w).shape))

try:
    build_generator(GeneratorSpec(depth=18, backend="pretrained", weights_uri=path))
except GeneratorError as e:
    print("depth 18 on this checkpoint:", e)
