# Estimate an unmasked latent that reproduces only the visible eye region of a masked face.
import torch

from maskrecovery import data
from maskrecovery.generator import GeneratorSpec, build_generator
from maskrecovery.toy import nominal_eyes, sample_codes
from maskrecovery.training import estimate_unmasked_latent

g = build_generator(GeneratorSpec(depth=4, seed=7))
w_true = sample_codes(g, 1, 1, seed=11)
with torch.no_grad():
    T = g(w_true)

# planted solution: with the whole image visible, the search recovers the rendering
full = torch.ones(32, 32, dtype=torch.bool)
est = estimate_unmasked_latent(T, full, g, steps=500)
with torch.no_grad():
    mae = float((g(est.w_hat) - T).abs().mean())
print(f"full image: residual {est.trace[0]:.3f} -> {est.residual:.4f} in {est.iterations_used} iterations,"
      f" pixel MAE {mae:.4f}")

# periorbital only: the lower face is free, so it drifts towards whatever fits the eyes
eyes = nominal_eyes(32)
region = torch.from_numpy(data.periorbital_region(eyes, (32, 32)))
est = estimate_unmasked_latent(T, region, g, steps=200)
with torch.no_grad():
    U = g(est.w_hat)
inside = float((U - T).abs()[..., region].mean())
outside = float((U - T).abs()[..., ~region].mean())
print(f"periorbital: residual {est.residual:.4f}, MAE inside {inside:.4f}, outside {outside:.4f}")
print("trace never increases:", all(b <= a for a, b in zip(est.trace, est.trace[1:])))
