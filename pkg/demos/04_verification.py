# Five-setting face verification and image quality on held-out toy identities.
import os

import torch

from maskrecovery import config, training
from maskrecovery.embedders import DownsampledPixelIdentity
from maskrecovery.evaluation import ImageBank, Unmasker, evaluate, plot_roc
from maskrecovery.toy import toy_pairs

out = os.environ.get("DEMO_OUT", "demo_out")
overrides = ["steps=400", "data.identities=128", "data.per_identity=2"]
cfg = config.load_config("configs/toy/baseline.yaml", overrides)
pipeline = training.build_pipeline(cfg)
train = training.load_data(cfg, pipeline)
f0 = training.train_baseline(cfg, pipeline, train)
f = training.train_unmasking(config.load_config("configs/toy/unmask.yaml", overrides), pipeline, train, init=f0)

# 8 new identities, 4 images each
test = toy_pairs(pipeline.generator, 8, 4, seed=999, prefix="test")
bank = ImageBank(test.T, test.M, Unmasker(f.encoder.module, pipeline.generator))
matcher = DownsampledPixelIdentity(input_resolution=4)
report, trials = evaluate(bank, test.identities, ["MM", "MT", "UU", "UT", "TT"], matcher, return_trials=True)
for s, a in report.auc.items():
    print(f"{s}  AUC {a:.3f}  ({report.counts[s]['genuine']} genuine, {report.counts[s]['impostor']} impostor)")
print(f"PSNR {report.psnr_mean:.2f} dB   SSIM {report.ssim_mean:.3f}")
print("unmasker batches run:", bank.inference_calls)

os.makedirs(out, exist_ok=True)
plot_roc(trials, os.path.join(out, "roc.png"))
print("wrote", os.path.join(out, "roc.png"))
