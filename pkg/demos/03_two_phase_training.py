# Train the baseline encoder, then the unmasking encoder, on 16 toy pairs.
import time

from maskrecovery import config, training

cfg = config.load_config("configs/toy/baseline.yaml", ["steps=300"])
pipeline = training.build_pipeline(cfg)
pairs = training.load_data(cfg, pipeline)
print(len(pairs), "pairs at", pairs.resolution, "px")

t = time.time()
f0 = training.train_baseline(cfg, pipeline, pairs)
print(f"baseline: loss {f0.metrics[0]['total']:.2f} -> {f0.metrics[-1]['total']:.2f}"
      f" (ratio {training.loss_reduction(f0.metrics):.3f}, {time.time() - t:.0f}s)")

# the unmasking phase starts from f0 and keeps a frozen copy of it for L_LR
ucfg = config.load_config("configs/toy/unmask.yaml", ["steps=300"])
t = time.time()
f = training.train_unmasking(ucfg, pipeline, pairs, init=f0)
print(f"unmasking: loss {f.metrics[0]['total']:.2f} -> {f.metrics[-1]['total']:.2f}"
      f" (ratio {training.loss_reduction(f.metrics):.3f}, {time.time() - t:.0f}s)")
print("last record", f.metrics[-1])
print("phase tags", f0.phase_tag, f.phase_tag, "lineage", f.lineage)
