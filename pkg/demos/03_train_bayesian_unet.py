"""Training a small Bayesian U-Net with median-frequency weights.

Mini-batches run with dropout on. After each epoch the validation loss is the
average over several dropout samples drawn with a fixed seed, and the epoch with
the lowest such loss is kept.

    python3 demos/03_train_bayesian_unet.py [checkpoint_path]
"""

import sys
import tempfile
import time
from pathlib import Path

from bayes_sds import data, inference, metrics, train, unet

ckpt = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="sds_train_")) / "model.sdsc"

ds = data.gen_dataset(600, data.ScenarioSpec(seed=1))
c, h, w = ds.shape
arch = unet.ArchConfig(c, h, w, depth=3, base_filters=8, dlc=3, p_do=0.3)
model = unet.build(arch, seed=0)
print(f"grid {h}x{w} padded to {arch.padded_shape}, {unet.param_count(arch)} parameters")

cfg = train.TrainConfig(lr0=2e-3, batch=32, max_epochs=12, patience=4, weight_mode="MFW", n_val_samples=5, seed=0)
t0 = time.perf_counter()
hist = train.train(model, ds, cfg, log=print)
print(f"best epoch {hist.best_epoch} (val loss {hist.best_val_loss:.4f}) after {time.perf_counter() - t0:.0f} s")
print(f"class weights ND {hist.weights[0]:.4f} D {hist.weights[1]:.4f}")

te = ds.subset("test")
r = inference.infer(model, te.features, 30, "MAP", hist.priors, seed=0, obs_ids=te.indices)
s = metrics.summary(metrics.confusion(r.decision.labels, te.labels))
print("test: " + "  ".join(f"{k} {metrics.pct(v)}%" for k, v in s.items()))

unet.save_checkpoint(model, ckpt, extra={"priors": list(hist.priors)})
print("checkpoint:", ckpt)
