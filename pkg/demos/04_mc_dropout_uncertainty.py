"""Monte Carlo dropout: expected probabilities, variance and decision rules.

With dropout left on at inference every pass is a sample from an approximate
posterior. The mean of the samples gives the labels, and their variance gives a
per-node uncertainty map. Nodes the model gets wrong should be the uncertain
ones.

    python3 demos/04_mc_dropout_uncertainty.py
"""

import numpy as np

from bayes_sds import data, inference, metrics, train, unet

ds = data.gen_dataset(400, data.ScenarioSpec(noise_sigma=0.6, seed=2))
c, h, w = ds.shape
model = unet.build(unet.ArchConfig(c, h, w, depth=3, base_filters=8, dlc=3, p_do=0.4), seed=0)
hist = train.train(model, ds, train.TrainConfig(lr0=2e-3, batch=32, max_epochs=10, patience=10,
                                                weight_mode="MFW", n_val_samples=5, seed=0))
te = ds.subset("test")

samples = inference.mc_sample(model, te.features, 40, seed=5, obs_ids=te.indices)
post = inference.posterior_stats(samples)
v_nd, v_d = inference.class_variances(samples)
print(f"{samples.shape[0]} samples of {samples.shape[1]} grids; "
      f"Var P(ND) vs Var P(D) max gap {np.abs(v_nd - v_d).max():.1e}")

# MAP takes the larger expected probability, ML first divides by the class priors
for rule in ("MAP", "ML"):
    dec = inference.decide(post, rule, hist.priors)
    s = metrics.summary(metrics.confusion(dec.labels, te.labels))
    print(f"{rule:>3}: MCA {metrics.pct(s['mca'])}%  D {metrics.pct(s['acc_d'])}%  ND {metrics.pct(s['acc_nd'])}%")

unc = inference.normalize_uncertainty(post)
wrong = inference.decide(post).labels != te.labels
print(f"mean normalized variance: wrong nodes {unc[wrong].mean():.3f}, right nodes {unc[~wrong].mean():.3f}")

# the estimate settles as the number of passes grows
res = inference.stability_study(model, te, (2, 10, 40), trials=5, seed=0)
for n, stats in res.items():
    print(f"n_sample {n:3d}: MCA {stats['mca'].mean:.4f} +- {stats['mca'].std:.4f} over 5 trials")
