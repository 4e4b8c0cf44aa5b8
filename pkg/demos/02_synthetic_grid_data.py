"""A synthetic structural grid with node-wise damage labels.

Each observation is a damage mask on an 11 x 10 grid of nodes plus an 8-channel
feature field. Damaged nodes carry a smoothed signature on top of a smooth base
field and Gaussian noise. A paired "stochastic" test set rescales every field by
a random factor, standing in for modelling uncertainty.

    python3 demos/02_synthetic_grid_data.py [out_dir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from bayes_sds import data, inference

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="sds_data_"))
out.mkdir(parents=True, exist_ok=True)

spec = data.ScenarioSpec(seed=0)
ds = data.gen_dataset(200, spec)
f_nd, f_d = ds.class_frequencies()
print(f"{len(ds)} observations, features {ds.shape}, class frequencies ND {f_nd:.3f} D {f_d:.3f}")
print("split sizes:", ds.split_sizes())

# separation of the two classes in channel 0
m = ds.labels.astype(bool)
c0 = ds.features[:, 0]
print(f"channel 0 mean: damaged {c0[m].mean():+.3f}, undamaged {c0[~m].mean():+.3f}, "
      f"signature {ds.signature[0]:+.3f}")

# the stochastic variant shares masks and noise, only the global scale differs
te = ds.subset("test")
ratio = ds.stochastic_test.features / te.features
print(f"stochastic / ideal scale over the test split: {ratio.reshape(len(te), -1)[:, 0].round(3)[:5]} ...")

path = out / "dataset.sdsb"
data.save(ds, path)
back = data.load(path)
same = np.array_equal(back.labels, ds.labels) and np.array_equal(back.features, ds.features)
print(f"saved {path.stat().st_size} bytes, reload identical: {same}")

inference.write_pgm(ds.labels[0], out / "mask_0.pgm")
print("first mask:\n" + "\n".join("".join("#" if v else "." for v in row) for row in ds.labels[0]))
print("written to", out)
