"""Layers from scratch, checked against finite differences.

Every layer in the network has a hand-written backward pass. Here we run the
same gradient suite the test-suite uses, then check by hand that the stride-2
transposed convolution is the adjoint of its own backward map.

    python3 demos/01_layers_and_gradcheck.py
"""

import numpy as np

from bayes_sds import gradcheck
from bayes_sds import tensor as T

# one row per layer plus the full depth-2 network
for name, err, tol, ok in gradcheck.run_suite(seeds=(0, 1)):
    print(f"{name:<24} max rel error {err:.2e}  (tolerance {tol:.0e})  {'ok' if ok else 'FAIL'}")

# <tconv(x), y> must equal <x, tconv^T(y)>; the backward pass provides tconv^T
rng = np.random.default_rng(0)
x = rng.standard_normal((3, 5, 4))
k = rng.standard_normal((2, 3, 3, 3))
y = rng.standard_normal((2, 10, 8))
out, cache = T.tconv2d_forward(x, k, np.zeros(2))
lhs = np.vdot(out, y)
rhs = np.vdot(x, T.tconv2d_backward(y, cache)[0])
print(f"\ntransposed conv: output {out.shape}, adjoint gap {abs(lhs - rhs):.1e}")

# a 2x2 max pool routes the whole gradient to the window winner
p, idx = T.maxpool2_forward(np.array([[[1.0, 2.0], [4.0, 3.0]]]))
print("max pool of [[1,2],[4,3]] ->", p.ravel(), "gradient",
      T.maxpool2_backward(np.ones_like(p), idx).ravel())
