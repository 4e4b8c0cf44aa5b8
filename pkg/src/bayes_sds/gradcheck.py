"""Finite-difference checks for every layer and the assembled network."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from . import unet

LAYER_TOL = 1e-4
NETWORK_TOL = 5e-3


def layer_cases(seed=0):
    """``(name, layer, input)`` triples on small random tensors."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 6, 6))
    cases = [
        ("conv2d_3x3", T.Conv2D(rng.standard_normal((4, 2, 3, 3)), rng.standard_normal(4)), x),
        ("conv2d_1x1", T.Conv2D(rng.standard_normal((3, 2, 1, 1)), rng.standard_normal(3)), x),
        ("tconv2d", T.TConv2D(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)),
         rng.standard_normal((2, 3, 3))),
        ("maxpool2", T.MaxPool2(), rng.standard_normal((3, 4, 4))),
        ("batchnorm_train", T.BatchNorm(rng.uniform(0.5, 1.5, 2), rng.standard_normal(2)),
         rng.standard_normal((4, 2, 2, 2))),
        ("batchnorm_infer", T.BatchNorm(rng.uniform(0.5, 1.5, 2), rng.standard_normal(2),
                                        T.BNState(rng.standard_normal(2), rng.uniform(0.5, 2, 2)), "infer"),
         rng.standard_normal((4, 2, 2, 2))),
        ("relu", T.ReLU(), rng.standard_normal((2, 5, 5))),
        ("softmax2", T.Softmax2(), rng.standard_normal((2, 4, 4))),
        ("dropout", T.Dropout(0.3, rng.random((2, 5, 5)) >= 0.3), rng.standard_normal((2, 5, 5))),
    ]
    probs = T.softmax2(rng.standard_normal((2, 4, 4)))
    truth = (rng.random((4, 4)) < 0.4).astype(np.uint8)
    cases.append(("weighted_ce", T.WeightedCE(truth, (0.8621, 1.1905)), probs))
    return cases


def network_case(seed=0, grid=8, in_channels=2, batch=2, p_do=0.3):
    arch = unet.ArchConfig(in_channels, grid, grid, depth=2, base_filters=4, dlc=2, p_do=p_do)
    model = unet.build(arch, seed)
    rng = np.random.default_rng(seed + 1)
    # non-trivial batch-norm affine parameters
    for k in model.params:
        if k.endswith(".gamma"):
            model.params[k] = rng.uniform(0.5, 1.5, model.params[k].shape)
        elif k.endswith(".b") or k.endswith(".beta"):
            model.params[k] = 0.1 * rng.standard_normal(model.params[k].shape)
    x = rng.standard_normal((batch, in_channels, grid, grid))
    y = (rng.random((batch, grid, grid)) < 0.4).astype(np.uint8)
    return model, x, y


def network_grad_errors(model, x, y, weights=(0.8621, 1.1905), eps=1e-5, mask_seed=123):
    """Per-parameter relative errors of the end-to-end loss gradient.

    Dropout masks are frozen by reseeding the mask generator on every pass;
    batch norm runs in train mode.
    """
    def loss():
        p = unet.forward(model, x, True, "train", np.random.default_rng(mask_seed))
        return T.weighted_ce(p, y, weights)

    probs, tape = unet.forward(model, x, True, "train", np.random.default_rng(mask_seed), return_tape=True)
    grads = unet.backward(model, tape, T.weighted_ce_backward(probs, y, weights))
    return {k: T.rel_error(grads[k], T.numeric_grad(loss, model.params[k], eps)) for k in model.params}


def run_suite(seeds=(0,), network=True):
    """Rows ``(name, max_error, tolerance, passed)``."""
    rows = {}
    for s in seeds:
        for name, layer, x in layer_cases(s):
            err = T.grad_check(layer, x, seed=s)
            rows[name] = max(rows.get(name, 0.0), err)
    out = [(k, v, LAYER_TOL, v < LAYER_TOL) for k, v in rows.items()]
    if network:
        model, x, y = network_case(seeds[0])
        err = max(network_grad_errors(model, x, y).values())
        out.append(("unet_depth2_end_to_end", err, NETWORK_TOL, err < NETWORK_TOL))
    return out
