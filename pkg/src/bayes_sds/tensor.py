"""
Dense layer primitives with hand-written backward passes.

Every op works on float64 numpy arrays laid out channels-first. Spatial ops
accept either a single field ``C x H x W`` or a batch ``N x C x H x W``; the
result has the same rank as the input. Each ``*_forward`` returns
``(out, cache)`` and the matching ``*_backward`` consumes that cache, so ops
stay pure and can be evaluated concurrently on different inputs.

The heavy ops also have channels-last cores (``*_nhwc_*``) that the network
runs on directly; the channels-first functions are thin transposing wrappers.
The small ``Layer`` classes at the bottom wrap the functional ops for the
finite-difference checker.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

BN_EPS = 1e-5
BN_MOMENTUM = 0.99
PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")
    return x, False


def _unbatch(y, squeeze):
    return y[0] if squeeze else y


# ---------------------------------------------------------------------------
# channels-last cores (N x H x W x C); the model runs on these directly
# ---------------------------------------------------------------------------

def _check_conv(c, kernel, bias):
    if kernel.ndim != 4 or kernel.shape[1] != c:
        raise ShapeError(f"kernel {kernel.shape} does not match {c} input channels")
    o, _, kh, kw = kernel.shape
    if kh != kw or kh % 2 != 1:
        raise ShapeError(f"kernel must be square with odd size, got {kh}x{kw}")
    if bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)")


def _im2col(x, k):
    """``(N*H*W) x (k*k*C)`` patch matrix of a zero-padded channels-last batch."""
    n, h, w, c = x.shape
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + w] = x
    s = xp.strides
    view = as_strided(xp, (n, h, w, k, k, c), (s[0], s[1], s[2], s[1], s[2], s[3]), writeable=False)
    return view.reshape(n * h * w, k * k * c)


def conv_nhwc_forward(x, kernel, bias):
    """Stride-1 'same' convolution via im2col on a channels-last batch."""
    n, h, w, c = x.shape
    _check_conv(c, kernel, bias)
    o, _, k, _ = kernel.shape
    if k == 1:
        cols = x.reshape(n * h * w, c)
    else:
        cols = _im2col(x, k)
    kmat = kernel.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ kmat.T
    out += bias
    return out.reshape(n, h, w, o), (cols, kmat, kernel.shape, x.shape)


def conv_nhwc_backward(dout, cache):
    cols, kmat, kshape, xshape = cache
    n, h, w, c = xshape
    o, _, k, _ = kshape
    d2 = dout.reshape(-1, o)
    dk = (d2.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    if k == 1:
        dx = (d2 @ kmat).reshape(n, h, w, c)
    else:
        # the input gradient of a 'same' convolution is another 'same'
        # convolution with the kernel flipped and its channel axes swapped
        kflip = kmat.reshape(o, k, k, c)[:, ::-1, ::-1].transpose(1, 2, 0, 3).reshape(-1, c)
        dx = (_im2col(dout, k) @ kflip).reshape(n, h, w, c)
    return dx, np.ascontiguousarray(dk), db


def tconv_nhwc_forward(x, kernel, bias):
    n, h, w, c = x.shape
    if kernel.ndim != 4 or kernel.shape[1] != c:
        raise ShapeError(f"kernel {kernel.shape} does not match {c} input channels")
    o, _, kh, kw = kernel.shape
    if bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)")
    xm = x.reshape(n * h * w, c)
    kmat = kernel.transpose(1, 2, 3, 0).reshape(c, kh * kw * o)
    cols = (xm @ kmat).reshape(n, h, w, kh, kw, o)
    if (kh, kw) == (3, 3):
        out = _tconv3_gather(cols, bias)
    else:
        full = np.zeros((n, 2 * h + kh - 2, 2 * w + kw - 2, o), dtype=cols.dtype)
        for dy in range(kh):
            for dx in range(kw):
                full[:, dy:dy + 2 * h:2, dx:dx + 2 * w:2] += cols[:, :, :, dy, dx]
        out = full[:, :2 * h, :2 * w] + bias
    return out, (xm, kmat, kernel.shape, x.shape)


def _tconv3_gather(cols, bias):
    # output (2i + a, 2j + b) collects tap a from input row i and, for even
    # a, tap a + 2 from row i - 1 (same for columns)
    n, h, w, _, _, o = cols.shape
    out = np.empty((n, h, 2, w, 2, o), dtype=cols.dtype)
    for a in (0, 1):
        for b in (0, 1):
            q = out[:, :, a, :, b]
            q[...] = cols[:, :, :, a, b] + bias
            if a == 0:
                q[:, 1:] += cols[:, :-1, :, 2, b]
            if b == 0:
                q[:, :, 1:] += cols[:, :, :-1, a, 2]
            if a == 0 and b == 0:
                q[:, 1:, 1:] += cols[:, :-1, :-1, 2, 2]
    return out.reshape(n, 2 * h, 2 * w, o)


def tconv_nhwc_backward(dout, cache):
    xm, kmat, kshape, xshape = cache
    n, h, w, c = xshape
    o, _, kh, kw = kshape
    dfull = np.zeros((n, 2 * h + kh - 2, 2 * w + kw - 2, o), dtype=dout.dtype)
    dfull[:, :2 * h, :2 * w] = dout
    dcols = np.empty((n, h, w, kh, kw, o), dtype=dout.dtype)
    for dy in range(kh):
        for dx in range(kw):
            dcols[:, :, :, dy, dx] = dfull[:, dy:dy + 2 * h:2, dx:dx + 2 * w:2]
    dcols = dcols.reshape(n * h * w, kh * kw * o)
    dx_ = (dcols @ kmat.T).reshape(n, h, w, c)
    dk = (xm.T @ dcols).reshape(c, kh, kw, o).transpose(3, 0, 1, 2)
    db = dout.sum(axis=(0, 1, 2))
    return dx_, np.ascontiguousarray(dk), db


def maxpool_nhwc_forward(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even extents, got {h}x{w}")
    win = np.stack([x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]], axis=-1)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_nhwc_backward(dout, idx):
    n, hh, ww, c = dout.shape
    dx = np.zeros((n, 2 * hh, 2 * ww, c), dtype=dout.dtype)
    for q, (oy, ox) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, oy::2, ox::2] = np.where(idx == q, dout, 0.0)
    return dx


@dataclass
class BNState:
    """Running per-channel statistics of one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels):
        return cls(np.zeros(channels), np.ones(channels))

    def copy(self):
        return BNState(self.mean.copy(), self.var.copy())


def bn_nhwc_forward(x, gamma, beta, state, mode="train", eps=BN_EPS, momentum=BN_MOMENTUM):
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        if x.size // c < 2:
            raise ShapeError("train-mode batch norm needs at least 2 values per channel")
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_state = BNState(momentum * state.mean + (1 - momentum) * mu,
                            momentum * state.var + (1 - momentum) * var)
    elif mode == "infer":
        mu, var = state.mean, state.var
        new_state = state
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    if mode == "infer":
        # fold into one affine map; xhat only matters for backward in train mode
        scale = gamma * inv
        return x * scale + (beta - mu * scale), new_state, (None, inv, gamma, mode)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, new_state, (xhat, inv, gamma, mode)


def bn_nhwc_backward(dout, cache):
    xhat, inv, gamma, mode = cache
    axes = tuple(range(dout.ndim - 1))
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if mode == "infer":
        return dxhat * inv, None, dbeta
    dgamma = (dout * xhat).sum(axis=axes)
    m = dout.size // dout.shape[-1]
    s1 = dxhat.sum(axis=axes)
    s2 = (dxhat * xhat).sum(axis=axes)
    dx = (inv / m) * (m * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# channels-first public ops (C x H x W or N x C x H x W)
# ---------------------------------------------------------------------------

def _to_nhwc(x):
    xb, squeeze = _as_batch(x)
    return np.ascontiguousarray(xb.transpose(0, 2, 3, 1)), squeeze


def _from_nhwc(y, squeeze):
    return _unbatch(np.ascontiguousarray(y.transpose(0, 3, 1, 2)), squeeze)


def conv2d_forward(x, kernel, bias):
    """Stride-1 'same' convolution (zero padding ``k // 2``)."""
    xn, squeeze = _to_nhwc(x)
    out, cache = conv_nhwc_forward(xn, np.asarray(kernel, dtype=np.float64), np.asarray(bias, dtype=np.float64))
    return _from_nhwc(out, squeeze), (cache, squeeze)


def conv2d_backward(dout, cache):
    core, squeeze = cache
    dx, dk, db = conv_nhwc_backward(_to_nhwc(dout)[0], core)
    return _from_nhwc(dx, squeeze), dk, db


def conv2d(x, kernel, bias):
    return conv2d_forward(x, kernel, bias)[0]


def tconv2d_forward(x, kernel, bias):
    """Stride-2 transposed convolution, output extent exactly ``2H x 2W``.

    ``kernel`` is ``C_out x C_in x 3 x 3``. Input node ``(i, j)`` scatters into
    output rows ``2i + dy`` and columns ``2j + dx``; the overhanging last
    row/column is cropped. This is the adjoint of a stride-2 convolution with
    zero padding on the bottom/right only.
    """
    xn, squeeze = _to_nhwc(x)
    out, cache = tconv_nhwc_forward(xn, np.asarray(kernel, dtype=np.float64), np.asarray(bias, dtype=np.float64))
    return _from_nhwc(out, squeeze), (cache, squeeze)


def tconv2d_backward(dout, cache):
    core, squeeze = cache
    dx, dk, db = tconv_nhwc_backward(_to_nhwc(dout)[0], core)
    return _from_nhwc(dx, squeeze), dk, db


def tconv2d(x, kernel, bias):
    return tconv2d_forward(x, kernel, bias)[0]


def maxpool2_forward(x):
    """Non-overlapping 2x2 max pooling. Returns ``(out, argmax)``.

    ``argmax`` holds the window-local flat index (0..3, row-major) of the
    winner, laid out like ``out``; ties go to the first position.
    """
    xn, squeeze = _to_nhwc(x)
    out, idx = maxpool_nhwc_forward(xn)
    return _from_nhwc(out, squeeze), _from_nhwc(idx, squeeze)


def maxpool2_backward(dout, idx):
    idn, squeeze = _to_nhwc(idx)
    dx = maxpool_nhwc_backward(_to_nhwc(dout)[0], idn.astype(np.intp))
    return _from_nhwc(dx, squeeze)


def maxpool2(x):
    return maxpool2_forward(x)


def batchnorm_forward(x, gamma, beta, state, mode="train", eps=BN_EPS, momentum=BN_MOMENTUM):
    """Batch normalization over ``(N, H, W)`` per channel.

    Returns ``(out, new_state, cache)``. ``new_state`` is the updated running
    statistics in train mode and ``state`` itself in infer mode; the input
    state is never mutated.
    """
    xn, squeeze = _to_nhwc(x)
    out, st, cache = bn_nhwc_forward(xn, np.asarray(gamma, dtype=np.float64),
                                     np.asarray(beta, dtype=np.float64), state, mode, eps, momentum)
    if mode == "infer":
        cache = ((xn - state.mean) * cache[1], *cache[1:])
    return _from_nhwc(out, squeeze), st, (cache, squeeze)


def batchnorm_backward(dout, cache):
    core, squeeze = cache
    dn = _to_nhwc(dout)[0]
    dx, dgamma, dbeta = bn_nhwc_backward(dn, core)
    if dgamma is None:
        dgamma = (dn * core[0]).sum(axis=(0, 1, 2))
    return _from_nhwc(dx, squeeze), dgamma, dbeta


def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def relu(x):
    return relu_forward(x)[0]


def softmax2(x):
    """Softmax over the class axis (third from last) of a ``2 x H x W`` field."""
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=-3, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-3, keepdims=True)


def softmax2_backward(dout, probs):
    s = (dout * probs).sum(axis=-3, keepdims=True)
    return probs * (dout - s)


def dropout_mask(shape, p, rng):
    """Keep-mask for inverted dropout.

    ``rng`` is either a single ``numpy.random.Generator`` or a sequence of
    generators, one per leading batch element, so each element's mask depends
    only on its own stream.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if isinstance(rng, np.random.Generator):
        return rng.random(shape) >= p
    rngs = list(rng)
    if len(rngs) != shape[0]:
        raise ValueError(f"{len(rngs)} generators for a batch of {shape[0]}")
    return np.stack([r.random(shape[1:]) for r in rngs]) >= p


def dropout_forward(x, p, rng=None, mask=None):
    """Inverted dropout: zero with probability ``p``, scale survivors by ``1/(1-p)``.

    Pass ``mask`` to replay a frozen mask instead of drawing one.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = np.asarray(x, dtype=np.float64)
    if mask is None:
        mask = dropout_mask(x.shape, p, rng)
    return x * mask / (1.0 - p), mask


def dropout_backward(dout, mask, p):
    return dout * mask / (1.0 - p)


def dropout(x, p, rng):
    return dropout_forward(x, p, rng)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _onehot_truth(probs, truth):
    truth = np.asarray(truth)
    if probs.shape[-3] != 2 or probs.shape[:-3] + probs.shape[-2:] != truth.shape:
        raise ShapeError(f"probs {probs.shape} incompatible with truth {truth.shape}")
    return truth.astype(np.intp)


def weighted_ce(probs, truth, weights):
    """Class-weighted cross-entropy averaged over every node.

    ``probs`` is ``2 x H x W`` (or batched), ``truth`` the matching 0/1 mask,
    ``weights`` the ``(w_ND, w_D)`` pair. The log is floored at 1e-12.
    """
    probs = np.asarray(probs, dtype=np.float64)
    t = _onehot_truth(probs, truth)
    w = np.asarray(weights, dtype=np.float64)
    pt = np.take_along_axis(probs, np.expand_dims(t, -3), axis=-3)
    pt = np.squeeze(pt, axis=-3)
    return float(-(w[t] * np.log(np.maximum(pt, PROB_FLOOR))).mean())


def weighted_ce_backward(probs, truth, weights):
    """Gradient of :func:`weighted_ce` with respect to ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    t = _onehot_truth(probs, truth)
    w = np.asarray(weights, dtype=np.float64)
    pt = np.squeeze(np.take_along_axis(probs, np.expand_dims(t, -3), axis=-3), axis=-3)
    g = np.where(pt > PROB_FLOOR, -w[t] / np.maximum(pt, PROB_FLOOR), 0.0) / t.size
    dp = np.zeros_like(probs)
    np.put_along_axis(dp, np.expand_dims(t, -3), np.expand_dims(g, -3), axis=-3)
    return dp


# ---------------------------------------------------------------------------
# layer wrappers + finite-difference checker
# ---------------------------------------------------------------------------

@dataclass
class LayerGrad:
    d_input: np.ndarray
    d_params: list = field(default_factory=list)


class Layer:
    """Deterministic layer with parameters for gradient checking."""

    params: list

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout) -> LayerGrad:
        raise NotImplementedError


class Conv2D(Layer):
    def __init__(self, kernel, bias):
        self.params = [np.asarray(kernel, dtype=np.float64), np.asarray(bias, dtype=np.float64)]

    def forward(self, x):
        out, self._cache = conv2d_forward(x, *self.params)
        return out

    def backward(self, dout):
        dx, dk, db = conv2d_backward(dout, self._cache)
        return LayerGrad(dx, [dk, db])


class TConv2D(Conv2D):
    def forward(self, x):
        out, self._cache = tconv2d_forward(x, *self.params)
        return out

    def backward(self, dout):
        dx, dk, db = tconv2d_backward(dout, self._cache)
        return LayerGrad(dx, [dk, db])


class MaxPool2(Layer):
    params: list = []

    def forward(self, x):
        out, self._idx = maxpool2_forward(x)
        return out

    def backward(self, dout):
        return LayerGrad(maxpool2_backward(dout, self._idx))


class BatchNorm(Layer):
    def __init__(self, gamma, beta, state=None, mode="train"):
        self.params = [np.asarray(gamma, dtype=np.float64), np.asarray(beta, dtype=np.float64)]
        self.state = state if state is not None else BNState.fresh(len(self.params[0]))
        self.mode = mode

    def forward(self, x):
        out, _, self._cache = batchnorm_forward(x, *self.params, self.state, self.mode)
        return out

    def backward(self, dout):
        dx, dg, dbt = batchnorm_backward(dout, self._cache)
        return LayerGrad(dx, [dg, dbt])


class ReLU(Layer):
    params: list = []

    def forward(self, x):
        out, self._mask = relu_forward(x)
        return out

    def backward(self, dout):
        return LayerGrad(relu_backward(dout, self._mask))


class Softmax2(Layer):
    params: list = []

    def forward(self, x):
        self._p = softmax2(x)
        return self._p

    def backward(self, dout):
        return LayerGrad(softmax2_backward(dout, self._p))


class Dropout(Layer):
    """Dropout replaying a frozen keep-mask."""

    params: list = []

    def __init__(self, p, mask):
        self.p = p
        self.mask = mask

    def forward(self, x):
        return dropout_forward(x, self.p, mask=self.mask)[0]

    def backward(self, dout):
        return LayerGrad(dropout_backward(dout, self.mask, self.p))


class WeightedCE(Layer):
    """Loss as a layer: probabilities in, scalar out."""

    params: list = []

    def __init__(self, truth, weights):
        self.truth = truth
        self.weights = weights

    def forward(self, x):
        self._x = np.asarray(x, dtype=np.float64)
        return np.asarray(weighted_ce(self._x, self.truth, self.weights))

    def backward(self, dout):
        return LayerGrad(float(dout) * weighted_ce_backward(self._x, self.truth, self.weights))


def rel_error(analytic, numeric, floor=1e-6):
    """Max abs deviation normalised by the larger of the two gradient scales.

    ``floor`` bounds the scale from below so gradients that are identically
    zero (e.g. a conv bias feeding train-mode batch norm) compare as round-off.
    """
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / scale)


def numeric_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def grad_check(layer, x, eps=1e-5, seed=0):
    """Largest relative error between ``layer.backward`` and central differences.

    The scalar probed is ``sum(forward(x) * R)`` with a fixed random ``R``, so
    every output element contributes. Inputs and all parameters are checked.
    """
    x = np.array(x, dtype=np.float64)
    out = np.asarray(layer.forward(x))
    r = np.random.default_rng(seed).standard_normal(out.shape)

    def f():
        return float((np.asarray(layer.forward(x)) * r).sum())

    layer.forward(x)
    grads = layer.backward(r if out.ndim else float(r))
    errs = [rel_error(grads.d_input, numeric_grad(f, x, eps))]
    for p, dp in zip(layer.params, grads.d_params):
        errs.append(rel_error(dp, numeric_grad(f, p, eps)))
    return max(errs)
