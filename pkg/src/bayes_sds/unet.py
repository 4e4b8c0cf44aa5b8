"""Bayesian U-Net assembled from the primitives in :mod:`bayes_sds.tensor`.

Layout (``depth`` contracting levels, channel width doubling per level)::

    enc i:  [dropout D_i if i <= dlc] -> conv3x3 -> BN -> ReLU -> (skip_i) -> maxpool
    bott:   conv3x3 -> BN -> ReLU
    dec i:  tconv3x3/2 -> concat[skip_i, up] -> conv3x3 -> BN -> ReLU
    head:   conv1x1 -> 2 channels -> softmax

The grid is zero-padded bottom/right to a multiple of ``2**depth`` on the way
in and cropped back on the way out.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int
    grid_h: int
    grid_w: int
    depth: int = 4
    base_filters: int = 32
    dlc: int = 4
    p_do: float = 0.0

    def __post_init__(self):
        for name in ("in_channels", "grid_h", "grid_w", "depth", "base_filters"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.dlc not in (1, 2, 3, 4):
            raise ValueError(f"dlc must be one of 1..4, got {self.dlc}")
        if self.dlc > self.depth:
            raise ValueError(f"dlc={self.dlc} exceeds depth={self.depth}")
        if not 0.0 <= self.p_do <= 0.7:
            raise ValueError(f"p_do must lie in [0, 0.7], got {self.p_do}")
        # most of the deepest pooling window would be padding otherwise
        if min(self.grid_h, self.grid_w) < 2 ** (self.depth - 1):
            raise ValueError(
                f"grid {self.grid_h}x{self.grid_w} too small for depth {self.depth}")

    @property
    def factor(self):
        return 2 ** self.depth

    @property
    def padded_shape(self):
        f = self.factor
        return (-(-self.grid_h // f) * f, -(-self.grid_w // f) * f)

    def widths(self):
        """Channel width of contracting blocks 1..depth."""
        return [self.base_filters * 2 ** i for i in range(self.depth)]


def param_shapes(arch: ArchConfig):
    """Ordered ``name -> shape`` map of every learnable tensor."""
    shapes = {}
    widths = arch.widths()
    cin = arch.in_channels
    for i, cw in enumerate(widths, start=1):
        shapes[f"enc{i}.conv.w"] = (cw, cin, 3, 3)
        shapes[f"enc{i}.conv.b"] = (cw,)
        shapes[f"enc{i}.bn.gamma"] = (cw,)
        shapes[f"enc{i}.bn.beta"] = (cw,)
        cin = cw
    bw = widths[-1] * 2
    shapes["bott.conv.w"] = (bw, cin, 3, 3)
    shapes["bott.conv.b"] = (bw,)
    shapes["bott.bn.gamma"] = (bw,)
    shapes["bott.bn.beta"] = (bw,)
    cin = bw
    for i in range(arch.depth, 0, -1):
        cw = widths[i - 1]
        shapes[f"dec{i}.tconv.w"] = (cw, cin, 3, 3)
        shapes[f"dec{i}.tconv.b"] = (cw,)
        shapes[f"dec{i}.conv.w"] = (cw, 2 * cw, 3, 3)
        shapes[f"dec{i}.conv.b"] = (cw,)
        shapes[f"dec{i}.bn.gamma"] = (cw,)
        shapes[f"dec{i}.bn.beta"] = (cw,)
        cin = cw
    shapes["head.w"] = (2, cin, 1, 1)
    shapes["head.b"] = (2,)
    return shapes


def param_count(arch: ArchConfig):
    return int(sum(np.prod(s) for s in param_shapes(arch).values()))


def bn_layers(arch: ArchConfig):
    names = [f"enc{i}" for i in range(1, arch.depth + 1)] + ["bott"]
    names += [f"dec{i}" for i in range(arch.depth, 0, -1)]
    return names


def is_kernel(name):
    return name.endswith(".w")


@dataclass
class UNetModel:
    arch: ArchConfig
    params: dict
    bn_state: dict
    epoch: int = 0
    seeds: list = field(default_factory=list)

    def n_dropout_layers(self):
        return self.arch.dlc

    def copy(self):
        return UNetModel(self.arch, {k: v.copy() for k, v in self.params.items()},
                         {k: s.copy() for k, s in self.bn_state.items()}, self.epoch, list(self.seeds))


def build(arch: ArchConfig, seed=0):
    """Fresh model: He-uniform kernels, zero biases, unit gamma, zero beta."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch).items():
        if is_kernel(name):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    bn_state = {}
    for name in bn_layers(arch):
        bn_state[name] = T.BNState.fresh(param_shapes(arch)[f"{name}.bn.gamma"][0])
    return UNetModel(arch, params, bn_state, seeds=[int(seed)])


def pad_to_multiple(x, factor):
    """Zero-pad the last two axes at the bottom/right up to a multiple of ``factor``."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    ph = -(-h // factor) * factor - h
    pw = -(-w // factor) * factor - w
    if ph == 0 and pw == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(x, pad)


def crop(x, grid_h, grid_w):
    return x[..., :grid_h, :grid_w]


def concat_channels(skip, up):
    return np.concatenate([skip, up], axis=1)


def forward(model: UNetModel, x, dropout_active=False, bn_mode="infer", rng=None,
            return_tape=False):
    """Per-node class probabilities for a feature grid or a batch of them.

    ``rng`` feeds the dropout masks when ``dropout_active``: a single
    ``Generator`` for the whole batch or one generator per batch element.
    With ``return_tape`` the call returns ``(probs, tape)``; the tape holds
    layer caches for :func:`backward` and the updated batch-norm state
    (``tape["bn_state"]``) when ``bn_mode == "train"``.

    Internally the network runs channels-last; only the input and the
    two-class output are transposed.
    """
    arch = model.arch
    P = model.params
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
        if rng is not None and not isinstance(rng, np.random.Generator):
            rng = list(rng)
    if x.ndim != 4 or x.shape[1] != arch.in_channels:
        raise T.ShapeError(f"input {x.shape} does not match {arch.in_channels} channels")
    if x.shape[2:] != (arch.grid_h, arch.grid_w):
        raise T.ShapeError(f"input grid {x.shape[2:]} != {(arch.grid_h, arch.grid_w)}")
    if dropout_active and rng is None:
        raise ValueError("dropout_active requires an rng")
    tape = {"bn_state": {}}
    h = np.ascontiguousarray(pad_to_multiple(x, arch.factor).transpose(0, 2, 3, 1))
    skips = []

    fused = bn_mode == "infer" and not return_tape

    def conv_bn_relu(h, prefix):
        if fused:
            # sampling only: fold the frozen batch-norm affine map into the conv
            st = model.bn_state[prefix]
            scale = P[f"{prefix}.bn.gamma"] / np.sqrt(st.var + T.BN_EPS)
            w = P[f"{prefix}.conv.w"] * scale[:, None, None, None]
            b = (P[f"{prefix}.conv.b"] - st.mean) * scale + P[f"{prefix}.bn.beta"]
            h = T.conv_nhwc_forward(h, w, b)[0]
            return np.maximum(h, 0.0, out=h)
        h, c_conv = T.conv_nhwc_forward(h, P[f"{prefix}.conv.w"], P[f"{prefix}.conv.b"])
        h, st, c_bn = T.bn_nhwc_forward(h, P[f"{prefix}.bn.gamma"], P[f"{prefix}.bn.beta"],
                                        model.bn_state[prefix], bn_mode)
        tape["bn_state"][prefix] = st
        h, c_relu = T.relu_forward(h)
        tape[prefix] = [c_conv, c_bn, c_relu]
        return h

    for i in range(1, arch.depth + 1):
        if dropout_active and i <= arch.dlc:
            h, mask = T.dropout_forward(h, arch.p_do, rng)
            tape[f"drop{i}"] = mask
        h = conv_bn_relu(h, f"enc{i}")
        skips.append(h)
        if fused:
            h = np.maximum(np.maximum(h[:, 0::2, 0::2], h[:, 0::2, 1::2]),
                           np.maximum(h[:, 1::2, 0::2], h[:, 1::2, 1::2]))
        else:
            h, tape[f"pool{i}"] = T.maxpool_nhwc_forward(h)
    h = conv_bn_relu(h, "bott")
    for i in range(arch.depth, 0, -1):
        h, c_t = T.tconv_nhwc_forward(h, P[f"dec{i}.tconv.w"], P[f"dec{i}.tconv.b"])
        tape[f"dec{i}.tconv"] = c_t
        h = np.concatenate([skips[i - 1], h], axis=-1)
        h = conv_bn_relu(h, f"dec{i}")
    logits, tape["head"] = T.conv_nhwc_forward(h, P["head.w"], P["head.b"])
    probs = T.softmax2(logits.transpose(0, 3, 1, 2))
    tape["probs"] = probs
    out = crop(probs, arch.grid_h, arch.grid_w)
    if squeeze:
        out = out[0]
    tape["squeeze"] = squeeze
    return (out, tape) if return_tape else out


def backward(model: UNetModel, tape, dprobs):
    """Gradients of a scalar loss w.r.t. every parameter, given ``dL/dprobs``."""
    arch = model.arch
    P = model.params
    grads = {}
    dprobs = np.asarray(dprobs, dtype=np.float64)
    if tape["squeeze"]:
        dprobs = dprobs[None]
    probs = tape["probs"]
    dp = np.zeros_like(probs)
    dp[..., :arch.grid_h, :arch.grid_w] = dprobs
    dh = np.ascontiguousarray(T.softmax2_backward(dp, probs).transpose(0, 2, 3, 1))
    dh, grads["head.w"], grads["head.b"] = T.conv_nhwc_backward(dh, tape["head"])

    def conv_bn_relu_back(dh, prefix):
        c_conv, c_bn, c_relu = tape[prefix]
        dh = T.relu_backward(dh, c_relu)
        dh, grads[f"{prefix}.bn.gamma"], grads[f"{prefix}.bn.beta"] = T.bn_nhwc_backward(dh, c_bn)
        dh, grads[f"{prefix}.conv.w"], grads[f"{prefix}.conv.b"] = T.conv_nhwc_backward(dh, c_conv)
        return dh

    dskips = {}
    for i in range(1, arch.depth + 1):
        dh = conv_bn_relu_back(dh, f"dec{i}")
        cw = P[f"dec{i}.tconv.w"].shape[0]
        dskips[i] = dh[..., :cw]
        dh = np.ascontiguousarray(dh[..., cw:])
        dh, grads[f"dec{i}.tconv.w"], grads[f"dec{i}.tconv.b"] = T.tconv_nhwc_backward(dh, tape[f"dec{i}.tconv"])
    dh = conv_bn_relu_back(dh, "bott")
    for i in range(arch.depth, 0, -1):
        dh = T.maxpool_nhwc_backward(dh, tape[f"pool{i}"])
        dh = dh + dskips[i]
        dh = conv_bn_relu_back(dh, f"enc{i}")
        if f"drop{i}" in tape:
            dh = T.dropout_backward(dh, tape[f"drop{i}"], arch.p_do)
    return {k: grads[k] for k in P}


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SDSC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: UNetModel, extra=None):
    """Deterministic binary serialisation: header JSON + raw float64 arrays."""
    arrays = [(k, v) for k, v in model.params.items()]
    for name, st in model.bn_state.items():
        arrays.append((f"bn_state.{name}.mean", st.mean))
        arrays.append((f"bn_state.{name}.var", st.var))
    index = []
    offset = 0
    for k, v in arrays:
        nbytes = v.size * 8
        index.append({"name": k, "shape": list(v.shape), "offset": offset})
        offset += nbytes
    header = {
        "arch": asdict(model.arch),
        "epoch": int(model.epoch),
        "seeds": [int(s) for s in model.seeds],
        "arrays": index,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in arrays)
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb + body


def save_checkpoint(model: UNetModel, path, extra=None):
    data = checkpoint_bytes(model, extra)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path):
    """Returns ``(model, extra)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(data[12:12 + hlen])
    body = data[12 + hlen:]
    arch = ArchConfig(**header["arch"])
    params, bn = {}, {}
    for ent in header["arrays"]:
        n = int(np.prod(ent["shape"], dtype=np.int64))
        end = ent["offset"] + 8 * n
        if end > len(body):
            raise CheckpointError(f"{path}: truncated array {ent['name']}")
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=ent["offset"]).reshape(ent["shape"]).astype(np.float64)
        name = ent["name"]
        if name.startswith("bn_state."):
            _, layer, stat = name.split(".")
            bn.setdefault(layer, {})[stat] = arr
        else:
            params[name] = arr
    bn_state = {k: T.BNState(v["mean"], v["var"]) for k, v in bn.items()}
    model = UNetModel(arch, params, bn_state, header["epoch"], header["seeds"])
    return model, header["extra"]
