"""Synthetic grid datasets standing in for NRHA-derived damage observations.

A dataset is a stack of ``C x H x W`` feature grids with a binary damage mask
per observation (0 = no damage, 1 = damage), plus train/val/test tags. Each
observation draws from its own RNG stream keyed by ``(seed, index)``.

File format (``.sdsb``, little-endian)::

    magic "SDSB" | version u32 | n_obs u32 | C u16 | H u16 | W u16 | pad u16 | reserved u32
    then per observation: C*H*W float32 features, H*W label bytes (0/1)

Split tags live in a sidecar text file of ``index tag`` lines.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

PATTERNS = ("none", "soft_story", "cluster", "scattered")
SPLITS = ("train", "val", "test")
GENERATOR_VERSION = "synthgrid-1"

MAGIC = b"SDSB"
VERSION = 1
_HEADER = struct.Struct("<4sIIHHHHI")  # 24 bytes


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    grid_h: int = 11
    grid_w: int = 10
    mix: tuple = (0.05, 0.15, 0.15, 0.65)
    target_fraction: float = 0.42
    channels: int = 8
    noise_sigma: float = 0.3
    stochastic_sigma: float = 0.15
    smoothing: float = 0.1
    seed: int = 0

    def __post_init__(self):
        mix = tuple(float(m) for m in self.mix)
        object.__setattr__(self, "mix", mix)
        if len(mix) != 4 or min(mix) < 0 or sum(mix) <= 0:
            raise ValueError("pattern mix needs 4 non-negative weights with positive sum")
        for name in ("target_fraction", "smoothing"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.noise_sigma < 0 or self.stochastic_sigma < 0:
            raise ValueError("noise levels must be non-negative")
        if self.grid_h < 1 or self.grid_w < 1 or self.channels < 1:
            raise ValueError("grid extents and channel count must be positive")

    @property
    def mix_probs(self):
        m = np.asarray(self.mix)
        return m / m.sum()


def obs_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def _cluster_shapes(h, w):
    return [(a, b) for a in range(1, h + 1) for b in range(1, w + 1) if 4 <= a * b <= 12]


def expected_fraction(spec: ScenarioSpec, pattern):
    """Mean damaged-node fraction of a structured pattern."""
    n = spec.grid_h * spec.grid_w
    if pattern == "none":
        return 0.0
    if pattern == "soft_story":
        rows = 1.0 + (0.1 if spec.grid_h > 1 else 0.0)
        return rows * spec.grid_w / n
    if pattern == "cluster":
        shapes = _cluster_shapes(spec.grid_h, spec.grid_w)
        return float(np.mean([a * b for a, b in shapes])) / n if shapes else 0.0
    raise ValueError(pattern)


def scattered_rate(spec: ScenarioSpec):
    """Bernoulli rate of the scattered pattern that makes the mix hit the target fraction."""
    p = spec.mix_probs
    if p[3] == 0:
        return spec.target_fraction
    rest = sum(p[i] * expected_fraction(spec, PATTERNS[i]) for i in range(3))
    return float(np.clip((spec.target_fraction - rest) / p[3], 0.0, 1.0))


def gen_mask(spec: ScenarioSpec, rng, pattern=None):
    """One damage mask; ``pattern`` is drawn from the mix unless given."""
    h, w = spec.grid_h, spec.grid_w
    if pattern is None:
        pattern = PATTERNS[rng.choice(4, p=spec.mix_probs)]
    mask = np.zeros((h, w), dtype=np.uint8)
    if pattern == "soft_story":
        r = int(rng.integers(h))
        mask[r] = 1
        if h > 1 and rng.random() < 0.1:
            nbr = [q for q in (r - 1, r + 1) if 0 <= q < h]
            mask[nbr[int(rng.integers(len(nbr)))]] = 1
    elif pattern == "cluster":
        shapes = _cluster_shapes(h, w)
        a, b = shapes[int(rng.integers(len(shapes)))]
        y0 = int(rng.integers(h - a + 1))
        x0 = int(rng.integers(w - b + 1))
        mask[y0:y0 + a, x0:x0 + b] = 1
    elif pattern == "scattered":
        mask[:] = rng.random((h, w)) < scattered_rate(spec)
    elif pattern != "none":
        raise ValueError(f"unknown pattern {pattern!r}")
    return mask


def base_field(spec: ScenarioSpec):
    """Deterministic per-channel sinusoidal background, ``C x H x W``."""
    y = np.arange(spec.grid_h)[:, None]
    x = np.arange(spec.grid_w)[None, :]
    out = np.empty((spec.channels, spec.grid_h, spec.grid_w))
    for c in range(spec.channels):
        k = 0.35 * (c + 1)
        out[c] = 0.5 * np.sin(k * y + 0.4 * c) * np.cos(0.6 * k * x + 0.9)
    return out


def mean_filter3(a):
    """One 3x3 mean-filter pass with zero padding (divides by 9 everywhere)."""
    a = np.asarray(a, dtype=np.float64)
    p = np.pad(a, 1)
    h, w = a.shape
    s = sum(p[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3))
    return s / 9.0


def damage_signature(mask, smoothing):
    """Label blended with its 3x3 mean-filtered version."""
    m = np.asarray(mask, dtype=np.float64)
    return (1.0 - smoothing) * m + smoothing * mean_filter3(m)


def draw_signature(spec: ScenarioSpec):
    """Per-channel damage magnitudes, drawn once per dataset."""
    return np.random.default_rng([int(spec.seed), 2**31 - 1]).uniform(0.5, 1.5, spec.channels)


def gen_features(mask, spec: ScenarioSpec, variant, rng, signature):
    """Feature grid for one mask.

    ``variant`` is ``"ideal"`` or ``"stochastic"``; the stochastic variant
    draws one extra global scale ``1 + delta`` after the noise, so both
    variants share noise when given identically seeded generators.
    """
    if variant not in ("ideal", "stochastic"):
        raise ValueError(f"unknown variant {variant!r}")
    sig = damage_signature(mask, spec.smoothing)
    f = base_field(spec) + np.asarray(signature)[:, None, None] * sig[None]
    f = f + rng.normal(0.0, 1.0, f.shape) * spec.noise_sigma
    if variant == "stochastic":
        f = f * (1.0 + rng.normal(0.0, 1.0) * spec.stochastic_sigma)
    return f


@dataclass
class Dataset:
    features: np.ndarray  # n x C x H x W float32
    labels: np.ndarray  # n x H x W uint8
    splits: np.ndarray = None  # n tags
    spec: ScenarioSpec = None
    signature: np.ndarray = None
    stochastic_test: "Dataset" = None
    indices: np.ndarray = None  # observation ids in the generator's numbering
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        n = len(self.features)
        if self.splits is None:
            self.splits = np.array(["train"] * n, dtype=object)
        self.splits = np.asarray(self.splits, dtype=object)
        if self.indices is None:
            self.indices = np.arange(n)
        if len(self.labels) != n or len(self.splits) != n:
            raise ValueError("features, labels and split tags must have equal length")

    def __len__(self):
        return len(self.features)

    @property
    def shape(self):
        return self.features.shape[1:]

    def where(self, tag):
        return np.flatnonzero(self.splits == tag)

    def subset(self, tag):
        idx = self.where(tag)
        return Dataset(self.features[idx], self.labels[idx], self.splits[idx], self.spec,
                       self.signature, indices=self.indices[idx])

    def class_frequencies(self):
        """Node-level ``(f_ND, f_D)``."""
        f_d = float(self.labels.mean()) if self.labels.size else 0.0
        return 1.0 - f_d, f_d

    def split_sizes(self):
        return {t: int((self.splits == t).sum()) for t in SPLITS}


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Tag observations by a seeded shuffle followed by contiguous cuts."""
    n = len(dataset)
    perm = np.random.default_rng([int(seed), 7]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    tags = np.empty(n, dtype=object)
    tags[perm[:n_train]] = "train"
    tags[perm[n_train:n_train + n_val]] = "val"
    tags[perm[n_train + n_val:]] = "test"
    dataset.splits = tags
    return dataset


def gen_masks(n_obs, spec: ScenarioSpec, tolerance=0.02):
    """Masks for a whole dataset with the running damage fraction held near target.

    Once the running fraction leaves ``target +- tolerance/2`` any candidate
    that pushes it further away is redrawn (pattern included), up to 20 times.
    """
    rngs = [obs_rng(spec.seed, i) for i in range(n_obs)]
    nodes = spec.grid_h * spec.grid_w
    masks = np.empty((n_obs, spec.grid_h, spec.grid_w), dtype=np.uint8)
    total = 0
    band = tolerance / 2
    for i, rng in enumerate(rngs):
        best = None
        for _ in range(20):
            m = gen_mask(spec, rng)
            frac = (total + int(m.sum())) / ((i + 1) * nodes)
            dev = frac - spec.target_fraction
            if best is None or abs(dev) < best[0]:
                best = (abs(dev), m)
            running = total / (i * nodes) if i else spec.target_fraction
            drift = running - spec.target_fraction
            if abs(drift) <= band or abs(dev) <= abs(drift):
                best = (abs(dev), m)
                break
        masks[i] = best[1]
        total += int(best[1].sum())
    return masks, rngs


def gen_dataset(n_obs, spec: ScenarioSpec, fractions=(0.8, 0.1, 0.1)):
    """Ideal dataset with split tags and a paired stochastic test set attached."""
    if n_obs < 10:
        raise ValueError("need at least 10 observations")
    masks, rngs = gen_masks(n_obs, spec)
    signature = draw_signature(spec)
    # the mask draws consumed each stream up to here; snapshot for the stochastic replay
    states = [r.bit_generator.state for r in rngs]
    feats = np.stack([gen_features(m, spec, "ideal", r, signature) for m, r in zip(masks, rngs)])
    ds = Dataset(feats, masks, spec=spec, signature=signature,
                 provenance={"generator": GENERATOR_VERSION})
    split(ds, fractions, spec.seed)
    test = ds.where("test")
    sfeats = []
    for i in test:
        r = np.random.default_rng()
        r.bit_generator.state = states[i]
        sfeats.append(gen_features(masks[i], spec, "stochastic", r, signature))
    sfeats = np.stack(sfeats) if len(test) else np.empty((0,) + ds.shape)
    ds.stochastic_test = Dataset(sfeats, masks[test], ["test"] * len(test), spec, signature,
                                 indices=test, provenance={"variant": "stochastic"})
    return ds


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def file_size(n, c, h, w):
    return _HEADER.size + n * (c * h * w * 4 + h * w)


def save(dataset: Dataset, path, splits_path=None):
    """Write the SDSB file and (if tags exist) its sidecar split file."""
    path = Path(path)
    n = len(dataset)
    c, h, w = dataset.shape
    feats = np.ascontiguousarray(dataset.features, dtype="<f4").reshape(n, -1)
    labs = np.ascontiguousarray(dataset.labels, dtype=np.uint8).reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, c, h, w, 0, 0))
        for i in range(n):
            fh.write(feats[i].tobytes())
            fh.write(labs[i].tobytes())
    splits_path = Path(splits_path) if splits_path else path.with_suffix(".splits")
    with open(splits_path, "w") as fh:
        for i, tag in zip(dataset.indices, dataset.splits):
            fh.write(f"{int(i)} {tag}\n")
    return path, splits_path


def load(path, splits_path=None):
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, n, c, h, w, _pad, _res = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    expect = file_size(n, c, h, w)
    if len(data) != expect:
        raise DataFormatError(f"{path}: size {len(data)} != expected {expect} (truncated or padded)")
    rec = np.dtype([("f", "<f4", (c * h * w,)), ("y", "u1", (h * w,))])
    arr = np.frombuffer(data, dtype=rec, count=n, offset=_HEADER.size)
    feats = arr["f"].reshape(n, c, h, w).astype(np.float32)
    labels = arr["y"].reshape(n, h, w).astype(np.uint8)
    if labels.size and labels.max() > 1:
        raise DataFormatError(f"{path}: labels must be 0/1")
    splits_path = Path(splits_path) if splits_path else path.with_suffix(".splits")
    tags, indices = None, None
    if splits_path.exists():
        rows = [ln.split() for ln in splits_path.read_text().splitlines() if ln.strip()]
        if len(rows) != n or any(len(r) != 2 or r[1] not in SPLITS for r in rows):
            raise DataFormatError(f"{splits_path}: malformed split file")
        indices = np.array([int(r[0]) for r in rows])
        tags = np.array([r[1] for r in rows], dtype=object)
    return Dataset(feats, labels, tags, indices=indices)


def write_manifest(dataset: Dataset, path):
    """Generator manifest: scenario spec, damage signature, realised statistics."""
    f_nd, f_d = dataset.class_frequencies()
    info = {
        "generator": GENERATOR_VERSION,
        "spec": asdict(dataset.spec) if dataset.spec else None,
        "signature": [float(v) for v in dataset.signature] if dataset.signature is not None else None,
        "scattered_rate": scattered_rate(dataset.spec) if dataset.spec else None,
        "n_obs": len(dataset),
        "split_sizes": dataset.split_sizes(),
        "class_frequencies": {"ND": f_nd, "D": f_d},
    }
    Path(path).write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return info


def with_overrides(spec: ScenarioSpec, **kw):
    return replace(spec, **kw)
