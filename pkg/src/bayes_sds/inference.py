"""Monte Carlo dropout sampling, posterior statistics and decision rules."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics, unet

CHUNK = 128  # (observation, sample) pairs per forward pass


def sample_rng(seed, obs_id, i):
    return np.random.default_rng([int(seed), int(obs_id), int(i)])


def mc_sample(model, x, n_sample, seed, obs_ids=None, workers=1, chunk=CHUNK):
    """``n_sample`` dropout-active forward passes per observation.

    Returns an array ``n_sample x N x 2 x H x W`` (or ``n_sample x 2 x H x W``
    for a single grid). Sample ``i`` of observation ``j`` draws its masks from
    a stream keyed by ``(seed, obs_ids[j], i)`` and the pairs are cut into
    fixed chunks, so the result does not depend on ``workers``. Batch norm
    stays in infer mode.
    """
    if n_sample < 1:
        raise ValueError("n_sample must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    n = len(x)
    obs_ids = np.arange(n) if obs_ids is None else np.asarray(obs_ids)
    gh, gw = model.arch.grid_h, model.arch.grid_w
    out = np.empty((n_sample, n, 2, gh, gw))
    if model.arch.p_do == 0:
        # no dropout: every pass is the same function, so run it once
        for s in range(0, n, chunk):
            out[:, s:s + chunk] = unet.forward(model, x[s:s + chunk])[None]
        return out[:, 0] if single else out
    pairs = [(j, i) for j in range(n) for i in range(n_sample)]
    chunks = [pairs[s:s + chunk] for s in range(0, len(pairs), chunk)]

    def run(ch):
        js = np.array([p[0] for p in ch])
        rngs = [sample_rng(seed, obs_ids[j], i) for j, i in ch]
        probs = unet.forward(model, x[js], True, "infer", rngs)
        for (j, i), pr in zip(ch, probs):
            out[i, j] = pr

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(run, chunks))
    else:
        for ch in chunks:
            run(ch)
    return out[:, 0] if single else out


def _var(a):
    """Population variance over axis 0, shifted by the first sample.

    Identical samples give exactly zero, which the plain two-pass form does
    not guarantee once the mean is rounded.
    """
    d = a - a[0]
    return ((d - d.mean(axis=0)) ** 2).mean(axis=0)


@dataclass
class PosteriorField:
    mean_probs: np.ndarray  # [N x] 2 x H x W
    variance: np.ndarray  # [N x] H x W
    n_sample: int
    max_variance: np.ndarray  # scalar or per observation


def posterior_stats(samples):
    """Mean class probabilities and population variance of P(D) per node."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 1:
        raise ValueError("need at least one sample")
    mean = samples.mean(axis=0)
    var = _var(samples[:, ..., 1, :, :])
    return PosteriorField(mean, var, samples.shape[0], var.max(axis=(-2, -1)))


def class_variances(samples):
    """``(Var P(ND), Var P(D))`` computed independently from each class channel."""
    samples = np.asarray(samples, dtype=np.float64)
    return _var(samples[:, ..., 0, :, :]), _var(samples[:, ..., 1, :, :])


@dataclass
class Decision:
    labels: np.ndarray
    rule: str
    priors: tuple


def decide(post: PosteriorField, rule="MAP", priors=(0.5, 0.5)):
    """Node labels from expected probabilities.

    MAP takes the larger mean probability; ML divides by the class priors
    first. Exact ties go to damage.
    """
    pri = np.asarray(priors, dtype=np.float64)
    if pri.shape != (2,) or np.any(pri <= 0):
        raise ValueError(f"priors must be two positive values, got {priors}")
    m = np.asarray(post.mean_probs)
    s_nd, s_d = m[..., 0, :, :], m[..., 1, :, :]
    if rule == "ML":
        s_nd, s_d = s_nd / pri[0], s_d / pri[1]
    elif rule != "MAP":
        raise ValueError(f"unknown decision rule {rule!r}")
    return Decision((s_d >= s_nd).astype(np.uint8), rule, tuple(float(p) for p in pri))


def normalize_uncertainty(post: PosteriorField):
    """Variance divided by its per-observation maximum; all zeros when that is < 1e-15."""
    var = np.asarray(post.variance)
    mx = np.asarray(post.max_variance)[..., None, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(mx < 1e-15, 0.0, var / np.where(mx < 1e-15, 1.0, mx))
    return out


@dataclass
class InferenceResult:
    decision: Decision
    posterior: PosteriorField
    uncertainty: np.ndarray
    wall_time: float


def infer(model, x, n_sample, rule="MAP", priors=(0.5, 0.5), seed=0, obs_ids=None, workers=1):
    t0 = time.perf_counter()
    samples = mc_sample(model, x, n_sample, seed, obs_ids, workers)
    post = posterior_stats(samples)
    dec = decide(post, rule, priors)
    unc = normalize_uncertainty(post)
    return InferenceResult(dec, post, unc, time.perf_counter() - t0)


def stability_study(model, sub, n_samples, trials, seed, rule="MAP", priors=(0.5, 0.5)):
    """Metric spread over repeated MC trials: ``{n: {metric: TrialStats}}``.

    Trial ``k`` uses seed ``seed + k``. Because sample ``i`` always draws from
    the stream ``(seed, obs_id, i)``, a trial at a smaller ``n`` equals the
    first ``n`` samples of the same trial at the largest ``n``; each trial is
    sampled once and the smaller estimates are read off its prefixes.
    """
    ns = sorted(set(int(n) for n in n_samples))
    per = {n: {"mca": [], "ga": [], "acc_d": [], "acc_nd": []} for n in ns}
    for k in range(trials):
        samples = mc_sample(model, sub.features, ns[-1], seed + k, sub.indices)
        for n in ns:
            dec = decide(posterior_stats(samples[:n]), rule, priors)
            s = metrics.summary(metrics.confusion(dec.labels, sub.labels))
            for m in per[n]:
                per[n][m].append(float(s[m]))
    return {n: {m: metrics.trial_stats(v, m) for m, v in per[n].items()} for n in ns}


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------

def write_label_csv(labels, path):
    labels = np.asarray(labels)
    with open(path, "w") as fh:
        for row in labels:
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def read_label_csv(path):
    rows = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    return np.array([[int(v) for v in r.split(",")] for r in rows], dtype=np.uint8)


def write_pgm(mask, path, binary=True):
    """8-bit greyscale PGM with pixel ``round(255 * mask)``."""
    px = np.rint(255.0 * np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0)).astype(np.uint8)
    h, w = px.shape
    with open(path, "wb") as fh:
        if binary:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(px.tobytes())
        else:
            fh.write(f"P2\n{w} {h}\n255\n".encode("ascii"))
            for row in px:
                fh.write((" ".join(str(int(v)) for v in row) + "\n").encode("ascii"))


def read_pgm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    kind, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    if kind == b"P5":
        return np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
    if kind == b"P2":
        return np.array(data[pos:].split(), dtype=np.uint8).reshape(h, w)
    raise ValueError(f"not a greyscale PGM: {kind!r}")


def write_posterior_csv(post: PosteriorField, path):
    """One row per node: y, x, mean P(D), variance; summary fields repeated per row."""
    mean_d = np.asarray(post.mean_probs)[1]
    var = np.asarray(post.variance)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y", "x", "mean_p_d", "variance", "max_variance", "n_sample"])
        for (y, x), v in np.ndenumerate(var):
            w.writerow([y, x, repr(float(mean_d[y, x])), repr(float(v)),
                        repr(float(post.max_variance)), post.n_sample])
