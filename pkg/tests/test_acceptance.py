"""Acceptance criteria 1-12.

Each test records one PASS/FAIL line through the ``verdict`` fixture; the lines
are printed together at the end of the session. The desk-scale model is trained
once per module and shared by criteria 6 and 8-11.
"""

import csv
import time
from fractions import Fraction

import numpy as np
import pytest

from bayes_sds import cli, data, gradcheck, inference, metrics, train, unet
from bayes_sds import tensor as T

DESK_SEED = 1
DESK_TRAIN = dict(lr0=1e-3, batch=32, max_epochs=30, patience=5, weight_mode="MFW", n_val_samples=10)


def desk_arch(ds):
    c, h, w = ds.shape
    return unet.ArchConfig(c, h, w, depth=4, base_filters=16, dlc=4, p_do=0.4)


def fit(ds, arch, seed, **kw):
    model = unet.build(arch, seed)
    hist = train.train(model, ds, train.TrainConfig(seed=seed, **kw))
    return model, hist


def scores(model, sub, n_sample=50, seed=7, priors=(0.5, 0.5)):
    r = inference.infer(model, sub.features, n_sample, "MAP", priors, seed, sub.indices)
    return metrics.summary(metrics.confusion(r.decision.labels, sub.labels)), r


@pytest.fixture(scope="module")
def desk():
    ds = data.gen_dataset(2000, data.ScenarioSpec(grid_h=11, grid_w=10, channels=8, noise_sigma=0.3, seed=DESK_SEED))
    t0 = time.perf_counter()
    model, hist = fit(ds, desk_arch(ds), DESK_SEED, **DESK_TRAIN)
    return ds, model, hist, time.perf_counter() - t0


# --- 1-5: identities and invariants ------------------------------------------------------

def test_c01_metric_identity(verdict):
    got = [round(metrics.mca_from(d, nd), 2) for d, nd in ((97.16, 96.82), (96.26, 97.04), (90.20, 88.18))]
    verdict(1, got == [96.99, 96.65, 89.19], f"mca rows {got}")


def test_c02_median_frequency_identity(verdict):
    w_nd, w_d = train.median_frequency_weights(58, 42)
    close = abs(float(w_nd) - 0.8621) < 1e-4 and abs(float(w_d) - 1.1905) < 1e-4
    exact = w_d / w_nd == Fraction(58, 42)
    verdict(2, close and exact, f"weights ({float(w_nd):.4f}, {float(w_d):.4f}), ratio {w_d / w_nd}")


def test_c03_gradient_suite(verdict):
    t0 = time.perf_counter()
    rows = gradcheck.run_suite(seeds=tuple(range(5)))
    rng = np.random.default_rng(0)
    adj = 0.0
    for _ in range(20):
        h, w = rng.integers(1, 6, size=2)
        k = rng.standard_normal((3, 2, 3, 3))
        # same conv: <conv(x), y> == <x, conv^T(y)> with conv^T taken from the backward pass
        x = rng.standard_normal((2, 2 * h, 2 * w))
        y = rng.standard_normal((3, 2 * h, 2 * w))
        out, cache = T.conv2d_forward(x, k, np.zeros(3))
        adj = max(adj, abs(np.vdot(out, y) - np.vdot(x, T.conv2d_backward(y, cache)[0])))
        # transposed conv against its own backward
        kt = rng.standard_normal((2, 3, 3, 3))
        xs = rng.standard_normal((3, h, w))
        ys = rng.standard_normal((2, 2 * h, 2 * w))
        out, cache = T.tconv2d_forward(xs, kt, np.zeros(2))
        adj = max(adj, abs(np.vdot(out, ys) - np.vdot(xs, T.tconv2d_backward(ys, cache)[0])))
    worst = max(rows, key=lambda r: r[1] / r[2])
    ok = all(r[3] for r in rows) and adj < 1e-10 and time.perf_counter() - t0 < 120
    verdict(3, ok, f"{len(rows)} checks, worst {worst[0]} {worst[1]:.2e} (< {worst[2]:.0e}), adjoint {adj:.1e}")


def test_c04_bayesian_invariants(verdict):
    arch = unet.ArchConfig(3, 11, 10, depth=2, base_filters=4, dlc=2, p_do=0.4)
    x = np.random.default_rng(0).standard_normal((5, 3, 11, 10))
    s = inference.mc_sample(unet.build(arch, 0), x, 30, seed=1)
    v_nd, v_d = inference.class_variances(s)
    gap = np.abs(v_nd - v_d).max()
    norm = inference.normalize_uncertainty(inference.posterior_stats(s))
    in_range = norm.min() >= 0 and norm.max() <= 1 and np.all(norm.max(axis=(-2, -1)) == 1.0)

    off = unet.build(unet.ArchConfig(3, 11, 10, depth=2, base_filters=4, dlc=2, p_do=0.0), 0)
    a = inference.mc_sample(off, x, 10, seed=1)
    b = inference.mc_sample(off, x, 10, seed=2)
    still = inference.posterior_stats(a).variance.max() == 0 and a.tobytes() == b.tobytes()
    still = still and np.all(a == unet.forward(off, x)[None])
    verdict(4, gap < 1e-12 and in_range and still,
            f"var gap {gap:.1e}, mask in [0,1] with max 1: {in_range}, p_do=0 deterministic: {still}")


def test_c05_decision_rules(verdict):
    post = inference.PosteriorField(np.array([0.55, 0.45])[:, None, None], np.zeros((1, 1)), 1, np.array(0.0))
    pri = (0.58, 0.42)
    map_ = int(inference.decide(post, "MAP", pri).labels[0, 0])
    ml = int(inference.decide(post, "ML", pri).labels[0, 0])
    rng = np.random.default_rng(0)
    same = True
    for _ in range(100):
        p = rng.random((11, 10))
        field = inference.PosteriorField(np.stack([1 - p, p]), np.zeros((11, 10)), 1, np.array(0.0))
        same &= np.array_equal(inference.decide(field, "MAP").labels, inference.decide(field, "ML", (0.5, 0.5)).labels)
    verdict(5, map_ == 0 and ml == 1 and same, f"MAP -> {'ND' if map_ == 0 else 'D'}, "
            f"ML -> {'D' if ml == 1 else 'ND'}, uniform ML == MAP on 100 fields: {same}")


# --- 6-11: trained models -------------------------------------------------------------------

def test_c06_desk_end_to_end(desk, verdict):
    ds, model, hist, secs = desk
    val, _ = scores(model, ds.subset("val"))
    test, _ = scores(model, ds.subset("test"))
    epochs = len(hist.epochs)
    ok = val["mca"] >= 0.95 and test["mca"] >= 0.93 and epochs <= 150 and secs < 1800
    verdict(6, ok, f"val MCA {val['mca']:.4f}, test MCA {test['mca']:.4f}, "
            f"{epochs} epochs (best {hist.best_epoch}), {secs:.0f} s")


def test_c07_mfw_raises_damage_accuracy(verdict):
    # imbalanced and noisy enough that the weighting matters within a short budget
    ds = data.gen_dataset(1000, data.ScenarioSpec(target_fraction=0.25, noise_sigma=0.8, seed=7))
    arch = desk_arch(ds)
    te = ds.subset("test")
    short = dict(lr0=1e-3, batch=32, max_epochs=6, patience=6, n_val_samples=5)
    gaps = []
    for seed in (1, 2, 3):
        acc = {}
        for mode in ("UW", "MFW"):
            model, _ = fit(ds, arch, seed, weight_mode=mode, **short)
            acc[mode] = scores(model, te, n_sample=20)[0]["acc_d"]
        gaps.append(100 * (acc["MFW"] - acc["UW"]))
    wins = sum(g >= 0.5 for g in gaps)
    verdict(7, wins >= 2, "D-accuracy gain MFW - UW (pp): " + ", ".join(f"{g:+.2f}" for g in gaps))


def test_c08_stability(desk, verdict):
    ds, model, _, _ = desk
    t0 = time.perf_counter()
    res = inference.stability_study(model, ds.subset("test"), (5, 50, 200), 10, seed=100)
    secs = time.perf_counter() - t0
    sd = {n: res[n]["mca"].std for n in res}
    verdict(8, sd[200] < sd[5] and secs < 600,
            f"std MCA n=5 {sd[5]:.2e}, n=50 {sd[50]:.2e}, n=200 {sd[200]:.2e}, {secs:.0f} s")


def test_c09_runtime_linearity(desk, verdict):
    ds, model, _, _ = desk
    sub = ds.subset("test")
    x, ids = sub.features[:100], sub.indices[:100]
    inference.infer(model, x, 5, seed=3, obs_ids=ids)  # warm-up, untimed
    t = {n: inference.infer(model, x, n, seed=3, obs_ids=ids).wall_time for n in (100, 200)}
    ratio = t[200] / t[100]
    verdict(9, 1.6 <= ratio <= 2.4, f"t(200)/t(100) = {ratio:.3f} on {len(x)} observations "
            f"({t[100]:.1f} s, {t[200]:.1f} s)")


def test_c10_uncertainty_tracks_errors(desk, verdict):
    ds, model, _, _ = desk
    sub = ds.subset("test")
    _, r = scores(model, sub)
    wrong = r.decision.labels != sub.labels
    ratio = r.uncertainty[wrong].mean() / r.uncertainty[~wrong].mean()
    verdict(10, ratio >= 1.5, f"mean normalized variance wrong/right = {ratio:.2f} ({int(wrong.sum())} errors)")


def test_c11_stochastic_not_better(desk, verdict):
    ds, model, _, _ = desk
    models = {DESK_SEED: model}
    for seed in (2, 3):
        models[seed] = fit(ds, desk_arch(ds), seed, **DESK_TRAIN)[0]
    pairs = []
    for seed, m in models.items():
        ideal = scores(m, ds.subset("test"))[0]["mca"]
        stoch = scores(m, ds.stochastic_test)[0]["mca"]
        pairs.append((ideal, stoch))
    bounded = all(s <= i + 0.005 for i, s in pairs)
    lower = sum(s < i for i, s in pairs)
    verdict(11, bounded and lower >= 2,
            "ideal/stochastic MCA: " + ", ".join(f"{i:.4f}/{s:.4f}" for i, s in pairs))


# --- 12: determinism through the command line ---------------------------------------------

MINI = """\
data.n_obs = 40
data.grid_h = 8
data.grid_w = 8
data.channels = 2
data.seed = 1
arch.depth = 2
arch.base_filters = 4
arch.dlc = 2
train.lr0 = 0.003
train.batch = 16
train.max_epochs = 2
train.n_val_samples = 2
infer.n_sample = 4
sweep.p_do = 0.1,0.3
sweep.dlc = 1,2
sweep.weight_mode = MFW
sweep.n_sample = 3
"""


def _same_tree(a, b):
    names = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    return names and all((a / n).read_bytes() == (b / n).read_bytes() for n in names)


def test_c12_cli_determinism(tmp_path, verdict):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(MINI)

    def go(*args):
        return cli.main([args[0], "--config", str(cfg), *args[1:]])

    assert go("generate", "--out", str(tmp_path / "gen")) == 0
    dpath = str(tmp_path / "gen" / "dataset.sdsb")
    for k in ("t1", "t2"):
        assert go("train", "--data", dpath, "--out", str(tmp_path / k)) == 0
    ckpt = [(tmp_path / k / "checkpoint.sdsc").read_bytes() for k in ("t1", "t2")]
    train_ok = ckpt[0] == ckpt[1]

    for k in ("i1", "i2"):
        assert go("infer", "--data", dpath, "--checkpoint", str(tmp_path / "t1" / "checkpoint.sdsc"),
                  "--out", str(tmp_path / k)) == 0
    infer_ok = bool(_same_tree(tmp_path / "i1" / "pred", tmp_path / "i2" / "pred"))

    assert go("sweep", "--data", dpath, "--out", str(tmp_path / "full")) == 0
    half = tmp_path / "half.cfg"
    half.write_text(MINI + "sweep.dlc = 1\n")
    assert cli.main(["sweep", "--config", str(half), "--data", dpath, "--out", str(tmp_path / "part")]) == 0
    assert go("sweep", "--data", dpath, "--out", str(tmp_path / "part"), "--resume") == 0
    rows = list(csv.DictReader(open(tmp_path / "full" / "metrics.csv")))
    sweep_ok = (tmp_path / "part" / "metrics.csv").read_bytes() == (tmp_path / "full" / "metrics.csv").read_bytes()
    sweep_ok = sweep_ok and bool(_same_tree(tmp_path / "full" / "cells", tmp_path / "part" / "cells"))
    verdict(12, train_ok and infer_ok and sweep_ok and len(rows) >= 4,
            f"train checkpoints identical: {train_ok}, infer masks identical: {infer_ok}, "
            f"sweep resume ({len(rows)} metric rows) identical: {sweep_ok}")
