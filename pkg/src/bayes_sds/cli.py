"""Command-line entry point: ``bayes-sds <command> --config run.cfg --out DIR``.

Exit codes: 0 success, 1 failed check, 2 config error, 3 data-format error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data, gradcheck, inference, metrics, train, unet
from .config import ConfigError
from .data import DataFormatError
from .unet import CheckpointError

log = logging.getLogger("bayes_sds")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


class CoverageError(DataFormatError):
    """Predictions are missing for some observation."""


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out, command, cfg, seeds, inputs, outputs, started, timing_files=()):
    """One JSON manifest per run. Files listed in ``timing_files`` carry no checksum."""
    manifest = {
        "command": command,
        "config": cfg.lines(),
        "seeds": seeds,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {str(Path(p).relative_to(out)): (None if p in timing_files else sha256(p))
                    for p in outputs},
        "wall_seconds": round(time.perf_counter() - started, 3),
    }
    path = Path(out) / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def stochastic_path(path):
    path = Path(path)
    return path.with_name(path.stem + "_stochastic.sdsb")


def load_split(path, split, variant="ideal"):
    """Observations of one split, optionally from the paired stochastic test file."""
    if variant == "stochastic":
        if split != "test":
            raise ConfigError("the stochastic variant only exists for the test split", key="infer.variant")
        return data.load(stochastic_path(path))
    if variant != "ideal":
        raise ConfigError(f"unknown variant {variant!r}", key="infer.variant")
    ds = data.load(path)
    if split not in data.SPLITS:
        raise ConfigError(f"unknown split {split!r}", key="infer.split")
    return ds.subset(split)


def _dataset_path(args, cfg):
    p = args.data or cfg["data.path"]
    if not p:
        raise ConfigError("no dataset given (use --data or data.path)", key="data.path")
    return Path(p)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args, cfg, out):
    started = time.perf_counter()
    if args.seed is not None:
        cfg.values["data.seed"] = args.seed
    spec = cfg.scenario()
    ds = data.gen_dataset(cfg["data.n_obs"], spec)
    main, splits = data.save(ds, out / "dataset.sdsb")
    st, st_splits = data.save(ds.stochastic_test, out / "dataset_stochastic.sdsb")
    man = out / "generator_manifest.json"
    info = data.write_manifest(ds, man)
    f = info["class_frequencies"]
    sz = info["split_sizes"]
    print(f"class frequencies: ND {f['ND']:.4f}  D {f['D']:.4f}")
    print(f"splits: train {sz['train']}  val {sz['val']}  test {sz['test']}")
    write_manifest(out, "generate", cfg, {"data.seed": spec.seed}, {},
                   [main, splits, st, st_splits, man], started)


def train_model(cfg, ds, seed=None, log_fn=None, **arch_override):
    arch = cfg.arch(ds.shape[0], ds.shape[1], ds.shape[2], **arch_override)
    model = unet.build(arch, cfg["arch.seed"])
    tcfg = cfg.train(**({"seed": seed} if seed is not None else {}))
    hist = train.train(model, ds, tcfg, log=log_fn)
    return model, hist, tcfg


def cmd_train(args, cfg, out):
    started = time.perf_counter()
    if args.seed is not None:
        cfg.values["train.seed"] = args.seed
    path = _dataset_path(args, cfg)
    ds = data.load(path)
    model, hist, tcfg = train_model(cfg, ds, log_fn=log.info)
    ckpt = out / "checkpoint.sdsc"
    unet.save_checkpoint(model, ckpt, extra={
        "priors": list(hist.priors), "weights": list(hist.weights),
        "weight_mode": tcfg.weight_mode, "best_epoch": hist.best_epoch,
        "best_val_loss": hist.best_val_loss})
    hcsv = out / "history.csv"
    hist.write_csv(hcsv)
    print(f"best epoch {hist.best_epoch}  bayesian val loss {hist.best_val_loss:.6f}  "
          f"({len(hist.epochs)} epochs run)")
    write_manifest(out, "train", cfg, {"train.seed": tcfg.seed, "arch.seed": cfg["arch.seed"]},
                   {"data": path}, [ckpt, hcsv], started)


def evaluate_rules(model, sub, n_sample, seed, priors, rules=("MAP", "ML")):
    """Confusion-based metrics for each rule from a single MC posterior."""
    samples = inference.mc_sample(model, sub.features, n_sample, seed, sub.indices)
    post = inference.posterior_stats(samples)
    out = {}
    for rule in rules:
        dec = inference.decide(post, rule, priors)
        out[rule] = metrics.summary(metrics.confusion(dec.labels, sub.labels))
    return out


def cell_id(dlc, p_do, wm):
    return f"dlc{dlc}_p{p_do:.2f}_{wm}"


def cmd_sweep(args, cfg, out):
    started = time.perf_counter()
    if args.seed is not None:
        cfg.values["train.seed"] = args.seed
    path = _dataset_path(args, cfg)
    ds = data.load(path)
    split = cfg["sweep.split"]
    sub = ds.subset(split)
    cells = list(itertools.product(cfg["sweep.dlc"], cfg["sweep.p_do"], cfg["sweep.weight_mode"]))
    rows, failures, outputs = [], [], []
    for dlc, p_do, wm in cells:
        cid = cell_id(dlc, p_do, wm)
        cdir = out / "cells" / cid
        cdir.mkdir(parents=True, exist_ok=True)
        res_path = cdir / "result.json"
        ckpt = cdir / "checkpoint.sdsc"
        seed = int(np.random.SeedSequence([cfg["train.seed"], dlc, int(round(p_do * 100)),
                                           ("UW", "MFW").index(wm)]).generate_state(1)[0])
        if args.resume and res_path.exists():
            done = json.loads(res_path.read_text())
            if "error" not in done and ckpt.exists() and sha256(ckpt) == done["checkpoint_sha256"]:
                rows.extend(done["rows"])
                outputs += [ckpt, res_path]
                print(f"{cid}: resumed")
                continue
        try:
            c2 = cfgmod.RunConfig(dict(cfg.values))
            c2.values["train.weight_mode"] = wm
            model, hist, _ = train_model(c2, ds, seed=seed, dlc=dlc, p_do=p_do)
            digest = unet.save_checkpoint(model, ckpt, extra={"priors": list(hist.priors),
                                                              "weights": list(hist.weights),
                                                              "weight_mode": wm})
            scores = evaluate_rules(model, sub, cfg["sweep.n_sample"], seed, hist.priors)
            cell_rows = [dict(model_id=cid, dlc=dlc, p_do=p_do, weight_mode=wm, rule=rule, split=split,
                              n_sample=cfg["sweep.n_sample"], seed=seed, **{k: float(v) for k, v in s.items()})
                         for rule, s in scores.items()]
            res_path.write_text(json.dumps({"checkpoint_sha256": digest, "rows": cell_rows},
                                           indent=2, sort_keys=True) + "\n")
            rows.extend(cell_rows)
            outputs += [ckpt, res_path]
            print(f"{cid}: MCA MAP {metrics.pct(scores['MAP']['mca'])}  ML {metrics.pct(scores['ML']['mca'])}")
        except (FloatingPointError, ValueError) as e:
            failures.append({"cell": cid, "error": str(e)})
            res_path.write_text(json.dumps({"error": str(e)}) + "\n")
            print(f"{cid}: FAILED {e}")
    report = metrics.sweep_report(rows)
    mcsv = out / "metrics.csv"
    metrics.write_metrics_csv(rows, mcsv)
    outputs.append(mcsv)
    for rule, rep in report.items():
        rcsv = out / f"ranked_{rule}.csv"
        metrics.write_metrics_csv(rep["rows"], rcsv)
        txt = out / f"report_{rule}.txt"
        txt.write_text(metrics.format_table(rep["top"], f"{rule}: highest {split} MCA") + "\n\n"
                       + metrics.format_table(rep["bottom"], f"{rule}: lowest {split} MCA") + "\n")
        outputs += [rcsv, txt]
        print(txt.read_text())
    if failures:
        fpath = out / "failures.json"
        fpath.write_text(json.dumps(failures, indent=2) + "\n")
        outputs.append(fpath)
    write_manifest(out, "sweep", cfg, {"train.seed": cfg["train.seed"]}, {"data": path}, outputs, started)


def _priors(cfg, extra):
    return tuple(extra.get("priors", (0.5, 0.5)))


def pred_name(obs_id, kind):
    return f"obs_{int(obs_id):05d}_{kind}"


def cmd_infer(args, cfg, out):
    started = time.perf_counter()
    if args.seed is not None:
        cfg.values["infer.seed"] = args.seed
    if not args.checkpoint:
        raise ConfigError("infer needs --checkpoint")
    model, extra = unet.load_checkpoint(args.checkpoint)
    path = _dataset_path(args, cfg)
    sub = load_split(path, cfg["infer.split"], cfg["infer.variant"])
    priors = _priors(cfg, extra)
    rule = cfg["infer.rule"]
    seed = cfg["infer.seed"]
    pred = out / "pred"
    pred.mkdir(parents=True, exist_ok=True)
    timing = []
    result = None
    for n in cfg["infer.n_sample"]:
        r = inference.infer(model, sub.features, n, rule, priors, seed, sub.indices, cfg["infer.workers"])
        timing.append((n, r.wall_time))
        if result is None or n >= result[0]:
            result = (n, r)
    n_best, r = result
    outputs = []
    for k, obs in enumerate(sub.indices):
        lab = pred / (pred_name(obs, "labels") + ".csv")
        inference.write_label_csv(r.decision.labels[k], lab)
        pgm = pred / (pred_name(obs, "uncertainty") + ".pgm")
        inference.write_pgm(r.uncertainty[k], pgm)
        post = inference.PosteriorField(r.posterior.mean_probs[k], r.posterior.variance[k],
                                        r.posterior.n_sample, r.posterior.max_variance[k])
        pcsv = pred / (pred_name(obs, "posterior") + ".csv")
        inference.write_posterior_csv(post, pcsv)
        outputs += [lab, pgm, pcsv]
    tpath = out / "timing.csv"
    with open(tpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_sample", "total_seconds", "ms_per_observation"])
        for n, t in timing:
            w.writerow([n, f"{t:.6f}", f"{1e3 * t / max(len(sub), 1):.4f}"])
    for n, t in timing:
        print(f"n_sample {n:5d}: {t:.3f} s total, {1e3 * t / max(len(sub), 1):.3f} ms/observation")
    outputs.append(tpath)
    write_manifest(out, "infer", cfg, {"infer.seed": seed},
                   {"checkpoint": args.checkpoint, "data": path}, outputs, started, timing_files=(tpath,))


def cmd_evaluate(args, cfg, out):
    started = time.perf_counter()
    if not args.pred:
        raise ConfigError("evaluate needs --pred")
    path = _dataset_path(args, cfg)
    split = cfg["infer.split"]
    sub = load_split(path, split, cfg["infer.variant"])
    pred = Path(args.pred)
    missing = [int(i) for i in sub.indices if not (pred / (pred_name(i, "labels") + ".csv")).exists()]
    if missing:
        raise CoverageError(f"no predictions for {len(missing)} observation(s), first {missing[:5]}")
    conf = metrics.Confusion2()
    for k, i in enumerate(sub.indices):
        metrics.confusion(inference.read_label_csv(pred / (pred_name(i, "labels") + ".csv")),
                          sub.labels[k], into=conf)
    s = metrics.summary(conf)
    row = dict(model_id=pred.name, dlc="", p_do="", weight_mode="", rule=cfg["infer.rule"], split=split,
               n_sample="", seed=cfg["infer.seed"], **{k: float(v) for k, v in s.items()})
    mpath = out / "metrics.csv"
    metrics.write_metrics_csv([row], mpath)
    print(f"MCA {metrics.pct(s['mca'])}  GA {metrics.pct(s['ga'])}  "
          f"D {metrics.pct(s['acc_d'])}  ND {metrics.pct(s['acc_nd'])}")
    write_manifest(out, "evaluate", cfg, {}, {"pred": pred, "data": path}, [mpath], started)


def cmd_stability(args, cfg, out):
    started = time.perf_counter()
    if args.seed is not None:
        cfg.values["infer.seed"] = args.seed
    if not args.checkpoint:
        raise ConfigError("stability needs --checkpoint")
    model, extra = unet.load_checkpoint(args.checkpoint)
    path = _dataset_path(args, cfg)
    sub = load_split(path, cfg["infer.split"], cfg["infer.variant"])
    res = inference.stability_study(model, sub, cfg["infer.n_sample"], cfg["infer.trials"], cfg["infer.seed"],
                          cfg["infer.rule"], _priors(cfg, extra))
    spath = out / "stability.csv"
    with open(spath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_sample", "metric", "mean", "std", "values"])
        for n, stats in res.items():
            for m, ts in stats.items():
                w.writerow([n, m, f"{ts.mean:.6f}", f"{ts.std:.6f}", ";".join(f"{v:.6f}" for v in ts.values)])
                if m == "mca":
                    print(f"n_sample {n:5d}: MCA mean {metrics.pct(ts.mean)}  std {metrics.pct(ts.std)}")
    write_manifest(out, "stability", cfg, {"infer.seed": cfg["infer.seed"]},
                   {"checkpoint": args.checkpoint, "data": path}, [spath], started)


def cmd_gradcheck(args, cfg, out):
    started = time.perf_counter()
    rows = gradcheck.run_suite(seeds=tuple(range(3)))
    gpath = out / "gradcheck.csv"
    with open(gpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "max_rel_error", "tolerance", "pass"])
        for name, err, tol, ok in rows:
            w.writerow([name, f"{err:.3e}", f"{tol:.0e}", "PASS" if ok else "FAIL"])
            print(f"{name:<24} {err:.3e}  (< {tol:.0e})  {'PASS' if ok else 'FAIL'}")
    write_manifest(out, "gradcheck", cfg, {}, {}, [gpath], started)
    return EXIT_OK if all(r[3] for r in rows) else EXIT_CHECK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "stability": cmd_stability,
    "gradcheck": cmd_gradcheck,
}


def build_parser():
    p = argparse.ArgumentParser(prog="bayes-sds", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="override the command's primary seed")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--resume", action="store_true", help="sweep: skip completed cells")
    p.add_argument("--data", help="dataset file (overrides data.path)")
    p.add_argument("--checkpoint", help="model checkpoint for infer/stability")
    p.add_argument("--pred", help="prediction directory for evaluate")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = cfgmod.load(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](args, cfg, out)
        return EXIT_OK if code is None else code
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except train.DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
