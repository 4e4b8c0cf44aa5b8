"""The command line end to end: generate, sweep, resume and report.

A sweep trains one model per (dropout layers, dropout rate, weighting) cell and
ranks them by mean class accuracy. Re-running with --resume skips the cells that
already have a result and a matching checkpoint.

    python3 demos/05_sweep_and_report.py [out_dir]
"""

import sys
import tempfile
from pathlib import Path

from bayes_sds import cli

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="sds_sweep_"))
cfg = out / "run.cfg"
out.mkdir(parents=True, exist_ok=True)
cfg.write_text("""\
data.n_obs = 300
data.seed = 3
arch.depth = 3
arch.base_filters = 8
train.lr0 = 0.002
train.batch = 32
train.max_epochs = 10
train.patience = 10
train.n_val_samples = 4
sweep.dlc = 1,3
sweep.p_do = 0.1,0.4
sweep.weight_mode = UW,MFW
sweep.n_sample = 10
infer.n_sample = 10,20
""")


def run(*args):
    code = cli.main([args[0], "--config", str(cfg), *args[1:]])
    print(f"[{args[0]} exited {code}]\n")


run("generate", "--out", str(out / "gen"))
dpath = str(out / "gen" / "dataset.sdsb")
run("sweep", "--data", dpath, "--out", str(out / "sweep"))
run("sweep", "--data", dpath, "--out", str(out / "sweep"), "--resume")

best = (out / "sweep" / "ranked_MAP.csv").read_text().splitlines()[1].split(",")[0]
ckpt = str(out / "sweep" / "cells" / best / "checkpoint.sdsc")
run("infer", "--data", dpath, "--checkpoint", ckpt, "--out", str(out / "infer"))
run("evaluate", "--data", dpath, "--pred", str(out / "infer" / "pred"), "--out", str(out / "eval"))
print((out / "eval" / "metrics.csv").read_text())
print("outputs under", out)
