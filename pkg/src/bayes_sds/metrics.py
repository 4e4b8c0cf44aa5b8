"""Node-level confusion counts, GA/MCA, trial statistics and sweep ranking.

All metrics pool nodes over the whole split (micro counts), not averages of
per-observation scores.
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field

import numpy as np

ND, D = 0, 1

METRIC_COLUMNS = ["model_id", "dlc", "p_do", "weight_mode", "rule", "split",
                  "mca", "ga", "acc_d", "acc_nd", "n_sample", "seed"]


class MissingClassError(ValueError):
    pass


@dataclass
class Confusion2:
    """``counts[truth][pred]`` over ND (0) and D (1)."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), dtype=np.int64))

    def __add__(self, other):
        return Confusion2(self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())


def confusion(pred, truth, into=None):
    """Tally node labels; pass ``into`` to accumulate over a dataset."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    idx = 2 * truth.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
    c = np.bincount(idx, minlength=4).reshape(2, 2)
    if into is not None:
        into.counts += c
        return into
    return Confusion2(c)


def class_acc(c: Confusion2):
    """``(acc_ND, acc_D)``; both truth classes must be present."""
    rows = c.counts.sum(axis=1)
    if rows[ND] == 0 or rows[D] == 0:
        missing = "ND" if rows[ND] == 0 else "D"
        raise MissingClassError(f"no {missing} nodes in the truth labels")
    return c.counts[ND, ND] / rows[ND], c.counts[D, D] / rows[D]


def mca(c: Confusion2):
    a_nd, a_d = class_acc(c)
    return (a_nd + a_d) / 2


def mca_from(acc_d, acc_nd):
    return (acc_d + acc_nd) / 2


def ga(c: Confusion2):
    if c.total == 0:
        raise MissingClassError("empty confusion matrix")
    return (c.counts[ND, ND] + c.counts[D, D]) / c.total


def summary(c: Confusion2):
    a_nd, a_d = class_acc(c)
    return {"mca": (a_nd + a_d) / 2, "ga": ga(c), "acc_d": a_d, "acc_nd": a_nd}


@dataclass
class TrialStats:
    metric: str
    values: list
    mean: float
    std: float


def trial_stats(values, metric=""):
    v = np.asarray(values, dtype=np.float64)
    if v.size < 1:
        raise ValueError("need at least one trial")
    # statistics is exact for repeated values, so identical trials give std 0
    vals = v.tolist()
    return TrialStats(metric, vals, float(statistics.fmean(vals)), float(statistics.pstdev(vals)))


def pct(x):
    return f"{100 * x:.2f}"


def _rank_key(r):
    return (-r["mca"], -r["ga"], int(r["dlc"]), float(r["p_do"]), str(r["weight_mode"]))


def sweep_report(results, k=5):
    """Rank per decision rule by MCA (ties: higher GA, then DLC, P_do, weight mode).

    Returns ``{rule: {"rows": [...], "top": [...], "bottom": [...]}}``.
    """
    out = {}
    for rule in sorted({r["rule"] for r in results}):
        rows = sorted((r for r in results if r["rule"] == rule), key=_rank_key)
        out[rule] = {"rows": rows, "top": rows[:k], "bottom": rows[-k:]}
    return out


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r.get(k), float) else r.get(k)) for k in METRIC_COLUMNS})


def format_table(rows, title):
    head = f"{title}\nDLC  P_do  Weight  MCA(%)  GA(%)  D acc(%)  ND acc(%)"
    lines = [head]
    for r in rows:
        lines.append(f"{r['dlc']:>3}  {float(r['p_do']):.2f}  {r['weight_mode']:>6}  "
                     f"{pct(r['mca']):>6}  {pct(r['ga']):>5}  {pct(r['acc_d']):>8}  {pct(r['acc_nd']):>9}")
    return "\n".join(lines)
