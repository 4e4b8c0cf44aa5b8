import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bayes_sds import metrics as M

ND, D = 0, 1


def test_hand_tally():
    truth = np.array([[D, ND], [ND, ND]])
    pred = np.array([[ND, ND], [ND, D]])
    c = M.confusion(pred, truth).counts
    assert c[D, ND] == 1 and c[ND, D] == 1 and c[ND, ND] == 2 and c[D, D] == 0


def test_perfect_and_all_wrong():
    t = (np.random.default_rng(0).random((5, 4)) < 0.4).astype(int)
    c = M.confusion(t, t)
    assert c.counts[0, 1] == c.counts[1, 0] == 0
    assert M.ga(c) == M.mca(c) == 1.0
    c = M.confusion(np.ones((5, 4)), np.zeros((5, 4)))
    assert c.counts[ND, D] == 20


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        M.confusion(np.zeros((2, 2)), np.zeros((2, 3)))


def test_missing_class():
    with pytest.raises(M.MissingClassError):
        M.mca(M.confusion(np.zeros((3, 3)), np.zeros((3, 3))))
    with pytest.raises(M.MissingClassError):
        M.ga(M.Confusion2())


@pytest.mark.parametrize("acc_d, acc_nd, expected", [(97.16, 96.82, "96.99"), (96.26, 97.04, "96.65"),
                                                     (90.20, 88.18, "89.19")])
def test_reference_rows(acc_d, acc_nd, expected):
    assert f"{M.mca_from(acc_d, acc_nd):.2f}" == expected


def test_trial_stats():
    s = M.trial_stats([96, 98])
    assert (s.mean, s.std) == (97.0, 1.0)
    assert M.trial_stats([0.9]).std == 0.0
    assert M.trial_stats([0.5] * 4).std == 0.0


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_trial_stats_bounds(vals):
    s = M.trial_stats(vals)
    assert s.std >= 0 and min(vals) - 1e-12 <= s.mean <= max(vals) + 1e-12


@given(st.integers(0, 2**32 - 1))
def test_ga_is_frequency_weighted_accuracy(seed):
    rng = np.random.default_rng(seed)
    truth = (rng.random((30, 6, 5)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
    truth[0, 0, 0], truth[0, 0, 1] = 0, 1
    pred = np.where(rng.random(truth.shape) < 0.2, 1 - truth, truth)
    c = M.confusion(pred, truth)
    a_nd, a_d = M.class_acc(c)
    f_d = truth.mean()
    assert M.ga(c) == pytest.approx((1 - f_d) * a_nd + f_d * a_d, abs=1e-12)
    perm = rng.permutation(len(truth))
    np.testing.assert_array_equal(M.confusion(pred[perm], truth[perm]).counts, c.counts)


def test_accumulation_matches_pooled():
    rng = np.random.default_rng(1)
    truth = (rng.random((4, 3, 3)) < 0.5).astype(int)
    pred = (rng.random((4, 3, 3)) < 0.5).astype(int)
    acc = M.Confusion2()
    for p, t in zip(pred, truth):
        M.confusion(p, t, into=acc)
    np.testing.assert_array_equal(acc.counts, M.confusion(pred, truth).counts)
    assert (M.confusion(pred[:2], truth[:2]) + M.confusion(pred[2:], truth[2:])).total == 36


def _row(dlc, p, wm, rule, mca, ga):
    return dict(model_id=f"{dlc}{p}{wm}", dlc=dlc, p_do=p, weight_mode=wm, rule=rule, split="val",
                mca=mca, ga=ga, acc_d=mca, acc_nd=mca, n_sample=50, seed=0)


def test_sweep_single_model():
    rep = M.sweep_report([_row(4, 0.4, "UW", "MAP", 0.9, 0.9)])
    assert rep["MAP"]["top"] == rep["MAP"]["bottom"] == rep["MAP"]["rows"]


def test_sweep_tie_breaking():
    rows = [_row(3, 0.2, "UW", "MAP", 0.9, 0.8), _row(2, 0.5, "UW", "MAP", 0.9, 0.8),
            _row(2, 0.1, "UW", "MAP", 0.9, 0.8), _row(4, 0.4, "UW", "MAP", 0.9, 0.85)]
    order = [(r["dlc"], r["p_do"]) for r in M.sweep_report(rows)["MAP"]["rows"]]
    assert order == [(4, 0.4), (2, 0.1), (2, 0.5), (3, 0.2)]


def test_sweep_full_grid_counts():
    rng = np.random.default_rng(0)
    p_dos = (0.02, 0.05, 0.08, 0.10, 0.12, 0.15, 0.20, 0.25, 0.30, 0.40, 0.50, 0.60, 0.70)
    rows = [_row(d, p, w, rule, rng.random(), rng.random())
            for d in (1, 2, 3, 4) for p in p_dos for w in ("UW", "MFW") for rule in ("MAP", "ML")]
    rep = M.sweep_report(rows)
    for rule in ("MAP", "ML"):
        mcas = [r["mca"] for r in rep[rule]["rows"]]
        assert len(mcas) == 104 and mcas == sorted(mcas, reverse=True)
        assert len(rep[rule]["top"]) == len(rep[rule]["bottom"]) == 5


def test_metrics_csv_columns(tmp_path):
    M.write_metrics_csv([_row(1, 0.1, "MFW", "ML", 0.5, 0.6)], tmp_path / "m.csv")
    head = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert head == "model_id,dlc,p_do,weight_mode,rule,split,mca,ga,acc_d,acc_nd,n_sample,seed"
