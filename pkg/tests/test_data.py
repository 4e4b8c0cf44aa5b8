import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayes_sds import data


def spec(**kw):
    return data.ScenarioSpec(**kw)


def test_mix_none_only():
    s = spec(mix=(1, 0, 0, 0))
    rng = np.random.default_rng(0)
    assert all(data.gen_mask(s, rng).sum() == 0 for _ in range(20))


def test_soft_story_full_rows():
    s = spec()
    rng = np.random.default_rng(0)
    counts = {int(data.gen_mask(s, rng, "soft_story").sum()) for _ in range(300)}
    assert counts == {10, 20}


def test_soft_story_rows_are_adjacent():
    s = spec()
    rng = np.random.default_rng(1)
    for _ in range(300):
        m = data.gen_mask(s, rng, "soft_story")
        rows = np.flatnonzero(m.all(axis=1))
        assert m.sum() == 10 * len(rows) and np.all(np.diff(rows) == 1)


def test_cluster_area():
    s = spec()
    rng = np.random.default_rng(2)
    for _ in range(200):
        m = data.gen_mask(s, rng, "cluster")
        ys, xs = np.nonzero(m)
        area = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
        assert 4 <= m.sum() <= 12 and area == m.sum()


def test_dataset_fraction_near_target():
    masks, _ = data.gen_masks(2000, spec(seed=5))
    assert 0.40 <= masks.mean() <= 0.44


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([0.25, 0.42, 0.5]))
def test_fraction_within_two_percent(seed, target):
    masks, _ = data.gen_masks(400, spec(seed=seed, target_fraction=target))
    assert abs(masks.mean() - target) <= 0.02


def test_noise_free_base_field_deterministic():
    s = spec(noise_sigma=0.0)
    sig = data.draw_signature(s)
    z = np.zeros((11, 10), dtype=np.uint8)
    a = data.gen_features(z, s, "ideal", np.random.default_rng(0), sig)
    b = data.gen_features(z, s, "ideal", np.random.default_rng(1), sig)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, data.base_field(s))


def test_signature_contrast_full_row():
    s = spec(noise_sigma=0.0)
    sig = data.draw_signature(s)
    m = np.zeros((11, 10), dtype=np.uint8)
    m[4] = 1
    f = data.gen_features(m, s, "ideal", np.random.default_rng(0), sig) - data.base_field(s)
    diff = f[:, m == 1].mean(axis=1) - f[:, m == 0].mean(axis=1)
    np.testing.assert_allclose(diff, sig, rtol=0.10)
    assert np.all((sig >= 0.5) & (sig <= 1.5))


def test_stochastic_sigma_zero_matches_ideal():
    s = spec(stochastic_sigma=0.0)
    sig = data.draw_signature(s)
    m = data.gen_mask(s, np.random.default_rng(0), "cluster")
    a = data.gen_features(m, s, "ideal", np.random.default_rng(3), sig)
    b = data.gen_features(m, s, "stochastic", np.random.default_rng(3), sig)
    np.testing.assert_array_equal(a, b)


def test_threshold_oracle_noise_free():
    s = spec(noise_sigma=0.0, seed=2)
    ds = data.gen_dataset(200, s)
    resid = ds.features.astype(np.float64) - data.base_field(s)
    score = (resid / ds.signature[:, None, None]).mean(axis=1)
    np.testing.assert_array_equal(score > 0.5, ds.labels == 1)


def test_split_sizes():
    assert data.gen_dataset(10, spec()).split_sizes() == {"train": 8, "val": 1, "test": 1}
    ds = data.Dataset(np.zeros((10800, 1, 1, 1)), np.zeros((10800, 1, 1)))
    data.split(ds, seed=0)
    assert ds.split_sizes() == {"train": 8640, "val": 1080, "test": 1080}


def test_too_few_observations():
    with pytest.raises(ValueError):
        data.gen_dataset(9, spec())


def test_stochastic_test_pairs_ideal_test():
    ds = data.gen_dataset(50, spec(seed=4))
    st_ = ds.stochastic_test
    test = ds.subset("test")
    np.testing.assert_array_equal(st_.labels, test.labels)
    np.testing.assert_array_equal(st_.indices, test.indices)
    assert not np.array_equal(st_.features, test.features)


def test_features_finite_labels_binary():
    ds = data.gen_dataset(40, spec(seed=6))
    assert np.all(np.isfinite(ds.features))
    assert set(np.unique(ds.labels)) <= {0, 1}


def test_save_is_byte_identical(tmp_path):
    for k in range(2):
        ds = data.gen_dataset(30, spec(seed=9))
        data.save(ds, tmp_path / f"d{k}.sdsb")
    assert (tmp_path / "d0.sdsb").read_bytes() == (tmp_path / "d1.sdsb").read_bytes()
    assert (tmp_path / "d0.splits").read_text() == (tmp_path / "d1.splits").read_text()


def test_round_trip_and_size(tmp_path):
    ds = data.gen_dataset(30, spec(seed=9))
    path, _ = data.save(ds, tmp_path / "d.sdsb")
    assert path.stat().st_size == 24 + 30 * (8 * 11 * 10 * 4 + 11 * 10)
    back = data.load(path)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.splits, ds.splits)
    np.testing.assert_array_equal(back.indices, ds.indices)


def _corrupt(tmp_path, edit):
    ds = data.gen_dataset(10, spec(seed=1))
    path, _ = data.save(ds, tmp_path / "d.sdsb")
    raw = bytearray(path.read_bytes())
    path.write_bytes(bytes(edit(raw)))
    return path


@pytest.mark.parametrize("edit", [
    lambda b: b"XXXX" + b[4:],                      # magic
    lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],  # version
    lambda b: b[:-7],                               # truncated
    lambda b: b[:-1] + b"\x07",                     # label out of range
])
def test_format_errors(tmp_path, edit):
    path = _corrupt(tmp_path, edit)
    with pytest.raises(data.DataFormatError):
        data.load(path)


def test_bad_split_file(tmp_path):
    ds = data.gen_dataset(10, spec(seed=1))
    path, sp = data.save(ds, tmp_path / "d.sdsb")
    sp.write_text("0 train\n")
    with pytest.raises(data.DataFormatError):
        data.load(path)


@pytest.mark.parametrize("kw", [dict(mix=(0, 0, 0, 0)), dict(target_fraction=1.5), dict(noise_sigma=-1)])
def test_spec_rejects(kw):
    with pytest.raises(ValueError):
        spec(**kw)
