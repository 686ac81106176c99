import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emtal.errors import ConfigError, DataError
from emtal.taskdata import (SyntheticSpec, TaskSpec, batch_iter, build_label_space, default_spec,
                            generate_synthetic, load_csv, nearest_mean_accuracy, samples_to_dataset)


def test_label_space_examples():
    s = build_label_space([3, 2])
    assert s.offsets == [0, 3] and s.n_class == 5
    assert s.to_global(1, 1) == 4 and s.to_local(4) == (1, 1)
    single = build_label_space([7])
    assert all(single.to_global(0, c) == c for c in range(7))
    with pytest.raises(DataError):
        s.to_global(0, 3)
    with pytest.raises(ConfigError):
        build_label_space([3, 0])


@given(st.lists(st.integers(1, 9), min_size=1, max_size=6))
def test_label_round_trip(counts):
    s = build_label_space(counts)
    for g in range(s.n_class):
        t, c = s.to_local(g)
        assert s.to_global(t, c) == g
        assert s.task_of(np.array([g]))[0] == t


def test_synthetic_deterministic_and_disjoint():
    spec = default_spec(3, d_in=8)
    a_tr, a_te = generate_synthetic(spec)
    b_tr, _ = generate_synthetic(default_spec(3, d_in=8))
    assert a_tr.features.tobytes() == b_tr.features.tobytes()
    assert not np.array_equal(a_tr.features[:10], a_te.features[:10])
    assert len(a_tr) == 30 * 28 and a_tr.labels.max() == 27
    assert not np.array_equal(a_tr.features, generate_synthetic(default_spec(4, d_in=8))[0].features)


def test_zero_noise_is_separable():
    spec = SyntheticSpec([TaskSpec(5, 3, 3, 1e-9), TaskSpec(4, 3, 3, 1e-9)], d_in=6, seed=0)
    tr, te = generate_synthetic(spec, dtype=np.float64)
    assert nearest_mean_accuracy(tr, te) == 1.0


def test_noise_orders_difficulty():
    for seed in range(5):
        spec = SyntheticSpec([TaskSpec(6, 30, 30, 0.1), TaskSpec(6, 30, 30, 2.0)], d_in=16, mean_scale=1.0, seed=seed)
        tr, te = generate_synthetic(spec)
        assert nearest_mean_accuracy(tr, te, 0) > nearest_mean_accuracy(tr, te, 1)


def test_load_csv(tmp_path):
    space = build_label_space([3, 2])
    good = tmp_path / "good.csv"
    good.write_text("0.5,1.5,1\n\n-1,2,0\n")
    samples = load_csv(good, 1, space)
    assert len(samples) == 2 and samples[0][1] == 4 and samples[1][1] == 3 and samples[0][2] == 1
    ds = samples_to_dataset(samples, 2)
    assert ds.features.shape == (2, 2)
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert load_csv(empty, 0, space) == []
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2,0\n1,2,2\n")
    with pytest.raises(DataError, match=":2:"):
        load_csv(bad, 1, space)
    junk = tmp_path / "junk.csv"
    junk.write_text("1,2,0\n1,x,0\n")
    with pytest.raises(DataError, match=":2:"):
        load_csv(junk, 0, space)


def test_batches():
    tr, _ = generate_synthetic(SyntheticSpec([TaskSpec(2, 5, 1, 1.0)], d_in=3))
    sizes = [len(b.labels) for b in batch_iter(tr, 3, seed=0, epoch=0)]
    assert sizes == [3, 3, 3, 1]
    a = np.concatenate([b.index for b in batch_iter(tr, 3, 0, 1)])
    b = np.concatenate([b.index for b in batch_iter(tr, 3, 0, 1)])
    c = np.concatenate([b.index for b in batch_iter(tr, 3, 0, 2)])
    assert np.array_equal(a, b) and sorted(a) == list(range(10)) and not np.array_equal(a, c)
