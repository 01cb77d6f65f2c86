import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from pvi.data import (Dataset, InfeasibleSplit, MissingTarget, ParseError, Partition, beta_kappa_plan, kmeans,
                      load_csv, read_idx, split_beta_kappa, split_homogeneous, split_kmeans, split_label_shard,
                      synth_blobs, synth_logreg, write_idx)


def _binary(n_pos, n_neg, d=3, seed=0):
    rng = np.random.default_rng(seed)
    y = np.r_[np.ones(n_pos, int), np.zeros(n_neg, int)]
    return Dataset(rng.standard_normal((y.size, d)), y)


def _check_exhaustive(part: Partition, N: int):
    assert sum(part.sizes) == N
    assert part.assignments.shape == (N,)
    assert all(s > 0 for s in part.sizes)


def test_dataset_rejects_nonfinite():
    with pytest.raises(ValueError):
        Dataset([[np.nan]], [1])


def test_load_csv_standardizes_numeric(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("a,b,target\n1,10,0\n2,20,1\n3,60,1\n")
    d = load_csv(p)
    assert np.all(np.abs(d.inputs.mean(axis=0)) < 1e-12)
    np.testing.assert_allclose(d.inputs.std(axis=0), 1.0)
    np.testing.assert_array_equal(d.targets, [0, 1, 1])


def test_load_csv_one_hot(tmp_path):
    p = tmp_path / "b.csv"
    p.write_text("colour,x,target\nred,1,yes\nblue,2,no\ngreen,3,yes\nred,4,no\n")
    d = load_csv(p)
    assert [n for n in d.feature_names if n.startswith("colour=")] == ["colour=blue", "colour=green", "colour=red"]
    assert d.n_features == 4
    np.testing.assert_array_equal(d.targets, [1, 0, 1, 0])


def test_load_csv_errors(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("x,target\n1,0\noops,1\n3,0\n")
    with pytest.raises(ParseError, match="row 3"):
        load_csv(p)
    q = tmp_path / "d.csv"
    q.write_text("x,y\n1,0\n")
    with pytest.raises(MissingTarget):
        load_csv(q)


def test_idx_round_trip(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "x.idx", arr)
    np.testing.assert_array_equal(read_idx(tmp_path / "x.idx"), arr)


def test_beta_kappa_adult_split_a():
    # adult-like: N/M = 3907 with 24.0% positives
    N, M = 39070, 10
    sizes, pos, _ = beta_kappa_plan(N, int(round(0.240 * N)), M, 0.0, 0.0)
    assert sizes == [3907] * M
    assert all(abs(p / s - 0.240) < 1e-3 for p, s in zip(pos, sizes))


def test_beta_kappa_adult_split_b_matches_table():
    N, M = 39070, 10
    sizes, pos, kappa_used = beta_kappa_plan(N, int(round(0.240 * N)), M, 0.7, -3.0)
    assert sizes[:5] == [1172] * 5 and sizes[5:] == [6642] * 5
    assert pos[0] / sizes[0] == pytest.approx(0.959, abs=0.002)
    # large-client fraction depends on the exact dataset totals, which we only know to three digits
    assert pos[5] / sizes[5] == pytest.approx(0.111, abs=0.005)
    assert kappa_used == -3.0


@pytest.mark.parametrize("N, eta, beta, kappa, n_small, eta_small, n_large", [
    (36168, 0.117, 0.7, -3.0, 1085, 0.466, 6148),  # bank split B
    (520, 0.550, 0.3, -0.7, 36, 0.944, 68),        # credit split B
])
def test_beta_kappa_other_table_rows(N, eta, beta, kappa, n_small, eta_small, n_large):
    sizes, pos, _ = beta_kappa_plan(N, int(round(eta * N)), 10, beta, kappa)
    assert sizes[0] == n_small
    assert pos[0] / sizes[0] == pytest.approx(eta_small, abs=0.012)
    if n_large is not None:
        assert sizes[-1] == pytest.approx(n_large, abs=1)


def test_beta_kappa_clips_out_of_range_kappa():
    with pytest.warns(UserWarning, match="clipping"):
        _, pos, used = beta_kappa_plan(1000, 500, 2, 0.0, -5.0)
    assert used == -1.0 and pos[0] == 500


def test_beta_kappa_all_positive_small_clients():
    data = _binary(400, 1200)
    part = split_beta_kappa(data, 4, 0.5, -0.75 / 0.25, seed=1)
    _check_exhaustive(part, len(data))
    for c in part.per_client[:2]:
        assert np.all(c.targets == 1)


def test_beta_kappa_homogeneous_chi_square():
    data = _binary(500, 1500)
    part = split_beta_kappa(data, 10, 0.0, 0.0, seed=2)
    table = np.array([[int(c.targets.sum()), int(len(c) - c.targets.sum())] for c in part.per_client])
    assert chi2_contingency(table)[1] > 0.01
    assert len(set(part.sizes)) == 1


def test_beta_kappa_infeasible():
    with pytest.raises(InfeasibleSplit):
        split_beta_kappa(_binary(10, 10), 3, 0.0, 0.0)
    with pytest.raises(InfeasibleSplit):
        split_beta_kappa(Dataset(np.zeros((4, 1)), [0, 1, 2, 1]), 2, 0.0, 0.0)


def test_kmeans_separated_blobs():
    rng = np.random.default_rng(0)
    x = np.r_[rng.normal(-10, 0.5, (50, 2)), rng.normal(10, 0.5, (50, 2))]
    data = Dataset(x, np.zeros(100))
    part = split_kmeans(data, 2, seed=4)
    a = part.assignments
    assert len(set(a[:50])) == 1 and len(set(a[50:])) == 1 and a[0] != a[-1]
    np.testing.assert_array_equal(split_kmeans(data, 2, seed=4).assignments, a)
    assert split_kmeans(data, 1).sizes == [100]


def test_kmeans_reseeds_empty_clusters():
    x = np.r_[np.zeros((20, 1)), np.ones((1, 1)) * 100]
    labels = kmeans(x, 3, seed=0)
    assert len(set(labels.tolist())) == 3


def test_label_shard_desk_scale():
    data = synth_blobs(10, 2000, 5, seed=0)
    part = split_label_shard(data, 10, 2, seed=0)
    assert part.sizes == [200] * 10
    assert all(len(np.unique(c.targets)) <= 2 for c in part.per_client)


def test_label_shard_mnist_scale_sizes():
    y = np.repeat(np.arange(10), 6000)
    data = Dataset(np.zeros((60000, 1)), y)
    part = split_label_shard(data, 100, 2, seed=0)
    assert part.sizes == [600] * 100
    assert max(len(np.unique(c.targets)) for c in part.per_client) <= 2


def test_label_shard_uneven_class_counts():
    y = np.repeat(np.arange(10), np.arange(150, 250, 10))
    data = Dataset(np.zeros((y.size, 1)), y)
    part = split_label_shard(data, 20, 2, seed=1)
    _check_exhaustive(part, y.size)
    assert max(len(np.unique(c.targets)) for c in part.per_client) <= 2


def test_label_shard_all_labels_is_homogeneous():
    data = synth_blobs(4, 2000, 3, seed=1)
    part = split_label_shard(data, 5, 4, seed=3)
    table = np.array([[int(np.sum(c.targets == k)) for k in range(4)] for c in part.per_client])
    assert chi2_contingency(table)[1] > 0.01


def test_synth_logreg_properties():
    a = synth_logreg(3, 500, weight_seed=1, seed=2)
    b = synth_logreg(3, 500, weight_seed=1, seed=2)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.targets, b.targets)
    w = np.array(a.provenance["w_star"])
    sep = synth_logreg(3, 500, weight_seed=1, noise=0.0, seed=2)
    logits = sep.inputs @ w[1:] + w[0]
    assert np.all((logits > 0) == (sep.targets == 1))


def test_synth_logreg_label_fraction_binomial_bounds():
    big = synth_logreg(2, 200_000, weight_seed=5, seed=0)
    w = np.array(big.provenance["w_star"])
    expected = np.mean(1 / (1 + np.exp(-(big.inputs @ w[1:] + w[0]))))
    n = 20_000
    d = synth_logreg(2, n, weight_seed=5, seed=11)
    sd = np.sqrt(expected * (1 - expected) / n)
    assert abs(d.targets.mean() - expected) < 3 * sd + 2e-3


@settings(max_examples=25, deadline=None)
@given(st.integers(50, 400), st.integers(1, 8), st.integers(0, 10_000))
def test_homogeneous_split_is_exhaustive_and_deterministic(N, M, seed):
    data = Dataset(np.arange(N, dtype=float)[:, None], np.zeros(N))
    part = split_homogeneous(data, M, seed)
    _check_exhaustive(part, N)
    np.testing.assert_array_equal(part.assignments, split_homogeneous(data, M, seed).assignments)


@settings(max_examples=20, deadline=None)
@given(st.integers(100, 600), st.floats(0.1, 0.9), st.floats(0.0, 0.6), st.floats(-0.9, 0.9), st.integers(0, 99))
def test_beta_kappa_is_exhaustive(N, frac, beta, kappa, seed):
    n_pos = max(1, min(N - 1, int(frac * N)))
    data = _binary(n_pos, N - n_pos, d=1, seed=seed)
    try:
        part = split_beta_kappa(data, 4, beta, kappa, seed)
    except InfeasibleSplit:
        return
    _check_exhaustive(part, N)
    assert sum(int(c.targets.sum()) for c in part.per_client) == n_pos


def test_partition_json_round_trip():
    data = synth_blobs(3, 90, 2, seed=0)
    part = split_homogeneous(data, 3, seed=1)
    back = Partition.from_json(part.to_json(), data)
    np.testing.assert_array_equal(back.assignments, part.assignments)
    assert json.loads(part.to_json())["spec"]["scheme"] == "homogeneous"
