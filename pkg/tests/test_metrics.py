import math
from collections import Counter

import numpy as np
import pytest
import scipy.special
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowad import metrics as mt


def pairwise_auc_oracle(scores, truth):
    """O(n^2) double loop with u(0) = 1/2."""
    s, t = np.ravel(scores), np.ravel(truth)
    pos, neg = s[t == 1], s[t == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (pos.size * neg.size)


def fixture(rng, n=60, ties=False):
    s = rng.integers(0, 6, n).astype(float) if ties else rng.random(n)
    t = np.zeros(n)
    t[rng.choice(n, size=rng.integers(1, n), replace=False)] = 1
    return s, t


# ---- normalization ------------------------------------------------------------------------


def test_normalize_scores():
    np.testing.assert_array_equal(mt.normalize_scores(np.array([[2.0, -4.0]])), [[0.5, 1.0]])
    assert not mt.normalize_scores(np.zeros((2, 3))).any()
    a = np.random.default_rng(0).standard_normal((3, 4, 2))
    np.testing.assert_allclose(mt.normalize_scores(-3.7 * a), mt.normalize_scores(a), rtol=1e-15)
    t = mt.normalize_scores(torch.tensor([[2.0, -4.0]], dtype=torch.float64))
    assert t.tolist() == [[0.5, 1.0]]


# ---- exact AUC ----------------------------------------------------------------------------


def test_auc_hand_cases():
    assert mt.auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert mt.auc([0.3] * 5, [1, 0, 1, 0, 0]) == 0.5
    assert mt.auc([0.7, 0.7, 0.2], [1, 0, 0]) == 0.75


def test_auc_undefined():
    with pytest.raises(mt.UndefinedMetricError):
        mt.auc([0.1, 0.2], [0, 0])
    with pytest.raises(mt.UndefinedMetricError):
        mt.auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        mt.auc([0.1, 0.2], [1, 2])


@pytest.mark.parametrize("ties", [False, True])
def test_auc_matches_pairwise_oracle(ties):
    rng = np.random.default_rng(1 + ties)
    for _ in range(100):
        s, t = fixture(rng, n=int(rng.integers(2, 50)), ties=ties)
        if t.all():
            t[0] = 0
        assert mt.auc(s, t) == pairwise_auc_oracle(s, t)


def test_auc_zero_scores_give_half():
    t = np.zeros((3, 4))
    t[0, 0] = 1
    assert mt.auc(mt.normalize_scores(np.zeros((3, 4))), t) == 0.5


def test_auc_monotone_transform_invariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        s, t = fixture(rng)
        base = mt.auc(s, t)
        assert mt.auc(np.exp(s), t) == base
        assert mt.auc(3.0 * s - 7.0, t) == base


# ---- soft AUC -----------------------------------------------------------------------------


def test_soft_auc_limits():
    rng = np.random.default_rng(4)
    s, t = fixture(rng)
    assert mt.soft_auc(s, t, 1e-12) == pytest.approx(0.5, abs=1e-9)
    assert mt.soft_auc([0.4, 0.4], [1, 0], 3.0) == 0.5
    with pytest.raises(ValueError):
        mt.soft_auc(s, t, 0.0)
    for _ in range(20):
        s, t = fixture(rng)
        assert abs(mt.soft_auc(s, t, 1e4) - mt.auc(s, t)) < 1e-3


def test_soft_auc_pairwise_error_monotone_in_beta():
    # The aggregate gap |soft_auc - auc| can rise with beta because pair errors of
    # opposite sign cancel; the mean per-pair error is monotone and bounds it.
    rng = np.random.default_rng(5)
    betas = [1.0, 10.0, 100.0, 1000.0, 1e4]
    for _ in range(50):
        s, t = fixture(rng)
        d = (s[t == 1][:, None] - s[t == 0][None, :]).ravel()
        u = (np.sign(d) + 1) / 2
        exact = mt.auc(s, t)
        errs = []
        for b in betas:
            e = np.mean(np.abs(scipy.special.expit(b * d) - u))
            assert abs(mt.soft_auc(s, t, b) - exact) <= e + 1e-15
            errs.append(e)
        assert all(e2 <= e1 for e1, e2 in zip(errs, errs[1:]))


def test_soft_auc_torch_gradient():
    s = torch.tensor([0.9, 0.2, 0.5, 0.1], dtype=torch.float64, requires_grad=True)
    t = np.array([1, 0, 1, 0])
    val = mt.soft_auc(s, t, 2.0)
    assert float(val.detach()) == pytest.approx(mt.soft_auc(s.detach().numpy(), t, 2.0), rel=1e-14)
    val.backward()
    g = s.grad.numpy()
    assert g[0] > 0 and g[2] > 0 and g[1] < 0 and g[3] < 0


# ---- partitions and subsampling -------------------------------------------------------------


def test_partition_hand_cases():
    parts = mt.partition_indices([4, 0, 3, 1, 2], 2)
    assert [p.tolist() for p in parts] == [[0, 2, 4], [1, 3]]
    assert [p.tolist() for p in mt.partition_indices([3, 1], 1)] == [[1, 3]]
    with pytest.raises(ValueError):
        mt.partition_indices([1, 2], 3)
    with pytest.raises(ValueError):
        mt.partition_indices([1, 2], 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=80, unique=True), st.data())
def test_partition_properties(items, data):
    K = data.draw(st.integers(1, len(items)))
    parts = mt.partition_indices(items, K)
    assert len(parts) == K
    merged = np.concatenate(parts)
    assert sorted(merged.tolist()) == sorted(items)
    sizes = [p.size for p in parts]
    assert max(sizes) - min(sizes) <= 1
    assert [p.tolist() for p in mt.partition_indices(list(reversed(items)), K)] == [p.tolist() for p in parts]


def test_subsampled_k1_equals_soft_auc():
    rng = np.random.default_rng(6)
    for _ in range(30):
        s, t = fixture(rng)
        assert mt.subsampled_soft_auc(s, t, 7.0, 1) == mt.soft_auc(s, t, 7.0)


def test_subsampled_two_block_hand():
    s = np.array([0.9, 0.1, 0.4, 0.6])
    t = np.array([1, 0, 1, 0])
    sig = lambda x: 1.0 / (1.0 + math.exp(-2.0 * x))
    # positives {0, 2}, negatives {1, 3}: blocks (0 vs 1) and (2 vs 3)
    expect = (sig(0.9 - 0.1) + sig(0.4 - 0.6)) / 2
    assert mt.subsampled_soft_auc(s, t, 2.0, 2) == pytest.approx(expect, rel=1e-15)


def test_subsampled_pair_counter():
    rng = np.random.default_rng(7)
    s = rng.random(500)
    t = np.zeros(500)
    t[rng.choice(500, 37, replace=False)] = 1
    for K in (1, 4, 8):
        c = Counter()
        mt.subsampled_soft_auc(s, t, 5.0, K, counter=c)
        p1 = mt.partition_indices(np.flatnonzero(t == 1), K)
        p0 = mt.partition_indices(np.flatnonzero(t == 0), K)
        assert c["pairs"] == sum(a.size * b.size for a, b in zip(p1, p0))
        assert abs(c["pairs"] - 37 * 463 / K) <= 463 + 37
    with pytest.raises(ValueError):
        mt.subsampled_soft_auc(s, t, 5.0, 38)


def test_subsampled_torch_matches_numpy():
    rng = np.random.default_rng(8)
    s, t = fixture(rng, n=40)
    k = int(min(t.sum(), (1 - t).sum(), 3))
    ts = torch.tensor(s, dtype=torch.float64)
    assert float(mt.subsampled_soft_auc(ts, t, 4.0, k)) == pytest.approx(
        mt.subsampled_soft_auc(s, t, 4.0, k), rel=1e-13)


# ---- ROC ----------------------------------------------------------------------------------


def test_roc_hand_cases():
    pts = mt.roc_curve([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert (0.0, 1.0) in pts and pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
    pts = mt.roc_curve([0.9, 0.5, 0.3], [1, 0, 0])
    assert pts[:2] == [(0.0, 0.0), (0.0, 1.0)]


@pytest.mark.parametrize("ties", [False, True])
def test_roc_area_equals_auc(ties):
    rng = np.random.default_rng(9 + ties)
    for _ in range(50):
        s, t = fixture(rng, ties=ties)
        pts = mt.roc_curve(s, t)
        xs, ys = zip(*pts)
        assert all(np.diff(xs) >= 0) and all(np.diff(ys) >= 0)
        assert abs(mt.roc_area(pts) - mt.auc(s, t)) <= 1e-12


def test_tsv_writers(tmp_path):
    mt.write_roc_tsv(tmp_path / "r.tsv", [(0.0, 0.0), (0.25, 1.0)], header="# v")
    assert (tmp_path / "r.tsv").read_text().splitlines() == ["# v", "pfa\tpd", "0.0\t0.0", "0.25\t1.0"]
    mt.write_heatmap_tsv(tmp_path / "h.tsv", [-1.0, 0.0], [2.0], np.array([[0.5], [0.75]]))
    rows = (tmp_path / "h.tsv").read_text().splitlines()
    assert rows == ["log_lambda\tlog_mu\tauc", "-1.0\t2.0\t0.5", "0.0\t2.0\t0.75"]


# ---- label-noise bound -------------------------------------------------------------------


def test_label_noise_bound_trials():
    rng = np.random.default_rng(10)
    violations = 0
    for _ in range(1000):
        n = int(rng.integers(10, 80))
        s = rng.random(n) if rng.random() < 0.5 else rng.integers(0, 4, n).astype(float)
        gt = np.zeros(n)
        gt[rng.choice(n, int(rng.integers(2, n - 1)), replace=False)] = 1
        pos = np.flatnonzero(gt == 1)
        err = rng.choice(pos, int(rng.integers(1, pos.size)), replace=False)
        la = gt.copy()
        la[err] = 0
        # same labeled positives; negatives either contaminated (la) or clean (gt)
        clean = la.copy()
        clean[err] = -1
        keep = clean >= 0
        a_la = mt.auc(s, la)
        a_gt = mt.auc(s[keep], clean[keep])
        bound = mt.label_noise_bound(err.size, int((la == 0).sum()))
        violations += abs(a_la - a_gt) > bound
    assert violations == 0
