"""Unit tests for shift quantification: CKA, p_u, Ward clustering, splits,
and sampling weights.

Oracles: CKA against the cosine closed form for single-column inputs, p_u by
literal enumeration, Ward against scipy's linkage, diversity weights by hand
on known tree shapes.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import linkage
from scipy.spatial.distance import squareform

from metashift import shift
from metashift.errors import ValidationError


# ---------------------------------------------------------------------------
# CKA

def _centered(rng, n, d):
    X = rng.standard_normal((n, d))
    return X - X.mean(axis=0)


def test_cka_self_is_100(rng):
    X = _centered(rng, 20, 6)
    assert shift.linear_cka(X, X) == pytest.approx(100.0, abs=1e-9)


def test_cka_single_columns_match_cosine_closed_form(rng):
    # for column vectors, s = 100 cos^2(angle)
    for _ in range(10):
        x = _centered(rng, 15, 1)
        y = _centered(rng, 15, 1)
        cos = float(x[:, 0] @ y[:, 0] / (np.linalg.norm(x) * np.linalg.norm(y)))
        assert shift.linear_cka(x, y) == pytest.approx(100 * cos ** 2, rel=1e-9)


def test_cka_symmetry_and_range(rng):
    X, Y = _centered(rng, 25, 4), _centered(rng, 25, 7)
    s = shift.linear_cka(X, Y)
    assert shift.linear_cka(Y, X) == pytest.approx(s, rel=1e-12)
    assert 0 <= s <= 100 + 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6),
       st.floats(0.01, 100.0, allow_nan=False))
def test_cka_invariant_to_scaling_and_orthogonal_maps(seed, scale):
    rng = np.random.default_rng(seed)
    X, Y = _centered(rng, 18, 5), _centered(rng, 18, 5)
    base = shift.linear_cka(X, Y)
    Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    assert shift.linear_cka(X * scale, Y) == pytest.approx(base, rel=1e-8)
    assert shift.linear_cka(X @ Q, Y) == pytest.approx(base, rel=1e-8)


def test_cka_rejects_mismatched_rows_and_zero_input(rng):
    with pytest.raises(ValidationError):
        shift.linear_cka(_centered(rng, 10, 2), _centered(rng, 11, 2))
    with pytest.raises(ValidationError):
        shift.linear_cka(np.zeros((10, 2)), _centered(rng, 10, 2))


# ---------------------------------------------------------------------------
# p_u

def test_pu_hand_enumeration():
    # column u holds every model's accuracy on task u; p_u counts how often
    # the native diagonal strictly beats the off-diagonal entries
    A = np.array([
        [0.9, 0.4, 0.5],
        [0.6, 0.8, 0.5],
        [0.9, 0.8, 0.7],
    ])
    # task 0: column [0.9, 0.6, 0.9]; native 0.9 beats 0.6 only, ties 0.9
    # task 1: column [0.4, 0.8, 0.8]; native 0.8 beats 0.4, ties 0.8
    # task 2: column [0.5, 0.5, 0.7]; native 0.7 beats both
    assert np.allclose(shift.compute_pu(A), [0.5, 0.5, 1.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(2, 9))
def test_pu_matches_naive_loop_and_stays_in_unit_interval(seed, T):
    A = np.random.default_rng(seed).uniform(0, 1, (T, T))
    p = shift.compute_pu(A)
    for u in range(T):
        naive = sum(A[u, u] > A[v, u] for v in range(T) if v != u) / (T - 1)
        assert p[u] == pytest.approx(naive)
    assert np.all((p >= 0) & (p <= 1))


def test_symmetrize_accuracy_mean_of_transpose_pair(rng):
    A = rng.uniform(0, 1, (5, 5))
    Ap = shift.symmetrize_accuracy(A)
    assert np.allclose(Ap, Ap.T)
    assert Ap[1, 3] == pytest.approx((A[1, 3] + A[3, 1]) / 2)


# ---------------------------------------------------------------------------
# Ward clustering

def _random_distance(rng, T):
    # Euclidean distances between random points: valid input for both
    # implementations
    pts = rng.standard_normal((T, 3)) * 10
    D = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    return D


def _partition_sets(dend):
    return {frozenset(dend.leaves_under(dend.n_leaves + i))
            for i in range(len(dend.merges))}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(3, 8))
def test_ward_matches_scipy_linkage(seed, T):
    rng = np.random.default_rng(seed)
    D = _random_distance(rng, T)
    dend = shift.ward_cluster(D)
    Z = linkage(squareform(D, checks=False), method="ward")
    assert np.allclose(sorted(h for _, _, h in dend.merges),
                       np.sort(Z[:, 2]), rtol=1e-8)
    scipy_sets = set()
    members = {i: frozenset([i]) for i in range(T)}
    for i, (a, b, _, _) in enumerate(Z):
        members[T + i] = members[int(a)] | members[int(b)]
        scipy_sets.add(members[T + i])
    assert _partition_sets(dend) == scipy_sets


def test_ward_deterministic_tie_break():
    # four equidistant points: first merge must pick the lowest id pair (0,1)
    D = np.ones((4, 4)) - np.eye(4)
    dend = shift.ward_cluster(D)
    assert dend.merges[0][:2] == (0, 1)


def test_ward_rejects_asymmetry():
    D = np.array([[0.0, 1.0], [2.0, 0.0]])
    with pytest.raises(ValidationError):
        shift.ward_cluster(D)


def test_similarity_to_distance_diagonal_zero(rng):
    S = rng.uniform(0, 100, (4, 4))
    D = shift.similarity_to_distance(S)
    assert np.all(np.diag(D) == 0)
    assert D[0, 1] == pytest.approx(100 - S[0, 1])


# ---------------------------------------------------------------------------
# splits and weights

def _chain_dendrogram():
    # ((0, 1), 2), 3 chain over 4 leaves
    return shift.Dendrogram(4, [(0, 1, 1.0), (4, 2, 2.0), (5, 3, 3.0)])


def _balanced_dendrogram():
    return shift.Dendrogram(4, [(0, 1, 1.0), (2, 3, 1.0), (4, 5, 2.0)])


def test_assign_splits_root_branch():
    dend = _chain_dendrogram()
    a = shift.assign_splits(dend)
    assert a.test == [0, 1, 2]
    assert a.pool == [3]
    dend2 = _balanced_dendrogram()
    b = shift.assign_splits(dend2)
    assert b.test == [0, 1]
    assert b.pool == [2, 3]
    assert b.sub_labels == {2: "A", 3: "B"}


def test_diversity_weights_balanced_tree_uniform():
    w = shift.diversity_weights(_balanced_dendrogram())
    assert w == {0: 0.25, 1: 0.25, 2: 0.25, 3: 0.25}


def test_diversity_weights_chain_tree_halving():
    # depths: leaf 3 -> 1, leaf 2 -> 2, leaves 0/1 -> 3
    w = shift.diversity_weights(_chain_dendrogram())
    raw = {0: 1 / 8, 1: 1 / 8, 2: 1 / 4, 3: 1 / 2}
    for leaf, r in raw.items():
        assert w[leaf] == pytest.approx(r)
    assert sum(w.values()) == pytest.approx(1.0)


def test_uniform_weights():
    assert shift.uniform_weights([3, 7]) == {3: 0.5, 7: 0.5}


def test_sample_task_batch_without_replacement(rng):
    train = [10, 11, 12, 13]
    gamma = {10: 0.7, 11: 0.1, 12: 0.1, 13: 0.1}
    picked = shift.sample_task_batch(train, gamma, 4, rng)
    assert sorted(picked) == train
    with pytest.raises(ValidationError):
        shift.sample_task_batch(train, gamma, 5, rng)


def test_sample_task_batch_respects_weights(rng):
    gamma = {0: 0.999, 1: 0.0005, 2: 0.0005}
    firsts = [shift.sample_task_batch([0, 1, 2], gamma, 1, rng)[0]
              for _ in range(200)]
    assert firsts.count(0) > 180


def test_select_validation_diverse_partitions_pool(rng):
    pool = list(range(6))
    D = _random_distance(rng, 6)
    train, val = shift.select_validation_diverse(pool, 0.2, D, rng)
    assert len(val) == 2  # ceil(0.2 * 6)
    assert sorted(train + val) == pool


def test_weighted_train_test_similarity_hand_case():
    S = np.array([
        [100.0, 80.0, 20.0],
        [80.0, 100.0, 40.0],
        [20.0, 40.0, 100.0],
    ])
    index = {0: 0, 1: 1, 2: 2}
    # test task {2}; train {0, 1} with gamma 0.75 / 0.25
    got = shift.weighted_train_test_similarity(
        S, index, [0, 1], [2], {0: 0.75, 1: 0.25})
    assert got == pytest.approx(0.75 * 20 + 0.25 * 40)


def test_sim_accuracy_bins_equal_count_and_sorted(rng):
    T = 10
    S = rng.uniform(0, 100, (T, T))
    S = (S + S.T) / 2
    A = rng.uniform(0, 1, (T, T))
    A = (A + A.T) / 2
    bins = shift.sim_accuracy_bins(S, A, n_bins=5)
    sims = [b[0] for b in bins]
    assert sims == sorted(sims)
    accs = np.array([b[1] for b in bins])
    assert np.all(np.isfinite(accs))
    with pytest.raises(ValidationError):
        shift.sim_accuracy_bins(S[:3, :3], A[:3, :3], n_bins=20)
