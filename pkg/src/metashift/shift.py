"""Model-relevant data-shift quantification.

Cross-task accuracy and the outperformance proportion p_u, linear CKA on
post-GAP activations, distance matrices, Ward clustering with deterministic
tie-breaking, dendrogram-derived split assignment and diversity sampling
weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import nn
from .errors import ValidationError


def extract_activations(params, data):
    """Post-GAP activations, column-centered."""
    acts = nn.forward_features(params, data)
    return acts - acts.mean(axis=0, keepdims=True)


def linear_cka(X, Y):
    """Linear CKA scaled to [0, 100]: 100 * |Y^T X|_F^2 / (|X^T X|_F |Y^T Y|_F).

    Inputs must be column-centered with equal row counts. Invariant to
    orthogonal column transforms and nonzero isotropic scaling; s(X, X) = 100.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise ValidationError(f"row counts differ: {X.shape[0]} vs {Y.shape[0]}")
    xx = np.linalg.norm(X.T @ X)
    yy = np.linalg.norm(Y.T @ Y)
    if xx == 0 or yy == 0:
        raise ValidationError("CKA undefined for an all-zero activation matrix")
    xy = np.linalg.norm(Y.T @ X)
    return float(100.0 * xy * xy / (xx * yy))


def pairwise_similarity(ensembles, tasks):
    """Symmetric T x T similarity matrix.

    ensembles: task id -> list of ParameterSet (>= 2 for diagonal entries).
    tasks: task id -> waveform array (n, 2, S); each pair (u, v) is scored on
    the concatenation of both tasks' data, averaged over ensemble pairs
    (E_u * E_v off the diagonal, C(E, 2) on it).
    """
    ids = sorted(tasks.keys())
    T = len(ids)
    S = np.zeros((T, T))
    for a in range(T):
        for b in range(a, T):
            u, v = ids[a], ids[b]
            data = np.concatenate([tasks[u], tasks[v]], axis=0)
            acts_u = [extract_activations(p, data) for p in ensembles[u]]
            if u == v:
                if len(ensembles[u]) < 2:
                    raise ValidationError(
                        f"task {u}: diagonal similarity needs >= 2 ensembles")
                vals = [linear_cka(acts_u[i], acts_u[j])
                        for i, j in combinations(range(len(acts_u)), 2)]
            else:
                acts_v = [extract_activations(p, data) for p in ensembles[v]]
                vals = [linear_cka(xu, xv) for xu in acts_u for xv in acts_v]
            S[a, b] = S[b, a] = float(np.mean(vals))
    return S


def cross_accuracy_matrix(ensembles, tasks_eval):
    """A[u, v] = ensemble-mean accuracy of models trained on u, evaluated on
    task v's evaluation data. tasks_eval: task id -> (X, y)."""
    ids = sorted(tasks_eval.keys())
    T = len(ids)
    A = np.zeros((T, T))
    for a, u in enumerate(ids):
        for b, v in enumerate(ids):
            X, y = tasks_eval[v]
            A[a, b] = float(np.mean([nn.accuracy(p, X, y) for p in ensembles[u]]))
    return A


def compute_pu(A):
    """p_u = (T-1)^-1 sum_{v != u} 1{a_uu > a_vu}; strict inequality, so
    ties count against the native model."""
    A = np.asarray(A, dtype=np.float64)
    T = A.shape[0]
    if A.ndim != 2 or A.shape[1] != T:
        raise ValidationError(f"accuracy matrix must be square, got {A.shape}")
    if T < 2:
        raise ValidationError("need at least 2 tasks for p_u")
    p = np.empty(T)
    for u in range(T):
        col = A[:, u]
        p[u] = np.sum(col[np.arange(T) != u] < A[u, u]) / (T - 1)
    return p


def symmetrize_accuracy(A):
    A = np.asarray(A, dtype=np.float64)
    return (A + A.T) / 2.0


def similarity_to_distance(S):
    D = 100.0 - np.asarray(S, dtype=np.float64)
    np.fill_diagonal(D, 0.0)
    return D


@dataclass
class Dendrogram:
    n_leaves: int
    # merge i creates node (n_leaves + i) from (left, right) at height
    merges: list  # of (left_id, right_id, height)

    @property
    def root(self):
        return self.n_leaves + len(self.merges) - 1

    def children(self, node):
        if node < self.n_leaves:
            return None
        left, right, _ = self.merges[node - self.n_leaves]
        return left, right

    def leaves_under(self, node):
        stack, out = [node], []
        while stack:
            nd = stack.pop()
            ch = self.children(nd)
            if ch is None:
                out.append(nd)
            else:
                stack.extend(ch)
        return sorted(out)

    def leaf_depths(self):
        """Bifurcation count from the root to each leaf."""
        depths = {}
        stack = [(self.root, 0)]
        while stack:
            nd, d = stack.pop()
            ch = self.children(nd)
            if ch is None:
                depths[nd] = d
            else:
                stack.append((ch[0], d + 1))
                stack.append((ch[1], d + 1))
        return depths


def ward_cluster(D):
    """Agglomerative clustering, Ward linkage via Lance-Williams updates on
    squared dissimilarities; singleton heights equal the input distances.
    Ties break toward the lexicographically lowest cluster-id pair."""
    D = np.asarray(D, dtype=np.float64)
    T = D.shape[0]
    if D.ndim != 2 or D.shape[1] != T:
        raise ValidationError(f"distance matrix must be square, got {D.shape}")
    if not np.allclose(D, D.T, atol=1e-8):
        raise ValidationError("distance matrix must be symmetric")
    if T == 1:
        return Dendrogram(1, [])
    # active cluster id -> (squared-dist row key); sizes per id
    sq = {}
    active = list(range(T))
    for i, j in combinations(range(T), 2):
        sq[(i, j)] = D[i, j] ** 2
    sizes = {i: 1 for i in range(T)}
    merges = []
    next_id = T
    while len(active) > 1:
        best = None
        for ai in range(len(active)):
            for aj in range(ai + 1, len(active)):
                i, j = active[ai], active[aj]
                d2 = sq[(min(i, j), max(i, j))]
                key = (d2, min(i, j), max(i, j))
                if best is None or key < best:
                    best = key
        d2, i, j = best
        merges.append((i, j, float(np.sqrt(d2))))
        ni, nj = sizes[i], sizes[j]
        for k in active:
            if k in (i, j):
                continue
            nk = sizes[k]
            dik = sq[(min(i, k), max(i, k))]
            djk = sq[(min(j, k), max(j, k))]
            dij = d2
            new = ((ni + nk) * dik + (nj + nk) * djk - nk * dij) / (ni + nj + nk)
            sq[(min(k, next_id), max(k, next_id))] = new
        sizes[next_id] = ni + nj
        active = [a for a in active if a not in (i, j)] + [next_id]
        next_id += 1
    return Dendrogram(T, merges)


@dataclass
class SplitAssignment:
    test: list
    pool: list
    sub_labels: dict | None = None  # pool task -> "A" | "B"


def assign_splits(dend, rule="root-branch"):
    """Left child subtree of the root becomes the test split, right child the
    training pool; pool sub-labels come from the pool's first bifurcation."""
    if rule != "root-branch":
        raise ValidationError(f"unknown split rule {rule!r}")
    if dend.n_leaves < 2:
        raise ValidationError("cannot split a single-leaf dendrogram")
    left, right = dend.children(dend.root)
    test = dend.leaves_under(left)
    pool = dend.leaves_under(right)
    sub = {}
    ch = dend.children(right)
    if ch is None:
        sub[right] = "A"
    else:
        for leaf in dend.leaves_under(ch[0]):
            sub[leaf] = "A"
        for leaf in dend.leaves_under(ch[1]):
            sub[leaf] = "B"
    return SplitAssignment(test=test, pool=pool, sub_labels=sub)


def diversity_weights(dend):
    """gamma_t = 2^(-k_t) over the dendrogram leaves, normalized to sum 1."""
    depths = dend.leaf_depths()
    leaves = sorted(depths)
    raw = np.array([2.0 ** (-depths[leaf]) for leaf in leaves])
    return {leaf: float(w) for leaf, w in zip(leaves, raw / raw.sum())}


def sim_accuracy_bins(S, A_sym, n_bins=20):
    """Equal-count similarity bins over unordered task pairs, each paired with
    the bin's mean standardized symmetric cross-accuracy. Returns a list of
    (mean_similarity, mean_standardized_accuracy)."""
    S = np.asarray(S, dtype=np.float64)
    A_sym = np.asarray(A_sym, dtype=np.float64)
    iu, ju = np.triu_indices(S.shape[0], k=1)
    sims, accs = S[iu, ju], A_sym[iu, ju]
    if sims.size < n_bins:
        raise ValidationError(f"{sims.size} pairs cannot fill {n_bins} bins")
    sd = accs.std()
    z = (accs - accs.mean()) / sd if sd > 0 else accs - accs.mean()
    order = np.argsort(sims, kind="stable")
    out = []
    for chunk in np.array_split(order, n_bins):
        out.append((float(sims[chunk].mean()), float(z[chunk].mean())))
    return out


def uniform_weights(ids):
    ids = list(ids)
    return {t: 1.0 / len(ids) for t in ids}


def select_validation_diverse(pool, fraction, D, rng, pool_index=None):
    """Iteratively draw validation tasks by diversity weight, re-clustering
    the remainder after each pick. Returns (train_ids, val_ids)."""
    pool = list(pool)
    if not 0 < fraction < 1:
        raise ValidationError("fraction must be in (0, 1)")
    n_val = int(np.ceil(fraction * len(pool)))
    if n_val >= len(pool):
        raise ValidationError("pool too small for requested validation fraction")
    if pool_index is None:
        pool_index = {t: k for k, t in enumerate(pool)}
    remaining = list(pool)
    val = []
    for _ in range(n_val):
        if len(remaining) == 1:
            val.append(remaining.pop())
            continue
        rows = [pool_index[t] for t in remaining]
        sub = D[np.ix_(rows, rows)]
        dend = ward_cluster(sub)
        gamma = diversity_weights(dend)
        weights = np.array([gamma[k] for k in range(len(remaining))])
        pick = int(rng.choice(len(remaining), p=weights))
        val.append(remaining.pop(pick))
    train = [t for t in pool if t not in val]
    return train, sorted(val)


def sample_task_batch(train, gamma, batch, rng):
    """Weighted sampling without replacement: sequential draws with the
    remaining mass renormalized after each pick."""
    train = list(train)
    if batch > len(train):
        raise ValidationError(f"batch {batch} exceeds {len(train)} training tasks")
    weights = np.array([gamma[t] for t in train], dtype=np.float64)
    picked = []
    for _ in range(batch):
        p = weights / weights.sum()
        k = int(rng.choice(len(train), p=p))
        picked.append(train.pop(k))
        weights = np.delete(weights, k)
    return picked


def weighted_train_test_similarity(S, index, train_ids, test_ids, gamma):
    """Mean similarity between the test tasks and the sampling-induced
    training distribution: sum_t gamma_t * mean_v S[t, v in test]."""
    total = sum(gamma[t] for t in train_ids)
    acc = 0.0
    for t in train_ids:
        sims = [S[index[t], index[v]] for v in test_ids]
        acc += (gamma[t] / total) * float(np.mean(sims))
    return acc
