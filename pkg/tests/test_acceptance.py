"""Acceptance gate: ten end-to-end criteria, one pass/fail line each.

Each test prints a single `[PASS]`/`[FAIL]` line (visible with `pytest -s`,
or in the captured output on failure) and then asserts. The heavy criteria
(6, 7, 10) train real models and dominate the runtime.
"""

import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from metashift import evaluate, meta, nn, shift, taskgen
from metashift.cli import main as cli_main

# epoch budgets for the model-training criteria, sized for a single-core box
C6_MAX_EPOCHS = 150
C7_MAX_EPOCHS = 600
C7_PATIENCE = 100
C10_MAX_EPOCHS = 25


def _line(num, desc, ok, detail=""):
    tag = "PASS" if ok else "FAIL"
    extra = f" ({detail})" if detail else ""
    print(f"[{tag}] acceptance {num}: {desc}{extra}")
    assert ok, f"acceptance {num} failed: {desc}{extra}"


# ---------------------------------------------------------------------------
# 1. gradient correctness, all four architectures

def test_acceptance_1_gradient_correctness():
    t0 = time.perf_counter()
    budgets = {"mini": None, "small": 120, "big": 80, "huge": 40}
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        x = rng.standard_normal((8, 2, 64))
        y = (np.arange(8) % 2).astype(float)
        for name, max_entries in budgets.items():
            spec = nn.build_architecture(name)
            err = nn.gradient_check(spec, seed, x, y, eps=1e-3,
                                    max_entries=max_entries)
            worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    _line(1, "analytic gradients match finite differences on all "
          "architectures", worst < 1e-4 and elapsed < 120,
          f"worst rel err {worst:.2e}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 2. CKA suite

def test_acceptance_2_cka_suite():
    rng = np.random.default_rng(2)
    ok = True
    worst = 0.0
    for _ in range(50):
        X = rng.standard_normal((20, 6))
        X -= X.mean(axis=0)
        Y = rng.standard_normal((20, 6))
        Y -= Y.mean(axis=0)
        self_err = abs(shift.linear_cka(X, X) - 100.0)
        sym_err = abs(shift.linear_cka(X, Y) - shift.linear_cka(Y, X))
        Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        c = rng.uniform(0.1, 10.0)
        inv_err = abs(shift.linear_cka(c * (X @ Q), Y) - shift.linear_cka(X, Y))
        worst = max(worst, self_err, sym_err, inv_err)
    ok = worst < 1e-6
    _line(2, "CKA self-similarity, symmetry, orthogonal/scale invariance",
          ok, f"worst deviation {worst:.2e}")


# ---------------------------------------------------------------------------
# 3. p_u and Ward oracles

def _ward_bruteforce(points):
    """Recompute-everything Ward: at each step measure every candidate merge
    directly from cluster membership via the centroid identity
    d(A, B) = sqrt(2 |A||B| / (|A|+|B|)) * ||mean(A) - mean(B)||."""
    clusters = {i: [i] for i in range(len(points))}
    ids = sorted(clusters)
    merges = []
    next_id = len(points)
    while len(ids) > 1:
        best = None
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                i, j = ids[a], ids[b]
                A = points[clusters[i]]
                B = points[clusters[j]]
                na, nb = len(A), len(B)
                d = np.sqrt(2 * na * nb / (na + nb)) * np.linalg.norm(
                    A.mean(axis=0) - B.mean(axis=0))
                key = (d, i, j)
                if best is None or key < best:
                    best = key
        d, i, j = best
        merges.append((i, j, d))
        clusters[next_id] = clusters.pop(i) + clusters.pop(j)
        ids = sorted(clusters)
        next_id += 1
    return merges


def test_acceptance_3_pu_and_ward_oracles():
    rng = np.random.default_rng(3)
    pu_ok = True
    for _ in range(100):
        A = rng.uniform(0, 1, (8, 8))
        p = shift.compute_pu(A)
        for u in range(8):
            naive = sum(A[u, u] > A[v, u] for v in range(8) if v != u) / 7
            pu_ok &= abs(p[u] - naive) < 1e-12
    ward_ok = True
    for _ in range(50):
        pts = rng.standard_normal((6, 3)) * 5
        D = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
        got = shift.ward_cluster(D).merges
        want = _ward_bruteforce(pts)
        for (gi, gj, gh), (wi, wj, wh) in zip(got, want):
            ward_ok &= (gi, gj) == (wi, wj) and abs(gh - wh) < 1e-8
    _line(3, "p_u matches enumeration; Ward matches recompute-everything "
          "oracle", pu_ok and ward_ok)


# ---------------------------------------------------------------------------
# 4. generator invariants

def test_acceptance_4_generator_invariants():
    t0 = time.perf_counter()
    ts = taskgen.generate_taskset(30, master_seed=4, design="mini")
    snr_ok = peak_ok = True
    for task in ts.tasks:
        snr_ok &= bool(np.all(np.abs(task.signal_ratios - 0.2) < 1e-6))
        for i in np.flatnonzero(task.labels == 1):
            peak_ok &= abs(float(np.abs(task.data[i]).max()) - 1.0) < 1e-6
    rng = np.random.default_rng(44)
    draws = np.array([taskgen.draw_onset_index(rng) for _ in range(10 ** 4)])
    counts = np.bincount(draws - taskgen.ONSET_LO,
                         minlength=taskgen.ONSET_HI - taskgen.ONSET_LO + 1)
    _, p_chi = stats.chisquare(counts)
    elapsed = time.perf_counter() - t0
    _line(4, "embedding SNR 1/5, unit peak, uniform onsets",
          snr_ok and peak_ok and p_chi > 0.01 and elapsed < 300,
          f"chi2 p={p_chi:.3f}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 5. algorithm fixed points

def test_acceptance_5_algorithm_fixed_points(mini_taskset):
    t0 = time.perf_counter()
    ids = [t.id for t in mini_taskset.tasks]
    splits = meta.TrainValSplit(train=ids[:5], val=ids[5:7])
    by_id = {t.id: t for t in mini_taskset.tasks}

    # Reptile, alpha = 0: phi must be bit-unchanged over 10 epochs
    long_cfg = meta.MetaConfig(algorithm="reptile", inner_lr=0.0, seed=55,
                               max_epochs=10, N=5)
    short_cfg = meta.MetaConfig(algorithm="reptile", inner_lr=0.0, seed=55,
                                max_epochs=1, N=5)
    phi10, log10 = meta.reptile_train(long_cfg, mini_taskset, splits, None)
    phi1, _ = meta.reptile_train(short_cfg, mini_taskset, splits, None)
    reptile_ok = all(np.array_equal(phi10.arrays[k], phi1.arrays[k])
                     for k in phi10.arrays)
    reptile_ok &= len({v for _, v, _, _ in log10.entries}) == 1

    # FOMAML, alpha = 0: each outer update equals Adam on the plain averaged
    # query gradient at phi; replicate the loop's rng stream draw-for-draw
    cfg = meta.MetaConfig(algorithm="fomaml", inner_lr=0.0, seed=56,
                          max_epochs=3, N=5, patience=200)
    got, _ = meta.fomaml_train(cfg, mini_taskset, splits, None)
    rng = np.random.default_rng(cfg.seed)
    spec = nn.build_architecture(cfg.architecture)
    phi = nn.init_params(spec, int(rng.integers(2 ** 31)))
    opt = nn.make_optimizer("adam", cfg.outer_lr)
    for _ in range(cfg.max_epochs):
        ids_drawn = meta._sample_tasks(splits.train, None, 5, rng)
        grad_sum = None
        for tid in ids_drawn:
            task = by_id[tid]
            (Xs, ys), (Xq, yq) = meta._draw_disjoint_pairs(
                task, ("support", "query"), cfg.N, rng)
            # alpha = 0 -> the adapted parameters are phi itself
            _, cache = nn.forward(phi, Xq)
            _, grads = nn.loss_and_grads(phi, cache, yq)
            grad_sum = grads if grad_sum is None else grad_sum.map(
                lambda a, b: a + b, grads)
        mean_grad = grad_sum.map(lambda a: a / len(ids_drawn))
        phi, opt = nn.adam_step(phi, mean_grad, opt)
        meta._mean_val_loss_meta(phi, mini_taskset, splits.val, cfg.N, 1,
                                 cfg.inner_lr, rng)
    fomaml_dev = max(float(np.max(np.abs(got.arrays[k] - phi.arrays[k])))
                     for k in got.arrays)
    elapsed = time.perf_counter() - t0
    _line(5, "Reptile alpha=0 fixed point; FOMAML alpha=0 equals averaged "
          "plain gradient descent",
          reptile_ok and fomaml_dev < 1e-6 and elapsed < 60,
          f"fomaml max dev {fomaml_dev:.2e}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 6. desk-scale p_u structure

def test_acceptance_6_pu_structure(tmp_path_factory):
    t0 = time.perf_counter()
    ts = taskgen.generate_taskset(61, master_seed=0, design="mini")
    taskgen.partition_taskset(ts, 20)
    ensembles = {}
    for task in ts.tasks:
        members = []
        for e in range(4):
            cfg = meta.MetaConfig(
                algorithm="dnc", architecture="mini", N=20, patience=150,
                max_epochs=C6_MAX_EPOCHS,
                seed=int(np.random.SeedSequence(
                    entropy=0, spawn_key=(6, task.id, e)).generate_state(1)[0]))
            phi, _ = meta.dnc_train(cfg, task)
            members.append(phi)
        ensembles[task.id] = members
    tasks_eval = {t.id: t.subset(t.partitions["holdout"]) for t in ts.tasks}
    A = shift.cross_accuracy_matrix(ensembles, tasks_eval)
    pu = shift.compute_pu(A)
    ks = stats.kstest(pu, stats.uniform(loc=0, scale=1).cdf)
    frac_below = float(np.mean(pu < 0.9))
    elapsed = time.perf_counter() - t0
    _line(6, "p_u distribution neither uniform nor a point mass",
          ks.pvalue < 0.01 and frac_below >= 0.20 and elapsed < 1800,
          f"KS p={ks.pvalue:.2e}, frac(p_u<0.9)={frac_below:.2f}, "
          f"{elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 7. adaptation-speed trend

def test_acceptance_7_adaptation_speed_trend():
    t0 = time.perf_counter()
    ts = taskgen.generate_taskset(16, master_seed=0, design="mini")
    taskgen.partition_taskset(ts, 5)
    by_id = {t.id: t for t in ts.tasks}
    test_ids = [2, 9, 16, 23]
    rest = [i for i in by_id if i not in test_ids]
    splits = meta.TrainValSplit(train=rest[:12], val=rest[12:16])
    stats_by_alg = {}
    for alg in ("reptile", "tdl"):
        curves = []
        for e in range(5):
            cfg = meta.MetaConfig(algorithm=alg, architecture="mini", N=5,
                                  patience=C7_PATIENCE,
                                  max_epochs=C7_MAX_EPOCHS,
                                  seed=meta.ensemble_seed(1234, e))
            if alg == "tdl":
                phi, _ = meta.tdl_train(cfg, ts, splits)
            else:
                phi, _ = meta.reptile_train(cfg, ts, splits, None)
            for tid in test_ids:
                res = evaluate.finetune_and_eval(phi, alg, by_id[tid], K=1,
                                                 seed=0, ensemble=e)
                curves.append(res.accuracy)
        curves = np.array(curves)
        best_epochs = [int(np.argmax(c)) for c in curves]
        stats_by_alg[alg] = {
            "speed": float(np.mean(best_epochs)),
            "early_acc": float(curves[:, :6].max(axis=1).mean()),
        }
    r, t = stats_by_alg["reptile"], stats_by_alg["tdl"]
    elapsed = time.perf_counter() - t0
    _line(7, "Reptile adapts at least as fast as the pooled baseline",
          r["speed"] <= t["speed"]
          and r["early_acc"] >= t["early_acc"] - 0.02
          and elapsed < 2700,
          f"speed {r['speed']:.2f} vs {t['speed']:.2f}, early acc "
          f"{r['early_acc']:.3f} vs {t['early_acc']:.3f}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 8. UQ calibration

def test_acceptance_8_uq_calibration():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    T, E, reps = 10, 5, 10 ** 4
    alpha_t = rng.uniform(0.6, 0.95, T)
    sigma_t = rng.uniform(0.01, 0.08, T)
    truth = float(alpha_t.mean())
    hits = 0
    for _ in range(reps):
        records = {t: (alpha_t[t] + sigma_t[t] * rng.standard_normal(E)).tolist()
                   for t in range(T)}
        rec = evaluate.aggregate(records)
        hits += rec.ci_low <= truth <= rec.ci_high
    coverage = hits / reps

    records = {t: rng.normal(0.8, 0.05, 10).tolist() for t in range(40)}
    pairs, _ = evaluate.qq_residuals(records)
    theo = np.array([p[0] for p in pairs])
    samp = np.array([p[1] for p in pairs])
    slope, intercept = np.polyfit(theo, samp, 1)
    corr = float(np.corrcoef(theo, samp)[0, 1])
    qq_ok = abs(slope - 1) < 0.1 and abs(intercept) < 0.05 and corr > 0.99
    elapsed = time.perf_counter() - t0
    _line(8, "95% CI coverage within 3 points; QQ residuals near y=x",
          abs(coverage - 0.95) < 0.03 and qq_ok and elapsed < 120,
          f"coverage {coverage:.3f}, slope {slope:.3f}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 9. sampling-similarity diagnostic

def _planted_similarity():
    # tasks 0-1: test cluster; 2-5: pool cluster near the test tasks;
    # 6-7: pool outliers far from everything
    S = np.full((8, 8), 30.0)
    for group, val in (((0, 1), 98.0), ((2, 3, 4, 5), 98.0), ((6, 7), 98.0)):
        for a in group:
            for b in group:
                S[a, b] = val
    for a in (0, 1):
        for b in (2, 3, 4, 5):
            S[a, b] = S[b, a] = 60.0
        for b in (6, 7):
            S[a, b] = S[b, a] = 10.0
    np.fill_diagonal(S, 100.0)
    return S


def test_acceptance_9_sampling_similarity_diagnostic():
    S = _planted_similarity()
    D = shift.similarity_to_distance(S)
    dend = shift.ward_cluster(D)
    assignment = shift.assign_splits(dend)
    test_ids, pool = assignment.test, assignment.pool
    index = {t: t for t in range(8)}
    rows = np.ix_(pool, pool)
    pool_dend = shift.ward_cluster(D[rows])
    gamma_leaf = shift.diversity_weights(pool_dend)
    gamma_div = {pool[k]: w for k, w in gamma_leaf.items()}
    gamma_uni = shift.uniform_weights(pool)
    sim_uni = shift.weighted_train_test_similarity(S, index, pool, test_ids,
                                                   gamma_uni)
    sim_div = shift.weighted_train_test_similarity(S, index, pool, test_ids,
                                                   gamma_div)
    planted_gap = abs(sim_uni - sim_div)

    # balanced pool dendrogram: the two weightings must coincide exactly
    Sb = np.full((6, 6), 20.0)
    for group, val in (((0, 1), 95.0), ((2, 3), 95.0), ((4, 5), 95.0)):
        for a in group:
            for b in group:
                Sb[a, b] = val
    for a in (0, 1):
        for b in (2, 3):
            Sb[a, b] = Sb[b, a] = 55.0
        for b in (4, 5):
            Sb[a, b] = Sb[b, a] = 50.0
    np.fill_diagonal(Sb, 100.0)
    Db = shift.similarity_to_distance(Sb)
    ab = shift.assign_splits(shift.ward_cluster(Db))
    poolb = ab.pool
    dendb = shift.ward_cluster(Db[np.ix_(poolb, poolb)])
    gb = shift.diversity_weights(dendb)
    gamma_db = {poolb[k]: w for k, w in gb.items()}
    idx = {t: t for t in range(6)}
    su = shift.weighted_train_test_similarity(Sb, idx, poolb, ab.test,
                                              shift.uniform_weights(poolb))
    sd = shift.weighted_train_test_similarity(Sb, idx, poolb, ab.test,
                                              gamma_db)
    _line(9, "diverse vs uniform weighting separates planted clusters and "
          "coincides on a balanced tree",
          planted_gap > 0.5 and su == sd,
          f"gap {planted_gap:.2f}, balanced {su:.4f}=={sd:.4f}")


# ---------------------------------------------------------------------------
# 10. end-to-end determinism

def _run_pipeline(out: Path, seed: int):
    archive = str(out / "archive")
    o = str(out)
    s = str(seed)
    assert cli_main(["generate", "--tasks", "mini", "--reps", "16",
                     "--out", archive, "--seed", s]) == 0
    assert cli_main(["train", "--task-specific", "--archive", archive,
                     "--n-pairs", "5", "--ensembles", "2",
                     "--max-epochs", str(C10_MAX_EPOCHS), "--out", o,
                     "--seed", s]) == 0
    assert cli_main(["shift", "--archive", archive,
                     "--taskmodels", str(out / "taskmodels"),
                     "--ensembles", "2", "--n-pairs", "5", "--out", o,
                     "--seed", s]) == 0
    assert cli_main(["train", "--archive", archive,
                     "--algorithms", "reptile,tdl,dnc", "--n-values", "5",
                     "--ensembles", "2", "--max-epochs", str(C10_MAX_EPOCHS),
                     "--out", o, "--seed", s]) == 0
    assert cli_main(["eval", "--archive", archive, "--k-values", "1",
                     "--ft-epochs", "5", "--out", o, "--seed", s]) == 0
    assert cli_main(["report", "--out", o, "--seed", s]) == 0


def test_acceptance_10_end_to_end_determinism(tmp_path):
    t0 = time.perf_counter()
    a, b = tmp_path / "a", tmp_path / "b"
    _run_pipeline(a, seed=0)
    _run_pipeline(b, seed=0)
    exts = (".csv", ".json", ".txt")
    rel_a = sorted(p.relative_to(a) for p in a.rglob("*")
                   if p.suffix in exts and not p.name.endswith(".log.csv"))
    rel_b = sorted(p.relative_to(b) for p in b.rglob("*")
                   if p.suffix in exts and not p.name.endswith(".log.csv"))
    same_set = rel_a == rel_b
    diffs = [str(r) for r in rel_a
             if not same_set or (a / r).read_bytes() != (b / r).read_bytes()]
    elapsed = time.perf_counter() - t0
    _line(10, "pipeline artifacts byte-identical across reruns",
          same_set and not diffs and len(rel_a) > 10 and elapsed < 3600,
          f"{len(rel_a)} files compared, diffs={diffs[:3]}, {elapsed:.0f}s")
