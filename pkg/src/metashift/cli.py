"""Command-line pipeline: generate -> train --task-specific -> shift ->
train -> eval -> report.

Exit codes: 0 success, 2 validation error, 3 missing upstream artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import functools
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import evaluate, meta, nn, reporting, shift, taskgen
from .errors import MissingArtifactError, ValidationError


def _out_root(args):
    root = args.out or os.environ.get("METASHIFT_OUT") or "."
    os.makedirs(root, exist_ok=True)
    return root


@functools.lru_cache(maxsize=4)
def _load_archive_cached(path):
    return taskgen.load_archive(path)


def _partitioned(archive_path, N):
    ts = _load_archive_cached(archive_path)
    # re-partition deterministically for this N; archives may carry
    # partitions for a different N
    taskgen.partition_taskset(ts, N)
    return ts


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args):
    out = args.out
    if not out:
        raise ValidationError("generate requires --out")
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise ValidationError(f"{out} exists and is not empty (use --force)")
    if args.tasks == "ood":
        ts = taskgen.generate_ood_taskset(args.bins, args.reps, seed=args.seed)
    else:
        ts = taskgen.generate_taskset(args.reps, master_seed=args.seed,
                                      design=args.tasks)
    if args.partition_n:
        taskgen.partition_taskset(ts, args.partition_n)
    taskgen.save_archive(ts, out, force=args.force)
    print(f"wrote {len(ts.tasks)}-task {ts.kind} archive to {out}")
    return 0


# ---------------------------------------------------------------------------
# task-specific training (feeds the shift analysis)

def _task_model_seed(master_seed, task_id, member):
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(6, task_id, member))
    return int(ss.generate_state(1)[0])


def _task_model_path(outdir, task_id, member):
    return os.path.join(outdir, f"task_{task_id:05d}_e{member}.msnn")


def _train_task_specific_one(archive, N, arch, outdir, max_epochs, patience,
                             master_seed, task_id, member):
    path = _task_model_path(outdir, task_id, member)
    if os.path.exists(path):
        return path
    ts = _partitioned(archive, N)
    task = next(t for t in ts.tasks if t.id == task_id)
    cfg = meta.MetaConfig(algorithm="dnc", architecture=arch, N=N,
                          patience=patience, max_epochs=max_epochs,
                          seed=_task_model_seed(master_seed, task_id, member))
    phi, _ = meta.dnc_train(cfg, task)
    nn.save_checkpoint(phi, path)
    return path


def _run_jobs(fn, payloads, jobs):
    if jobs <= 1:
        for p in payloads:
            fn(*p)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            list(ex.map(fn, *zip(*payloads)) if payloads else [])


# ---------------------------------------------------------------------------
# shift

def cmd_shift(args):
    root = _out_root(args)
    cfg_hash = reporting.config_hash(vars(args))
    ts = _partitioned(args.archive, args.n_pairs)
    outdir = os.path.join(root, "shift")
    os.makedirs(outdir, exist_ok=True)
    ids = [t.id for t in ts.tasks]
    missing = []
    ensembles = {}
    for tid in ids:
        members = []
        for e in range(args.ensembles):
            path = _task_model_path(args.taskmodels, tid, e)
            if not os.path.exists(path):
                missing.append(path)
                continue
            members.append(nn.load_checkpoint(path))
        ensembles[tid] = members
    if missing:
        raise MissingArtifactError(
            "missing task-specific checkpoints (run `metashift train "
            f"--task-specific` first): {', '.join(missing[:8])}"
            + ("..." if len(missing) > 8 else ""))

    by_id = {t.id: t for t in ts.tasks}
    tasks_eval = {tid: by_id[tid].subset(by_id[tid].partitions["holdout"])
                  for tid in ids}
    A = shift.cross_accuracy_matrix(ensembles, tasks_eval)
    pu = shift.compute_pu(A)
    task_data = {tid: by_id[tid].data for tid in ids}
    S = shift.pairwise_similarity(ensembles, task_data)
    D = shift.similarity_to_distance(S)
    dend = shift.ward_cluster(D)
    assignment = shift.assign_splits(dend)
    index = {tid: k for k, tid in enumerate(ids)}
    pos_to_id = {k: tid for tid, k in index.items()}
    test_ids = sorted(pos_to_id[p] for p in assignment.test)
    pool_ids = sorted(pos_to_id[p] for p in assignment.pool)
    train_a = sorted(pos_to_id[p] for p, lab in assignment.sub_labels.items()
                     if lab == "A")
    train_b = sorted(pos_to_id[p] for p, lab in assignment.sub_labels.items()
                     if lab == "B")

    strategies = {}
    rng = np.random.default_rng(args.seed)
    # uniform: random 20% validation split, equal sampling weights
    n_val = int(np.ceil(0.2 * len(pool_ids)))
    val_u = sorted(rng.choice(pool_ids, size=n_val, replace=False).tolist())
    train_u = [t for t in pool_ids if t not in val_u]
    strategies["uniform"] = {
        "train": train_u, "val": val_u,
        "gamma": {str(t): 1.0 / len(train_u) for t in train_u},
    }
    # diverse: iterative gamma-weighted validation selection, then weights
    # from a dendrogram over the remaining training tasks
    pool_index = {t: k for k, t in enumerate(pool_ids)}
    D_pool = D[np.ix_([index[t] for t in pool_ids],
                      [index[t] for t in pool_ids])]
    train_d, val_d = shift.select_validation_diverse(
        pool_ids, 0.2, D_pool, rng, pool_index)
    rows = [pool_index[t] for t in train_d]
    dend_tr = shift.ward_cluster(D_pool[np.ix_(rows, rows)])
    gamma_leaf = shift.diversity_weights(dend_tr)
    strategies["diverse"] = {
        "train": train_d, "val": val_d,
        "gamma": {str(train_d[k]): gamma_leaf[k] for k in range(len(train_d))},
    }

    reporting.write_matrix_csv(os.path.join(outdir, "cross_accuracy.csv"), A, ids, cfg_hash)
    reporting.write_matrix_csv(os.path.join(outdir, "similarity.csv"), S, ids, cfg_hash)
    reporting.write_matrix_csv(os.path.join(outdir, "distance.csv"), D, ids, cfg_hash)
    reporting.write_csv(os.path.join(outdir, "pu.csv"), ["task_id", "p_u"],
                        [[str(t), repr(float(p))] for t, p in zip(ids, pu)], cfg_hash)
    reporting.write_dendrogram(os.path.join(outdir, "dendrogram.txt"), dend, cfg_hash)
    reporting.write_json(os.path.join(outdir, "splits.json"), {
        "test": test_ids, "pool": pool_ids,
        "train_a": train_a, "train_b": train_b,
        "strategies": strategies,
    }, cfg_hash)
    bins = shift.sim_accuracy_bins(S, shift.symmetrize_accuracy(A))
    reporting.write_csv(
        os.path.join(outdir, "sim_vs_accuracy.csv"),
        ["bin", "mean_similarity", "standardized_accuracy"],
        [[str(i), repr(s), repr(a)] for i, (s, a) in enumerate(bins)], cfg_hash)
    print(f"shift analysis written to {outdir} "
          f"({len(test_ids)} test / {len(pool_ids)} pool tasks)")
    return 0


# ---------------------------------------------------------------------------
# train

def _cell_seed(master_seed, alg, arch, N, sampling):
    key = f"{alg}|{arch}|{N}|{sampling}|{master_seed}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") % (2 ** 62)


def _cell_name(alg, arch, N, sampling, member, task_id=None):
    base = f"{alg}-{arch}-N{N}-{sampling}-e{member}"
    if task_id is not None:
        base += f"-t{task_id}"
    return base


def _train_grid_cell(archive, runs_dir, splits_blob, alg, arch, N, sampling,
                     member, master_seed, max_epochs, patience, task_id):
    name = _cell_name(alg, arch, N, sampling, member, task_id)
    ckpt = os.path.join(runs_dir, name + ".msnn")
    logp = os.path.join(runs_dir, name + ".log.csv")
    if os.path.exists(ckpt) and os.path.exists(logp):
        return name
    ts = _partitioned(archive, N)
    strat = splits_blob["strategies"][sampling]
    splits = meta.TrainValSplit(train=list(strat["train"]), val=list(strat["val"]))
    gamma = {int(k): v for k, v in strat["gamma"].items()}
    base = _cell_seed(master_seed, alg, arch, N, sampling)
    seed = meta.ensemble_seed(base, member)
    pat = patience if alg != "dnc" else min(patience, 150)
    cfg = meta.MetaConfig(algorithm=alg, architecture=arch, N=N,
                          sampling=sampling, seed=seed,
                          patience=pat, max_epochs=max_epochs)
    if alg == "reptile":
        phi, log = meta.reptile_train(cfg, ts, splits, gamma)
    elif alg == "fomaml":
        phi, log = meta.fomaml_train(cfg, ts, splits, gamma)
    elif alg == "tdl":
        phi, log = meta.tdl_train(cfg, ts, splits)
    else:
        task = next(t for t in ts.tasks if t.id == task_id)
        cfg = replace(cfg, seed=meta.ensemble_seed(seed, task_id))
        phi, log = meta.dnc_train(cfg, task)
    nn.save_checkpoint(phi, ckpt)
    reporting.write_csv(logp, ["epoch", "val_loss", "pseudo_epochs", "seconds"],
                        [[str(e), repr(v), str(p), repr(s)]
                         for e, v, p, s in log.entries], "trainlog")
    return name


def cmd_train(args):
    root = _out_root(args)
    ts = _load_archive_cached(args.archive)
    if args.task_specific:
        outdir = args.taskmodels or os.path.join(root, "taskmodels")
        os.makedirs(outdir, exist_ok=True)
        payloads = [
            (args.archive, args.n_pairs, args.architectures[0], outdir,
             args.max_epochs, min(args.patience, 150), args.seed, t.id, e)
            for t in ts.tasks for e in range(args.ensembles)]
        _run_jobs(_train_task_specific_one, payloads, args.jobs)
        print(f"{len(payloads)} task-specific models in {outdir}")
        return 0
    splits_path = os.path.join(args.shift_dir or os.path.join(root, "shift"),
                               "splits.json")
    splits_blob = reporting.read_json(splits_path)
    runs_dir = os.path.join(root, "runs")
    os.makedirs(runs_dir, exist_ok=True)
    payloads = []
    for alg in args.algorithms:
        samplings = ["uniform"] if alg in ("tdl", "dnc") else args.sampling
        for arch in args.architectures:
            for N in args.n_values:
                for s in samplings:
                    for e in range(args.ensembles):
                        if alg == "dnc":
                            for tid in splits_blob["test"]:
                                payloads.append((args.archive, runs_dir,
                                                 splits_blob, alg, arch, N, s,
                                                 e, args.seed, args.max_epochs,
                                                 args.patience, tid))
                        else:
                            payloads.append((args.archive, runs_dir,
                                             splits_blob, alg, arch, N, s, e,
                                             args.seed, args.max_epochs,
                                             args.patience, None))
    _run_jobs(_train_grid_cell, payloads, args.jobs)
    print(f"{len(payloads)} grid cells complete in {runs_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval

def _parse_cell_name(name):
    parts = name.split("-")
    alg, arch = parts[0], parts[1]
    N = int(parts[2][1:])
    sampling = parts[3]
    member = int(parts[4][1:])
    task_id = int(parts[5][1:]) if len(parts) > 5 else None
    return alg, arch, N, sampling, member, task_id


def cmd_eval(args):
    root = _out_root(args)
    cfg_hash = reporting.config_hash(vars(args))
    runs_dir = args.runs or os.path.join(root, "runs")
    if not os.path.isdir(runs_dir):
        raise MissingArtifactError(f"no runs directory at {runs_dir}")
    splits_path = os.path.join(args.shift_dir or os.path.join(root, "shift"),
                               "splits.json")
    test_ids = reporting.read_json(splits_path)["test"]
    names = sorted(f[:-5] for f in os.listdir(runs_dir) if f.endswith(".msnn"))
    if not names:
        raise MissingArtifactError(f"no checkpoints under {runs_dir}")
    rows = []
    for name in names:
        alg, arch, N, sampling, member, own_task = _parse_cell_name(name)
        phi = nn.load_checkpoint(os.path.join(runs_dir, name + ".msnn"))
        ts = _partitioned(args.archive, N)
        by_id = {t.id: t for t in ts.tasks}
        targets = [own_task] if own_task is not None else test_ids
        for tid in targets:
            for K in args.k_values:
                res = evaluate.finetune_and_eval(
                    phi, alg, by_id[tid], K, seed=args.seed,
                    ensemble=member, n_epochs=args.ft_epochs)
                for ep, acc in enumerate(res.accuracy):
                    rows.append([alg, arch, sampling, str(N), str(K),
                                 str(tid), str(member), str(ep),
                                 repr(float(acc))])
    out_csv = os.path.join(root, "results.csv")
    reporting.write_csv(out_csv,
                        ["algorithm", "architecture", "sampling", "N", "K",
                         "task_id", "ensemble", "ft_epoch", "accuracy"],
                        rows, cfg_hash)
    print(f"{len(rows)} result rows in {out_csv}")
    return 0


# ---------------------------------------------------------------------------
# report

def _group_records(rows, cols, keys):
    idx = {c: cols.index(c) for c in cols}
    groups = {}
    for r in rows:
        key = tuple(r[idx[k]] for k in keys)
        groups.setdefault(key, []).append(r)
    return groups, idx


def cmd_report(args):
    root = _out_root(args)
    cfg_hash = reporting.config_hash(vars(args))
    results_path = args.results or os.path.join(root, "results.csv")
    cols, rows = reporting.read_csv(results_path)
    if not rows:
        raise ValidationError(f"results file {results_path} holds no rows")
    outdir = os.path.join(root, "report")
    os.makedirs(outdir, exist_ok=True)

    groups, idx = _group_records(
        rows, cols, ["algorithm", "architecture", "sampling", "N", "K", "ft_epoch"])
    agg_rows = []
    for key in sorted(groups):
        records = {}
        for r in groups[key]:
            records.setdefault(r[idx["task_id"]], {})[r[idx["ensemble"]]] = \
                float(r[idx["accuracy"]])
        per_task = {t: list(d.values()) for t, d in records.items()}
        rec = evaluate.aggregate(per_task)
        agg_rows.append(list(key) + [repr(rec.mean), repr(rec.variance),
                                     repr(rec.ci_low), repr(rec.ci_high)])
    reporting.write_csv(os.path.join(outdir, "aggregates.csv"),
                        ["algorithm", "architecture", "sampling", "N", "K",
                         "ft_epoch", "mean", "variance", "ci_low", "ci_high"],
                        agg_rows, cfg_hash)

    # best-accuracy and speed summaries from per-(task, ensemble) curves
    curve_groups, cidx = _group_records(
        rows, cols, ["algorithm", "architecture", "sampling", "N", "K",
                     "task_id", "ensemble"])
    best_rows, speed_rows = {}, {}
    for key, rs in curve_groups.items():
        curve = sorted((int(r[cidx["ft_epoch"]]), float(r[cidx["accuracy"]]))
                       for r in rs)
        res = evaluate.FinetuneResult(task_id=0, ensemble=0, K=0,
                                      accuracy=np.array([a for _, a in curve]))
        acc, ep = evaluate.best_accuracy(res)
        gk = key[:5]
        best_rows.setdefault(gk, {}).setdefault(key[5], {})[key[6]] = acc
        speed_rows.setdefault(gk, []).append(ep)
    b_out, s_out = [], []
    for gk in sorted(best_rows):
        per_task = {t: list(d.values()) for t, d in best_rows[gk].items()}
        rec = evaluate.aggregate(per_task)
        b_out.append(list(gk) + [repr(rec.mean), repr(rec.variance),
                                 repr(rec.ci_low), repr(rec.ci_high)])
        s_out.append(list(gk) + [repr(float(np.mean(speed_rows[gk])))])
    reporting.write_csv(os.path.join(outdir, "best_accuracy.csv"),
                        ["algorithm", "architecture", "sampling", "N", "K",
                         "mean", "variance", "ci_low", "ci_high"], b_out, cfg_hash)
    reporting.write_csv(os.path.join(outdir, "speed.csv"),
                        ["algorithm", "architecture", "sampling", "N", "K",
                         "mean_epoch_of_best"], s_out, cfg_hash)

    _emit_plots(outdir, agg_rows, b_out, s_out)
    print(f"report written to {outdir}")
    return 0


def _emit_plots(outdir, agg_rows, best_rows, speed_rows):
    by_arch_k = {}
    for alg, arch, sampling, N, K, ep, mean, var, lo, hi in agg_rows:
        label = f"{alg}/{sampling}/N={N}"
        by_arch_k.setdefault((arch, K), {}).setdefault(label, []).append(
            (int(ep), float(mean), float(lo), float(hi)))
    for (arch, K), curves in by_arch_k.items():
        series = {}
        for label, pts in curves.items():
            pts.sort()
            ep = [p[0] for p in pts]
            series[label] = (ep, [p[1] for p in pts], [p[2] for p in pts],
                             [p[3] for p in pts])
        reporting.plot_ft_curves(
            os.path.join(outdir, f"ft_{arch}_K{K}.svg"), series,
            f"{arch}, K={K}: accuracy vs fine-tuning epoch")

    acc_series, speed_series = {}, {}
    for alg, arch, sampling, N, K, mean, var, lo, hi in best_rows:
        label = f"{alg}/{sampling}/{arch}/N={N}"
        acc_series.setdefault(label, []).append(
            (int(K), float(mean), float(lo), float(hi)))
    for alg, arch, sampling, N, K, ep in speed_rows:
        label = f"{alg}/{sampling}/{arch}/N={N}"
        speed_series.setdefault(label, []).append((int(K), float(ep)))
    acc_plot = {}
    for label, pts in acc_series.items():
        pts.sort()
        acc_plot[label] = ([p[0] for p in pts], [p[1] for p in pts],
                           [p[2] for p in pts], [p[3] for p in pts])
    reporting.plot_vs_k(os.path.join(outdir, "best_accuracy_vs_k.svg"),
                        acc_plot, "best accuracy", "best accuracy vs K")
    sp_plot = {}
    for label, pts in speed_series.items():
        pts.sort()
        sp_plot[label] = ([p[0] for p in pts], [p[1] for p in pts], None, None)
    reporting.plot_vs_k(os.path.join(outdir, "speed_vs_k.svg"),
                        sp_plot, "mean epoch of best accuracy",
                        "fine-tuning speed vs K")


# ---------------------------------------------------------------------------

def _csv_ints(s):
    return [int(x) for x in s.split(",") if x]


def _csv_strs(s):
    return [x for x in s.split(",") if x]


def build_parser():
    p = argparse.ArgumentParser(prog="metashift")
    p.add_argument("--config", help="JSON file of flag defaults; flags override")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--out", default=None, help="output root "
                        "(default: $METASHIFT_OUT or cwd)")

    g = sub.add_parser("generate", help="write a task archive")
    common(g)
    g.add_argument("--tasks", choices=("full", "mini", "ood"), default="mini")
    g.add_argument("--reps", type=int, default=30, help="pairs per class")
    g.add_argument("--bins", type=int, default=35, help="ood SNR bins")
    g.add_argument("--partition-n", type=int, default=None)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("shift", help="similarity, clustering, splits, weights")
    common(s)
    s.add_argument("--archive", required=True)
    s.add_argument("--taskmodels", required=True)
    s.add_argument("--ensembles", type=int, default=4)
    s.add_argument("--n-pairs", type=int, default=20,
                   help="N used when partitioning for holdout evaluation")
    s.set_defaults(func=cmd_shift)

    t = sub.add_parser("train", help="train task-specific models or a grid")
    common(t)
    t.add_argument("--archive", required=True)
    t.add_argument("--task-specific", action="store_true")
    t.add_argument("--taskmodels", default=None)
    t.add_argument("--shift-dir", default=None)
    t.add_argument("--algorithms", type=_csv_strs, default=["reptile", "tdl"])
    t.add_argument("--architectures", type=_csv_strs, default=["mini"])
    t.add_argument("--n-values", type=_csv_ints, default=[5])
    t.add_argument("--n-pairs", type=int, default=20,
                   help="N for --task-specific training")
    t.add_argument("--sampling", type=_csv_strs, default=["uniform"])
    t.add_argument("--ensembles", type=int, default=2)
    t.add_argument("--max-epochs", type=int, default=150)
    t.add_argument("--patience", type=int, default=200)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="K-shot fine-tuning evaluation")
    common(e)
    e.add_argument("--archive", required=True)
    e.add_argument("--runs", default=None)
    e.add_argument("--shift-dir", default=None)
    e.add_argument("--k-values", type=_csv_ints, default=[1, 5])
    e.add_argument("--ft-epochs", type=int, default=20)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="aggregate CSVs and figures")
    common(r)
    r.add_argument("--results", default=None)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    pre, _ = parser.parse_known_args(argv)
    if getattr(pre, "config", None):
        with open(pre.config) as f:
            defaults = json.load(f)
        for sp in parser._subparsers._group_actions[0].choices.values():
            known = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in defaults.items() if k in known})
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
