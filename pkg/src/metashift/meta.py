"""The four training procedures: Reptile, FOMAML, TDL, and D&C.

All trainers share the early-stopping protocol (patience on mean validation
loss, best-checkpoint return) and are bit-deterministic under a fixed seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ValidationError

ALGORITHMS = ("reptile", "fomaml", "tdl", "dnc")


@dataclass
class MetaConfig:
    algorithm: str
    architecture: str = "mini"
    N: int = 5
    inner_lr: float = 1e-2  # alpha
    outer_lr: float = 5e-4  # beta
    inner_steps: int = 5  # G
    task_batch: int = 5
    patience: int = 200  # 150 for dnc
    ensembles: int = 20
    sampling: str = "uniform"
    seed: int = 0
    max_epochs: int = 5000

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValidationError(f"unknown algorithm {self.algorithm!r}")
        if self.inner_lr < 0 or self.outer_lr <= 0 or self.inner_steps < 1:
            raise ValidationError("bad learning rates or inner step count")


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)  # (epoch, val_loss, pseudo_epochs, seconds)
    best_epoch: int = -1
    best_val_loss: float = np.inf

    def record(self, epoch, val_loss, pseudo_epochs, seconds):
        self.entries.append((epoch, float(val_loss), pseudo_epochs, float(seconds)))


class EarlyStop:
    def __init__(self, patience):
        self.patience = patience
        self.best = np.inf
        self.since = 0

    def update(self, val_loss):
        """Returns True when this is a new best."""
        if val_loss < self.best:
            self.best = val_loss
            self.since = 0
            return True
        self.since += 1
        return False

    @property
    def stop(self):
        return self.since >= self.patience


@dataclass
class TrainValSplit:
    train: list
    val: list


def _interleave_classes(X, y, rng):
    """Shuffle within each class and interleave so even-sized chunks stay
    class-balanced."""
    pos = rng.permutation(np.flatnonzero(y == 1))
    neg = rng.permutation(np.flatnonzero(y == 0))
    order = np.empty(pos.size + neg.size, dtype=int)
    n = min(pos.size, neg.size)
    order[0:2 * n:2] = pos[:n]
    order[1:2 * n:2] = neg[:n]
    order[2 * n:] = np.concatenate([pos[n:], neg[n:]])
    return X[order], y[order]


def inner_adapt(phi, X, y, G, alpha, rng=None):
    """G sequential SGD-alpha steps from phi over a fixed partition of the
    data into G mini-batches; phi itself is left untouched."""
    n = X.shape[0]
    if n < G:
        raise ValidationError(f"{n} samples cannot fill {G} inner steps")
    if rng is not None:
        X, y = _interleave_classes(X, y, rng)
    theta = phi
    bounds = np.linspace(0, n, G + 1).astype(int)
    for g in range(G):
        xb, yb = X[bounds[g]:bounds[g + 1]], y[bounds[g]:bounds[g + 1]]
        _, cache = nn.forward(theta, xb)
        _, grads = nn.loss_and_grads(theta, cache, yb)
        theta = nn.sgd_step(theta, grads, alpha)
    return theta


def _draw_pairs(task, partition_names, N, rng):
    """N pairs per class drawn without replacement from the union of the
    named partitions."""
    idx = np.concatenate([np.asarray(task.partitions[p], dtype=int)
                          for p in partition_names])
    labels = task.labels[idx]
    picked = []
    for c in (0, 1):
        cls = idx[labels == c]
        if cls.size < N:
            raise ValidationError(
                f"task {task.id}: {cls.size} class-{c} samples in "
                f"{partition_names}, need {N}")
        picked.append(rng.choice(cls, size=N, replace=False))
    sel = np.concatenate(picked)
    return task.subset(sel)


def _draw_disjoint_pairs(task, partition_names, N, rng):
    """Two disjoint draws of N pairs per class from the pooled partitions."""
    idx = np.concatenate([np.asarray(task.partitions[p], dtype=int)
                          for p in partition_names])
    labels = task.labels[idx]
    first, second = [], []
    for c in (0, 1):
        cls = idx[labels == c]
        if cls.size < 2 * N:
            raise ValidationError(
                f"task {task.id}: {cls.size} class-{c} samples cannot supply "
                f"two disjoint draws of {N}")
        perm = rng.permutation(cls)
        first.append(perm[:N])
        second.append(perm[N:2 * N])
    return (task.subset(np.concatenate(first)),
            task.subset(np.concatenate(second)))


def _partition_data(task, name):
    return task.subset(np.asarray(task.partitions[name], dtype=int))


def _mean_val_loss_meta(phi, taskset, val_ids, N, G, alpha, rng):
    """Adapt on each validation task's support, score on its query; the
    printed (2N)^-1 normalization is applied on top of the mean loss so the
    logged scale matches the protocol."""
    by_id = {t.id: t for t in taskset.tasks}
    losses = []
    for tid in val_ids:
        task = by_id[tid]
        Xs, ys = _partition_data(task, "support")
        theta = inner_adapt(phi, Xs, ys, G, alpha, rng)
        Xq, yq = _partition_data(task, "query")
        _, cache = nn.forward(theta, Xq)
        losses.append(nn.bce_from_logits(cache.logits, yq) / (2 * N))
    return float(np.mean(losses))


def _zero_like(params):
    return params.map(np.zeros_like)


def reptile_train(config, taskset, splits, gamma):
    """Algorithm: sample a task batch, run G SGD-alpha steps per task from
    phi, then one Adam-beta step on phi with gradient (phi - mean theta)."""
    if config.algorithm != "reptile":
        raise ValidationError("config.algorithm must be 'reptile'")
    return _meta_loop(config, taskset, splits, gamma, first_order=False)


def fomaml_train(config, taskset, splits, gamma):
    """Algorithm: one SGD-alpha step per task on a support draw, query-loss
    gradients at the adapted parameters averaged into one Adam-beta step."""
    if config.algorithm != "fomaml":
        raise ValidationError("config.algorithm must be 'fomaml'")
    return _meta_loop(config, taskset, splits, gamma, first_order=True)


def _meta_loop(config, taskset, splits, gamma, first_order):
    if not splits.train:
        raise ValidationError("empty training split")
    rng = np.random.default_rng(config.seed)
    spec = nn.build_architecture(config.architecture)
    phi = nn.init_params(spec, int(rng.integers(2 ** 31)))
    opt = nn.make_optimizer("adam", config.outer_lr)
    by_id = {t.id: t for t in taskset.tasks}
    batch = min(config.task_batch, len(splits.train))
    pseudo_epochs = int(np.ceil(len(splits.train) / batch))
    G_val = 1 if first_order else config.inner_steps
    stopper = EarlyStop(config.patience)
    log = TrainLog()
    best = phi.copy()
    t0 = time.perf_counter()
    for epoch in range(config.max_epochs):
        for _ in range(pseudo_epochs):
            ids = _sample_tasks(splits.train, gamma, batch, rng)
            if first_order:
                grad_sum = None
                for tid in ids:
                    task = by_id[tid]
                    (Xs, ys), (Xq, yq) = _draw_disjoint_pairs(
                        task, ("support", "query"), config.N, rng)
                    theta = inner_adapt(phi, Xs, ys, 1, config.inner_lr)
                    _, cache = nn.forward(theta, Xq)
                    _, grads = nn.loss_and_grads(theta, cache, yq)
                    grad_sum = grads if grad_sum is None else grad_sum.map(
                        lambda a, b: a + b, grads)
                meta_grad = grad_sum.map(lambda a: a / len(ids))
            else:
                # mean of (phi - theta_t); exactly zero when alpha = 0
                delta_sum = None
                for tid in ids:
                    task = by_id[tid]
                    Xd, yd = _draw_pairs(task, ("support", "query"), config.N, rng)
                    theta = inner_adapt(phi, Xd, yd, config.inner_steps,
                                        config.inner_lr, rng)
                    delta = phi.map(lambda p, t: p - t, theta)
                    delta_sum = delta if delta_sum is None else delta_sum.map(
                        lambda a, b: a + b, delta)
                meta_grad = delta_sum.map(lambda a: a / len(ids))
            phi, opt = nn.adam_step(phi, meta_grad, opt)
        val_loss = _mean_val_loss_meta(
            phi, taskset, splits.val, config.N, G_val, config.inner_lr, rng)
        log.record(epoch, val_loss, pseudo_epochs, time.perf_counter() - t0)
        if stopper.update(val_loss):
            best = phi.copy()
            log.best_epoch = epoch
            log.best_val_loss = val_loss
        if stopper.stop:
            break
    return best, log


def _sample_tasks(train_ids, gamma, batch, rng):
    from .shift import sample_task_batch
    if gamma is None:
        gamma = {t: 1.0 for t in train_ids}
    return sample_task_batch(train_ids, gamma, batch, rng)


def _split_80_20(X, y, rng):
    """Class-balanced 80/20 split."""
    tr, va = [], []
    for c in (0, 1):
        cls = rng.permutation(np.flatnonzero(y == c))
        n_tr = int(round(0.8 * cls.size))
        tr.append(cls[:n_tr])
        va.append(cls[n_tr:])
    tr = np.concatenate(tr)
    va = np.concatenate(va)
    return (X[tr], y[tr]), (X[va], y[va])


def _adam_epoch(phi, opt, X, y, batch_size, rng):
    order = rng.permutation(X.shape[0])
    n_steps = int(np.ceil(X.shape[0] / batch_size))
    for s in range(n_steps):
        sel = order[s * batch_size:(s + 1) * batch_size]
        _, cache = nn.forward(phi, X[sel])
        _, grads = nn.loss_and_grads(phi, cache, y[sel])
        phi, opt = nn.adam_step(phi, grads, opt)
    return phi, opt, n_steps


def _sgd_supervised_loop(config, X_tr, y_tr, X_va, y_va, rng, patience,
                         batch_size=16):
    spec = nn.build_architecture(config.architecture)
    phi = nn.init_params(spec, int(rng.integers(2 ** 31)))
    opt = nn.make_optimizer("adam", config.outer_lr)
    stopper = EarlyStop(patience)
    log = TrainLog()
    best = phi.copy()
    t0 = time.perf_counter()
    for epoch in range(config.max_epochs):
        phi, opt, n_steps = _adam_epoch(phi, opt, X_tr, y_tr, batch_size, rng)
        _, cache = nn.forward(phi, X_va)
        val_loss = nn.bce_from_logits(cache.logits, y_va)
        log.record(epoch, val_loss, n_steps, time.perf_counter() - t0)
        if stopper.update(val_loss):
            best = phi.copy()
            log.best_epoch = epoch
            log.best_val_loss = val_loss
        if stopper.stop:
            break
    return best, log


def tdl_train(config, taskset, splits):
    """Task-agnostic baseline: pool support+query across all pool tasks with
    a per-task stratified 80/20 split, Adam-beta at batch size 16."""
    if config.algorithm != "tdl":
        raise ValidationError("config.algorithm must be 'tdl'")
    if config.sampling != "uniform":
        raise ValidationError("tdl supports only uniform sampling")
    rng = np.random.default_rng(config.seed)
    by_id = {t.id: t for t in taskset.tasks}
    pool_ids = list(splits.train) + list(splits.val)
    if not pool_ids:
        raise ValidationError("empty task pool")
    tr_x, tr_y, va_x, va_y = [], [], [], []
    for tid in pool_ids:
        task = by_id[tid]
        idx = np.concatenate([np.asarray(task.partitions[p], dtype=int)
                              for p in ("support", "query")])
        X, y = task.subset(idx)
        (Xt, yt), (Xv, yv) = _split_80_20(X, y, rng)
        tr_x.append(Xt)
        tr_y.append(yt)
        va_x.append(Xv)
        va_y.append(yv)
    X_tr = np.concatenate(tr_x)
    y_tr = np.concatenate(tr_y)
    X_va = np.concatenate(va_x)
    y_va = np.concatenate(va_y)
    return _sgd_supervised_loop(config, X_tr, y_tr, X_va, y_va, rng,
                                config.patience)


def dnc_train(config, task):
    """From-scratch single-task baseline on support+query+kshot (3N pairs per
    class) with an 80/20 split; patience 150 by convention."""
    if config.algorithm != "dnc":
        raise ValidationError("config.algorithm must be 'dnc'")
    rng = np.random.default_rng(config.seed)
    idx = np.concatenate([np.asarray(task.partitions[p], dtype=int)
                          for p in ("support", "query", "kshot")])
    X, y = task.subset(idx)
    (Xt, yt), (Xv, yv) = _split_80_20(X, y, rng)
    if Xv.shape[0] == 0:
        raise ValidationError(f"task {task.id}: not enough data for validation")
    return _sgd_supervised_loop(config, Xt, yt, Xv, yv, rng, config.patience)


def ensemble_seed(base_seed, member):
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(3, member))
    return int(ss.generate_state(1)[0])


def run_ensemble(config, taskset, splits=None, gamma=None, task=None):
    """E independent trainings under derived seeds."""
    from dataclasses import replace
    results = []
    for e in range(config.ensembles):
        cfg = replace(config, seed=ensemble_seed(config.seed, e))
        if config.algorithm == "reptile":
            results.append(reptile_train(cfg, taskset, splits, gamma))
        elif config.algorithm == "fomaml":
            results.append(fomaml_train(cfg, taskset, splits, gamma))
        elif config.algorithm == "tdl":
            results.append(tdl_train(cfg, taskset, splits))
        else:
            results.append(dnc_train(cfg, task))
    return results
