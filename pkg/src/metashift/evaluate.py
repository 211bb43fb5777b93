"""K-shot fine-tuning evaluation and uncertainty aggregation.

Fine-tuning runs for epochs 0..20, where epoch 0 scores the incoming
parameters untouched and each later epoch applies one algorithm-consistent
adaptation unit. Aggregation follows the normal model
Acc_te ~ N(alpha_t, sigma_t^2) with the variance of the split mean given by
T^-2 * sum_t sigma_t^2 / E.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import nn
from .errors import ValidationError
from .meta import _interleave_classes, inner_adapt

FT_EPOCHS = 20
DEFAULT_K_VALUES = (1, 5, 10, 50)
Z_95 = 1.959963984540054


@dataclass
class FinetuneResult:
    task_id: int
    ensemble: int
    K: int
    accuracy: np.ndarray  # (FT_EPOCHS + 1,), index 0 = no fine-tuning


@dataclass
class AggregateRecord:
    acc_by_task: dict  # task id -> ensemble-mean accuracy
    var_by_task: dict  # task id -> unbiased ensemble variance
    mean: float  # alpha-bar
    variance: float  # variance of the split mean
    ci_low: float
    ci_high: float


def _kshot_draw(task, K, seed):
    """K pairs per class from the k-shot partition; depends only on
    (task, K, seed) so every algorithm fine-tunes on the same waveforms."""
    idx = np.asarray(task.partitions["kshot"], dtype=int)
    labels = task.labels[idx]
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(4, task.id, K)))
    picked = []
    for c in (0, 1):
        cls = idx[labels == c]
        if cls.size < K:
            raise ValidationError(
                f"task {task.id}: k-shot partition holds {cls.size} class-{c} "
                f"samples, K={K} requested")
        picked.append(rng.choice(cls, size=K, replace=False))
    return task.subset(np.concatenate(picked))


def evaluation_indices(task):
    """Factorial test tasks pool everything outside the k-shot partition;
    OOD tasks use the holdout partition."""
    parts = task.partitions
    if parts is None:
        raise ValidationError(f"task {task.id} has no partitions")
    if "support" in parts:
        kshot = set(parts["kshot"])
        return np.array([i for i in range(task.n_waveforms) if i not in kshot],
                        dtype=int)
    return np.asarray(parts["holdout"], dtype=int)


def _ft_unit(algorithm, theta, X, y, K, alpha, rng):
    """One fine-tuning epoch: Reptile G=min(5,K) SGD steps, FOMAML one step,
    TDL five steps at batch ceil(2K/5), D&C none."""
    if algorithm == "reptile":
        G = min(5, K)
        return inner_adapt(theta, X, y, G, alpha, rng)
    if algorithm == "fomaml":
        return inner_adapt(theta, X, y, 1, alpha)
    if algorithm == "tdl":
        bs = int(np.ceil(2 * K / 5))
        Xs, ys = _interleave_classes(X, y, rng)
        n = Xs.shape[0]
        for s in range(5):
            sel = np.arange(s * bs, (s + 1) * bs) % n
            _, cache = nn.forward(theta, Xs[sel])
            _, grads = nn.loss_and_grads(theta, cache, ys[sel])
            theta = nn.sgd_step(theta, grads, alpha)
        return theta
    if algorithm == "dnc":
        return theta
    raise ValidationError(f"unknown algorithm {algorithm!r}")


def finetune_and_eval(phi, algorithm, task, K, seed, alpha=1e-2,
                      ensemble=0, n_epochs=FT_EPOCHS):
    """Accuracy trajectory over fine-tuning epochs 0..n_epochs.

    phi is never mutated; adaptation always starts from a copy.
    """
    Xk, yk = _kshot_draw(task, K, seed)
    ev = evaluation_indices(task)
    Xe, ye = task.subset(ev)
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(5, task.id, K)))
    acc = np.empty(n_epochs + 1)
    theta = phi.copy()
    acc[0] = nn.accuracy(theta, Xe, ye)
    for epoch in range(1, n_epochs + 1):
        theta = _ft_unit(algorithm, theta, Xk, yk, K, alpha, rng)
        acc[epoch] = nn.accuracy(theta, Xe, ye)
    return FinetuneResult(task_id=task.id, ensemble=ensemble, K=K, accuracy=acc)


def best_accuracy(result):
    """(max accuracy, earliest epoch achieving it)."""
    acc = np.asarray(result.accuracy, dtype=np.float64)
    epoch = int(np.argmax(acc))
    return float(acc[epoch]), epoch


def finetune_speed(results):
    """Mean epoch-of-best-accuracy over a set of fine-tuning curves."""
    if not results:
        raise ValidationError("no fine-tuning results")
    return float(np.mean([best_accuracy(r)[1] for r in results]))


def aggregate(records):
    """records: task id -> list of per-ensemble accuracies (>= 2 each)."""
    acc_t, var_t = {}, {}
    for tid, vals in records.items():
        vals = np.asarray(vals, dtype=np.float64)
        if vals.size < 2:
            raise ValidationError(f"task {tid}: need >= 2 ensembles, got {vals.size}")
        acc_t[tid] = float(vals.mean())
        var_t[tid] = float(vals.var(ddof=1))
    T = len(acc_t)
    E = len(next(iter(records.values())))
    mean = float(np.mean(list(acc_t.values())))
    variance = float(sum(var_t.values()) / E / T ** 2)
    half = float(Z_95 * np.sqrt(variance))
    return AggregateRecord(acc_by_task=acc_t, var_by_task=var_t, mean=mean,
                           variance=variance, ci_low=mean - half,
                           ci_high=mean + half)


def qq_residuals(records):
    """Standardized residuals (Acc_te - Acc_t) / sigma_t paired with standard
    normal quantiles. Zero-variance tasks are skipped; their count is
    returned alongside the pairs."""
    residuals = []
    skipped = 0
    for tid, vals in records.items():
        vals = np.asarray(vals, dtype=np.float64)
        sd = vals.std(ddof=1)
        if sd == 0:
            skipped += 1
            continue
        residuals.extend((vals - vals.mean()) / sd)
    residuals = np.sort(np.asarray(residuals))
    n = residuals.size
    if n < 30:
        raise ValidationError(f"need >= 30 residuals, got {n}")
    theo = norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    return list(zip(theo, residuals)), skipped
