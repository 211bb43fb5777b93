"""CSV, dendrogram, and figure emission for the pipeline outputs.

Every CSV carries the producing config hash in a leading comment line and is
written atomically (temp file + rename).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os

import numpy as np

from .errors import MissingArtifactError, ValidationError

# flags that name files/directories or runtime resources; they must not
# perturb the config hash, otherwise reruns into a fresh directory would
# change every output header
NON_SEMANTIC_KEYS = {
    "out", "out_dir", "archive", "runs", "results", "shift_dir",
    "taskmodels", "config", "jobs", "force", "command", "func",
}


def config_hash(args_dict):
    sem = {k: v for k, v in sorted(args_dict.items())
           if k not in NON_SEMANTIC_KEYS and v is not None}
    blob = json.dumps(sem, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def atomic_write_text(path, text):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def write_csv(path, header, rows, cfg_hash):
    buf = io.StringIO()
    buf.write(f"# config={cfg_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    atomic_write_text(path, buf.getvalue())


def read_csv(path):
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing CSV {path}")
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    if not lines:
        raise ValidationError(f"empty CSV {path}")
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x


def write_matrix_csv(path, M, ids, cfg_hash):
    header = ["task_id"] + [str(i) for i in ids]
    rows = [[str(u)] + [repr(float(v)) for v in row] for u, row in zip(ids, M)]
    write_csv(path, header, rows, cfg_hash)


def read_matrix_csv(path):
    header, rows = read_csv(path)
    ids = [int(c) for c in header[1:]]
    M = np.array([[float(v) for v in row[1:]] for row in rows])
    return M, ids


def write_dendrogram(path, dend, cfg_hash):
    lines = [f"# config={cfg_hash}", f"leaves {dend.n_leaves}"]
    for left, right, height in dend.merges:
        lines.append(f"{left} {right} {repr(float(height))}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_dendrogram(path):
    from .shift import Dendrogram
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip() and not ln.startswith("#")]
    if not lines or not lines[0].startswith("leaves "):
        raise ValidationError(f"malformed dendrogram file {path}")
    n = int(lines[0].split()[1])
    merges = []
    for ln in lines[1:]:
        a, b, h = ln.split()
        merges.append((int(a), int(b), float(h)))
    return Dendrogram(n, merges)


def write_json(path, obj, cfg_hash):
    atomic_write_text(path, json.dumps({"config": cfg_hash, **obj}, indent=1))


def read_json(path):
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing file {path}")
    with open(path) as f:
        return json.load(f)


def _use_agg():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_ft_curves(path, curves, title):
    """curves: label -> (epochs, mean, ci_low, ci_high)."""
    plt = _use_agg()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (ep, mean, lo, hi) in sorted(curves.items()):
        ax.plot(ep, mean, label=label)
        ax.fill_between(ep, lo, hi, alpha=0.2)
    ax.set_xlabel("fine-tuning epoch")
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_vs_k(path, series, ylabel, title):
    """series: label -> (K values, mean, ci_low, ci_high)."""
    plt = _use_agg()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (ks, mean, lo, hi) in sorted(series.items()):
        ax.plot(ks, mean, marker="o", label=label)
        if lo is not None:
            ax.fill_between(ks, lo, hi, alpha=0.2)
    ax.set_xscale("log")
    ax.set_xlabel("fine-tuning pairs per class K")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
