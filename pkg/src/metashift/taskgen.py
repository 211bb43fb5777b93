"""Synthetic factorial seismic-style task generation.

Tasks are binary classification sets: two-component waveforms that either
contain a wavelet propagated through a surrogate multipath model and embedded
in colored noise at a fixed power ratio, or contain noise alone. A full
3^5 factorial design (or a 3^3 desk-scale sub-design) controls the signal
characteristics. An out-of-distribution set sweeps the embedding power ratio
across bins instead.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .errors import ArchiveFormatError, ValidationError

SAMPLE_RATE = 100.0  # Hz
DT = 1.0 / SAMPLE_RATE
DEFAULT_SAMPLES = 500  # 5 s
TRAIN_SNR = 0.2  # signal-to-noise power ratio used for factorial tasks
ONSET_LO, ONSET_HI = 50, 450  # first-arrival sample index range (0.5 s - 4.5 s)

CIRCLE_LEVELS = (0, 2, 4)
LAYER_LEVELS = (0, 2, 4)
VELOCITY_LEVELS = ("Lo", "Hi", "LoHi")
FREQUENCY_LEVELS = ("Lo", "Hi", "LoHi")
SOURCE_LEVELS = ("Ricker", "Spike", "Gabor")

VELOCITY_RANGES = {"Lo": (1.50, 3.75), "Hi": (3.75, 6.00), "LoHi": (1.50, 6.00)}
FREQUENCY_RANGES = {"Lo": (1.0, 8.0), "Hi": (8.0, 15.0), "LoHi": (1.0, 15.0)}

SPIKE_WIDTH = 0.025  # Gaussian std in seconds; fixed across frequency
SPIKE_ONSET_SCALE = 0.2  # onset offset = scale / f
OOD_RATIO_LO, OOD_RATIO_HI = 1.0 / 20.0, 2.0

ARCHIVE_VERSION = 1
TASK_MAGIC = b"STSK"


@dataclass(frozen=True)
class FactorLevels:
    circles: int
    layers: int
    velocity: str
    frequency: str
    source: str

    def __post_init__(self):
        if self.circles not in CIRCLE_LEVELS or self.layers not in LAYER_LEVELS:
            raise ValidationError(f"bad circle/layer levels: {self}")
        if (self.velocity not in VELOCITY_LEVELS
                or self.frequency not in FREQUENCY_LEVELS
                or self.source not in SOURCE_LEVELS):
            raise ValidationError(f"bad factor levels: {self}")

    def to_dict(self):
        return {"circles": self.circles, "layers": self.layers,
                "velocity": self.velocity, "frequency": self.frequency,
                "source": self.source}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Task:
    id: int
    factors: FactorLevels | None
    data: np.ndarray  # (n, 2, S) float32, max |value| == 1 per waveform
    labels: np.ndarray  # (n,) uint8
    partitions: dict | None = None  # name -> list of indices
    snr: float | None = None  # OOD tasks: target embedding power ratio
    signal_ratios: np.ndarray | None = None  # measured pre-renorm power ratios

    @property
    def n_waveforms(self):
        return self.data.shape[0]

    def class_indices(self, label):
        return np.flatnonzero(self.labels == label)

    def subset(self, indices):
        idx = np.asarray(indices)
        return self.data[idx], self.labels[idx].astype(np.float64)


@dataclass
class TaskSet:
    tasks: list
    kind: str  # "factorial" | "ood_snr"
    master_seed: int
    reps_per_class: int
    samples: int
    design: str = "full"  # factorial: "full" (3^5) | "mini" (3^3)


def wavelet(kind, f, dt=DT, n=401):
    """Unit-peak source wavelet sampled on a centered time axis.

    Ricker and Gabor narrow with frequency; Spike keeps a fixed width and
    shifts its onset by SPIKE_ONSET_SCALE / f.
    """
    if f <= 0:
        raise ValidationError(f"frequency must be positive, got {f}")
    t = (np.arange(n) - n // 2) * dt
    if kind == "Ricker":
        a = (np.pi * f * t) ** 2
        return (1.0 - 2.0 * a) * np.exp(-a)
    if kind == "Gabor":
        sigma = 1.0 / (2.0 * f)
        return np.cos(2.0 * np.pi * f * t) * np.exp(-t * t / (2.0 * sigma ** 2))
    if kind == "Spike":
        t0 = SPIKE_ONSET_SCALE / f
        return np.exp(-((t - t0) ** 2) / (2.0 * SPIKE_WIDTH ** 2))
    raise ValidationError(f"unknown wavelet kind {kind!r}")


def reflectivity_sequence(factors, rng, S=DEFAULT_SAMPLES):
    """Sparse arrival sequence: one direct arrival plus circles+layers
    scattered arrivals whose delays scale inversely with velocity."""
    r = np.zeros(S)
    r[0] = 1.0
    n_scatter = factors.circles + factors.layers
    vlo, vhi = VELOCITY_RANGES[factors.velocity]
    for _ in range(n_scatter):
        v = rng.uniform(vlo, vhi)
        dist = rng.uniform(0.3, 2.5)  # notional extra path length, km
        delay = int(round(dist / v / DT))
        amp = rng.uniform(0.15, 0.7) * rng.choice((-1.0, 1.0))
        if delay < S:
            r[delay] += amp
    return r


def surrogate_propagate(w, factors, rng, S=DEFAULT_SAMPLES):
    """Two-component pure signal: wavelet convolved with a sparse
    reflectivity; second component is an attenuated, delayed copy."""
    r = reflectivity_sequence(factors, rng, S)
    n = w.shape[0]
    full = np.convolve(r, w)
    comp1 = full[n // 2: n // 2 + S]
    atten = rng.uniform(0.4, 0.8)
    lag = int(rng.integers(2, 11))
    comp2 = np.zeros(S)
    comp2[lag:] = atten * comp1[: S - lag]
    return np.stack([comp1, comp2])


def synth_noise(rng, S=DEFAULT_SAMPLES):
    """Colored noise: white Gaussian shaped by a one-pole spectral tilt with
    a pole drawn per waveform; both components independent."""
    if S <= 0:
        raise ValidationError(f"sample count must be positive, got {S}")
    out = np.empty((2, S))
    for c in range(2):
        pole = rng.uniform(0.0, 0.9)
        white = rng.standard_normal(S)
        out[c] = lfilter([1.0], [1.0, -pole], white)
    return out


def _component_power(x):
    # mean-square power per component
    return np.mean(np.square(x), axis=1)


def embed_components(pure, noise, ratio=TRAIN_SNR):
    """Scale pure so its larger component power is 1 and noise so its larger
    component power is 1/ratio; shared per-array scale factors preserve the
    relative power between components."""
    p_pure = _component_power(pure).max()
    p_noise = _component_power(noise).max()
    if p_pure <= 0:
        raise ValidationError("pure signal is identically zero")
    if p_noise <= 0:
        raise ValidationError("noise is identically zero")
    pure_s = pure / np.sqrt(p_pure)
    noise_s = noise / np.sqrt(p_noise) * np.sqrt(1.0 / ratio)
    return pure_s, noise_s


def measured_ratio(pure_s, noise_s):
    return _component_power(pure_s).max() / _component_power(noise_s).max()


def embed_signal(pure, noise, ratio=TRAIN_SNR):
    """Sum the rescaled components, then renormalize to max |value| = 1.

    Returns (waveform, pre-renormalization power ratio).
    """
    pure_s, noise_s = embed_components(pure, noise, ratio)
    mixed = pure_s + noise_s
    pre_ratio = measured_ratio(pure_s, noise_s)
    peak = np.abs(mixed).max()
    return (mixed / peak).astype(np.float32), float(pre_ratio)


def draw_onset_index(rng, S=DEFAULT_SAMPLES):
    lo = int(round(0.5 * SAMPLE_RATE))
    hi = int(round((S / SAMPLE_RATE - 0.5) * SAMPLE_RATE))
    return int(rng.integers(lo, hi + 1))


def detect_onset(x, rel_threshold=1e-3):
    env = np.abs(x).max(axis=0)
    above = np.flatnonzero(env > rel_threshold * env.max())
    return int(above[0])


def place_onset(pure, rng):
    """Shift the signal so its first arrival lands at a uniformly drawn
    sample in [0.5 s, 4.5 s]; vacated samples are zero-filled."""
    S = pure.shape[1]
    target = draw_onset_index(rng, S)
    onset = detect_onset(pure)
    shift = target - onset
    out = np.zeros_like(pure)
    if shift >= 0:
        out[:, shift:] = pure[:, : S - shift]
    else:
        out[:, : S + shift] = pure[:, -shift:]
    return out


def _draw_frequency(factors, rng):
    flo, fhi = FREQUENCY_RANGES[factors.frequency]
    return rng.uniform(flo, fhi)


def make_signal_waveform(factors, rng, S=DEFAULT_SAMPLES, ratio=TRAIN_SNR):
    """Full signal pipeline: wavelet -> propagate -> onset -> embed.

    Returns (waveform float32 (2, S), pre-renormalization power ratio).
    """
    f = _draw_frequency(factors, rng)
    w = wavelet(factors.source, f)
    pure = surrogate_propagate(w, factors, rng, S)
    pure = place_onset(pure, rng)
    noise = synth_noise(rng, S)
    return embed_signal(pure, noise, ratio)


def make_noise_waveform(rng, S=DEFAULT_SAMPLES):
    noise = synth_noise(rng, S)
    peak = np.abs(noise).max()
    return (noise / peak).astype(np.float32)


def _task_rng(master_seed, stream, task_id):
    return np.random.default_rng(
        np.random.SeedSequence(entropy=master_seed, spawn_key=(stream, task_id)))


def synthesize_task(task_id, factors, reps_per_class, S, master_seed,
                    ratio=TRAIN_SNR, snr=None, stream=0):
    rng = _task_rng(master_seed, stream, task_id)
    data = np.empty((2 * reps_per_class, 2, S), dtype=np.float32)
    labels = np.empty(2 * reps_per_class, dtype=np.uint8)
    ratios = np.empty(reps_per_class)
    for i in range(reps_per_class):
        data[i], ratios[i] = make_signal_waveform(factors, rng, S, ratio)
        labels[i] = 1
    for i in range(reps_per_class):
        data[reps_per_class + i] = make_noise_waveform(rng, S)
        labels[reps_per_class + i] = 0
    return Task(id=task_id, factors=factors, data=data, labels=labels,
                snr=snr, signal_ratios=ratios)


def factorial_design(design="full"):
    """Canonical ordering of factor combinations for the task table."""
    if design == "full":
        combos = [(c, l, v, f, s)
                  for c in CIRCLE_LEVELS for l in LAYER_LEVELS
                  for v in VELOCITY_LEVELS for f in FREQUENCY_LEVELS
                  for s in SOURCE_LEVELS]
    elif design == "mini":
        # 3^3 sub-design over circles/frequency/source at fixed layers=2,
        # velocity=LoHi
        combos = [(c, 2, "LoHi", f, s)
                  for c in CIRCLE_LEVELS for f in FREQUENCY_LEVELS
                  for s in SOURCE_LEVELS]
    else:
        raise ValidationError(f"unknown design {design!r}")
    return [FactorLevels(*combo) for combo in combos]


def generate_taskset(reps_per_class, S=DEFAULT_SAMPLES, master_seed=0,
                     design="full"):
    if reps_per_class < 1:
        raise ValidationError("reps_per_class must be >= 1")
    factors = factorial_design(design)
    tasks = [synthesize_task(tid, fl, reps_per_class, S, master_seed)
             for tid, fl in enumerate(factors)]
    return TaskSet(tasks=tasks, kind="factorial", master_seed=master_seed,
                   reps_per_class=reps_per_class, samples=S, design=design)


def ood_snr_levels(n_bins):
    if n_bins < 1:
        raise ValidationError("n_bins must be >= 1")
    if n_bins == 1:
        return np.array([np.sqrt(OOD_RATIO_LO * OOD_RATIO_HI)])
    return np.geomspace(OOD_RATIO_LO, OOD_RATIO_HI, n_bins)


def _random_factors(rng):
    return FactorLevels(
        circles=int(rng.choice(CIRCLE_LEVELS)),
        layers=int(rng.choice(LAYER_LEVELS)),
        velocity=str(rng.choice(VELOCITY_LEVELS)),
        frequency=str(rng.choice(FREQUENCY_LEVELS)),
        source=str(rng.choice(SOURCE_LEVELS)),
    )


def generate_ood_taskset(n_bins, reps_per_class, seed=0, S=DEFAULT_SAMPLES):
    """Evaluation-only set: tasks differ by embedding power ratio, swept
    log-uniformly; per-waveform factor levels are drawn at random so the
    signal family is disjoint from any single factorial design point."""
    levels = ood_snr_levels(n_bins)
    tasks = []
    for b, ratio in enumerate(levels):
        rng = _task_rng(seed, 1, b)
        data = np.empty((2 * reps_per_class, 2, S), dtype=np.float32)
        labels = np.empty(2 * reps_per_class, dtype=np.uint8)
        ratios = np.empty(reps_per_class)
        for i in range(reps_per_class):
            fl = _random_factors(rng)
            data[i], ratios[i] = make_signal_waveform(fl, rng, S, float(ratio))
            labels[i] = 1
        for i in range(reps_per_class):
            data[reps_per_class + i] = make_noise_waveform(rng, S)
            labels[reps_per_class + i] = 0
        tasks.append(Task(id=b, factors=None, data=data, labels=labels,
                          snr=float(ratio), signal_ratios=ratios))
    return TaskSet(tasks=tasks, kind="ood_snr", master_seed=seed,
                   reps_per_class=reps_per_class, samples=S, design="ood")


def partition_task(task, N, seed, kind="factorial"):
    """Fill disjoint class-balanced partitions.

    factorial: support/query/kshot of N pairs per class plus holdout.
    ood_snr: kshot of N pairs per class plus holdout.
    """
    per_class = {c: task.class_indices(c) for c in (0, 1)}
    need = 3 * N + 1 if kind == "factorial" else N + 1
    for c, idx in per_class.items():
        if idx.size < need:
            raise ValidationError(
                f"task {task.id}: class {c} has {idx.size} waveforms, "
                f"needs >= {need} for N={N} ({kind})")
    rng = np.random.default_rng(seed)
    parts = {}
    if kind == "factorial":
        names = ("support", "query", "kshot")
    else:
        names = ("kshot",)
    chunks = {name: [] for name in names}
    hold = []
    for c in (0, 1):
        perm = rng.permutation(per_class[c])
        off = 0
        for name in names:
            chunks[name].append(perm[off:off + N])
            off += N
        hold.append(perm[off:])
    for name in names:
        parts[name] = sorted(int(i) for i in np.concatenate(chunks[name]))
    parts["holdout"] = sorted(int(i) for i in np.concatenate(hold))
    task.partitions = parts
    return task


def partition_seed(master_seed, task_id, N):
    """Deterministic per-(task, N) partition seed, algorithm-independent."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(2, task_id, N))
    return int(ss.generate_state(1)[0])


def partition_taskset(taskset, N):
    for task in taskset.tasks:
        partition_task(task, N, partition_seed(taskset.master_seed, task.id, N),
                       kind=taskset.kind)
    return taskset


# ---------------------------------------------------------------------------
# Archive I/O: directory with manifest.json + one binary file per task.

def _task_filename(task_id):
    return f"task_{task_id:05d}.stsk"


def _write_task_file(task, path):
    n, ch, S = task.data.shape
    buf = bytearray()
    buf += TASK_MAGIC
    buf += struct.pack("<H", ARCHIVE_VERSION)
    buf += struct.pack("<III", n, ch, S)
    buf += task.labels.astype(np.uint8).tobytes()
    buf += np.ascontiguousarray(task.data, dtype="<f4").tobytes()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(buf)
    os.replace(tmp, path)


def _read_task_file(path):
    with open(path, "rb") as f:
        raw = f.read()
    off = [0]

    def need(n, what):
        b = raw[off[0]: off[0] + n]
        if len(b) != n:
            raise ArchiveFormatError(
                f"truncated task file {path}: needed {n} bytes for {what}, "
                f"got {len(b)}")
        off[0] += n
        return b

    if need(4, "magic") != TASK_MAGIC:
        raise ArchiveFormatError(f"bad magic in {path}, expected STSK")
    (version,) = struct.unpack("<H", need(2, "version"))
    if version != ARCHIVE_VERSION:
        raise ArchiveFormatError(
            f"task file version {version} unsupported (expected {ARCHIVE_VERSION})")
    n, ch, S = struct.unpack("<III", need(12, "dimensions"))
    labels = np.frombuffer(need(n, "labels"), dtype=np.uint8).copy()
    data = np.frombuffer(need(4 * n * ch * S, "waveform data"), dtype="<f4")
    return data.reshape(n, ch, S).copy(), labels


def save_archive(taskset, path, force=False):
    path = str(path)
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise ValidationError(f"output directory {path} is not empty (use force)")
    os.makedirs(path, exist_ok=True)
    manifest = {
        "format_version": ARCHIVE_VERSION,
        "kind": taskset.kind,
        "design": taskset.design,
        "master_seed": taskset.master_seed,
        "reps_per_class": taskset.reps_per_class,
        "samples": taskset.samples,
        "tasks": [],
    }
    for task in taskset.tasks:
        entry = {
            "id": task.id,
            "file": _task_filename(task.id),
            "factors": task.factors.to_dict() if task.factors else None,
            "snr": task.snr,
            "partitions": task.partitions,
            "signal_ratios": (task.signal_ratios.tolist()
                              if task.signal_ratios is not None else None),
        }
        manifest["tasks"].append(entry)
        _write_task_file(task, os.path.join(path, entry["file"]))
    tmp = os.path.join(path, "manifest.json.tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, indent=1)
    os.replace(tmp, os.path.join(path, "manifest.json"))


def load_archive(path):
    from .errors import MissingArtifactError
    mpath = os.path.join(str(path), "manifest.json")
    if not os.path.exists(mpath):
        raise MissingArtifactError(f"no manifest.json under {path}")
    with open(mpath) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != ARCHIVE_VERSION:
        raise ArchiveFormatError(
            f"archive format version {manifest.get('format_version')} "
            f"unsupported (expected {ARCHIVE_VERSION})")
    tasks = []
    for entry in manifest["tasks"]:
        data, labels = _read_task_file(os.path.join(str(path), entry["file"]))
        tasks.append(Task(
            id=entry["id"],
            factors=(FactorLevels.from_dict(entry["factors"])
                     if entry["factors"] else None),
            data=data,
            labels=labels,
            partitions=entry["partitions"],
            snr=entry["snr"],
            signal_ratios=(np.array(entry["signal_ratios"])
                           if entry["signal_ratios"] is not None else None),
        ))
    return TaskSet(tasks=tasks, kind=manifest["kind"],
                   master_seed=manifest["master_seed"],
                   reps_per_class=manifest["reps_per_class"],
                   samples=manifest["samples"], design=manifest["design"])
