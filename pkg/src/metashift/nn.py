"""Minimal deterministic 1D-CNN + MLP engine with manual gradients.

Everything is plain numpy. Training runs in float32; gradient checking uses
float64. Forward passes record a cache that makes the backward pass exact.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError

ARCH_NAMES = ("mini", "small", "big", "huge")

CHECKPOINT_MAGIC = b"MSNN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    conv_layers: tuple  # of (in_channels, out_channels, kernel)
    pool_after: frozenset  # conv indices followed by max-pool(2, 2)
    mlp_layers: tuple  # of (in_dim, out_dim), final out_dim == 1

    def layer_keys(self):
        keys = []
        for i in range(len(self.conv_layers)):
            keys += [f"conv{i}.W", f"conv{i}.b"]
        for i in range(len(self.mlp_layers)):
            keys += [f"fc{i}.W", f"fc{i}.b"]
        return keys


@dataclass
class ParameterSet:
    spec: ArchitectureSpec
    arrays: dict  # layer key -> ndarray, in spec order

    def copy(self):
        return ParameterSet(self.spec, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype):
        return ParameterSet(self.spec, {k: v.astype(dtype) for k, v in self.arrays.items()})

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def map(self, fn, *others):
        out = {}
        for k, v in self.arrays.items():
            out[k] = fn(v, *[o.arrays[k] for o in others])
        return ParameterSet(self.spec, out)

    def allfinite(self):
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class ForwardCache:
    x: np.ndarray
    conv_inputs: list
    conv_pre: list
    pool_argmax: dict  # conv index -> argmax indices into pooled pairs
    pool_in_len: dict  # conv index -> input length to the pool (possibly odd)
    gap_input: np.ndarray
    fc_inputs: list
    fc_pre: list
    logits: np.ndarray


_LAYOUTS = {
    # conv channel chain, max-pool positions, MLP widths (post-GAP dim implied)
    "mini": ((4, 8), (1,), (8, 16), 3),
    "small": ((16, 32), (1,), (32, 64), 3),
    "big": ((16, 32, 64), (2,), (64, 128, 64), 3),
    "huge": ((32, 64, 128, 192), (1, 3), (192, 384, 192), 5),
}


def build_architecture(name):
    if name not in _LAYOUTS:
        raise ValidationError(f"unknown architecture {name!r}, expected one of {ARCH_NAMES}")
    channels, pools, widths, kernel = _LAYOUTS[name]
    conv = []
    prev = 2
    for c in channels:
        conv.append((prev, c, kernel))
        prev = c
    mlp = []
    d = channels[-1]
    for w in widths:
        mlp.append((d, w))
        d = w
    mlp.append((d, 1))
    return ArchitectureSpec(name, tuple(conv), frozenset(pools), tuple(mlp))


def count_params(spec):
    n = 0
    for cin, cout, k in spec.conv_layers:
        n += cout * cin * k + cout
    for din, dout in spec.mlp_layers:
        n += din * dout + dout
    return n


def init_params(spec, seed, dtype=np.float32):
    """Fan-in-scaled uniform weights (bound sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for i, (cin, cout, k) in enumerate(spec.conv_layers):
        bound = np.sqrt(6.0 / (cin * k))
        arrays[f"conv{i}.W"] = rng.uniform(-bound, bound, (cout, cin, k)).astype(dtype)
        arrays[f"conv{i}.b"] = np.zeros(cout, dtype=dtype)
    for i, (din, dout) in enumerate(spec.mlp_layers):
        bound = np.sqrt(6.0 / din)
        arrays[f"fc{i}.W"] = rng.uniform(-bound, bound, (din, dout)).astype(dtype)
        arrays[f"fc{i}.b"] = np.zeros(dout, dtype=dtype)
    return ParameterSet(spec, arrays)


def _conv1d_same(x, W, b):
    # x: (B, Cin, S), W: (Cout, Cin, k) -> (B, Cout, S)
    k = W.shape[2]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # (B, Cin, S, k)
    return np.einsum("bcsk,ock->bos", win, W, optimize=True) + b[None, :, None]


def _conv1d_backward(x, W, dz):
    k = W.shape[2]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    dW = np.einsum("bos,bcsk->ock", dz, win, optimize=True)
    db = dz.sum(axis=(0, 2))
    # gradient w.r.t. padded input, then crop the padding
    dzp = np.pad(dz, ((0, 0), (0, 0), (k - 1, k - 1)))
    dwin = np.lib.stride_tricks.sliding_window_view(dzp, k, axis=2)  # (B, Cout, S+k-1, k)
    Wf = W[:, :, ::-1]
    dxp = np.einsum("bouk,ock->bcu", dwin, Wf, optimize=True)
    S = x.shape[2]
    return dxp[:, :, p:p + S], dW, db


def _maxpool2(x):
    # window 2, stride 2; odd tail dropped; ties go to the earlier index
    B, C, S = x.shape
    S2 = S // 2
    pairs = x[:, :, :S2 * 2].reshape(B, C, S2, 2)
    idx = np.argmax(pairs, axis=3)
    out = np.take_along_axis(pairs, idx[..., None], axis=3)[..., 0]
    return out, idx


def _maxpool2_backward(dz, idx, in_len):
    B, C, S2 = dz.shape
    dpairs = np.zeros((B, C, S2, 2), dtype=dz.dtype)
    np.put_along_axis(dpairs, idx[..., None], dz[..., None], axis=3)
    dx = np.zeros((B, C, in_len), dtype=dz.dtype)
    dx[:, :, :S2 * 2] = dpairs.reshape(B, C, S2 * 2)
    return dx


def forward(params, batch):
    """Run the conv/ReLU(/pool) -> GAP -> MLP -> sigmoid pipeline.

    batch: (B, 2, S) array. Returns (probs, cache).
    """
    spec = params.spec
    x = np.asarray(batch, dtype=params.dtype)
    if x.ndim != 3 or x.shape[1] != spec.conv_layers[0][0]:
        raise ValidationError(
            f"conv0 expects input (B, {spec.conv_layers[0][0]}, S), got {x.shape}")
    conv_inputs, conv_pre = [], []
    pool_argmax, pool_in_len = {}, {}
    h = x
    for i in range(len(spec.conv_layers)):
        conv_inputs.append(h)
        z = _conv1d_same(h, params.arrays[f"conv{i}.W"], params.arrays[f"conv{i}.b"])
        conv_pre.append(z)
        h = np.maximum(z, 0)
        if i in spec.pool_after:
            pool_in_len[i] = h.shape[2]
            h, pool_argmax[i] = _maxpool2(h)
    gap_input = h
    h = h.mean(axis=2)  # (B, C)
    fc_inputs, fc_pre = [], []
    n_fc = len(spec.mlp_layers)
    for i in range(n_fc):
        if h.shape[1] != spec.mlp_layers[i][0]:
            raise ValidationError(
                f"fc{i} expects input dim {spec.mlp_layers[i][0]}, got {h.shape[1]}")
        fc_inputs.append(h)
        z = h @ params.arrays[f"fc{i}.W"] + params.arrays[f"fc{i}.b"]
        fc_pre.append(z)
        h = np.maximum(z, 0) if i < n_fc - 1 else z
    logits = h[:, 0]
    probs = sigmoid(logits)
    cache = ForwardCache(x, conv_inputs, conv_pre, pool_argmax, pool_in_len,
                         gap_input, fc_inputs, fc_pre, logits)
    return probs, cache


def forward_features(params, batch):
    """Post-GAP feature matrix (B, C_last), no MLP head."""
    _, cache = forward(params, batch)
    return cache.gap_input.mean(axis=2)


def sigmoid(z):
    out = np.empty_like(z, dtype=z.dtype)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_from_logits(logits, labels):
    # mean of max(z,0) - z*y + log(1 + exp(-|z|)); stable for any logit
    z = logits
    y = labels
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def loss_and_grads(params, cache, labels):
    """Mean BCE over the batch plus exact gradients for every parameter."""
    y = np.asarray(labels, dtype=params.dtype)
    if y.shape != cache.logits.shape:
        raise ValidationError(f"labels shape {y.shape} != batch {cache.logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    spec = params.spec
    B = y.shape[0]
    loss = bce_from_logits(cache.logits, y)
    grads = {}
    dlogit = (sigmoid(cache.logits) - y) / B  # (B,)

    dh = dlogit[:, None]
    n_fc = len(spec.mlp_layers)
    for i in reversed(range(n_fc)):
        if i < n_fc - 1:
            dh = dh * (cache.fc_pre[i] > 0)
        grads[f"fc{i}.W"] = cache.fc_inputs[i].T @ dh
        grads[f"fc{i}.b"] = dh.sum(axis=0)
        dh = dh @ params.arrays[f"fc{i}.W"].T

    Sp = cache.gap_input.shape[2]
    dmap = np.repeat(dh[:, :, None], Sp, axis=2) / Sp
    for i in reversed(range(len(spec.conv_layers))):
        if i in cache.pool_argmax:
            dmap = _maxpool2_backward(dmap, cache.pool_argmax[i], cache.pool_in_len[i])
        dz = dmap * (cache.conv_pre[i] > 0)
        dmap, dW, db = _conv1d_backward(
            cache.conv_inputs[i], params.arrays[f"conv{i}.W"], dz)
        grads[f"conv{i}.W"] = dW
        grads[f"conv{i}.b"] = db
    ordered = {k: grads[k] for k in spec.layer_keys()}
    return loss, ParameterSet(spec, ordered)


def sgd_step(params, grads, lr):
    if not grads.allfinite():
        raise FloatingPointError("non-finite gradients (training diverged)")
    return params.map(lambda p, g: p - lr * g, grads)


def adam_step(params, grads, state, lr=None):
    """Bias-corrected Adam; pure function of (params, grads, state)."""
    if state.kind != "adam":
        raise ValidationError(f"optimizer state kind {state.kind!r} is not adam")
    if not grads.allfinite():
        raise FloatingPointError("non-finite gradients (training diverged)")
    lr = state.learning_rate if lr is None else lr
    t = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    new_m, new_v, new_p = {}, {}, {}
    for k, p in params.arrays.items():
        g = grads.arrays[k]
        m = state.m.get(k, np.zeros_like(p)) * b1 + (1 - b1) * g
        v = state.v.get(k, np.zeros_like(p)) * b2 + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
        new_m[k] = m
        new_v[k] = v
    out_state = replace(state, step=t, m=new_m, v=new_v)
    return ParameterSet(params.spec, new_p), out_state


def make_optimizer(kind, lr):
    return OptimizerState(kind=kind, learning_rate=lr)


def _flat_view(params):
    keys = params.spec.layer_keys()
    sizes = [params.arrays[k].size for k in keys]
    flat = np.concatenate([params.arrays[k].ravel() for k in keys])
    return flat, keys, sizes


def _from_flat(spec, template, flat):
    arrays = {}
    off = 0
    for k in spec.layer_keys():
        a = template.arrays[k]
        arrays[k] = flat[off:off + a.size].reshape(a.shape).astype(a.dtype)
        off += a.size
    return ParameterSet(spec, arrays)


def _activation_pattern(cache):
    # ReLU sign masks and pool argmax choices; a central difference is only
    # valid while both perturbed points share the unperturbed pattern
    masks = tuple((z > 0).tobytes() for z in cache.conv_pre)
    masks += tuple((z > 0).tobytes() for z in cache.fc_pre[:-1])
    pools = tuple(cache.pool_argmax[k].tobytes() for k in sorted(cache.pool_argmax))
    return hash(masks + pools)


def gradient_check(spec, seed, batch, labels, eps=1e-3, max_entries=None):
    """Worst relative error of analytic vs central-difference gradients.

    Runs in float64. The step shrinks per coordinate whenever the
    perturbation crosses a ReLU/pool kink (the difference quotient is
    meaningless across a kink). For large specs pass max_entries to check a
    deterministic evenly-spaced subsample of parameters.
    """
    if eps <= 0:
        raise ValidationError("eps must be positive")
    params = init_params(spec, seed, dtype=np.float64)
    x = np.asarray(batch, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    _, cache = forward(params, x)
    _, grads = loss_and_grads(params, cache, y)
    pattern0 = _activation_pattern(cache)
    gflat, _, _ = _flat_view(grads)
    pflat, _, _ = _flat_view(params)
    n = pflat.size
    if max_entries is not None and n > max_entries:
        idx = np.linspace(0, n - 1, max_entries).astype(int)
    else:
        idx = np.arange(n)
    num = np.full(idx.size, np.nan)
    for j, i in enumerate(idx):
        h = eps
        while True:
            up = pflat.copy()
            up[i] += h
            dn = pflat.copy()
            dn[i] -= h
            cu = forward(_from_flat(spec, params, up), x)[1]
            cd = forward(_from_flat(spec, params, dn), x)[1]
            stable = (_activation_pattern(cu) == pattern0
                      and _activation_pattern(cd) == pattern0)
            if stable:
                lu = bce_from_logits(cu.logits, y)
                ld = bce_from_logits(cd.logits, y)
                num[j] = (lu - ld) / (2 * h)
                break
            if h < 1e-9:
                # the parameter sits exactly on a ReLU/pool kink: the loss is
                # not differentiable there and no finite difference can test
                # it, so the coordinate is left out of the comparison
                break
            h /= 10
    ok = np.isfinite(num)
    if not ok.any():
        raise ValidationError("no differentiable coordinates to check")
    ana = gflat[idx][ok]
    num = num[ok]
    scale = np.maximum(np.abs(ana) + np.abs(num), 1e-8)
    return float(np.max(np.abs(ana - num) / scale))


def save_checkpoint(params, path):
    """MSNN binary: magic, version u16, name (u16 len + utf8), then per-layer
    float32 arrays in spec order, each prefixed by element count u32."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    name = params.spec.name.encode("utf-8")
    buf.write(struct.pack("<H", len(name)))
    buf.write(name)
    for k in params.spec.layer_keys():
        a = np.ascontiguousarray(params.arrays[k], dtype="<f4")
        buf.write(struct.pack("<I", a.size))
        buf.write(a.tobytes())
    data = buf.getvalue()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    import os
    os.replace(tmp, path)


def load_checkpoint(path):
    from .errors import ArchiveFormatError
    with open(path, "rb") as f:
        raw = f.read()
    buf = io.BytesIO(raw)

    def need(n, what):
        b = buf.read(n)
        if len(b) != n:
            raise ArchiveFormatError(
                f"truncated checkpoint {path}: needed {n} bytes for {what}, got {len(b)}")
        return b

    if need(4, "magic") != CHECKPOINT_MAGIC:
        raise ArchiveFormatError(f"bad magic in {path}, expected MSNN")
    (version,) = struct.unpack("<H", need(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise ArchiveFormatError(
            f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    (nlen,) = struct.unpack("<H", need(2, "name length"))
    name = need(nlen, "architecture name").decode("utf-8")
    spec = build_architecture(name)
    arrays = {}
    for k in spec.layer_keys():
        (count,) = struct.unpack("<I", need(4, f"{k} element count"))
        a = np.frombuffer(need(4 * count, f"{k} data"), dtype="<f4").copy()
        arrays[k] = a
    # reshape per spec layout
    shaped = {}
    for i, (cin, cout, kk) in enumerate(spec.conv_layers):
        shaped[f"conv{i}.W"] = arrays[f"conv{i}.W"].reshape(cout, cin, kk)
        shaped[f"conv{i}.b"] = arrays[f"conv{i}.b"]
    for i, (din, dout) in enumerate(spec.mlp_layers):
        shaped[f"fc{i}.W"] = arrays[f"fc{i}.W"].reshape(din, dout)
        shaped[f"fc{i}.b"] = arrays[f"fc{i}.b"]
    return ParameterSet(spec, shaped)


def predict(params, batch):
    probs, _ = forward(params, batch)
    return probs


def accuracy(params, batch, labels):
    probs = predict(params, batch)
    pred = (probs >= 0.5).astype(np.float64)
    return float(np.mean(pred == np.asarray(labels, dtype=np.float64)))
