"""CNN feature extractor with hand-rolled reverse-mode differentiation.

Architecture (fixed): four 1-D convolution blocks over the time axis with the
I/Q pair as two input channels (kernel 3, stride 1, zero "same" padding),
filter counts 32/128/128/32, batch norm before every ReLU, width-2 max-pooling
after blocks 2 and 3 with a further batch norm after each pool, then dense
layers of 64 and k units, softmax, and row-wise Euclidean renormalization.
Output rows are therefore non-negative with unit L2 norm.

Everything is float64. Convolution and pooling run on the kernels backend
(numba or numpy); the rest is plain numpy.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    BadMagicError,
    ShapeTableError,
    TruncatedFileError,
    VersionMismatchError,
)

CONV_CHANNELS = (32, 128, 128, 32)
KERNEL_SIZE = 3
DENSE_HIDDEN = 64
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MIN_SIGNAL_LENGTH = 4

CKPT_MAGIC = b"DTCCKPT1"
CKPT_VERSION = 1

_BN_NAMES = ("bn1", "bn2", "bn2p", "bn3", "bn3p", "bn4")


def pooled_length(length: int) -> int:
    """Time extent after the two width-2 poolings."""
    return (length // 2) // 2


def param_shapes(length: int, k: int) -> dict:
    """Shape table of every trainable tensor for a given input length and class count."""
    c1, c2, c3, c4 = CONV_CHANNELS
    flat = c4 * pooled_length(length)
    shapes = {
        "conv1_w": (c1, 2, KERNEL_SIZE), "conv1_b": (c1,),
        "bn1_gamma": (c1,), "bn1_beta": (c1,),
        "conv2_w": (c2, c1, KERNEL_SIZE), "conv2_b": (c2,),
        "bn2_gamma": (c2,), "bn2_beta": (c2,),
        "bn2p_gamma": (c2,), "bn2p_beta": (c2,),
        "conv3_w": (c3, c2, KERNEL_SIZE), "conv3_b": (c3,),
        "bn3_gamma": (c3,), "bn3_beta": (c3,),
        "bn3p_gamma": (c3,), "bn3p_beta": (c3,),
        "conv4_w": (c4, c3, KERNEL_SIZE), "conv4_b": (c4,),
        "bn4_gamma": (c4,), "bn4_beta": (c4,),
        "dense1_w": (DENSE_HIDDEN, flat), "dense1_b": (DENSE_HIDDEN,),
        "dense2_w": (k, DENSE_HIDDEN), "dense2_b": (k,),
    }
    return shapes


def stat_shapes(length: int, k: int) -> dict:
    c1, c2, c3, c4 = CONV_CHANNELS
    widths = {"bn1": c1, "bn2": c2, "bn2p": c2, "bn3": c3, "bn3p": c3, "bn4": c4}
    out = {}
    for name, ch in widths.items():
        out[f"{name}_mean"] = (ch,)
        out[f"{name}_var"] = (ch,)
    return out


@dataclass
class ModelState:
    """All trainable parameters, BN running statistics, and Adam accumulators."""

    signal_length: int
    num_classes: int
    params: dict
    stats: dict
    adam_m: dict
    adam_v: dict
    step: int = 0
    _cache: object = field(default=None, repr=False, compare=False)

    def copy(self) -> "ModelState":
        return ModelState(
            signal_length=self.signal_length,
            num_classes=self.num_classes,
            params={k: v.copy() for k, v in self.params.items()},
            stats={k: v.copy() for k, v in self.stats.items()},
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            step=self.step,
        )


def init_model(length: int, k: int, seed: int) -> ModelState:
    """Seeded He-style initialization (std = sqrt(2 / fan_in), zero biases)."""
    if pooled_length(length) < 1:
        raise ValueError(
            f"signal length {length} too short: two pool-by-2 stages need length >= {MIN_SIGNAL_LENGTH}"
        )
    if k < 2:
        raise ValueError(f"class count must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    shapes = param_shapes(length, k)
    params = {}
    for name, shape in shapes.items():
        if name.endswith("_w"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith("_gamma"):
            params[name] = np.ones(shape)
        else:  # biases and BN shifts start at zero
            params[name] = np.zeros(shape)
    stats = {}
    for name, shape in stat_shapes(length, k).items():
        stats[name] = np.ones(shape) if name.endswith("_var") else np.zeros(shape)
    return ModelState(
        signal_length=length,
        num_classes=k,
        params=params,
        stats=stats,
        adam_m={n: np.zeros(s) for n, s in shapes.items()},
        adam_v={n: np.zeros(s) for n, s in shapes.items()},
    )


def reinit_head(model: ModelState, k: int, seed: int) -> ModelState:
    """Replace the final dense layer (and its Adam moments) for a new class count."""
    if k < 2:
        raise ValueError(f"class count must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    model.params["dense2_w"] = rng.normal(0.0, np.sqrt(2.0 / DENSE_HIDDEN), size=(k, DENSE_HIDDEN))
    model.params["dense2_b"] = np.zeros(k)
    model.adam_m["dense2_w"] = np.zeros((k, DENSE_HIDDEN))
    model.adam_v["dense2_w"] = np.zeros((k, DENSE_HIDDEN))
    model.adam_m["dense2_b"] = np.zeros(k)
    model.adam_v["dense2_b"] = np.zeros(k)
    model.num_classes = k
    model._cache = None
    return model


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _bn_forward(x, gamma, beta, run_mean, run_var, train_mode):
    """Channel batch norm over (batch, time). Returns (y, cache or None).

    Train mode normalizes by biased batch statistics and folds them into the
    running estimates in place; eval mode uses the running estimates.
    """
    if train_mode:
        mu = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu[None, :, None]) * inv_std[None, :, None]
        run_mean *= BN_MOMENTUM
        run_mean += (1.0 - BN_MOMENTUM) * mu
        run_var *= BN_MOMENTUM
        run_var += (1.0 - BN_MOMENTUM) * var
        y = gamma[None, :, None] * xhat + beta[None, :, None]
        return y, (xhat, inv_std)
    inv_std = 1.0 / np.sqrt(run_var + BN_EPS)
    xhat = (x - run_mean[None, :, None]) * inv_std[None, :, None]
    return gamma[None, :, None] * xhat + beta[None, :, None], None


def _bn_backward(dy, gamma, cache):
    """Gradient through the batch-statistics branch of _bn_forward."""
    xhat, inv_std = cache
    n = dy.shape[0] * dy.shape[2]
    dgamma = np.sum(dy * xhat, axis=(0, 2))
    dbeta = np.sum(dy, axis=(0, 2))
    dxhat = dy * gamma[None, :, None]
    sum_dxhat = np.sum(dxhat, axis=(0, 2))
    sum_dxhat_xhat = np.sum(dxhat * xhat, axis=(0, 2))
    dx = (inv_std[None, :, None] / n) * (
        n * dxhat - sum_dxhat[None, :, None] - xhat * sum_dxhat_xhat[None, :, None]
    )
    return dx, dgamma, dbeta


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class _Cache:
    """Intermediates of one train-mode forward pass, consumed by backward()."""

    __slots__ = ("batch", "acts", "bn", "switches", "softmax", "norms", "features")

    def __init__(self):
        self.acts = {}
        self.bn = {}
        self.switches = {}


def forward(model: ModelState, batch: np.ndarray, train_mode: bool = False) -> np.ndarray:
    """Features for a batch of shape (m, 2, L): non-negative rows of unit L2 norm.

    Train mode uses batch statistics in BN (updating the running estimates) and
    caches intermediates on the model for a following backward() call.
    """
    x = np.ascontiguousarray(np.asarray(batch, dtype=np.float64))
    if x.ndim != 3 or x.shape[1] != 2 or x.shape[2] != model.signal_length:
        raise ValueError(
            f"batch shape {x.shape} does not match (m, 2, {model.signal_length})"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("batch contains non-finite values")

    p = model.params
    st = model.stats
    cache = _Cache() if train_mode else None
    if train_mode:
        cache.batch = x.copy()

    def bn(name, a):
        y, c = _bn_forward(a, p[f"{name}_gamma"], p[f"{name}_beta"],
                           st[f"{name}_mean"], st[f"{name}_var"], train_mode)
        if train_mode:
            cache.bn[name] = c
        return y

    def keep(name, a):
        if train_mode:
            cache.acts[name] = a
        return a

    # block 1
    a1 = kernels.conv1d_forward(x, p["conv1_w"], p["conv1_b"])
    keep("a1", a1)
    b1 = keep("b1", bn("bn1", a1))
    r1 = keep("r1", np.maximum(b1, 0.0))
    # block 2 with pool
    a2 = keep("a2", kernels.conv1d_forward(r1, p["conv2_w"], p["conv2_b"]))
    b2 = keep("b2", bn("bn2", a2))
    r2 = keep("r2", np.maximum(b2, 0.0))
    p2, sw2 = kernels.maxpool2_forward(r2)
    keep("p2", p2)
    q2 = keep("q2", bn("bn2p", p2))
    # block 3 with pool
    a3 = keep("a3", kernels.conv1d_forward(q2, p["conv3_w"], p["conv3_b"]))
    b3 = keep("b3", bn("bn3", a3))
    r3 = keep("r3", np.maximum(b3, 0.0))
    p3, sw3 = kernels.maxpool2_forward(r3)
    keep("p3", p3)
    q3 = keep("q3", bn("bn3p", p3))
    # block 4
    a4 = keep("a4", kernels.conv1d_forward(q3, p["conv4_w"], p["conv4_b"]))
    b4 = keep("b4", bn("bn4", a4))
    r4 = keep("r4", np.maximum(b4, 0.0))
    # dense head
    flat = keep("flat", r4.reshape(r4.shape[0], -1))
    h1 = keep("h1", flat @ p["dense1_w"].T + p["dense1_b"])
    rh = keep("rh", np.maximum(h1, 0.0))
    z = rh @ p["dense2_w"].T + p["dense2_b"]
    soft = _softmax(z)
    norms = np.linalg.norm(soft, axis=1, keepdims=True)
    feats = soft / norms

    if train_mode:
        cache.switches["sw2"] = sw2
        cache.switches["sw3"] = sw3
        cache.softmax = soft
        cache.norms = norms
        cache.features = feats
        model._cache = cache
    return feats


def backward(model: ModelState, batch: np.ndarray, dfeatures: np.ndarray) -> dict:
    """Parameter gradients given d(loss)/d(features) for the cached train batch."""
    cache = model._cache
    x = np.asarray(batch, dtype=np.float64)
    if cache is None or cache.batch.shape != x.shape or not np.array_equal(cache.batch, x):
        raise RuntimeError("backward called without a matching train-mode forward")
    p = model.params
    grads = {}

    # renormalization: f = s / |s|
    f = cache.features
    dsoft = (dfeatures - (dfeatures * f).sum(axis=1, keepdims=True) * f) / cache.norms
    # softmax
    s = cache.softmax
    dz = s * (dsoft - (dsoft * s).sum(axis=1, keepdims=True))
    # dense 2
    grads["dense2_w"] = dz.T @ cache.acts["rh"]
    grads["dense2_b"] = dz.sum(axis=0)
    drh = dz @ p["dense2_w"]
    dh1 = drh * (cache.acts["h1"] > 0.0)
    # dense 1
    grads["dense1_w"] = dh1.T @ cache.acts["flat"]
    grads["dense1_b"] = dh1.sum(axis=0)
    dflat = dh1 @ p["dense1_w"]
    dr4 = dflat.reshape(cache.acts["r4"].shape)
    # block 4
    db4 = dr4 * (cache.acts["b4"] > 0.0)
    da4, grads["bn4_gamma"], grads["bn4_beta"] = _bn_backward(db4, p["bn4_gamma"], cache.bn["bn4"])
    dq3, grads["conv4_w"], grads["conv4_b"] = kernels.conv1d_backward(
        cache.acts["q3"], p["conv4_w"], np.ascontiguousarray(da4))
    # block 3
    dp3, grads["bn3p_gamma"], grads["bn3p_beta"] = _bn_backward(dq3, p["bn3p_gamma"], cache.bn["bn3p"])
    dr3 = kernels.maxpool2_backward(np.ascontiguousarray(dp3), cache.switches["sw3"],
                                    cache.acts["r3"].shape[2])
    db3 = dr3 * (cache.acts["b3"] > 0.0)
    da3, grads["bn3_gamma"], grads["bn3_beta"] = _bn_backward(db3, p["bn3_gamma"], cache.bn["bn3"])
    dq2, grads["conv3_w"], grads["conv3_b"] = kernels.conv1d_backward(
        cache.acts["q2"], p["conv3_w"], np.ascontiguousarray(da3))
    # block 2
    dp2, grads["bn2p_gamma"], grads["bn2p_beta"] = _bn_backward(dq2, p["bn2p_gamma"], cache.bn["bn2p"])
    dr2 = kernels.maxpool2_backward(np.ascontiguousarray(dp2), cache.switches["sw2"],
                                    cache.acts["r2"].shape[2])
    db2 = dr2 * (cache.acts["b2"] > 0.0)
    da2, grads["bn2_gamma"], grads["bn2_beta"] = _bn_backward(db2, p["bn2_gamma"], cache.bn["bn2"])
    dr1, grads["conv2_w"], grads["conv2_b"] = kernels.conv1d_backward(
        cache.acts["r1"], p["conv2_w"], np.ascontiguousarray(da2))
    # block 1
    db1 = dr1 * (cache.acts["b1"] > 0.0)
    da1, grads["bn1_gamma"], grads["bn1_beta"] = _bn_backward(db1, p["bn1_gamma"], cache.bn["bn1"])
    _, grads["conv1_w"], grads["conv1_b"] = kernels.conv1d_backward(
        cache.batch, p["conv1_w"], np.ascontiguousarray(da1))

    return {name: grads[name] for name in p}


def adam_step(model: ModelState, grads: dict, lr: float) -> ModelState:
    """Standard Adam update (beta1 0.9, beta2 0.999, eps 1e-8, bias correction)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name}")
        if g.shape != model.params[name].shape:
            raise ValueError(f"gradient shape {g.shape} mismatches {name}")
    t = model.step + 1
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for name, g in grads.items():
        m = model.adam_m[name]
        v = model.adam_v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        model.params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    model.step = t
    return model


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _tensor_table(model: ModelState):
    table = [
        ("signal_length", np.array([float(model.signal_length)])),
        ("num_classes", np.array([float(model.num_classes)])),
    ]
    table += [(f"param/{n}", model.params[n]) for n in model.params]
    table += [(f"stat/{n}", model.stats[n]) for n in model.stats]
    table += [(f"adam_m/{n}", model.adam_m[n]) for n in model.adam_m]
    table += [(f"adam_v/{n}", model.adam_v[n]) for n in model.adam_v]
    return table


def save_checkpoint(model: ModelState, path) -> None:
    """Write the full model state (little-endian float64 tensors)."""
    table = _tensor_table(model)
    for name, arr in table:
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"checkpoint tensor {name} contains non-finite values")
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<II", CKPT_VERSION, len(table))
    for name, arr in table:
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f8", copy=False).tobytes()
    out += struct.pack("<Q", model.step)
    with open(path, "wb") as fh:
        fh.write(out)


def load_checkpoint(path, expect_signal_length=None, expect_num_classes=None) -> ModelState:
    """Read a checkpoint, validating the tensor table against the architecture."""
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFileError(f"truncated checkpoint: ran out of bytes reading {what}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    magic = take(len(CKPT_MAGIC), "magic")
    if magic != CKPT_MAGIC:
        raise BadMagicError(f"bad magic: expected {CKPT_MAGIC!r}, got {bytes(magic)!r}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"version mismatch: expected {CKPT_VERSION}, got {version}")

    tensors = {}
    for i in range(count):
        nlen = struct.unpack("<I", take(4, f"tensor {i} name length"))[0]
        name = take(nlen, f"tensor {i} name").decode("utf-8")
        rank = struct.unpack("<B", take(1, f"{name} rank"))[0]
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} extents"))
        size = int(np.prod(shape)) if rank else 1
        data = take(8 * size, f"{name} data")
        tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    step = struct.unpack("<Q", take(8, "step counter"))[0]
    if pos != len(buf):
        raise ShapeTableError(f"{len(buf) - pos} unexpected trailing bytes after step counter")

    for meta in ("signal_length", "num_classes"):
        if meta not in tensors:
            raise ShapeTableError(f"checkpoint is missing the {meta} entry")
    length = int(tensors["signal_length"][0])
    k = int(tensors["num_classes"][0])
    if expect_signal_length is not None and length != expect_signal_length:
        raise ShapeTableError(
            f"checkpoint was built for signal length {length}, expected {expect_signal_length}"
        )
    if expect_num_classes is not None and k != expect_num_classes:
        raise ShapeTableError(
            f"checkpoint was built for {k} classes, expected {expect_num_classes}"
        )

    expected = {f"param/{n}": s for n, s in param_shapes(length, k).items()}
    expected.update({f"stat/{n}": s for n, s in stat_shapes(length, k).items()})
    expected.update({f"adam_m/{n}": s for n, s in param_shapes(length, k).items()})
    expected.update({f"adam_v/{n}": s for n, s in param_shapes(length, k).items()})
    stored = {n: v for n, v in tensors.items() if n not in ("signal_length", "num_classes")}
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise ShapeTableError(f"tensor table disagreement: missing {missing}, unexpected {extra}")
    for name, arr in stored.items():
        if arr.shape != expected[name]:
            raise ShapeTableError(
                f"tensor {name} has shape {arr.shape}, architecture expects {expected[name]}"
            )

    model = init_model(length, k, seed=0)
    for n in model.params:
        model.params[n] = stored[f"param/{n}"]
    for n in model.stats:
        model.stats[n] = stored[f"stat/{n}"]
    for n in model.adam_m:
        model.adam_m[n] = stored[f"adam_m/{n}"]
        model.adam_v[n] = stored[f"adam_v/{n}"]
    model.step = int(step)
    return model
