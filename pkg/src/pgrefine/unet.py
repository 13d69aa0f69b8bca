"""U-Net refinement network in plain numpy.

Layout: ``depth`` encoder stages (two 3x3 conv + ReLU, then 2x2 max-pool),
a two-conv bottleneck, ``depth`` decoder stages (2x nearest upsample, 3x3
conv + ReLU, skip concatenation, two 3x3 conv + ReLU) and a 1x1 conv with a
sigmoid head.  Defaults give widths 32/64/128/256 with a 512 bottleneck.

Activations are kept channels-last (NHWC) internally.  Inputs whose side is
not a multiple of ``2**depth`` are reflect-padded and the output is cropped
back, so a 100x100 tile runs at 112x112.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Sample, denormalize_pg, normalize_elevation, stack_inputs
from .errors import DomainError, FormatError, TruncatedError, VersionError
from .geodata import GridTile
from .propagate import Heatmap

__all__ = [
    "ModelParams",
    "TrainConfig",
    "layer_shapes",
    "init_params",
    "forward",
    "loss_masked_mse",
    "backward",
    "train",
    "predict",
    "predict_samples",
    "save_params",
    "load_params",
    "Adam",
]

MODEL_MAGIC = b"UNET"
MODEL_VERSION = 1


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _widths(base_width: int, depth: int) -> list[int]:
    return [base_width * 2**s for s in range(depth)]


def layer_shapes(in_channels: int = 2, base_width: int = 32, depth: int = 4) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every parameter array."""
    if depth < 1 or base_width < 1:
        raise DomainError("depth and base_width must be >= 1")
    widths = _widths(base_width, depth)
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    cin = in_channels
    for s, w in enumerate(widths, start=1):
        conv(f"enc{s}.conv1", cin, w)
        conv(f"enc{s}.conv2", w, w)
        cin = w
    mid = base_width * 2**depth
    conv("mid.conv1", cin, mid)
    conv("mid.conv2", mid, mid)
    cin = mid
    for s in range(depth, 0, -1):
        w = widths[s - 1]
        conv(f"dec{s}.up", cin, w)
        conv(f"dec{s}.conv1", 2 * w, w)
        conv(f"dec{s}.conv2", w, w)
        cin = w
    conv("head", cin, 1, k=1)
    return shapes


@dataclass
class ModelParams:
    """Named weight arrays plus architecture/training metadata."""

    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def depth(self) -> int:
        return int(self.meta.get("depth", 4))

    @property
    def base_width(self) -> int:
        return int(self.meta.get("base_width", 32))

    @property
    def input_channels(self) -> int:
        return int(self.meta.get("input_channels", 2))

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def expected_shapes(self):
        return layer_shapes(self.input_channels, self.base_width, self.depth)

    def validate(self) -> None:
        expected = self.expected_shapes()
        unknown = sorted(set(self.arrays) - set(expected))
        missing = sorted(set(expected) - set(self.arrays))
        if unknown:
            raise FormatError(f"unknown layer names: {', '.join(unknown)}")
        if missing:
            raise FormatError(f"missing layer arrays: {', '.join(missing)}")
        for name, shape in expected.items():
            if tuple(self.arrays[name].shape) != shape:
                raise FormatError(f"{name}: shape {self.arrays[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.arrays[name])):
                raise FormatError(f"{name}: non-finite values")

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, dict(self.meta))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.arrays.items()}, dict(self.meta))

    def n_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())


def init_params(
    seed: int = 0,
    *,
    in_channels: int = 2,
    base_width: int = 32,
    depth: int = 4,
    tile_px: int | None = 100,
    dtype=np.float32,
) -> ModelParams:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in layer_shapes(in_channels, base_width, depth).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            arrays[name] = np.zeros(shape, dtype=dtype)
    meta = {
        "input_channels": in_channels,
        "base_width": base_width,
        "depth": depth,
        "tile_px": tile_px,
        "seed": seed,
        "training_epochs": 0,
    }
    return ModelParams(arrays, meta)


# ---------------------------------------------------------------------------
# Layer primitives (NHWC)
# ---------------------------------------------------------------------------

_OFFSETS = [(dy, dx) for dy in range(3) for dx in range(3)]


def _conv3_forward(x, w, b):
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[:, dy : dy + h, dx : dx + wd, :] for dy, dx in _OFFSETS], axis=-1)
    cols = cols.reshape(n * h * wd, 9 * c)
    wm = w.transpose(0, 2, 3, 1).reshape(w.shape[0], 9 * c)
    out = cols @ wm.T + b
    return out.reshape(n, h, wd, w.shape[0]), cols


def _conv3_backward(dout, cols, x_shape, w, need_dx=True):
    cout = w.shape[0]
    d2 = dout.reshape(-1, cout)
    c = x_shape[-1]
    dw = (d2.T @ cols).reshape(cout, 3, 3, c).transpose(0, 3, 1, 2)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    # input gradient of a same-padded 3x3 conv is a conv with flipped, transposed kernels
    wf = w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
    dx, _ = _conv3_forward(dout, wf, np.zeros(c, dtype=dout.dtype))
    return dx, dw, db


def _pool_forward(x):
    n, h, w, c = x.shape
    r = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = np.argmax(r, axis=-1)
    out = np.take_along_axis(r, idx[..., np.newaxis], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx):
    n, h2, w2, c = dout.shape
    onehot = idx[..., np.newaxis] == np.arange(4)
    r = onehot * dout[..., np.newaxis]
    return r.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)


def _up_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _up_backward(dout):
    n, h, w, c = dout.shape
    return dout.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _pad_amounts(size: int, depth: int) -> tuple[int, int]:
    m = 2**depth
    total = -size % m
    return total // 2, total - total // 2


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


def _as_batch(params: ModelParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[np.newaxis]
    if x.ndim != 4:
        raise DomainError(f"input must be (C,H,W) or (N,C,H,W), got shape {x.shape}")
    if x.shape[1] != params.input_channels:
        raise DomainError(f"input has {x.shape[1]} channels, model expects {params.input_channels}")
    if x.shape[2] != x.shape[3]:
        raise DomainError(f"input tiles must be square, got {x.shape[2:]}")
    tile = params.meta.get("tile_px")
    if tile is not None and x.shape[2] != tile:
        raise DomainError(f"input tile is {x.shape[2]} px, model was built for {tile} px")
    if not np.all(np.isfinite(x)):
        raise DomainError("input contains non-finite values")
    return x.astype(params.dtype, copy=False), single


def _run(params: ModelParams, x: np.ndarray, keep: bool):
    """Forward pass on an NCHW batch; returns (prediction NHW, cache)."""
    a = params.arrays
    depth = params.depth
    size = x.shape[2]
    lo, hi = _pad_amounts(size, depth)
    h = np.transpose(x, (0, 2, 3, 1))
    if lo or hi:
        h = np.pad(h, ((0, 0), (lo, hi), (lo, hi), (0, 0)), mode="reflect")
    cache: dict = {"pad": (lo, hi)} if keep else {}

    def conv_relu(name, inp):
        z, cols = _conv3_forward(inp, a[f"{name}.weight"], a[f"{name}.bias"])
        out = np.maximum(z, 0)
        if keep:
            cache[name] = (cols, inp.shape, out > 0)
        return out

    skips = []
    for s in range(1, depth + 1):
        h = conv_relu(f"enc{s}.conv1", h)
        h = conv_relu(f"enc{s}.conv2", h)
        skips.append(h)
        h, idx = _pool_forward(h)
        if keep:
            cache[f"enc{s}.pool"] = idx
    h = conv_relu("mid.conv1", h)
    h = conv_relu("mid.conv2", h)
    for s in range(depth, 0, -1):
        h = conv_relu(f"dec{s}.up", _up_forward(h))
        h = np.concatenate([h, skips[s - 1]], axis=-1)
        h = conv_relu(f"dec{s}.conv1", h)
        h = conv_relu(f"dec{s}.conv2", h)
    wh = a["head.weight"].reshape(1, -1)
    z = h @ wh.T + a["head.bias"]
    p = _sigmoid(z[..., 0])
    if keep:
        cache["head"] = h
        cache["prob"] = p
    if lo or hi:
        p = p[:, lo : lo + size, lo : lo + size]
    return p, cache


def forward(params: ModelParams, x) -> np.ndarray:
    """Normalised path-gain prediction in (0, 1) for a ``(2,n,n)`` or ``(N,2,n,n)`` input."""
    xb, single = _as_batch(params, x)
    p, _ = _run(params, xb, keep=False)
    return p[0] if single else p


def loss_masked_mse(pred, target, mask) -> float:
    """Mean squared error over pixels where ``mask`` is true."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise DomainError(f"shape mismatch: pred {pred.shape}, target {target.shape}, mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise DomainError("mask has no valid pixels")
    diff = (pred - target)[mask]
    return float(np.dot(diff, diff) / count)


def backward(params: ModelParams, x, target, mask) -> tuple[float, dict[str, np.ndarray]]:
    """Masked-MSE loss and its exact gradient with respect to every parameter array."""
    xb, single = _as_batch(params, x)
    target = np.asarray(target)
    mask = np.asarray(mask, dtype=bool)
    if single:
        target = target[np.newaxis]
        mask = mask[np.newaxis]
    p, cache = _run(params, xb, keep=True)
    if p.shape != target.shape or p.shape != mask.shape:
        raise DomainError(f"target/mask shape {target.shape}/{mask.shape} does not match output {p.shape}")
    count = int(mask.sum())
    if count == 0:
        raise DomainError("mask has no valid pixels")
    dt = params.dtype
    diff = np.where(mask, p - target.astype(dt), 0).astype(dt)
    loss = float(np.sum(diff.astype(np.float64) ** 2) / count)

    a = params.arrays
    depth = params.depth
    grads: dict[str, np.ndarray] = {}
    lo, hi = cache["pad"]
    size = xb.shape[2]
    dp = np.zeros_like(cache["prob"])
    dp[:, lo : lo + size, lo : lo + size] = (2.0 / count) * diff
    prob = cache["prob"]
    dz = dp * prob * (1 - prob)
    hh = cache["head"]
    c_head = hh.shape[-1]
    grads["head.weight"] = (dz.reshape(-1) @ hh.reshape(-1, c_head)).reshape(1, c_head, 1, 1)
    grads["head.bias"] = np.array([dz.sum()], dtype=dt)
    dh = dz[..., np.newaxis] * a["head.weight"].reshape(1, 1, 1, c_head)

    def conv_relu_back(name, dout, need_dx=True):
        cols, in_shape, active = cache[name]
        dout = dout * active
        dx, dw, db = _conv3_backward(dout, cols, in_shape, a[f"{name}.weight"], need_dx)
        grads[f"{name}.weight"] = dw
        grads[f"{name}.bias"] = db
        return dx

    dskips = [None] * depth
    for s in range(1, depth + 1):
        dh = conv_relu_back(f"dec{s}.conv2", dh)
        dh = conv_relu_back(f"dec{s}.conv1", dh)
        w = dh.shape[-1] // 2
        dskips[s - 1] = dh[..., w:]
        dh = _up_backward(conv_relu_back(f"dec{s}.up", dh[..., :w]))
    dh = conv_relu_back("mid.conv2", dh)
    dh = conv_relu_back("mid.conv1", dh)
    for s in range(depth, 0, -1):
        dh = _pool_backward(dh, cache[f"enc{s}.pool"]) + dskips[s - 1]
        dh = conv_relu_back(f"enc{s}.conv2", dh)
        dh = conv_relu_back(f"enc{s}.conv1", dh, need_dx=s > 1)
    return loss, {k: grads[k].astype(dt, copy=False) for k in a}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    seed: int = 0
    loss: str = "masked-mse"
    validation_fraction: float = 0.0
    base_width: int = 32
    depth: int = 4

    def __post_init__(self):
        if self.epochs < 0:
            raise DomainError("epochs must be >= 0")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be positive")
        if self.loss != "masked-mse":
            raise DomainError(f"unsupported loss {self.loss!r}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise DomainError("validation_fraction must be in [0, 1)")


class Adam:
    """Adam moments (0.9 / 0.999, eps 1e-8) with bias correction."""

    def __init__(self, params: ModelParams, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params.arrays[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params.dtype)


def _batch_loss(params, samples, batch_size):
    total, count = 0.0, 0
    for i in range(0, len(samples), batch_size):
        x, y, m = stack_inputs(samples[i : i + batch_size])
        p = forward(params, x)
        d = (p - y)[m]
        total += float(np.dot(d, d))
        count += int(m.sum())
    return total / max(count, 1)


def train(samples, cfg: TrainConfig, params: ModelParams | None = None, log=None):
    """Mini-batch Adam on masked MSE.

    Returns ``(params, history)``; ``history`` holds one dict per epoch with
    the pixel-weighted mean training loss (and validation loss when a
    validation fraction is configured).  Passing ``params`` fine-tunes a copy.
    """
    samples = list(samples)
    if not samples:
        raise DomainError("training set is empty")
    tile = samples[0].size_px
    if params is None:
        params = init_params(cfg.seed, base_width=cfg.base_width, depth=cfg.depth, tile_px=tile)
    else:
        params = params.copy()
    rng = np.random.default_rng(cfg.seed)

    val: list[Sample] = []
    if cfg.validation_fraction > 0:
        ids = sorted({s.scenario_id for s in samples})
        n_val = max(1, int(round(cfg.validation_fraction * len(ids))))
        if n_val >= len(ids):
            raise DomainError("validation split leaves no training scenarios")
        val_ids = set(rng.permutation(ids)[:n_val].tolist())
        val = [s for s in samples if s.scenario_id in val_ids]
        samples = [s for s in samples if s.scenario_id not in val_ids]

    opt = Adam(params, cfg.learning_rate)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        total, count = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            batch = [samples[j] for j in order[i : i + cfg.batch_size]]
            x, y, m = stack_inputs(batch)
            loss, grads = backward(params, x, y, m)
            opt.step(params, grads)
            n_valid = int(m.sum())
            total += loss * n_valid
            count += n_valid
        row = {"epoch": epoch + 1, "train_loss": total / count}
        if val:
            row["val_loss"] = _batch_loss(params, val, cfg.batch_size)
        history.append(row)
        if log is not None:
            log(row)
    params.meta["training_epochs"] = int(params.meta.get("training_epochs", 0)) + cfg.epochs
    return params, history


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def predict(params: ModelParams, elevation_tile: GridTile, estimate_tile: GridTile) -> tuple[Heatmap, float]:
    """Refined heatmap in dB and the wall-clock latency of the call in seconds.

    ``elevation_tile`` holds metres, ``estimate_tile`` normalised path gain.
    """
    t0 = time.perf_counter()
    if elevation_tile.values.shape != estimate_tile.values.shape:
        raise DomainError("elevation and estimate tiles differ in shape")
    mask = elevation_tile.mask & estimate_tile.mask
    x = np.stack(
        [
            np.where(mask, normalize_elevation(elevation_tile.values), 0.0),
            np.where(mask, estimate_tile.values, 0.0),
        ]
    )
    p = forward(params, x).astype(np.float64)
    db = np.where(mask, denormalize_pg(p), 0.0)
    heat = Heatmap(GridTile(db, mask, elevation_tile.cell_size_m), "model")
    return heat, time.perf_counter() - t0


def predict_samples(params: ModelParams, samples, batch_size: int = 8) -> np.ndarray:
    """Normalised predictions ``(N, n, n)`` for a list of samples."""
    out = []
    for i in range(0, len(samples), batch_size):
        x, _, _ = stack_inputs(samples[i : i + batch_size])
        out.append(forward(params, x))
    return np.concatenate(out) if out else np.zeros((0, 0, 0))


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------


def save_params(params: ModelParams, path) -> None:
    """Write the binary model file (float32 payloads, JSON metadata trailer)."""
    if not str(path):
        raise OSError("empty model path")
    chunks = [MODEL_MAGIC, struct.pack("<BI", MODEL_VERSION, len(params.arrays))]
    for name, arr in params.arrays.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = json.dumps(params.meta, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(meta)) + meta)
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> ModelParams:
    if not str(path):
        raise OSError("empty model path")
    buf = Path(path).read_bytes()
    if buf[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise TruncatedError(f"{path}: file truncated at byte {off}")
        vals = struct.unpack_from(fmt, buf, off)
        off += size
        return vals

    version, count = take("<BI")
    if version != MODEL_VERSION:
        raise VersionError(f"{path}: unsupported model version {version}")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<H")
        if off + nlen > len(buf):
            raise TruncatedError(f"{path}: truncated layer name")
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if off + nbytes > len(buf):
            raise TruncatedError(f"{path}: array {name!r} truncated")
        arrays[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims).astype(np.float32)
        off += nbytes
    (mlen,) = take("<I")
    if off + mlen > len(buf):
        raise TruncatedError(f"{path}: metadata truncated")
    meta = json.loads(buf[off : off + mlen].decode("utf-8"))
    params = ModelParams(arrays, meta)
    params.validate()
    return params
