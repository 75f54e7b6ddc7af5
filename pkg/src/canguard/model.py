"""Convolutional autoencoders over m x w views, written directly in numpy.

Layout is channels-last throughout. The stack is

    conv(32) relu -> pool/2 -> conv(16) relu -> pool/2 -> conv(16) relu
    -> up*2 -> conv(32) relu -> up*2 -> conv(1) sigmoid

with same-padded k_h x k_w kernels. Inputs whose sides are not multiples of
four are edge-padded before the first layer and the output is cropped back,
so reconstructions always have the input's shape.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"CANSAE1"


class ModelError(Exception):
    pass


class ShapeUnderflow(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


class NonFiniteLoss(ModelError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite in epoch {epoch}")
        self.epoch = epoch


class ArtifactMismatch(ModelError):
    pass


@dataclass
class AeConfig:
    m: int
    w: int
    filters: tuple[int, ...] = (32, 16, 16, 32, 1)
    kernel: tuple[int, int] = (3, 3)
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    patience: int = 10
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        self.filters = tuple(int(f) for f in self.filters)
        self.kernel = (int(self.kernel[0]), int(self.kernel[1]))
        if len(self.filters) != 5 or self.filters[-1] != 1:
            raise ValueError("filters must list five layers ending in 1")
        if self.kernel[0] % 2 == 0 or self.kernel[1] % 2 == 0:
            raise ValueError("kernel sides must be odd for same padding")
        if self.optimizer not in ("adam", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        d["kernel"] = list(self.kernel)
        return d


def _pad4(n: int) -> int:
    return -(-n // 4) * 4


@dataclass(eq=False)
class AeModel:
    config: AeConfig
    period: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    training_history: list[float] = field(default_factory=list)
    validation_history: list[float] = field(default_factory=list)

    @property
    def layer_specs(self) -> list[tuple[int, int, int, int]]:
        return [tuple(W.shape) for W in self.weights]

    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out


def param_count(config: AeConfig, channels_in: int = 1) -> int:
    """Closed-form count: sum over layers of (k_h * k_w * c_in + 1) * c_out."""
    kh, kw = config.kernel
    total, cin = 0, channels_in
    for cout in config.filters:
        total += (kh * kw * cin + 1) * cout
        cin = cout
    return total


def build(config: AeConfig, period: int = 1) -> AeModel:
    kh, kw = config.kernel
    if config.m < max(4, kh) or config.w < max(4, kw):
        raise ShapeUnderflow(
            f"view {config.m}x{config.w} too small for two pooling stages (need >= 4x4)"
        )
    rng = np.random.default_rng([config.seed, int(period)])
    dtype = np.dtype(config.dtype)
    weights, biases = [], []
    cin = 1
    for cout in config.filters:
        fan_in = kh * kw * cin
        limit = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(kh, kw, cin, cout)).astype(dtype))
        biases.append(np.zeros(cout, dtype=dtype))
        cin = cout
    return AeModel(config, int(period), weights, biases)


# ------------------------------------------------------------------ layers


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    p = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((n, h, w, kh * kw, c), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, :, a * kw + b, :] = p[:, a : a + h, b : b + w, :]
    return cols.reshape(n * h * w, kh * kw * c)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], kh: int, kw: int) -> np.ndarray:
    n, h, w, c = shape
    ph, pw = kh // 2, kw // 2
    d = dcols.reshape(n, h, w, kh * kw, c)
    p = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=dcols.dtype)
    for a in range(kh):
        for b in range(kw):
            p[:, a : a + h, b : b + w, :] += d[:, :, :, a * kw + b, :]
    return p[:, ph : ph + h, pw : pw + w, :]


def _pool(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, h, w, c = x.shape
    r = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    r = r.reshape(n, h // 2, w // 2, c, 4)
    idx = r.argmax(axis=-1)
    out = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_back(g: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, h2, w2, c = g.shape
    r = np.zeros((n, h2, w2, c, 4), dtype=g.dtype)
    np.put_along_axis(r, idx[..., None], g[..., None], axis=-1)
    r = r.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return r.reshape(n, 2 * h2, 2 * w2, c)


def _up(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _up_back(g: np.ndarray) -> np.ndarray:
    n, h, w, c = g.shape
    return g.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# after conv k: 0 pool, 1 pool, 2 up, 3 up, 4 none
_RESAMPLE = ("pool", "pool", "up", "up", None)


def _prepare(model: AeModel, views: np.ndarray) -> np.ndarray:
    cfg = model.config
    x = np.asarray(views)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (cfg.m, cfg.w):
        raise ShapeMismatch(f"expected views of shape {cfg.m}x{cfg.w}, got {x.shape[1:]}")
    x = x.astype(cfg.dtype, copy=False)
    pm, pw = _pad4(cfg.m) - cfg.m, _pad4(cfg.w) - cfg.w
    if pm or pw:
        x = np.pad(x, ((0, 0), (0, pm), (0, pw)), mode="edge")
    return x[..., None]


def _forward(model: AeModel, x: np.ndarray, keep: bool):
    kh, kw = model.config.kernel
    cache = []
    h = x
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        shape = h.shape
        cols = _im2col(h, kh, kw)
        z = (cols @ W.reshape(-1, W.shape[-1]) + b).reshape(shape[:3] + (W.shape[-1],))
        if k == len(model.weights) - 1:
            a = 0.5 * (1.0 + np.tanh(0.5 * z))
        else:
            a = np.maximum(z, 0)
        entry = {"cols": cols, "shape": shape, "a": a} if keep else None
        if _RESAMPLE[k] == "pool":
            a, idx = _pool(a)
            if keep:
                entry["idx"] = idx
        elif _RESAMPLE[k] == "up":
            a = _up(a)
        cache.append(entry)
        h = a
    return h, cache


def _backward(model: AeModel, cache: list, dout: np.ndarray):
    kh, kw = model.config.kernel
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.weights)
    g = dout
    for k in reversed(range(len(model.weights))):
        entry = cache[k]
        if _RESAMPLE[k] == "pool":
            g = _pool_back(g, entry["idx"])
        elif _RESAMPLE[k] == "up":
            g = _up_back(g)
        a = entry["a"]
        if k == len(model.weights) - 1:
            dz = g * a * (1 - a)
        else:
            dz = g * (a > 0)
        W = model.weights[k]
        dz2 = dz.reshape(-1, W.shape[-1])
        grads_w[k] = (entry["cols"].T @ dz2).reshape(W.shape)
        grads_b[k] = dz2.sum(axis=0)
        if k > 0:
            dcols = dz2 @ W.reshape(-1, W.shape[-1]).T
            g = _col2im(dcols, entry["shape"], kh, kw)
    return grads_w, grads_b


def loss_and_grads(model: AeModel, views: np.ndarray):
    """Mean squared reconstruction error of a batch and its parameter gradients."""
    cfg = model.config
    x = _prepare(model, views)
    y, cache = _forward(model, x, keep=True)
    diff = np.zeros_like(y)
    diff[:, : cfg.m, : cfg.w] = y[:, : cfg.m, : cfg.w] - x[:, : cfg.m, : cfg.w]
    count = x.shape[0] * cfg.m * cfg.w
    loss = float((diff.astype(np.float64) ** 2).sum() / count)
    gw, gb = _backward(model, cache, (2.0 / count) * diff)
    return loss, gw, gb


def reconstruct(model: AeModel, views: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Deterministic forward pass; accepts one m x w view or a (B, m, w) stack."""
    single = np.asarray(views).ndim == 2
    x = _prepare(model, views)
    cfg = model.config
    outs = []
    for s in range(0, x.shape[0], batch_size):
        y, _ = _forward(model, x[s : s + batch_size], keep=False)
        outs.append(y[:, : cfg.m, : cfg.w, 0])
    out = np.concatenate(outs) if outs else np.zeros((0, cfg.m, cfg.w), dtype=cfg.dtype)
    return out[0] if single else out


def loss_matrix(view: np.ndarray, reconstruction: np.ndarray) -> np.ndarray:
    a, b = np.asarray(view), np.asarray(reconstruction)
    if a.shape != b.shape:
        raise ShapeMismatch(f"view {a.shape} vs reconstruction {b.shape}")
    return np.abs(a.astype(np.float64) - b.astype(np.float64))


def mean_loss(model: AeModel, views: np.ndarray, batch_size: int = 256) -> float:
    rec = reconstruct(model, views, batch_size)
    d = rec.astype(np.float64) - np.asarray(views, dtype=np.float64)
    return float((d * d).mean())


# ---------------------------------------------------------------- training


class _Adam:
    def __init__(self, params: list[np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-7):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class _Momentum:
    def __init__(self, params: list[np.ndarray], lr: float, mu: float):
        self.lr, self.mu = lr, mu
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        for p, g, v in zip(params, grads, self.v):
            v *= self.mu
            v -= self.lr * g
            p += v


def train(
    model: AeModel,
    views: np.ndarray,
    val_views: np.ndarray | None = None,
    *,
    epochs: int | None = None,
) -> AeModel:
    """Mini-batch training on normal views, in place.

    Early stopping watches the validation loss (the training loss when no
    validation views are given) and restores the best weights seen.
    """
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    x = np.asarray(views, dtype=cfg.dtype)
    if epochs <= 0 or len(x) == 0:
        return model
    params = model.params()
    if cfg.optimizer == "adam":
        opt = _Adam(params, cfg.learning_rate)
    else:
        opt = _Momentum(params, cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng(cfg.seed + 1)
    best, best_params, stale = math.inf, None, 0
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for s in range(0, len(x), cfg.batch_size):
            batch = x[order[s : s + cfg.batch_size]]
            loss, gw, gb = loss_and_grads(model, batch)
            if not math.isfinite(loss):
                raise NonFiniteLoss(epoch)
            grads = []
            for a, b in zip(gw, gb):
                grads += [a, b]
            opt.step(params, grads)
            total += loss * len(batch)
        train_loss = total / len(x)
        if not math.isfinite(train_loss):
            raise NonFiniteLoss(epoch)
        model.training_history.append(train_loss)
        if val_views is not None and len(val_views):
            watched = mean_loss(model, val_views)
            model.validation_history.append(watched)
        else:
            watched = train_loss
        log.info("period %d epoch %d loss %.6g watch %.6g", model.period, epoch, train_loss, watched)
        if watched < best:
            best, stale = watched, 0
            best_params = [p.copy() for p in params]
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if best_params is not None:
        for p, q in zip(params, best_params):
            p[...] = q
    return model


# ------------------------------------------------------------- persistence


def save(model: AeModel, path: str | Path) -> None:
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<4I", cfg.m, cfg.w, model.period, len(model.weights)))
        for W in model.weights:
            fh.write(struct.pack("<4I", *W.shape))
        for W, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(W, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load(path: str | Path, config: AeConfig | None = None) -> AeModel:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ArtifactMismatch(f"{path}: not a model file")
    off = len(MAGIC)
    m, w, period, n = struct.unpack_from("<4I", data, off)
    off += 16
    specs = []
    for _ in range(n):
        specs.append(struct.unpack_from("<4I", data, off))
        off += 16
    kh, kw = specs[0][0], specs[0][1]
    filters = tuple(s[3] for s in specs)
    if config is None:
        config = AeConfig(m=m, w=w, filters=filters, kernel=(kh, kw))
    elif (config.m, config.w, tuple(config.filters), tuple(config.kernel)) != (m, w, filters, (kh, kw)):
        raise ArtifactMismatch(
            f"{path}: stored {m}x{w} filters={filters} kernel={(kh, kw)} does not match "
            f"config {config.m}x{config.w} filters={config.filters} kernel={config.kernel}"
        )
    weights, biases = [], []
    for shape in specs:
        size = int(np.prod(shape))
        weights.append(np.frombuffer(data, "<f4", size, off).reshape(shape).astype(config.dtype))
        off += 4 * size
        biases.append(np.frombuffer(data, "<f4", shape[3], off).astype(config.dtype))
        off += 4 * shape[3]
    if off != len(data):
        raise ArtifactMismatch(f"{path}: {len(data) - off} trailing bytes")
    return AeModel(config, period, weights, biases)


def train_many(
    config: AeConfig,
    periods: Sequence[int],
    views: dict[int, np.ndarray],
    val_views: dict[int, np.ndarray] | None = None,
) -> list[AeModel]:
    """One independently initialised and trained model per period."""
    models = []
    for t in periods:
        model = build(config, t)
        train(model, views[t], None if val_views is None else val_views.get(t))
        models.append(model)
    return models
