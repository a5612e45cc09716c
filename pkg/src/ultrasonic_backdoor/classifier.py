"""Numpy classifiers over MFCC matrices: a small CNN and a linear-softmax baseline.

Everything is channels-last: inputs are (batch, frames, coeffs) and become
(batch, frames, coeffs, 1) inside the CNN.  Convolutions are 'valid' with
stride 1, computed as im2col matrix products.  Training is deterministic
for a given seed: parameter init, per-epoch batch order and dropout masks all come
from numpy PCG64 streams derived from ``TrainConfig.seed``.
"""

from __future__ import annotations

import enum
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from types import MappingProxyType

import numpy as np

from .errors import CheckpointError, EvaluationError, ShapeError, TrainingDivergedError
from .features import FeatureMatrix

log = logging.getLogger(__name__)


class Architecture(str, enum.Enum):
    SMALL_CONV = "small_conv"
    LINEAR_SOFTMAX = "linear_softmax"


@dataclass(frozen=True)
class ConvBlock:
    filters: int
    kernel: int = 3
    pool: int = 2


@dataclass(frozen=True)
class ModelConfig:
    architecture: Architecture = Architecture.SMALL_CONV
    n_classes: int = 10
    input_shape: tuple[int, int] = (98, 40)
    conv_blocks: tuple[ConvBlock, ...] = (ConvBlock(8), ConvBlock(16))
    hidden_units: int = 16
    dropout_pre_flatten: float = 0.5
    dropout_penultimate: float = 0.4
    l2_lambda: float = 1e-4
    standardize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture(self.architecture))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(
            self,
            "conv_blocks",
            tuple(b if isinstance(b, ConvBlock) else ConvBlock(**b) for b in self.conv_blocks),
        )
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if min(self.input_shape) < 1:
            raise ValueError("input dimensions must be positive")
        for p in (self.dropout_pre_flatten, self.dropout_penultimate):
            if not 0.0 <= p < 1.0:
                raise ValueError(f"dropout rate {p} outside [0, 1)")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be nonnegative")
        if self.architecture is Architecture.SMALL_CONV:
            if self.hidden_units < 1 or not self.conv_blocks:
                raise ValueError("small_conv needs conv blocks and hidden units")
            h, w = self.input_shape
            for b in self.conv_blocks:
                if min(b.filters, b.kernel, b.pool) < 1:
                    raise ValueError(f"invalid conv block {b}")
                h, w = (h - b.kernel + 1) // b.pool, (w - b.kernel + 1) // b.pool
                if h < 1 or w < 1:
                    raise ValueError(f"input {self.input_shape} too small for {self.conv_blocks}")

    def conv_output_shape(self) -> tuple[int, int, int]:
        h, w = self.input_shape
        for b in self.conv_blocks:
            h, w = (h - b.kernel + 1) // b.pool, (w - b.kernel + 1) // b.pool
        return h, w, self.conv_blocks[-1].filters

    def to_dict(self) -> dict:
        d = asdict(self)
        d["architecture"] = self.architecture.value
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"  # or "sgd" (plain gradient descent)
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 300
    early_stop_patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        if self.max_epochs and self.early_stop_patience >= self.max_epochs:
            raise ValueError("early_stop_patience must be smaller than max_epochs")
        if self.learning_rate <= 0 or self.early_stop_patience < 0:
            raise ValueError("learning_rate must be positive and early_stop_patience nonnegative")


@dataclass(frozen=True)
class EpochRecord:
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass(frozen=True, eq=False)
class TrainedModel:
    params: MappingProxyType
    config: ModelConfig
    history: tuple[EpochRecord, ...] = ()
    best_epoch: int | None = None
    train_config: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        frozen = {}
        for name, arr in dict(self.params).items():
            arr = np.array(arr)
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "params", MappingProxyType(frozen))

    @property
    def epochs_run(self) -> int:
        return len(self.history)

    def n_trainable(self) -> int:
        return sum(v.size for k, v in self.params.items() if k not in NON_TRAINABLE)


NON_TRAINABLE = ("input_mean", "input_std")


# ---------------------------------------------------------------- parameters

def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform kernels and zero biases (the TensorFlow/Keras defaults)."""
    frames, coeffs = cfg.input_shape
    params = {
        "input_mean": np.zeros(coeffs, dtype=dtype),
        "input_std": np.ones(coeffs, dtype=dtype),
    }

    def glorot(shape, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape).astype(dtype)

    if cfg.architecture is Architecture.LINEAR_SOFTMAX:
        n_in = frames * coeffs
        params["out.kernel"] = glorot((n_in, cfg.n_classes), n_in, cfg.n_classes)
        params["out.bias"] = np.zeros(cfg.n_classes, dtype=dtype)
        return params

    c_in = 1
    for i, b in enumerate(cfg.conv_blocks):
        area = b.kernel * b.kernel
        params[f"conv{i}.kernel"] = glorot((b.kernel, b.kernel, c_in, b.filters), area * c_in, area * b.filters)
        params[f"conv{i}.bias"] = np.zeros(b.filters, dtype=dtype)
        c_in = b.filters
    n_flat = int(np.prod(cfg.conv_output_shape()))
    params["hidden.kernel"] = glorot((n_flat, cfg.hidden_units), n_flat, cfg.hidden_units)
    params["hidden.bias"] = np.zeros(cfg.hidden_units, dtype=dtype)
    params["out.kernel"] = glorot((cfg.hidden_units, cfg.n_classes), cfg.hidden_units, cfg.n_classes)
    params["out.bias"] = np.zeros(cfg.n_classes, dtype=dtype)
    return params


def fit_standardizer(params: dict, x: np.ndarray) -> None:
    """Per-coefficient mean/std over all training frames, stored in ``params``."""
    dtype = params["input_mean"].dtype
    flat = x.reshape(-1, x.shape[-1]).astype(np.float64)
    params["input_mean"] = flat.mean(axis=0).astype(dtype)
    params["input_std"] = np.maximum(flat.std(axis=0), 1e-6).astype(dtype)


# ---------------------------------------------------------------- layers

def im2col(x, k):
    """(n, h, w, c) -> (n*ho*wo, k*k*c) patches ordered (row offset, col offset, channel)."""
    n, h, w, c = x.shape
    ho, wo = h - k + 1, w - k + 1
    cols = np.empty((n, ho, wo, k * k * c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            o = (i * k + j) * c
            cols[..., o:o + c] = x[:, i:i + ho, j:j + wo, :]
    return cols.reshape(n * ho * wo, k * k * c)


def conv_forward(x, kernel, bias):
    """Valid 2-D cross-correlation via im2col and a single matrix product."""
    k, _, c_in, c_out = kernel.shape
    n, h, w, _ = x.shape
    cols = im2col(x, k)
    out = cols @ kernel.reshape(k * k * c_in, c_out) + bias
    return out.reshape(n, h - k + 1, w - k + 1, c_out), (cols, x.shape)


def conv_backward(dout, saved, kernel, need_dx=True):
    cols, in_shape = saved
    k, _, c_in, c_out = kernel.shape
    _, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, c_out)
    dkernel = (cols.T @ d2).reshape(kernel.shape)
    dbias = d2.sum(axis=0)
    if not need_dx:
        return None, dkernel, dbias
    dcols = (d2 @ kernel.reshape(k * k * c_in, c_out).T).reshape(in_shape[0], ho, wo, k * k * c_in)
    dx = np.zeros(in_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            o = (i * k + j) * c_in
            dx[:, i:i + ho, j:j + wo, :] += dcols[..., o:o + c_in]
    return dx, dkernel, dbias


def pool_forward(x, p):
    """Non-overlapping p x p max-pool; ragged edges are dropped."""
    n, h, w, c = x.shape
    ho, wo = h // p, w // p
    views = [x[:, i:ho * p:p, j:wo * p:p, :] for i in range(p) for j in range(p)]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    return out, (x, out)


def pool_backward(dout, saved, p):
    # gradient goes to the first position (row-major within the window) holding the max
    x, out = saved
    n, h, w, c = x.shape
    ho, wo = out.shape[1], out.shape[2]
    dx = np.zeros_like(x)
    taken = np.zeros(out.shape, dtype=bool)
    for i in range(p):
        for j in range(p):
            hit = (x[:, i:ho * p:p, j:wo * p:p, :] == out) & ~taken
            taken |= hit
            dx[:, i:ho * p:p, j:wo * p:p, :] = dout * hit
    return dx


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- network

def make_dropout_masks(cfg: ModelConfig, batch: int, rng: np.random.Generator, dtype=np.float32):
    """Inverted-dropout masks for one training batch (None for linear models)."""
    if cfg.architecture is Architecture.LINEAR_SOFTMAX:
        return None
    masks = {}
    for name, rate, shape in (
        ("pre_flatten", cfg.dropout_pre_flatten, (batch, *cfg.conv_output_shape())),
        ("penultimate", cfg.dropout_penultimate, (batch, cfg.hidden_units)),
    ):
        keep = rng.random(shape) >= rate
        masks[name] = (keep / (1.0 - rate)).astype(dtype)
    return masks


def forward(params, cfg: ModelConfig, x, masks=None):
    """Logits for a batch; ``masks`` switches dropout on (training mode)."""
    dtype = params["out.kernel"].dtype
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 3 or x.shape[1:] != cfg.input_shape:
        raise ShapeError(f"expected (batch, {cfg.input_shape[0]}, {cfg.input_shape[1]}), got {x.shape}")
    cache = {}
    if cfg.standardize:
        x = (x - params["input_mean"]) / params["input_std"]
    if cfg.architecture is Architecture.LINEAR_SOFTMAX:
        flat = x.reshape(x.shape[0], -1)
        cache["flat"] = flat
        return flat @ params["out.kernel"] + params["out.bias"], cache

    a = x[..., None]
    for i, b in enumerate(cfg.conv_blocks):
        z, cache[f"conv{i}.in"] = conv_forward(a, params[f"conv{i}.kernel"], params[f"conv{i}.bias"])
        r = np.maximum(z, 0)
        cache[f"conv{i}.relu"] = z > 0
        a, cache[f"pool{i}"] = pool_forward(r, b.pool)
    if masks is not None:
        a = a * masks["pre_flatten"]
    cache["pooled_shape"] = a.shape
    flat = a.reshape(a.shape[0], -1)
    cache["flat"] = flat
    hz = flat @ params["hidden.kernel"] + params["hidden.bias"]
    cache["hidden.relu"] = hz > 0
    h = np.maximum(hz, 0)
    if masks is not None:
        h = h * masks["penultimate"]
    cache["hidden"] = h
    cache["masks"] = masks
    return h @ params["out.kernel"] + params["out.bias"], cache


def backward(params, cfg: ModelConfig, cache, dlogits):
    grads = {"out.bias": dlogits.sum(axis=0)}
    if cfg.architecture is Architecture.LINEAR_SOFTMAX:
        grads["out.kernel"] = cache["flat"].T @ dlogits
        return grads

    h = cache["hidden"]
    grads["out.kernel"] = h.T @ dlogits
    dh = dlogits @ params["out.kernel"].T
    masks = cache["masks"]
    if masks is not None:
        dh = dh * masks["penultimate"]
    dh = dh * cache["hidden.relu"]
    grads["hidden.kernel"] = cache["flat"].T @ dh
    grads["hidden.bias"] = dh.sum(axis=0)
    da = (dh @ params["hidden.kernel"].T).reshape(cache["pooled_shape"])
    if masks is not None:
        da = da * masks["pre_flatten"]
    for i in reversed(range(len(cfg.conv_blocks))):
        b = cfg.conv_blocks[i]
        dr = pool_backward(da, cache[f"pool{i}"], b.pool)
        dz = dr * cache[f"conv{i}.relu"]
        da, grads[f"conv{i}.kernel"], grads[f"conv{i}.bias"] = conv_backward(
            dz, cache[f"conv{i}.in"], params[f"conv{i}.kernel"], need_dx=i > 0
        )
    return grads


def l2_penalty(params, cfg: ModelConfig) -> float:
    return cfg.l2_lambda * sum(
        float(np.sum(params[f"conv{i}.kernel"].astype(np.float64) ** 2))
        for i in range(len(cfg.conv_blocks))
        if f"conv{i}.kernel" in params
    )


def loss_and_grads(params, cfg: ModelConfig, x, y, masks=None):
    """Mean cross-entropy plus L2 on conv kernels, and its gradients."""
    logits, cache = forward(params, cfg, x, masks)
    probs = softmax(logits)
    n = logits.shape[0]
    ce = -np.mean(np.log(np.maximum(probs[np.arange(n), y], np.finfo(probs.dtype).tiny)))
    dlogits = probs
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = backward(params, cfg, cache, dlogits)
    for name in grads:
        if name.startswith("conv") and name.endswith(".kernel"):
            grads[name] = grads[name] + 2.0 * cfg.l2_lambda * params[name]
    return float(ce) + l2_penalty(params, cfg), grads


def dataset_loss(params, cfg: ModelConfig, x, y, batch_size: int = 256) -> tuple[float, float]:
    """(loss, accuracy) in inference mode; loss includes the L2 term."""
    total, correct = 0.0, 0
    for s in range(0, x.shape[0], batch_size):
        logits, _ = forward(params, cfg, x[s:s + batch_size])
        logp = logits - logits.max(axis=-1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
        yb = y[s:s + batch_size]
        total += float(-logp[np.arange(yb.shape[0]), yb].astype(np.float64).sum())
        correct += int((logits.argmax(axis=-1) == yb).sum())
    return total / x.shape[0] + l2_penalty(params, cfg), correct / x.shape[0]


# ---------------------------------------------------------------- training

class Adam:
    def __init__(self, params, tcfg: TrainConfig):
        self.cfg = tcfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items() if k not in NON_TRAINABLE}
        self.v = {k: np.zeros_like(v) for k, v in params.items() if k not in NON_TRAINABLE}

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            params[k] = (params[k] - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.epsilon)).astype(params[k].dtype)


def _streams(seed: int):
    init_ss, data_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.PCG64(init_ss)), np.random.Generator(np.random.PCG64(data_ss))


def _check_inputs(cfg: ModelConfig, x, y, what: str):
    if x.ndim != 3 or x.shape[1:] != cfg.input_shape:
        raise ShapeError(f"{what} features have shape {x.shape}, model expects (N, {cfg.input_shape})")
    if y.shape != (x.shape[0],):
        raise ShapeError(f"{what} labels have shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= cfg.n_classes):
        raise ValueError(f"{what} labels must lie in [0, {cfg.n_classes})")


def train(
    train_features,
    train_labels,
    val_features,
    val_labels,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    callback=None,
) -> TrainedModel:
    """Mini-batch training with early stopping on validation loss.

    The weights of the epoch with the lowest validation loss are returned.
    ``callback(epoch, record)`` is called after every epoch.
    """
    x = np.asarray(train_features, dtype=np.float32)
    y = np.asarray(train_labels, dtype=np.int64)
    xv = np.asarray(val_features, dtype=np.float32)
    yv = np.asarray(val_labels, dtype=np.int64)
    _check_inputs(mcfg, x, y, "train")
    _check_inputs(mcfg, xv, yv, "validation")
    if x.shape[0] == 0 or xv.shape[0] == 0:
        raise ValueError("training and validation sets must be non-empty")

    init_rng, data_rng = _streams(tcfg.seed)
    params = init_params(mcfg, init_rng)
    if mcfg.standardize:
        fit_standardizer(params, x)
    opt = Adam(params, tcfg) if tcfg.optimizer == "adam" else None

    history: list[EpochRecord] = []
    best_loss, best_epoch, best_params = np.inf, None, dict(params)
    wait = 0
    n = x.shape[0]
    for epoch in range(tcfg.max_epochs):
        order = data_rng.permutation(n)
        batch_losses = []
        for s in range(0, n, tcfg.batch_size):
            idx = order[s:s + tcfg.batch_size]
            masks = make_dropout_masks(mcfg, idx.shape[0], data_rng)
            loss, grads = loss_and_grads(params, mcfg, x[idx], y[idx], masks)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            batch_losses.append(loss * idx.shape[0])
            if opt is not None:
                opt.step(params, grads)
            else:
                for k, g in grads.items():
                    params[k] = (params[k] - tcfg.learning_rate * g).astype(params[k].dtype)
        train_loss = float(np.sum(batch_losses) / n)
        val_loss, val_acc = dataset_loss(params, mcfg, xv, yv)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch, "validation loss became non-finite")
        rec = EpochRecord(train_loss, val_loss, val_acc)
        history.append(rec)
        if callback is not None:
            callback(epoch, rec)
        if val_loss < best_loss:
            best_loss, best_epoch, best_params = val_loss, epoch, {k: v.copy() for k, v in params.items()}
            wait = 0
        else:
            wait += 1
            if wait >= tcfg.early_stop_patience:
                log.debug("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    return TrainedModel(best_params, mcfg, tuple(history), best_epoch, tcfg)


# ---------------------------------------------------------------- inference

def _as_batch(model: TrainedModel, features) -> np.ndarray:
    if isinstance(features, FeatureMatrix):
        features = features.frames
    x = np.asarray(features)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != model.config.input_shape:
        raise ShapeError(f"features of shape {x.shape[-2:]} do not match model input {model.config.input_shape}")
    return x


def predict_proba(model: TrainedModel, features, batch_size: int = 256) -> np.ndarray:
    """Class probabilities for a batch (N, frames, coeffs); dropout is off."""
    x = _as_batch(model, features)
    out = [softmax(forward(model.params, model.config, x[s:s + batch_size])[0].astype(np.float64))
           for s in range(0, x.shape[0], batch_size)]
    if not out:
        return np.zeros((0, model.config.n_classes))
    return np.concatenate(out)


def predict(model: TrainedModel, features) -> np.ndarray:
    """Probability vector for one FeatureMatrix (or a batch of them)."""
    probs = predict_proba(model, features)
    single = isinstance(features, FeatureMatrix) or np.asarray(features).ndim == 2
    return probs[0] if single else probs


def predict_classes(model: TrainedModel, features) -> np.ndarray:
    return predict_proba(model, features).argmax(axis=-1)


def evaluate_accuracy(model: TrainedModel, features, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EvaluationError("cannot evaluate accuracy on an empty set")
    return float(np.mean(predict_classes(model, features) == labels))


# ---------------------------------------------------------------- checkpoints
#
# magic(8) | u32 version | u32 meta_len | meta JSON (utf-8) | u32 n_tensors |
# per tensor: u16 name_len | name | u8 ndim | u32 dims... | little-endian float32 data

MAGIC = b"UBDMODEL"
VERSION = 1


def save_model(model: TrainedModel, path: str | Path) -> None:
    meta = {
        "config": model.config.to_dict(),
        "train_config": asdict(model.train_config),
        "history": [asdict(r) for r in model.history],
        "best_epoch": model.best_epoch,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(model.params))]
    for name, arr in model.params.items():
        raw = name.encode()
        data = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path: str | Path) -> TrainedModel:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a model checkpoint")
    try:
        version, meta_len = struct.unpack_from("<II", data, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 16
        meta = json.loads(data[pos:pos + meta_len])
        pos += meta_len
        (n_tensors,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = {}
        for _ in range(n_tensors):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            count = int(np.prod(shape))
            params[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    cfg = meta["config"]
    cfg["conv_blocks"] = tuple(ConvBlock(**b) for b in cfg["conv_blocks"])
    return TrainedModel(
        params,
        ModelConfig(**cfg),
        tuple(EpochRecord(**r) for r in meta["history"]),
        meta["best_epoch"],
        TrainConfig(**meta["train_config"]),
    )
