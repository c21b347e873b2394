"""A small frame classifier trained from scratch.

The network is a stack of dense layers (tanh hidden, identity output),
optionally with simple recurrence on hidden layers. Inputs are either a
spliced context window of feature frames (MLP mode) or single frames
unrolled through time (recurrent mode). Losses: hard cross-entropy against
delayed frame labels, and soft cross-entropy against sparse teacher targets
at a shared temperature. Gradients are analytic and finite-difference
checked; training is plain SGD with momentum, deterministic given its seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import SparseTargets
from .features import FeatureMatrix
from .seeding import derive_rng

__all__ = [
    "Layer",
    "NetParams",
    "TrainConfig",
    "DivergedTrainingError",
    "init_params",
    "window_features",
    "forward",
    "hard_ce_loss",
    "soft_ce_loss",
    "train",
    "save_model",
    "load_model",
    "flatten_params",
    "unflatten_params",
]

DNET_MAGIC = b"DNET"
DNET_VERSION = 1
_ACTIVATIONS = {"identity": 0, "tanh": 1}
_ACTIVATION_NAMES = {v: k for k, v in _ACTIVATIONS.items()}


class DivergedTrainingError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str
    recurrent: np.ndarray | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("weight must be (out, in) with a matching bias")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.recurrent is not None:
            if self.activation != "tanh":
                raise ValueError("recurrent layers must use tanh")
            self.recurrent = np.asarray(self.recurrent, dtype=np.float64)
            out = self.weight.shape[0]
            if self.recurrent.shape != (out, out):
                raise ValueError("recurrent matrix must be square (out, out)")

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "Layer":
        return Layer(
            self.weight.copy(),
            self.bias.copy(),
            self.activation,
            None if self.recurrent is None else self.recurrent.copy(),
        )


@dataclass
class NetParams:
    """Layer stack plus the input contract (context window, label delay).

    ``input_shift``/``input_scale`` are a fixed per-dimension affine applied
    to raw feature frames before windowing; features are stored raw, and the
    network front absorbs their scale. The affine is part of the model (it
    is serialized), not a trainable parameter.
    """

    layers: list[Layer]
    context: int = 0
    label_delay: int = 0
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    def __post_init__(self):
        if not self.layers:
            raise ValueError("need at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.in_dim != a.out_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if self.context < 0 or self.label_delay < 0:
            raise ValueError("context and label_delay must be non-negative")
        if (self.input_shift is None) != (self.input_scale is None):
            raise ValueError("input_shift and input_scale must be given together")
        if self.input_shift is not None:
            self.input_shift = np.asarray(self.input_shift, dtype=np.float64)
            self.input_scale = np.asarray(self.input_scale, dtype=np.float64)
            expected = self.input_dim // (2 * self.context + 1)
            if self.input_shift.shape != (expected,) or self.input_scale.shape != (expected,):
                raise ValueError(f"input affine must have {expected} entries per feature dim")
            if np.any(self.input_scale <= 0):
                raise ValueError("input_scale entries must be positive")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "NetParams":
        return NetParams(
            [l.copy() for l in self.layers],
            self.context,
            self.label_delay,
            None if self.input_shift is None else self.input_shift.copy(),
            None if self.input_scale is None else self.input_scale.copy(),
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    loss: str = "hard"
    temperature: float = 1.0

    def __post_init__(self):
        # 0 is allowed: it makes training an explicit no-op.
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.loss not in ("hard", "soft"):
            raise ValueError(f"loss must be 'hard' or 'soft', got {self.loss!r}")
        if self.loss == "soft" and not self.temperature > 0:
            raise ValueError("temperature must be positive for the soft loss")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


def init_params(
    feat_dim: int,
    hidden_dims: list[int],
    n_classes: int,
    context: int = 0,
    recurrent: bool = False,
    label_delay: int = 0,
    seed: int = 0,
    input_shift: np.ndarray | None = None,
    input_scale: np.ndarray | None = None,
) -> NetParams:
    """Random initialization: weights ~ N(0, 1/fan_in), zero biases.

    ``input_shift``/``input_scale`` (per feature dimension) become the
    model's fixed input affine; pass the training data's statistics so raw
    features arrive well-conditioned at the first layer.
    """
    rng = derive_rng(seed, "net-init")
    in_dim = feat_dim if recurrent else feat_dim * (2 * context + 1)
    layers = []
    prev = in_dim
    for h in hidden_dims:
        weight = rng.standard_normal((h, prev)) / np.sqrt(prev)
        rec = rng.standard_normal((h, h)) / (2.0 * np.sqrt(h)) if recurrent else None
        layers.append(Layer(weight, np.zeros(h), "tanh", rec))
        prev = h
    layers.append(Layer(rng.standard_normal((n_classes, prev)) / np.sqrt(prev), np.zeros(n_classes), "identity"))
    return NetParams(layers, context=0 if recurrent else context, label_delay=label_delay,
                     input_shift=input_shift, input_scale=input_scale)


def window_features(feats: np.ndarray, context: int) -> np.ndarray:
    """Splice [-context, +context] neighbor frames with edge replication."""
    feats = np.asarray(feats, dtype=np.float64)
    if context == 0 or feats.shape[0] == 0:
        return feats if context == 0 else np.zeros((0, feats.shape[1] * (2 * context + 1)))
    padded = np.pad(feats, ((context, context), (0, 0)), mode="edge")
    n = feats.shape[0]
    return np.concatenate([padded[i : i + n] for i in range(2 * context + 1)], axis=1)


def _as_array(feats) -> np.ndarray:
    if isinstance(feats, FeatureMatrix):
        return feats.frames
    return np.asarray(feats, dtype=np.float64)


def _net_input(params: NetParams, feats) -> np.ndarray:
    arr = _as_array(feats)
    if params.input_shift is not None and arr.shape[0]:
        arr = (arr - params.input_shift) / params.input_scale
    return window_features(arr, params.context)


def _forward_cached(params: NetParams, x: np.ndarray):
    """Run the stack, keeping every layer's input and post-activation output."""
    caches = []
    h = x
    for layer in params.layers:
        pre = h @ layer.weight.T + layer.bias
        if layer.recurrent is not None:
            out = np.empty_like(pre)
            state = np.zeros(layer.out_dim)
            for t in range(pre.shape[0]):
                state = np.tanh(pre[t] + layer.recurrent @ state)
                out[t] = state
        elif layer.activation == "tanh":
            out = np.tanh(pre)
        else:
            out = pre
        caches.append((h, out))
        h = out
    return h, caches


def forward(params: NetParams, feats) -> np.ndarray:
    """Per-frame logits, shape (n_frames, n_classes)."""
    x = _net_input(params, feats)
    if x.shape[0] == 0:
        return np.zeros((0, params.output_dim))
    if x.shape[1] != params.input_dim:
        raise ValueError(f"input dim {x.shape[1]} does not match network input {params.input_dim}")
    logits, _ = _forward_cached(params, x)
    return logits


def _backward(params: NetParams, caches, dout: np.ndarray) -> list[dict]:
    """Gradients for every layer given d(loss)/d(logits)."""
    grads = [None] * len(params.layers)
    grad_h = dout
    for li in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[li]
        inp, out = caches[li]
        if layer.recurrent is not None:
            # Backpropagation through time: d(pre_t) collects the chain from
            # above plus the recurrent path from t+1.
            dpre = np.zeros_like(out)
            carry = np.zeros(layer.out_dim)
            for t in range(out.shape[0] - 1, -1, -1):
                total = grad_h[t] + carry
                dpre[t] = total * (1.0 - out[t] ** 2)
                carry = layer.recurrent.T @ dpre[t]
            d_rec = np.zeros_like(layer.recurrent)
            if out.shape[0] > 1:
                d_rec = dpre[1:].T @ out[:-1]
            grads[li] = {"weight": dpre.T @ inp, "bias": dpre.sum(axis=0), "recurrent": d_rec}
            grad_h = dpre @ layer.weight
        else:
            dpre = grad_h * (1.0 - out**2) if layer.activation == "tanh" else grad_h
            grads[li] = {"weight": dpre.T @ inp, "bias": dpre.sum(axis=0), "recurrent": None}
            grad_h = dpre @ layer.weight
    return grads


def _log_softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    scaled = logits / temperature
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    return scaled - np.log(np.exp(scaled).sum(axis=1, keepdims=True))


def hard_ce_loss(logits: np.ndarray, labels: np.ndarray, label_delay: int = 0):
    """Mean cross-entropy of delayed labels; returns (loss, d(loss)/d(logits)).

    The network output at frame t is scored against the label of frame
    t - label_delay; the first label_delay frames carry no loss.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape[0] != n:
        raise ValueError("one label per frame required")
    if n - label_delay < 1:
        raise ValueError(f"need more than label_delay={label_delay} frames, got {n}")
    valid = n - label_delay
    z = logits[label_delay:]
    y = labels[:valid]
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise ValueError("label index out of range")
    logp = _log_softmax(z, 1.0)
    loss = float(-logp[np.arange(valid), y].mean())
    dvalid = np.exp(logp)
    dvalid[np.arange(valid), y] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[label_delay:] = dvalid / valid
    return loss, dlogits


def soft_ce_loss(student_logits: np.ndarray, targets: SparseTargets, temperature: float):
    """Cross-entropy against sparse teacher targets at a shared temperature.

    Teacher probabilities are the stored logits renormalized over the
    preserved set at ``temperature``; the student distribution is a full
    temperature softmax. Returns (loss, d(loss)/d(logits)).
    """
    z = np.asarray(student_logits, dtype=np.float64)
    n, n_classes = z.shape
    if len(targets) != n:
        raise ValueError(f"{len(targets)} target frames for {n} logit frames")
    if targets.k < 1:
        raise ValueError("targets must preserve at least one class per frame")
    if n == 0:
        return 0.0, np.zeros_like(z)
    if int(targets.indices.max()) >= n_classes:
        raise ValueError("target class index out of range")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    tl = targets.logits.astype(np.float64)
    tl = (tl - tl.max(axis=1, keepdims=True)) / temperature
    e = np.exp(tl)
    q = e / e.sum(axis=1, keepdims=True)
    logp = _log_softmax(z, temperature)
    picked = np.take_along_axis(logp, targets.indices, axis=1)
    loss = float(-(q * picked).sum(axis=1).mean())
    q_dense = np.zeros_like(z)
    np.put_along_axis(q_dense, targets.indices, q, axis=1)
    dlogits = (np.exp(logp) - q_dense) / (temperature * n)
    return loss, dlogits


def _loss_and_grads(params: NetParams, feats, target, cfg: TrainConfig):
    x = _net_input(params, feats)
    logits, caches = _forward_cached(params, x)
    if cfg.loss == "hard":
        loss, dlogits = hard_ce_loss(logits, target, params.label_delay)
    else:
        loss, dlogits = soft_ce_loss(logits, target, cfg.temperature)
    return loss, _backward(params, caches, dlogits)


def train(params: NetParams, dataset, cfg: TrainConfig):
    """SGD with momentum over utterance batches; returns (params, loss trace).

    ``dataset`` is a sequence of (features, target) pairs where the target is
    a frame-label array for the hard loss or :class:`SparseTargets` for the
    soft loss. The utterance order is reshuffled every epoch from cfg.seed;
    everything is deterministic given (params, dataset, cfg).
    """
    params = params.copy()
    velocity = [
        {
            "weight": np.zeros_like(l.weight),
            "bias": np.zeros_like(l.bias),
            "recurrent": None if l.recurrent is None else np.zeros_like(l.recurrent),
        }
        for l in params.layers
    ]
    trace = []
    for epoch in range(cfg.epochs):
        order = derive_rng(cfg.seed, "epoch-shuffle", epoch).permutation(len(dataset))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            acc = None
            for utt_idx in batch:
                feats, target = dataset[utt_idx]
                loss, grads = _loss_and_grads(params, feats, target, cfg)
                if not np.isfinite(loss):
                    raise DivergedTrainingError(f"non-finite loss at epoch {epoch}")
                epoch_loss += loss
                if acc is None:
                    acc = grads
                else:
                    for a, g in zip(acc, grads):
                        a["weight"] += g["weight"]
                        a["bias"] += g["bias"]
                        if a["recurrent"] is not None:
                            a["recurrent"] += g["recurrent"]
            scale = 1.0 / len(batch)
            for layer, vel, g in zip(params.layers, velocity, acc):
                for key in ("weight", "bias", "recurrent"):
                    if vel[key] is None:
                        continue
                    vel[key] *= cfg.momentum
                    vel[key] -= cfg.learning_rate * scale * g[key]
                    attr = getattr(layer, key)
                    attr += vel[key]
        trace.append(epoch_loss / max(len(dataset), 1))
    return params, trace


def flatten_params(params: NetParams) -> np.ndarray:
    chunks = []
    for layer in params.layers:
        chunks.append(layer.weight.ravel())
        chunks.append(layer.bias.ravel())
        if layer.recurrent is not None:
            chunks.append(layer.recurrent.ravel())
    return np.concatenate(chunks)


def unflatten_params(params: NetParams, vector: np.ndarray) -> NetParams:
    out = params.copy()
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        chunk = vector[pos : pos + size].reshape(shape)
        pos += size
        return chunk.copy()

    for layer in out.layers:
        layer.weight = take(layer.weight.shape)
        layer.bias = take(layer.bias.shape)
        if layer.recurrent is not None:
            layer.recurrent = take(layer.recurrent.shape)
    if pos != vector.shape[0]:
        raise ValueError("parameter vector length mismatch")
    return out


def save_model(path: str | Path, params: NetParams, manifest: dict | None = None) -> None:
    """Write the DNET binary plus an optional JSON sidecar manifest."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(DNET_MAGIC)
        f.write(struct.pack("<HHHH", DNET_VERSION, len(params.layers), params.label_delay, params.context))
        for layer in params.layers:
            f.write(
                struct.pack(
                    "<IIBB",
                    layer.in_dim,
                    layer.out_dim,
                    _ACTIVATIONS[layer.activation],
                    0 if layer.recurrent is None else 1,
                )
            )
        if params.input_shift is None:
            f.write(struct.pack("<BI", 0, 0))
        else:
            f.write(struct.pack("<BI", 1, params.input_shift.shape[0]))
            f.write(np.ascontiguousarray(params.input_shift, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(params.input_scale, dtype="<f8").tobytes())
        for layer in params.layers:
            f.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
            if layer.recurrent is not None:
                f.write(np.ascontiguousarray(layer.recurrent, dtype="<f8").tobytes())
    if manifest is not None:
        with open(path.with_suffix(path.suffix + ".json"), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")


def load_model(path: str | Path) -> tuple[NetParams, dict | None]:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DNET_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, n_layers, label_delay, context = struct.unpack("<HHHH", f.read(8))
        if version != DNET_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        specs = [struct.unpack("<IIBB", f.read(10)) for _ in range(n_layers)]
        has_affine, affine_dim = struct.unpack("<BI", f.read(5))
        input_shift = input_scale = None
        if has_affine:
            input_shift = np.frombuffer(f.read(8 * affine_dim), dtype="<f8").copy()
            input_scale = np.frombuffer(f.read(8 * affine_dim), dtype="<f8").copy()
        layers = []
        for in_dim, out_dim, act, rec in specs:
            weight = np.frombuffer(f.read(8 * in_dim * out_dim), dtype="<f8").reshape(out_dim, in_dim)
            bias = np.frombuffer(f.read(8 * out_dim), dtype="<f8")
            recurrent = None
            if rec:
                recurrent = np.frombuffer(f.read(8 * out_dim * out_dim), dtype="<f8").reshape(out_dim, out_dim)
            layers.append(Layer(weight.copy(), bias.copy(), _ACTIVATION_NAMES[act], None if recurrent is None else recurrent.copy()))
    sidecar = path.with_suffix(path.suffix + ".json")
    manifest = None
    if sidecar.exists():
        with open(sidecar) as f:
            manifest = json.load(f)
    return NetParams(layers, context=context, label_delay=label_delay,
                     input_shift=input_shift, input_scale=input_scale), manifest
