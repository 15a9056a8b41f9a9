"""Small classifiers (MLP for vector data, two-conv CNN for images).

Models expose two heads: ``forward`` (post-softmax class distribution) and
``features`` (penultimate activations, pre-softmax). Training is plain SGD
with seeded init and shuffling, so identical (dataset, arch, cfg) always
reproduces bit-identical parameters.
"""

from __future__ import annotations

import hashlib
import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"MUCKPT01"


class TrainingDiverged(RuntimeError):
    """Raised when the training loss turns NaN/Inf."""


@dataclass
class TrainConfig:
    lr: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    augment: bool = False  # reserved knob; no augmentation at desk scale

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamContainer:
    """Anything with an arch descriptor and a flat parameter list."""

    def __init__(self, arch: dict):
        self.arch = arch
        self.params: list[Tensor] = []

    def _param(self, data: np.ndarray) -> Tensor:
        p = Tensor(data, requires_grad=True)
        self.params.append(p)
        return p

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params)

    def copy(self):
        clone = build_model(self.arch, seed=0)
        for dst, src in zip(clone.params, self.params):
            dst.data = src.data.copy()
        return clone

    def set_params(self, arrays: list[np.ndarray]) -> None:
        if len(arrays) != len(self.params):
            raise ValueError(f"expected {len(self.params)} arrays, got {len(arrays)}")
        for p, a in zip(self.params, arrays):
            if p.data.shape != a.shape:
                raise ValueError(f"parameter shape {p.data.shape} vs checkpoint {a.shape}")
            p.data = np.asarray(a, dtype=np.float64).copy()


class Classifier(ParamContainer):
    """Base: parameter list + arch descriptor + the two heads."""

    def __init__(self, arch: dict):
        super().__init__(arch)
        self.train_losses: list[float] = []

    @property
    def num_classes(self) -> int:
        return int(self.arch["classes"])

    def features(self, x) -> Tensor:
        raise NotImplementedError

    def logits(self, x) -> Tensor:
        raise NotImplementedError

    def forward(self, x) -> Tensor:
        return T.softmax(self.logits(x), axis=-1)

    @property
    def penultimate_width(self) -> int:
        raise NotImplementedError


class MLPClassifier(Classifier):
    """Fully connected ReLU stack; widths = [input, hidden..., classes]."""

    def __init__(self, arch: dict, seed: int = 0):
        super().__init__(arch)
        widths = list(arch["widths"])
        if len(widths) < 2:
            raise ValueError(f"mlp widths need at least [input, classes], got {widths}")
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            self.weights.append(self._param(he_uniform(rng, (fan_in, fan_out), fan_in)))
            self.biases.append(self._param(np.zeros(fan_out)))

    @property
    def penultimate_width(self) -> int:
        return int(self.arch["widths"][-2])

    def features(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        if h.data.ndim != 2 or h.data.shape[1] != self.arch["widths"][0]:
            raise T.ShapeMismatch(
                f"mlp input shape {h.data.shape}, expected (batch, {self.arch['widths'][0]})"
            )
        for wt, bt in zip(self.weights[:-1], self.biases[:-1]):
            h = T.relu(T.matmul(h, wt) + bt)
        return h

    def logits(self, x) -> Tensor:
        return T.matmul(self.features(x), self.weights[-1]) + self.biases[-1]


class ConvClassifier(Classifier):
    """Two conv layers (3x3 same, 2x2 maxpool each) then a dense stack.

    Default descriptor matches conv channels (16, 32) and dense widths
    (256, 128, classes) on 28x28 inputs.
    """

    def __init__(self, arch: dict, seed: int = 0):
        super().__init__(arch)
        cin = int(arch["in_channels"])
        h, w = arch["hw"]
        c1, c2 = arch["conv"]
        k = int(arch.get("kernel", 3))
        fc1, fc2 = arch["fc"]
        classes = int(arch["classes"])
        if h % 4 or w % 4:
            raise ValueError(f"conv model needs spatial dims divisible by 4, got {(h, w)}")
        rng = np.random.default_rng(seed)
        self.w1 = self._param(he_uniform(rng, (c1, cin, k, k), cin * k * k))
        self.b1 = self._param(np.zeros(c1))
        self.w2 = self._param(he_uniform(rng, (c2, c1, k, k), c1 * k * k))
        self.b2 = self._param(np.zeros(c2))
        flat = c2 * (h // 4) * (w // 4)
        self.wf1 = self._param(he_uniform(rng, (flat, fc1), flat))
        self.bf1 = self._param(np.zeros(fc1))
        self.wf2 = self._param(he_uniform(rng, (fc1, fc2), fc1))
        self.bf2 = self._param(np.zeros(fc2))
        self.wout = self._param(he_uniform(rng, (fc2, classes), fc2))
        self.bout = self._param(np.zeros(classes))
        self._flat = flat

    @property
    def penultimate_width(self) -> int:
        return int(self.arch["fc"][1])

    def features(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(x)
        cin = int(self.arch["in_channels"])
        h, w = self.arch["hw"]
        if t.data.ndim != 4 or t.data.shape[1:] != (cin, h, w):
            raise T.ShapeMismatch(
                f"cnn input shape {t.data.shape}, expected (batch, {cin}, {h}, {w})"
            )
        t = T.maxpool2d(T.relu(T.conv2d(t, self.w1, self.b1, padding="same")))
        t = T.maxpool2d(T.relu(T.conv2d(t, self.w2, self.b2, padding="same")))
        t = T.reshape(t, (t.data.shape[0], self._flat))
        t = T.relu(T.matmul(t, self.wf1) + self.bf1)
        return T.relu(T.matmul(t, self.wf2) + self.bf2)

    def logits(self, x) -> Tensor:
        return T.matmul(self.features(x), self.wout) + self.bout


_BUILDERS: dict[str, type] = {}


def register_builder(kind: str, cls) -> None:
    _BUILDERS[kind] = cls


register_builder("mlp", MLPClassifier)
register_builder("cnn", ConvClassifier)


def build_model(arch: dict, seed: int = 0):
    kind = arch.get("kind")
    if kind not in _BUILDERS:
        raise ValueError(f"unknown model kind {kind!r}")
    return _BUILDERS[kind](arch, seed=seed)


def mlp_arch(input_dim: int, hidden: list[int], classes: int) -> dict:
    return {"kind": "mlp", "widths": [input_dim, *hidden, classes], "classes": classes}


def cnn_arch(in_channels: int = 1, hw=(28, 28), conv=(16, 32), fc=(256, 128), classes: int = 10) -> dict:
    return {
        "kind": "cnn",
        "in_channels": in_channels,
        "hw": list(hw),
        "conv": list(conv),
        "fc": list(fc),
        "classes": classes,
        "kernel": 3,
    }


# ------------------------------------------------------------- optimization


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def sgd_step(params, lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad


@contextmanager
def frozen(model_or_params):
    """Temporarily clear requires_grad so no gradients land on these params."""
    params = model_or_params.params if hasattr(model_or_params, "params") else list(model_or_params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Mean cross-entropy from logits (log-softmax inside, stable)."""
    logp = T.log_softmax(logits, axis=-1)
    return -T.tsum(T.mul(logp, onehot)) / onehot.shape[0]


def train_classifier(dataset, arch: dict, cfg: TrainConfig):
    """Train a fresh classifier; deterministic given (dataset, arch, cfg)."""
    cfg.validate()
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    classes = int(arch["classes"])
    if dataset.labels.min() < 0 or dataset.labels.max() >= classes:
        raise ValueError(f"labels outside [0, {classes})")
    model = build_model(arch, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    targets = one_hot(dataset.labels, classes)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss = cross_entropy(model.logits(dataset.inputs[idx]), targets[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"loss became {value} at epoch {epoch}, batch offset {start} (lr={cfg.lr})"
                )
            zero_grads(model.params)
            loss.backward()
            sgd_step(model.params, cfg.lr)
            epoch_loss += value * len(idx)
        model.train_losses.append(epoch_loss / n)
    return model


# --------------------------------------------------------------- inference


def predict_probs(model, inputs: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Class distributions for a batch of inputs, no graph recorded."""
    out = []
    with T.no_grad():
        for start in range(0, len(inputs), batch_size):
            out.append(model.forward(inputs[start : start + batch_size]).data)
    return np.concatenate(out, axis=0)


def predict_features(model, inputs: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(inputs), batch_size):
            out.append(model.features(inputs[start : start + batch_size]).data)
    return np.concatenate(out, axis=0)


def param_hash(model_or_params) -> str:
    """SHA-256 over raw parameter bytes; detects any mutation."""
    params = model_or_params.params if hasattr(model_or_params, "params") else list(model_or_params)
    h = hashlib.sha256()
    for p in params:
        h.update(p.data.tobytes())
    return h.hexdigest()


# -------------------------------------------------------------- checkpoints


def save_checkpoint(obj, path) -> None:
    """Binary container: magic, json header (arch + shapes), raw float64 data."""
    header = {
        "arch": obj.arch,
        "shapes": [list(p.data.shape) for p in obj.params],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack(">I", len(blob)))
        f.write(blob)
        for p in obj.params:
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} in {path}")
        (hlen,) = struct.unpack(">I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        arch = header["arch"]
        obj = build_model(arch, seed=0)
        arrays = []
        for shape in header["shapes"]:
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"truncated checkpoint {path}")
            arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
        obj.set_params(arrays)
        return obj
