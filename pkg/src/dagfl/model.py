"""Numpy model engine: weights, deterministic SGD, evaluation, aggregation.

Everything here is float64 and single-threaded in the Python sense; training
is a pure function of (start weights, settings, data), which is what lets a
verifier replay someone else's training step for step.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .crypto import hash_bytes
from .dataset import Dataset


class ShapeMismatch(ValueError):
    pass


class AggregationError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class ModelWeights:
    """Ordered named tensors. Treated as immutable once built."""

    __slots__ = ("tensors",)

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self.tensors.items())
        return f"ModelWeights({shapes})"

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(v.shape) for v in self.tensors.values()]

    @property
    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def same_layout(self, other: "ModelWeights") -> bool:
        return self.names == other.names and self.shapes == other.shapes

    def flat(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def unflatten(self, vec: np.ndarray) -> "ModelWeights":
        out, pos = {}, 0
        for k, v in self.tensors.items():
            out[k] = np.asarray(vec[pos:pos + v.size], dtype=np.float64).reshape(v.shape).copy()
            pos += v.size
        return ModelWeights(out)

    def copy(self) -> "ModelWeights":
        return ModelWeights({k: v.copy() for k, v in self.tensors.items()})

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def to_bytes(self) -> bytes:
        """Shape header (one JSON line) followed by little-endian float64 values."""
        header = json.dumps([[k, list(v.shape)] for k, v in self.tensors.items()]).encode()
        return header + b"\n" + self.flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelWeights":
        head, _, body = blob.partition(b"\n")
        layout = json.loads(head)
        vec = np.frombuffer(body, dtype="<f8")
        out, pos = {}, 0
        for name, shape in layout:
            n = int(np.prod(shape)) if shape else 1
            out[name] = vec[pos:pos + n].reshape(shape).copy()
            pos += n
        if pos != len(vec):
            raise ValueError("weight blob length does not match its header")
        return cls(out)

    def digest(self) -> bytes:
        return hash_bytes(self.to_bytes())


@dataclass(frozen=True)
class TrainingSettings:
    epochs: int = 5
    lr: float = 0.002
    batch_size: int = 100
    seed: int = 0
    optimizer: str = "sgd"
    max_steps: int | None = None  # 0 forces an empty schedule

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError(f"invalid training settings {self}")
        if self.optimizer != "sgd":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "lr": self.lr, "batch_size": self.batch_size,
                "seed": self.seed, "optimizer": self.optimizer, "max_steps": self.max_steps}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingSettings":
        return cls(**d)


# --------------------------------------------------------------------------- layers


class Layer:
    kind = "layer"

    def param_shapes(self, in_shape) -> dict[str, tuple[int, ...]]:
        return {}

    def out_shape(self, in_shape):
        return in_shape

    def init(self, in_shape, rng) -> dict[str, np.ndarray]:
        return {}

    def forward(self, p, x):
        raise NotImplementedError

    def backward(self, p, cache, dy):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"kind": self.kind}


class Dense(Layer):
    kind = "dense"

    def __init__(self, units: int):
        self.units = units

    def param_shapes(self, in_shape):
        (d,) = in_shape
        return {"W": (d, self.units), "b": (self.units,)}

    def out_shape(self, in_shape):
        return (self.units,)

    def init(self, in_shape, rng):
        (d,) = in_shape
        return {"W": rng.normal(0.0, math.sqrt(2.0 / d), size=(d, self.units)),
                "b": np.zeros(self.units)}

    def forward(self, p, x):
        return x @ p["W"] + p["b"], x

    def backward(self, p, x, dy):
        return dy @ p["W"].T, {"W": x.T @ dy, "b": dy.sum(axis=0)}

    def describe(self):
        return {"kind": self.kind, "units": self.units}


class ReLU(Layer):
    kind = "relu"

    def forward(self, p, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, p, mask, dy):
        return dy * mask, {}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, p, x):
        return x.reshape(len(x), -1), x.shape

    def backward(self, p, shape, dy):
        return dy.reshape(shape), {}


class Conv2D(Layer):
    """Valid-padding, stride-1 convolution over (N, C, H, W) inputs."""

    kind = "conv2d"

    def __init__(self, filters: int, kernel: int):
        self.filters = filters
        self.kernel = kernel

    def param_shapes(self, in_shape):
        c = in_shape[0]
        return {"W": (self.filters, c, self.kernel, self.kernel), "b": (self.filters,)}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (self.filters, h - self.kernel + 1, w - self.kernel + 1)

    def init(self, in_shape, rng):
        fan_in = in_shape[0] * self.kernel * self.kernel
        shape = self.param_shapes(in_shape)["W"]
        return {"W": rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), "b": np.zeros(self.filters)}

    def forward(self, p, x):
        win = sliding_window_view(x, (self.kernel, self.kernel), axis=(2, 3))
        y = np.einsum("nchwij,fcij->nfhw", win, p["W"], optimize=False) + p["b"][None, :, None, None]
        return y, x

    def backward(self, p, x, dy):
        k = self.kernel
        win = sliding_window_view(x, (k, k), axis=(2, 3))
        dW = np.einsum("nchwij,nfhw->fcij", win, dy, optimize=False)
        db = dy.sum(axis=(0, 2, 3))
        dx = np.zeros_like(x)
        ho, wo = dy.shape[2], dy.shape[3]
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + ho, j:j + wo] += np.einsum("nfhw,fc->nchw", dy, p["W"][:, :, i, j], optimize=False)
        return dx, {"W": dW, "b": db}

    def describe(self):
        return {"kind": self.kind, "filters": self.filters, "kernel": self.kernel}


class MaxPool2D(Layer):
    kind = "maxpool"

    def __init__(self, size: int = 2):
        self.size = size

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (c, h // self.size, w // self.size)

    def forward(self, p, x):
        s = self.size
        n, c, h, w = x.shape
        ho, wo = h // s, w // s
        xs = x[:, :, :ho * s, :wo * s].reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5)
        xs = xs.reshape(n, c, ho, wo, s * s)
        arg = xs.argmax(axis=-1)
        y = np.take_along_axis(xs, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, p, cache, dy):
        (n, c, h, w), arg = cache
        s = self.size
        ho, wo = dy.shape[2], dy.shape[3]
        grid = np.zeros((n, c, ho, wo, s * s))
        np.put_along_axis(grid, arg[..., None], dy[..., None], axis=-1)
        grid = grid.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * s, wo * s)
        dx = np.zeros((n, c, h, w))
        dx[:, :, :ho * s, :wo * s] = grid
        return dx, {}

    def describe(self):
        return {"kind": self.kind, "size": self.size}


def softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    n = len(y)
    loss = float(-np.log(probs[np.arange(n), y] + 1e-300).mean())
    grad = probs
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


# --------------------------------------------------------------------------- architecture


@dataclass
class Architecture:
    input_shape: tuple[int, ...]
    layers: list[Layer]
    n_classes: int
    name: str = "custom"
    _shapes: list = field(default=None, init=False, repr=False)

    def __post_init__(self):
        shapes = [tuple(self.input_shape)]
        for layer in self.layers:
            shapes.append(tuple(layer.out_shape(shapes[-1])))
        if shapes[-1] != (self.n_classes,):
            raise ShapeMismatch(f"architecture outputs {shapes[-1]}, expected ({self.n_classes},)")
        self._shapes = shapes

    @classmethod
    def mlp(cls, n_features: int, n_classes: int, hidden: Sequence[int] = (64,)) -> "Architecture":
        layers: list[Layer] = []
        for h in hidden:
            layers += [Dense(h), ReLU()]
        layers.append(Dense(n_classes))
        return cls((n_features,), layers, n_classes, name="mlp")

    @classmethod
    def cnn(cls, image_shape: tuple[int, int], n_classes: int, filters: int = 32,
            kernel: int = 5, hidden: int = 256) -> "Architecture":
        """One conv layer, 2x2 max-pool, a dense ReLU layer and a softmax output."""
        layers = [Conv2D(filters, kernel), ReLU(), MaxPool2D(2), Flatten(), Dense(hidden), ReLU(), Dense(n_classes)]
        return cls((1, *image_shape), layers, n_classes, name="cnn")

    @classmethod
    def from_name(cls, name: str, data: Dataset, hidden: int = 64) -> "Architecture":
        if name == "mlp":
            return cls.mlp(data.n_features, data.n_classes, (hidden,))
        if name == "linear":
            return cls.mlp(data.n_features, data.n_classes, ())
        if name == "cnn":
            if data.image_shape is None:
                raise ShapeMismatch("cnn architecture needs image-shaped data")
            h, w = data.image_shape
            kernel = 5 if min(h, w) >= 12 else 3
            return cls.cnn(data.image_shape, data.n_classes, filters=32 if h >= 12 else 8,
                           kernel=kernel, hidden=256 if h >= 12 else 64)
        raise ValueError(f"unknown architecture {name!r}")

    def describe(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape),
                "layers": [layer.describe() for layer in self.layers]}

    def param_layout(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for i, layer in enumerate(self.layers):
            for pname, shape in layer.param_shapes(self._shapes[i]).items():
                out.append((f"{i}.{pname}", tuple(shape)))
        return out

    def init_weights(self, seed: int) -> ModelWeights:
        rng = np.random.default_rng([seed, 0x1417])
        tensors = {}
        for i, layer in enumerate(self.layers):
            for pname, value in layer.init(self._shapes[i], rng).items():
                tensors[f"{i}.{pname}"] = value
        return ModelWeights(tensors)

    def check(self, weights: ModelWeights) -> None:
        layout = [(k, tuple(v.shape)) for k, v in weights.tensors.items()]
        if layout != self.param_layout():
            raise ShapeMismatch("weights do not match the architecture")

    def _params(self, weights: ModelWeights, i: int) -> dict[str, np.ndarray]:
        prefix = f"{i}."
        return {k[len(prefix):]: v for k, v in weights.tensors.items() if k.startswith(prefix)}

    def _reshape_input(self, X: np.ndarray) -> np.ndarray:
        return X.reshape((len(X), *self.input_shape))

    def logits(self, weights: ModelWeights, X: np.ndarray) -> np.ndarray:
        a = self._reshape_input(X)
        for i, layer in enumerate(self.layers):
            a, _ = layer.forward(self._params(weights, i), a)
        return a

    def loss_and_grad(self, weights: ModelWeights, X: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        a = self._reshape_input(X)
        caches = []
        for i, layer in enumerate(self.layers):
            p = self._params(weights, i)
            a, cache = layer.forward(p, a)
            caches.append((p, cache))
        loss, d = softmax_xent(a, y)
        grads: dict[str, np.ndarray] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            p, cache = caches[i]
            d, g = self.layers[i].backward(p, cache, d)
            for pname, value in g.items():
                grads[f"{i}.{pname}"] = value
        return loss, grads

    def loss(self, weights: ModelWeights, X: np.ndarray, y: np.ndarray) -> float:
        loss, _ = softmax_xent(self.logits(weights, X), y)
        return loss


# --------------------------------------------------------------------------- operations


def aggregate(candidates: Sequence[tuple[ModelWeights, float]]) -> ModelWeights:
    """Accuracy-weighted average: sum_p (E_p / sum_q E_q) * W_p."""
    if not candidates:
        raise AggregationError("nothing to aggregate")
    evals = [float(e) for _, e in candidates]
    if any(e < 0 for e in evals):
        raise AggregationError("evaluations must be non-negative")
    total = math.fsum(evals)
    if total <= 0:
        raise AggregationError("all evaluations are zero")
    first = candidates[0][0]
    for w, _ in candidates[1:]:
        if not w.same_layout(first):
            raise ShapeMismatch("candidate weights differ in shape")
    out = {}
    for name in first.names:
        acc = np.zeros_like(first.tensors[name])
        for (w, _), e in zip(candidates, evals):
            acc += (e / total) * w.tensors[name]
        out[name] = acc
    return ModelWeights(out)


def mean_weights(models: Sequence[ModelWeights]) -> ModelWeights:
    return aggregate([(m, 1.0) for m in models])


def batch_schedule(n: int, settings: TrainingSettings) -> list[np.ndarray]:
    """Per-epoch seeded shuffle, sequential batches; a partial last batch is kept."""
    batches = []
    for epoch in range(settings.epochs):
        perm = np.random.default_rng([settings.seed, epoch]).permutation(n)
        for start in range(0, n, settings.batch_size):
            batches.append(perm[start:start + settings.batch_size])
    if settings.max_steps is not None:
        batches = batches[:settings.max_steps]
    return batches


def train(arch: Architecture, start: ModelWeights, settings: TrainingSettings, data: Dataset) -> ModelWeights:
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    arch.check(start)
    w = start.copy()
    per_epoch = math.ceil(len(data) / settings.batch_size)
    for step, idx in enumerate(batch_schedule(len(data), settings)):
        loss, grads = arch.loss_and_grad(w, data.X[idx], data.y[idx])
        if not math.isfinite(loss):
            raise TrainingError(step // per_epoch, step % per_epoch, loss)
        for name, g in grads.items():
            w.tensors[name] -= settings.lr * g
    return w


def evaluate(arch: Architecture, weights: ModelWeights, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = arch.logits(weights, data.X).argmax(axis=1)
    return float(np.count_nonzero(pred == data.y)) / len(data)


def fnorm_distance(a: ModelWeights, b: ModelWeights) -> float:
    if not a.same_layout(b):
        raise ShapeMismatch("cannot compare weights of different shapes")
    total = 0.0
    for name in a.names:
        diff = a.tensors[name] - b.tensors[name]
        total += float(np.sum(diff * diff))
    return math.sqrt(total)


def gradient_check(arch: Architecture, X: np.ndarray, y: np.ndarray, weights: ModelWeights | None = None,
                   eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if weights is None:
        weights = arch.init_weights(seed)
    _, grads = arch.loss_and_grad(weights, X, y)
    base = weights.flat()
    analytic = np.concatenate([grads[name].ravel() for name in weights.names])
    numeric = np.empty_like(base)
    for i in range(len(base)):
        plus = base.copy()
        plus[i] += eps
        minus = base.copy()
        minus[i] -= eps
        numeric[i] = (arch.loss(weights.unflatten(plus), X, y) - arch.loss(weights.unflatten(minus), X, y)) / (2 * eps)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))

