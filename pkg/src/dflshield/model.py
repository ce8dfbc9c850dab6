"""Local training, federated averaging, and evaluation for the testbed.

The learner is a small dense multilayer perceptron with a softmax head,
trained by per-example SGD with L2 regularization on the weights. It is
deliberately tiny: federation rounds have to complete in seconds so that
whole security scenarios can run inside a test suite.

Parameter vectors travel between peers in a compact binary form (see
:func:`params_to_bytes`) and can be checkpointed to disk as a flat
little-endian float64 array with a JSON sidecar (:func:`save_snapshot`).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset

ACTIVATIONS = ("relu", "tanh", "sigmoid")

_PARAMS_MAGIC = b"MP"
_PARAMS_VERSION = 1


class ModelError(Exception):
    """Base class for learner failures."""


class ShapeMismatchError(ModelError):
    """Parameter shapes disagree with the architecture or with each other."""


class NumericError(ModelError):
    """A non-finite value appeared during training.

    Attributes:
        layer_index: 0-based index of the layer whose gradient blew up.
    """

    def __init__(self, message: str, layer_index: int):
        super().__init__(message)
        self.layer_index = layer_index


@dataclass(frozen=True)
class ModelArchitecture:
    """Dense network shape: neurons per layer plus the hidden nonlinearity."""

    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("architecture needs at least input and output layers")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError(f"layer sizes must be >= 1, got {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))

    @property
    def num_weight_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def param_count(self) -> int:
        sizes = self.layer_sizes
        return sum(sizes[i + 1] * sizes[i] + sizes[i + 1] for i in range(len(sizes) - 1))


@dataclass
class ModelParams:
    """Per-layer weight matrices and bias vectors for one architecture."""

    arch: ModelArchitecture
    weights: list[np.ndarray] = field(repr=False)
    biases: list[np.ndarray] = field(repr=False)

    def validate(self) -> None:
        sizes = self.arch.layer_sizes
        if len(self.weights) != self.arch.num_weight_layers or len(self.biases) != self.arch.num_weight_layers:
            raise ShapeMismatchError(
                f"expected {self.arch.num_weight_layers} weight layers, "
                f"got {len(self.weights)} weights / {len(self.biases)} biases"
            )
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (sizes[i + 1], sizes[i])
            if w.shape != want or b.shape != (sizes[i + 1],):
                raise ShapeMismatchError(f"layer {i}: weight {w.shape} / bias {b.shape}, expected {want}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NumericError(f"non-finite parameter in layer {i}", layer_index=i)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        """All parameters as one float64 vector (weights then bias, per layer)."""
        chunks: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            chunks.append(w.ravel())
            chunks.append(b.ravel())
        return np.concatenate(chunks).astype(np.float64, copy=False)

    def allclose(self, other: "ModelParams", rtol: float = 1e-9, atol: float = 0.0) -> bool:
        return self.arch == other.arch and np.allclose(self.flat(), other.flat(), rtol=rtol, atol=atol)


def params_from_flat(arch: ModelArchitecture, vec: np.ndarray) -> ModelParams:
    if vec.size != arch.param_count:
        raise ShapeMismatchError(f"flat vector has {vec.size} entries, architecture needs {arch.param_count}")
    sizes = arch.layer_sizes
    weights, biases, off = [], [], 0
    for i in range(arch.num_weight_layers):
        n = sizes[i + 1] * sizes[i]
        weights.append(np.asarray(vec[off : off + n], dtype=np.float64).reshape(sizes[i + 1], sizes[i]).copy())
        off += n
        biases.append(np.asarray(vec[off : off + sizes[i + 1]], dtype=np.float64).copy())
        off += sizes[i + 1]
    return ModelParams(arch, weights, biases)


def init_params(arch: ModelArchitecture, rng: np.random.Generator) -> ModelParams:
    """Small random initialization scaled by fan-in."""
    sizes = arch.layer_sizes
    weights, biases = [], []
    for i in range(arch.num_weight_layers):
        scale = 1.0 / math.sqrt(sizes[i])
        weights.append(rng.normal(0.0, scale, size=(sizes[i + 1], sizes[i])))
        biases.append(np.zeros(sizes[i + 1]))
    return ModelParams(arch, weights, biases)


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for local SGD and the federation round budget."""

    learning_rate: float
    l2_lambda: float = 0.0
    local_epochs: int = 1
    rounds: int = 1

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.local_epochs < 1 or self.rounds < 1:
            raise ValueError("local_epochs and rounds must be >= 1")


@dataclass(frozen=True)
class EvalReport:
    """Macro-F1, mean loss, and per-class precision/recall on a test split."""

    f1_macro: float
    loss: float
    per_class_precision: tuple[float, ...]
    per_class_recall: tuple[float, ...]


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return 1.0 / (1.0 + np.exp(-z))


def _activate_grad(a: np.ndarray, kind: str) -> np.ndarray:
    # Derivative expressed through the activation output.
    if kind == "relu":
        return (a > 0.0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - a * a
    return a * (1.0 - a)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max()
    e = np.exp(shifted)
    return e / e.sum()


def forward_logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Raw output-layer scores for one feature vector."""
    a = np.asarray(x, dtype=np.float64)
    last = params.arch.num_weight_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = w @ a + b
        a = z if i == last else _activate(z, params.arch.activation)
    return a


def predict(params: ModelParams, x: np.ndarray) -> int:
    return int(np.argmax(forward_logits(params, x)))


def example_loss(params: ModelParams, x: np.ndarray, y: int) -> float:
    """Cross-entropy of one example under the softmax head."""
    p = _softmax(forward_logits(params, x))
    return float(-math.log(max(p[y], 1e-300)))


def dataset_loss(params: ModelParams, data: Dataset) -> float:
    total = sum(example_loss(params, x, int(y)) for x, y in zip(data.features, data.labels))
    return total / len(data)


def _backprop(params: ModelParams, x: np.ndarray, y: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Gradients of the cross-entropy loss for a single example."""
    arch = params.arch
    acts = [np.asarray(x, dtype=np.float64)]
    last = arch.num_weight_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = w @ acts[-1] + b
        acts.append(z if i == last else _activate(z, arch.activation))
    p = _softmax(acts[-1])
    delta = p
    delta[y] -= 1.0
    grads_w: list[np.ndarray] = [None] * arch.num_weight_layers  # type: ignore[list-item]
    grads_b: list[np.ndarray] = [None] * arch.num_weight_layers  # type: ignore[list-item]
    for i in range(last, -1, -1):
        grads_w[i] = np.outer(delta, acts[i])
        grads_b[i] = delta.copy()
        if i > 0:
            delta = (params.weights[i].T @ delta) * _activate_grad(acts[i], arch.activation)
    return grads_w, grads_b


def train_local(
    params: ModelParams,
    data: Dataset,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> ModelParams:
    """Run ``cfg.local_epochs`` passes of per-example SGD over ``data``.

    The example order is reshuffled per epoch from ``rng``, so the result
    is a pure function of (params, data, cfg, rng state). Regularization
    applies to weights only, not biases.

    Raises:
        ShapeMismatchError: params disagree with their architecture.
        NumericError: a gradient went non-finite (carries the layer index).
        ValueError: empty training data.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    params.validate()
    out = params.copy()
    lr, lam = cfg.learning_rate, cfg.l2_lambda
    n = len(data)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for idx in order:
            x = data.features[idx]
            y = int(data.labels[idx])
            grads_w, grads_b = _backprop(out, x, y)
            for i in range(out.arch.num_weight_layers):
                if not (np.isfinite(grads_w[i]).all() and np.isfinite(grads_b[i]).all()):
                    raise NumericError(f"non-finite gradient in layer {i}", layer_index=i)
                out.weights[i] -= lr * (grads_w[i] + lam * out.weights[i])
                out.biases[i] -= lr * grads_b[i]
    return out


def gradients(params: ModelParams, x: np.ndarray, y: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Analytic per-example gradients, exposed for finite-difference checks."""
    return _backprop(params, x, y)


def aggregate_fedavg(own: ModelParams, received: Sequence[ModelParams]) -> ModelParams:
    """Elementwise mean of ``own`` and every received parameter set.

    The per-coordinate sum uses exact accumulation (``math.fsum``), so the
    result is bit-identical under any permutation of ``received``. An empty
    list returns a copy of ``own``.
    """
    if not received:
        return own.copy()
    for other in received:
        if other.arch != own.arch:
            raise ShapeMismatchError(f"architecture mismatch: {other.arch} vs {own.arch}")
    base = own.flat()
    flats = [p.flat() for p in received]
    if all(f.tobytes() == base.tobytes() for f in flats):
        return own.copy()  # the mean of identical inputs is exactly that input
    # fsum computes each coordinate's sum exactly, so any two nodes averaging
    # the same multiset of parameter sets get bit-identical results, in any
    # order.
    stacked = np.stack([base] + flats)
    k = stacked.shape[0]
    mean = np.array([math.fsum(stacked[:, j]) / k for j in range(stacked.shape[1])])
    return params_from_flat(own.arch, mean)


def evaluate(params: ModelParams, data: Dataset) -> EvalReport:
    """Macro-F1 and mean cross-entropy over a test split.

    Classes absent from both the labels and the predictions are excluded
    from the macro average; their precision/recall slots are reported as 0.
    """
    if len(data) == 0:
        raise ValueError("test data is empty")
    num_classes = params.arch.layer_sizes[-1]
    tp = np.zeros(num_classes)
    fp = np.zeros(num_classes)
    fn = np.zeros(num_classes)
    total = 0.0
    for x, y in zip(data.features, data.labels):
        y = int(y)
        logits = forward_logits(params, x)
        pred = int(np.argmax(logits))
        p = _softmax(logits)
        total += -math.log(max(p[y], 1e-300))
        if pred == y:
            tp[y] += 1
        else:
            fp[pred] += 1
            fn[y] += 1
    precision = np.zeros(num_classes)
    recall = np.zeros(num_classes)
    f1s = []
    for c in range(num_classes):
        seen = tp[c] + fp[c] + fn[c] > 0
        if tp[c] + fp[c] > 0:
            precision[c] = tp[c] / (tp[c] + fp[c])
        if tp[c] + fn[c] > 0:
            recall[c] = tp[c] / (tp[c] + fn[c])
        if seen:
            denom = precision[c] + recall[c]
            f1s.append(0.0 if denom == 0 else 2 * precision[c] * recall[c] / denom)
    return EvalReport(
        f1_macro=float(np.mean(f1s)) if f1s else 0.0,
        loss=total / len(data),
        per_class_precision=tuple(float(v) for v in precision),
        per_class_recall=tuple(float(v) for v in recall),
    )


_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}
_ACT_NAMES = {i: name for name, i in _ACT_CODES.items()}


def params_to_bytes(params: ModelParams) -> bytes:
    """Serialize params for exchange: header + flat little-endian float64 data.

    Layout: magic "MP" | version u8 | layer count u8 | layer sizes u16 LE each
    | activation code u8 | float64 LE flat parameter vector.
    """
    arch = params.arch
    head = _PARAMS_MAGIC + struct.pack(
        "<BB", _PARAMS_VERSION, len(arch.layer_sizes)
    ) + struct.pack(f"<{len(arch.layer_sizes)}H", *arch.layer_sizes) + struct.pack("<B", _ACT_CODES[arch.activation])
    return head + params.flat().astype("<f8").tobytes()


def params_from_bytes(blob: bytes) -> ModelParams:
    """Inverse of :func:`params_to_bytes`; raises ValueError on malformed input."""
    if len(blob) < 5 or blob[:2] != _PARAMS_MAGIC:
        raise ValueError("not a parameter blob")
    version, n_layers = struct.unpack("<BB", blob[2:4])
    if version != _PARAMS_VERSION or n_layers < 2:
        raise ValueError("unsupported parameter blob header")
    off = 4
    if len(blob) < off + 2 * n_layers + 1:
        raise ValueError("truncated parameter blob")
    sizes = struct.unpack(f"<{n_layers}H", blob[off : off + 2 * n_layers])
    off += 2 * n_layers
    (act_code,) = struct.unpack("<B", blob[off : off + 1])
    off += 1
    if act_code not in _ACT_NAMES or any(s < 1 for s in sizes):
        raise ValueError("invalid parameter blob fields")
    arch = ModelArchitecture(tuple(sizes), _ACT_NAMES[act_code])
    want = arch.param_count * 8
    if len(blob) - off != want:
        raise ValueError(f"parameter payload is {len(blob) - off} bytes, expected {want}")
    vec = np.frombuffer(blob, dtype="<f8", offset=off)
    return params_from_flat(arch, np.asarray(vec, dtype=np.float64))


def save_snapshot(params: ModelParams, path: str | Path) -> None:
    """Write a checkpoint: <path> holds the raw float64 LE vector, <path>.json the shape."""
    path = Path(path)
    path.write_bytes(params.flat().astype("<f8").tobytes())
    sidecar = {"layer_sizes": list(params.arch.layer_sizes), "activation": params.arch.activation}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_snapshot(path: str | Path) -> ModelParams:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    arch = ModelArchitecture(tuple(sidecar["layer_sizes"]), sidecar["activation"])
    vec = np.frombuffer(path.read_bytes(), dtype="<f8")
    return params_from_flat(arch, np.asarray(vec, dtype=np.float64))
