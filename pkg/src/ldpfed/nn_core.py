"""Dense ReLU network with softmax cross-entropy, trained by minibatch SGD.

Parameters live in a single flat float64 vector.  Each dense layer owns one
contiguous segment holding its weight matrix (fan_in x fan_out, row-major)
followed by its bias vector, and segments are ordered input side first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ldpfed.data_io import Dataset
from ldpfed.errors import ConfigError, NumericError, ShapeError


@dataclass(frozen=True)
class ArchSpec:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ConfigError(f"architecture needs input and output widths, got {list(sizes)}")
        if any(s < 1 for s in sizes):
            raise ConfigError(f"every layer width must be >= 1, got {list(sizes)}")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def input_width(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def layer_names(self) -> list[str]:
        return [f"dense{i}" for i in range(self.num_layers)]

    def param_count(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int

    @property
    def stop(self) -> int:
        return self.offset + self.length


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Flat parameter values plus their layer layout.

    Instances are treated as immutable: every operation that changes values
    returns a new vector backed by a fresh array.
    """

    values: np.ndarray
    layout: tuple[Segment, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ShapeError("parameter values must be a flat vector")
        pos = 0
        for seg in self.layout:
            if seg.offset != pos or seg.length < 0:
                raise ShapeError(f"layout segment {seg.name} is not contiguous")
            pos = seg.stop
        if pos != values.size:
            raise ShapeError(f"layout covers {pos} values but vector has {values.size}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.layout]

    def segment(self, name: str) -> Segment:
        for seg in self.layout:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def layer(self, name: str) -> np.ndarray:
        seg = self.segment(name)
        return self.values[seg.offset:seg.stop]

    def gather(self, names: Sequence[str]) -> np.ndarray:
        """Concatenate the values of ``names`` in the order given."""
        if not names:
            return np.empty(0)
        return np.concatenate([self.layer(n) for n in names])

    def replace_layers(self, names: Sequence[str], flat: np.ndarray) -> "ParameterVector":
        """Return a copy with the segments in ``names`` overwritten from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        out = self.values.copy()
        pos = 0
        for name in names:
            seg = self.segment(name)
            if pos + seg.length > flat.size:
                raise ShapeError(f"replacement too short for layer {name}")
            out[seg.offset:seg.stop] = flat[pos:pos + seg.length]
            pos += seg.length
        if pos != flat.size:
            raise ShapeError(f"replacement has {flat.size} values, layers need {pos}")
        return ParameterVector(out, self.layout)

    def same_layout(self, other: "ParameterVector") -> bool:
        return self.layout == other.layout


@dataclass(frozen=True)
class Minibatch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.size < 1:
            raise ShapeError("minibatch must contain at least one example")
        if inputs.shape[0] != labels.size:
            raise ShapeError(f"{inputs.shape[0]} inputs but {labels.size} labels")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class Model:
    params: ParameterVector
    arch: ArchSpec

    def __post_init__(self):
        if len(self.params) != self.arch.param_count():
            raise ShapeError(
                f"architecture needs {self.arch.param_count()} parameters, got {len(self.params)}"
            )

    def with_params(self, params: ParameterVector) -> "Model":
        return Model(params, self.arch)


def make_layout(arch: ArchSpec) -> tuple[Segment, ...]:
    segs = []
    offset = 0
    for name, (fan_in, fan_out) in zip(arch.layer_names(), _pairs(arch)):
        n = fan_in * fan_out + fan_out
        segs.append(Segment(name, offset, n))
        offset += n
    return tuple(segs)


def _pairs(arch):
    return list(zip(arch.layer_sizes[:-1], arch.layer_sizes[1:]))


def init_model(arch: ArchSpec, seed: int) -> Model:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    if not isinstance(arch, ArchSpec):
        arch = ArchSpec(tuple(arch))
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in _pairs(arch):
        bound = 1.0 / math.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return Model(ParameterVector(np.concatenate(chunks), make_layout(arch)), arch)


def _unpack(model: Model):
    weights = []
    vals = model.params.values
    for seg, (fan_in, fan_out) in zip(model.params.layout, _pairs(model.arch)):
        w = vals[seg.offset:seg.offset + fan_in * fan_out].reshape(fan_in, fan_out)
        b = vals[seg.offset + fan_in * fan_out:seg.stop]
        weights.append((seg.name, w, b))
    return weights


def _check_inputs(model: Model, inputs: np.ndarray):
    if inputs.ndim != 2 or inputs.shape[1] != model.arch.input_width:
        raise ShapeError(
            f"inputs have shape {inputs.shape}, model expects width {model.arch.input_width}"
        )


def _forward(model: Model, inputs: np.ndarray):
    """Return per-layer activations (inputs included) and final logits."""
    _check_inputs(model, inputs)
    acts = [inputs]
    layers = _unpack(model)
    h = inputs
    for i, (name, w, b) in enumerate(layers):
        z = h @ w + b
        if not np.isfinite(z).all():
            raise NumericError(f"non-finite pre-activation in layer {name}")
        if i < len(layers) - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            h = z
    return acts, h


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def logits(model: Model, inputs) -> np.ndarray:
    return _forward(model, np.atleast_2d(np.asarray(inputs, dtype=np.float64)))[1]


def per_example_loss(model: Model, inputs, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    logp = _log_softmax(logits(model, inputs))
    if labels.size and (labels.min() < 0 or labels.max() >= model.arch.num_classes):
        raise ShapeError("label outside the model's output width")
    return -logp[np.arange(labels.size), labels]


def average_loss(model: Model, data: Dataset) -> float:
    """Mean cross-entropy of ``model`` over every example in ``data``."""
    if len(data) == 0:
        raise ShapeError("cannot average loss over an empty dataset")
    loss = float(per_example_loss(model, data.features, data.labels).mean())
    if not math.isfinite(loss):
        raise NumericError("average loss is not finite")
    return loss


def accuracy(model: Model, data: Dataset) -> float:
    pred = logits(model, data.features).argmax(axis=1)
    return float((pred == data.labels).mean())


def minibatch_gradient(model: Model, batch: Minibatch) -> ParameterVector:
    """Average of per-example cross-entropy gradients over ``batch``."""
    if batch.labels.max() >= model.arch.num_classes or batch.labels.min() < 0:
        raise ShapeError("label outside the model's output width")
    acts, out = _forward(model, batch.inputs)
    n = batch.labels.size
    probs = np.exp(_log_softmax(out))
    delta = probs
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    layers = _unpack(model)
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        name, w, _ = layers[i]
        gw = acts[i].T @ delta
        gb = delta.sum(axis=0)
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NumericError(f"non-finite gradient in layer {name}")
        grads[i] = np.concatenate([gw.ravel(), gb])
        if i > 0:
            delta = (delta @ w.T) * (acts[i] > 0)
    return ParameterVector(np.concatenate(grads), model.params.layout)


def sgd_step(model: Model, grad: ParameterVector, lr: float) -> Model:
    if not model.params.same_layout(grad):
        raise ShapeError("gradient layout does not match model parameters")
    if lr < 0:
        raise ConfigError("learning rate must be non-negative")
    new = model.params.values - lr * grad.values
    return model.with_params(ParameterVector(new, model.params.layout))


def layer_partition(model: Model) -> list[tuple[str, int]]:
    return [(s.name, s.length) for s in model.params.layout]


def train_epoch(
    model: Model,
    data: Dataset,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> Model:
    """One shuffled pass over ``data`` in minibatches of ``batch_size``."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = rng.permutation(len(data))
    for start in range(0, order.size, batch_size):
        idx = order[start:start + batch_size]
        batch = Minibatch(data.features[idx], data.labels[idx])
        model = sgd_step(model, minibatch_gradient(model, batch), lr)
    return model
