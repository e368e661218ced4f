"""Stack of dense layers with analytic gradients.

Layers compute ``h_{i+1} = act(h_i W_i + b_i)`` on row-major inputs, so each
``W_i`` is ``d_in x d_out`` and its left singular vectors live in the layer's
input space. Adapted layers use the adapter's effective weight in place of
``W_i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adapter import KeepLoRAAdapter, effective_weight
from .linalg import ShapeError

ACTIVATIONS = ("relu", "tanh", "none")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "none"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ShapeError(f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree")
        if self.inputs.shape[0] < 1:
            raise ValueError("a batch needs at least one sample")
        if self.labels.min() < 0:
            raise ValueError("negative label")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])


@dataclass
class LinearModel:
    layers: list[Layer]
    adapted_layers: tuple[int, ...] = ()
    adapters: dict[int, KeepLoRAAdapter] = field(default_factory=dict)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.weight.shape[1] != b.weight.shape[0]:
                raise ShapeError("consecutive layer dimensions do not chain")
        if self.layers[-1].activation != "none":
            raise ValueError("final layer must produce raw logits (activation 'none')")
        self.adapted_layers = tuple(sorted(set(self.adapted_layers)))
        for i in self.adapted_layers:
            if not 0 <= i < len(self.layers):
                raise ValueError(f"adapted layer index {i} out of range")

    @property
    def d_in(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].weight.shape[1]

    def weight(self, i: int) -> np.ndarray:
        """Weight used by the forward pass (effective weight if adapted)."""
        if i in self.adapters:
            return effective_weight(self.adapters[i])
        return self.layers[i].weight

    def copy(self) -> "LinearModel":
        layers = [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        return LinearModel(layers, self.adapted_layers)

    def attach(self, i: int, adapter: KeepLoRAAdapter) -> None:
        if i not in self.adapted_layers:
            raise ValueError(f"layer {i} is not adaptable")
        self.adapters[i] = adapter

    def merge_adapters(self) -> None:
        for i in list(self.adapters):
            self.layers[i].weight = self.weight(i)
            del self.adapters[i]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and initialisation of the base (pre-trained stand-in) model.

    ``spectral_decay`` < 1 reshapes every hidden weight's singular values into
    a geometric sequence with that ratio (same Frobenius norm as the Gaussian
    draw), mimicking the decaying spectra of trained networks. 1.0 keeps the
    Gaussian spectrum.
    """

    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    adapted_layers: tuple[int, ...] = (0, 1)
    seed: Optional[int] = None
    spectral_decay: float = 1.0
    head_scale: float = 1.0


def _activate(z, kind):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z, h, kind):
    if kind == "tanh":
        return 1.0 - h * h
    if kind == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


def build_model(spec: ModelSpec, d_in: int, n_outputs: int) -> LinearModel:
    rng = np.random.default_rng(0 if spec.seed is None else spec.seed)
    dims = [d_in, *spec.hidden, n_outputs]
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        w = rng.standard_normal((a, b)) / np.sqrt(a)
        if last:
            w = w * spec.head_scale
        elif spec.spectral_decay != 1.0:
            u, s, vt = np.linalg.svd(w, full_matrices=False)
            shaped = spec.spectral_decay ** np.arange(s.size)
            shaped *= np.linalg.norm(s) / np.linalg.norm(shaped)
            w = (u * shaped) @ vt
        layers.append(Layer(w, np.zeros(b), "none" if last else spec.activation))
    return LinearModel(layers, spec.adapted_layers)


def forward(model: LinearModel, inputs, *, return_activations: bool = False):
    """Logits for row-major ``inputs``; optionally also every layer's input."""
    h = np.asarray(inputs, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != model.d_in:
        raise ShapeError(f"inputs of shape {h.shape} do not fit a model with d_in={model.d_in}")
    acts = []
    for i, layer in enumerate(model.layers):
        acts.append(h)
        h = _activate(h @ model.weight(i) + layer.bias, layer.activation)
    return (h, acts) if return_activations else h


def _head_slice(model, head):
    if head is None:
        return 0, model.n_outputs
    offset, classes = head
    if offset < 0 or offset + classes > model.n_outputs:
        raise ShapeError(f"head slice {head} outside {model.n_outputs} outputs")
    return offset, classes


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and ``dL/dlogits`` for integer labels."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    p = np.exp(z - logsum[:, None])
    p[rows, labels] -= 1.0
    return loss, p / n


def loss_and_grads(model: LinearModel, batch: Batch, head: Optional[tuple[int, int]] = None,
                   layers: Optional[Sequence[int]] = None) -> tuple[float, dict[int, np.ndarray]]:
    """Mean softmax cross-entropy over the head slice and its weight gradients.

    Gradients are taken with respect to the weight each layer actually uses
    (the effective weight for adapted layers). By default they are returned for
    ``model.adapted_layers``; pass ``layers`` to pick others.
    """
    offset, classes = _head_slice(model, head)
    if batch.labels.max() >= classes:
        raise ValueError(f"label {batch.labels.max()} outside head of {classes} classes")
    want = model.adapted_layers if layers is None else tuple(layers)
    pre, acts = [], []
    h = batch.inputs
    if h.shape[1] != model.d_in:
        raise ShapeError(f"inputs of shape {h.shape} do not fit a model with d_in={model.d_in}")
    weights = [model.weight(i) for i in range(len(model.layers))]
    for w, layer in zip(weights, model.layers):
        acts.append(h)
        z = h @ w + layer.bias
        pre.append(z)
        h = _activate(z, layer.activation)
    loss, d_slice = softmax_cross_entropy(h[:, offset:offset + classes], batch.labels)
    dz = np.zeros_like(h)
    dz[:, offset:offset + classes] = d_slice
    grads: dict[int, np.ndarray] = {}
    first = min(want) if want else len(model.layers)
    for i in range(len(model.layers) - 1, first - 1, -1):
        if i in want:
            grads[i] = acts[i].T @ dz
        if i > first:
            dh = dz @ weights[i].T
            prev = model.layers[i - 1]
            dz = dh * _activation_grad(pre[i - 1], acts[i], prev.activation)
    return loss, {i: grads[i] for i in want}


def predict(model: LinearModel, inputs, head: Optional[tuple[int, int]] = None) -> np.ndarray:
    offset, classes = _head_slice(model, head)
    return np.argmax(forward(model, inputs)[:, offset:offset + classes], axis=1)


def accuracy(model: LinearModel, batch: Batch, head: Optional[tuple[int, int]] = None) -> float:
    return float(np.mean(predict(model, batch.inputs, head) == batch.labels))


def collect_layer_inputs(model: LinearModel, dataset: Batch, layer_idx: int, max_samples: int) -> np.ndarray:
    """Inputs seen by ``layer_idx`` for the first ``max_samples`` examples, as ``d_in x n``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if layer_idx not in model.adapted_layers:
        raise ValueError(f"layer {layer_idx} is not adapted")
    n = min(max_samples, len(dataset))
    _, acts = forward(model, dataset.inputs[:n], return_activations=True)
    return np.ascontiguousarray(acts[layer_idx].T)
