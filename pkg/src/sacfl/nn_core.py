"""Minimal dense neural network used as the unit of federation.

A :class:`Network` is an ordered list of :class:`DenseLayer` objects plus a
``split_index``: layers ``[0, split_index)`` form the task-robust *Encoder* and
layers ``[split_index, end)`` the task-sensitive *Decoder*.

Networks are treated as values. Every training or aggregation step produces a new
network through :func:`unflatten`, parameters are never modified in place. This is
what allows :func:`backward` to tell a stale :class:`ForwardCache` apart from a
fresh one.

All tensors are :class:`numpy.ndarray` objects of ``float64``.
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractViolation, DimensionError, ValidationError

__all__ = [
    "Activation",
    "DenseLayer",
    "Network",
    "LayoutEntry",
    "ParamVector",
    "ForwardCache",
    "OptimizerKind",
    "OptimizerState",
    "Seed",
    "init_network",
    "reinit_decoder",
    "flatten",
    "unflatten",
    "encoder_params",
    "decoder_params",
    "forward",
    "encoder_output",
    "backward",
    "predict",
    "accuracy",
    "softmax",
    "softmax_cross_entropy",
    "optimizer_step",
    "manhattan",
    "euclidean",
    "cosine_distance",
    "kl_feature_divergence",
    "kl_feature_gradient",
    "layer_change_profile",
]

Tensor = np.ndarray
Seed = Union[int, np.random.SeedSequence, np.random.Generator, None]

PARTS = ("all", "encoder", "decoder")


class Activation(Enum):
    RELU = "relu"
    IDENTITY = "identity"


@dataclass(eq=False)
class DenseLayer:
    """Fully connected layer ``y = act(x @ W.T + b)``"""

    weights: Tensor
    bias: Tensor
    activation: Activation = Activation.RELU

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise DimensionError("DenseLayer.weights", "[out x in]", self.weights.shape)
        if self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                "DenseLayer.bias", (self.weights.shape[0],), self.bias.shape
            )

    @property
    def in_dim(self) -> int:
        return int(self.weights.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weights.shape[0])

    @property
    def param_count(self) -> int:
        return int(self.weights.size + self.bias.size)

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


class Network:
    """Layered dense model with an explicit Encoder/Decoder split"""

    def __init__(self, layers: Sequence[DenseLayer], split_index: Optional[int] = None):
        self._layers: Tuple[DenseLayer, ...] = tuple(layers)
        if len(self._layers) < 2:
            raise ValidationError("a network needs an Encoder and a Decoder layer")
        if split_index is None:
            split_index = len(self._layers) - 1
        if not 1 <= split_index <= len(self._layers) - 1:
            last = len(self._layers) - 1
            msg = f"split_index must lie in [1, {last}], got {split_index}"
            raise ValidationError(msg)
        for idx in range(1, len(self._layers)):
            prev, layer = self._layers[idx - 1], self._layers[idx]
            if prev.out_dim != layer.in_dim:
                raise DimensionError(f"layer {idx} input", prev.out_dim, layer.in_dim)
        self._split_index = int(split_index)

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__} {self.widths} split={self._split_index}>"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Network) or not self.same_architecture(other):
            return False
        return all(
            np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)
            for a, b in zip(self._layers, other._layers)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def layers(self) -> Tuple[DenseLayer, ...]:
        return self._layers

    @property
    def split_index(self) -> int:
        return self._split_index

    @property
    def in_dim(self) -> int:
        return self._layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self._layers[-1].out_dim

    @property
    def feature_dim(self) -> int:
        """Width of the Encoder output"""
        return self._layers[self._split_index - 1].out_dim

    @property
    def widths(self) -> List[int]:
        return [self.in_dim] + [layer.out_dim for layer in self._layers]

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self._layers)

    @property
    def encoder_param_count(self) -> int:
        return sum(layer.param_count for layer in self._layers[: self._split_index])

    @property
    def decoder_param_count(self) -> int:
        return sum(layer.param_count for layer in self._layers[self._split_index :])

    def architecture(self) -> Tuple:
        shapes = tuple(
            (layer.weights.shape, layer.activation) for layer in self._layers
        )
        return shapes + (self._split_index,)

    def same_architecture(self, other: "Network") -> bool:
        return self.architecture() == other.architecture()

    def part_layers(self, part: str = "all") -> range:
        if part == "all":
            return range(len(self._layers))
        if part == "encoder":
            return range(self._split_index)
        if part == "decoder":
            return range(self._split_index, len(self._layers))
        raise ValidationError(f"unknown network part {part!r}, use one of {PARTS}")

    def copy(self) -> "Network":
        return Network([layer.copy() for layer in self._layers], self._split_index)


class LayoutEntry(NamedTuple):
    layer: int
    role: str  # "weights" or "bias"
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat view of (part of) a network's parameters.

    ``layout`` records which layer and tensor each slice of ``values`` belongs to, in
    flattening order.
    """

    values: np.ndarray
    layout: Tuple[LayoutEntry, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple(LayoutEntry(*e) for e in self.layout))
        expected = sum(entry.size for entry in self.layout)
        if values.size != expected:
            raise DimensionError("ParamVector", expected, values.size)

    def __len__(self) -> int:
        return int(self.values.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return False
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    __hash__ = None  # type: ignore[assignment]

    @property
    def layer_indices(self) -> Tuple[int, ...]:
        return tuple(sorted({entry.layer for entry in self.layout}))

    def check_layout(self, other: "ParamVector", where: str = "parameter vectors"):
        if self.layout != other.layout:
            raise ContractViolation(f"layout mismatch between {where}")

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


def _rng(seed: Seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _he_layer(in_dim: int, out_dim: int, act: Activation, rng) -> DenseLayer:
    scale = math.sqrt(2.0 / in_dim)
    weights = rng.standard_normal((out_dim, in_dim)) * scale
    return DenseLayer(weights, np.zeros(out_dim), act)


def init_network(
    widths: Sequence[int], split_index: Optional[int] = None, rng_seed: Seed = 0
) -> Network:
    """He-initialised MLP with ReLU hidden layers and a linear output layer.

    Args:
        widths: ``[d_in, h_1, ..., C]``, at least three entries
        split_index: first Decoder layer, default: only the last layer is Decoder
        rng_seed: seed or generator for the weights
    """
    widths = [int(w) for w in widths]
    if len(widths) < 3 or min(widths) < 1:
        raise ValidationError(f"invalid layer widths {widths}")
    rng = _rng(rng_seed)
    n_layers = len(widths) - 1
    layers = [
        _he_layer(
            widths[i],
            widths[i + 1],
            Activation.IDENTITY if i == n_layers - 1 else Activation.RELU,
            rng,
        )
        for i in range(n_layers)
    ]
    return Network(layers, split_index)


def reinit_decoder(net: Network, rng_seed: Seed) -> Network:
    """Fresh Decoder layers, Encoder layers shared with ``net``"""
    rng = _rng(rng_seed)
    layers = list(net.layers)
    for idx in net.part_layers("decoder"):
        old = layers[idx]
        layers[idx] = _he_layer(old.in_dim, old.out_dim, old.activation, rng)
    return Network(layers, net.split_index)


def flatten(net: Network, part: str = "all") -> ParamVector:
    """Concatenate the weights and bias of the selected layers (row-major)"""
    chunks: List[np.ndarray] = []
    layout: List[LayoutEntry] = []
    for idx in net.part_layers(part):
        layer = net.layers[idx]
        chunks.extend((layer.weights.reshape(-1), layer.bias.reshape(-1)))
        layout.append(LayoutEntry(idx, "weights", tuple(layer.weights.shape)))
        layout.append(LayoutEntry(idx, "bias", tuple(layer.bias.shape)))
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamVector(values, tuple(layout))


def unflatten(net: Network, params: ParamVector) -> Network:
    """New network equal to ``net`` except for the layers covered by ``params``"""
    layers = list(net.layers)
    offset = 0
    pending = {}
    for entry in params.layout:
        if not 0 <= entry.layer < len(layers):
            raise ContractViolation(f"layout refers to missing layer {entry.layer}")
        chunk = params.values[offset : offset + entry.size].reshape(entry.shape)
        offset += entry.size
        pending.setdefault(entry.layer, {})[entry.role] = chunk.copy()
    for idx, tensors in pending.items():
        old = layers[idx]
        weights = tensors.get("weights", old.weights)
        bias = tensors.get("bias", old.bias)
        if weights.shape != old.weights.shape or bias.shape != old.bias.shape:
            raise DimensionError(
                f"layer {idx}", (old.weights.shape, old.bias.shape),
                (weights.shape, bias.shape),
            )
        layers[idx] = DenseLayer(weights, bias, old.activation)
    return Network(layers, net.split_index)


def encoder_params(net: Network) -> ParamVector:
    return flatten(net, "encoder")


def decoder_params(net: Network) -> ParamVector:
    return flatten(net, "decoder")


@dataclass
class ForwardCache:
    """Activations recorded by :func:`forward`, consumed by :func:`backward`"""

    inputs: List[Tensor] = field(default_factory=list)
    preacts: List[Tensor] = field(default_factory=list)
    weights: Tuple[Tensor, ...] = ()

    @property
    def depth(self) -> int:
        return len(self.inputs)


def _check_batch(net: Network, batch: Tensor) -> Tensor:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != net.in_dim:
        raise DimensionError("network input", f"[B x {net.in_dim}]", batch.shape)
    return batch


def _run(layers: Sequence[DenseLayer], x: Tensor, cache: Optional[ForwardCache]):
    for layer in layers:
        z = x @ layer.weights.T + layer.bias
        if cache is not None:
            cache.inputs.append(x)
            cache.preacts.append(z)
        x = np.maximum(z, 0.0) if layer.activation is Activation.RELU else z
    return x


def forward(net: Network, batch: Tensor) -> Tuple[Tensor, ForwardCache]:
    batch = _check_batch(net, batch)
    cache = ForwardCache(weights=tuple(layer.weights for layer in net.layers))
    logits = _run(net.layers, batch, cache)
    return logits, cache


def encoder_output(net: Network, batch: Tensor) -> Tensor:
    batch = _check_batch(net, batch)
    return _run(net.layers[: net.split_index], batch, None)


def backward(
    net: Network,
    cache: ForwardCache,
    loss_grad: Tensor,
    feature_grad: Optional[Tensor] = None,
) -> ParamVector:
    """Gradient of the loss with respect to every parameter of ``net``.

    Args:
        net: the network ``cache`` was produced with
        cache: result of :func:`forward`
        loss_grad: ``dL/dlogits``, ``[B x C]``
        feature_grad: optional ``dL/dfeatures`` of an extra loss term defined on the
            Encoder output, ``[B x d_feat]``; it joins the backward pass at the
            Encoder/Decoder boundary
    """
    layers = net.layers
    if cache.depth != len(layers) or len(cache.weights) != len(layers):
        raise ContractViolation("forward cache does not belong to this network")
    if any(w is not layer.weights for w, layer in zip(cache.weights, layers)):
        raise ContractViolation("forward cache is stale, run forward again")
    batch_size = cache.inputs[0].shape[0]
    upstream = np.asarray(loss_grad, dtype=np.float64)
    if upstream.shape != (batch_size, net.out_dim):
        raise DimensionError("loss gradient", (batch_size, net.out_dim), upstream.shape)
    if feature_grad is not None:
        feature_grad = np.asarray(feature_grad, dtype=np.float64)
        if feature_grad.shape != (batch_size, net.feature_dim):
            expected = (batch_size, net.feature_dim)
            raise DimensionError("feature gradient", expected, feature_grad.shape)

    grads: List[Tuple[Tensor, Tensor]] = [None] * len(layers)  # type: ignore[list-item]
    for idx in reversed(range(len(layers))):
        if idx == net.split_index - 1 and feature_grad is not None:
            upstream = upstream + feature_grad
        layer = layers[idx]
        if layer.activation is Activation.RELU:
            dz = upstream * (cache.preacts[idx] > 0.0)
        else:
            dz = upstream
        grads[idx] = (dz.T @ cache.inputs[idx], dz.sum(axis=0))
        upstream = dz @ layer.weights

    template = flatten(net)
    values = np.concatenate([np.concatenate((gw.reshape(-1), gb)) for gw, gb in grads])
    return template.with_values(values)


def predict(net: Network, batch: Tensor) -> np.ndarray:
    logits, _ = forward(net, batch)
    return np.argmax(logits, axis=1)


def accuracy(net: Network, features: Tensor, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(predict(net, features) == labels))


def _log_softmax(x: Tensor) -> Tensor:
    shifted = x - np.max(x, axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    return np.exp(_log_softmax(np.asarray(x, dtype=np.float64)))


def softmax_cross_entropy(logits: Tensor, labels) -> Tuple[float, Tensor]:
    """Mean cross-entropy and its gradient ``(softmax - onehot) / B``"""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError("logits", "[B x C]", logits.shape)
    batch_size, n_classes = logits.shape
    if labels.shape != (batch_size,):
        raise DimensionError("labels", (batch_size,), labels.shape)
    if batch_size == 0:
        return 0.0, np.zeros_like(logits)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValidationError("labels must be integers")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValidationError(f"labels must lie in [0, {n_classes})")
    log_probs = _log_softmax(logits)
    rows = np.arange(batch_size)
    loss = float(-np.mean(log_probs[rows, labels]))
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / batch_size


class OptimizerKind(Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass
class OptimizerState:
    """Hyper-parameters plus the running moments of Adam"""

    kind: OptimizerKind = OptimizerKind.SGD
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: Optional[np.ndarray] = None
    second: Optional[np.ndarray] = None
    layout: Optional[Tuple[LayoutEntry, ...]] = None

    def __post_init__(self):
        self.kind = OptimizerKind(self.kind)
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            msg = f"learning rate must be >= 0, got {self.learning_rate}"
            raise ValidationError(msg)
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValidationError("Adam needs 0 <= beta1, beta2 < 1 and eps > 0")

    def reset(self) -> "OptimizerState":
        """Forget the moments, keep the hyper-parameters"""
        self.step = 0
        self.first = self.second = None
        self.layout = None
        return self

    def fresh(self) -> "OptimizerState":
        return OptimizerState(
            self.kind, self.learning_rate, self.beta1, self.beta2, self.eps
        )


def optimizer_step(
    state: OptimizerState, params: ParamVector, grads: ParamVector
) -> ParamVector:
    """Apply one update; the Adam moments in ``state`` are advanced in place"""
    params.check_layout(grads, "parameters and gradients")
    lr = state.learning_rate
    if state.kind is OptimizerKind.SGD:
        return params.with_values(params.values - lr * grads.values)

    if state.first is None:
        state.first = np.zeros_like(params.values)
        state.second = np.zeros_like(params.values)
        state.layout = params.layout
    elif state.layout != params.layout:
        raise ContractViolation("Adam moments were built for another layout")
    assert state.second is not None
    g = grads.values
    state.step += 1
    state.first = state.beta1 * state.first + (1.0 - state.beta1) * g
    state.second = state.beta2 * state.second + (1.0 - state.beta2) * g * g
    m_hat = state.first / (1.0 - state.beta1**state.step)
    v_hat = state.second / (1.0 - state.beta2**state.step)
    return params.with_values(params.values - lr * m_hat / (np.sqrt(v_hat) + state.eps))


def _pair(a: Tensor, b: Tensor, where: str) -> Tuple[Tensor, Tensor]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(where, a.shape, b.shape)
    return a, b


def manhattan(a: Tensor, b: Tensor) -> float:
    a, b = _pair(a, b, "manhattan")
    return float(np.sum(np.abs(a - b)))


def euclidean(a: Tensor, b: Tensor) -> float:
    a, b = _pair(a, b, "euclidean")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def cosine_distance(a: Tensor, b: Tensor) -> float:
    a, b = _pair(a, b, "cosine_distance")
    a, b = a.reshape(-1), b.reshape(-1)
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        raise ValidationError("cosine distance is undefined for all-zero tensors")
    if np.array_equal(a, b):
        return 0.0
    return float(max(0.0, 1.0 - float(a @ b) / (norm_a * norm_b)))


def _feature_pair(f_ref: Tensor, f_cur: Tensor) -> Tuple[Tensor, Tensor]:
    f_ref, f_cur = _pair(f_ref, f_cur, "feature divergence")
    if f_ref.ndim != 2:
        raise DimensionError("feature divergence", "[B x d]", f_ref.shape)
    if f_ref.shape[0] < 1:
        raise ValidationError("feature divergence needs at least one row")
    return f_ref, f_cur


def kl_feature_divergence(f_ref: Tensor, f_cur: Tensor) -> float:
    """Mean over rows of ``KL(softmax(f_ref) || softmax(f_cur))``"""
    f_ref, f_cur = _feature_pair(f_ref, f_cur)
    log_p = _log_softmax(f_ref)
    log_q = _log_softmax(f_cur)
    per_row = np.sum(np.exp(log_p) * (log_p - log_q), axis=1)
    return float(max(0.0, float(np.mean(per_row))))


def kl_feature_gradient(f_ref: Tensor, f_cur: Tensor) -> Tensor:
    """Gradient of :func:`kl_feature_divergence` with respect to ``f_cur``"""
    f_ref, f_cur = _feature_pair(f_ref, f_cur)
    return (softmax(f_cur) - softmax(f_ref)) / f_ref.shape[0]


def layer_change_profile(net_a: Network, net_b: Network) -> np.ndarray:
    """Euclidean distance between corresponding layers' parameters"""
    if not net_a.same_architecture(net_b):
        raise ValidationError("layer change profile needs identical architectures")
    return np.array(
        [
            math.sqrt(
                float(np.sum((a.weights - b.weights) ** 2))
                + float(np.sum((a.bias - b.bias) ** 2))
            )
            for a, b in zip(net_a.layers, net_b.layers)
        ]
    )
