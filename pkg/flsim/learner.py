"""
Minimal dense-tensor neural network engine.

Models are plain data (architecture + one flat parameter array per layer), and every
operation here is a pure function of its arguments, so models can be shipped to
client workers and results do not depend on evaluation order.

Each layer's flat array holds the weights (row-major, `shape`) followed by the bias
(`shape[0]` entries). Hidden layers apply the activation, the last layer emits logits
and the loss is mean softmax cross-entropy.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field

from flsim.datasets import Dataset
from flsim.errors import ConfigError, NumericError, SchemaError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh")


class TrainingHyperparams(BaseModel):
    """Local SGD settings plus the constants of the per-round loss-drop bound."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    eta: float = Field(default=0.01, ge=0, description="learning rate")
    tau: int = Field(default=5, ge=1, description="local SGD steps per round")
    batch_size: int = Field(default=32, ge=1)
    L_smooth: float = Field(default=1.0, gt=0, description="smoothness constant L")
    sigma_sq: float = Field(default=0.1, ge=0, description="gradient noise variance")
    n_clients: int = Field(default=10, ge=1)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "dense" or "conv"
    fan_in: int  # input features (dense) or input channels (conv)
    fan_out: int  # output features or output channels
    kernel: int = 1
    stride: int = 1

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.kind == "conv":
            return (self.fan_out, self.fan_in, self.kernel, self.kernel)
        return (self.fan_out, self.fan_in)

    @property
    def size(self) -> int:
        return math.prod(self.weight_shape) + self.fan_out


@dataclass(frozen=True)
class Architecture:
    name: str
    input_shape: Tuple[int, ...]  # (features,) or (channels, height, width)
    layers: Tuple[LayerSpec, ...]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation '{self.activation}'")
        if not self.layers:
            raise ConfigError("architecture needs at least one layer")
        shape = self.input_shape
        for spec in self.layers:
            if spec.kind == "conv":
                if len(shape) != 3 or shape[0] != spec.fan_in:
                    raise SchemaError(f"layer {spec.name}: expects {spec.fan_in} input channels, got shape {shape}")
                side_h = (shape[1] - spec.kernel) // spec.stride + 1
                side_w = (shape[2] - spec.kernel) // spec.stride + 1
                if side_h < 1 or side_w < 1:
                    raise SchemaError(f"layer {spec.name}: kernel {spec.kernel} larger than input {shape}")
                shape = (spec.fan_out, side_h, side_w)
            elif spec.kind == "dense":
                if math.prod(shape) != spec.fan_in:
                    raise SchemaError(f"layer {spec.name}: expects {spec.fan_in} inputs, got {math.prod(shape)}")
                shape = (spec.fan_out,)
            else:
                raise ConfigError(f"layer {spec.name}: unknown kind '{spec.kind}'")

    @property
    def num_classes(self) -> int:
        return self.layers[-1].fan_out


@dataclass(frozen=True)
class Schema:
    names: Tuple[str, ...]
    sizes: Tuple[int, ...]  # D_k

    @property
    def l(self) -> int:
        return len(self.sizes)

    @property
    def D(self) -> int:
        return sum(self.sizes)


@dataclass(frozen=True, eq=False)
class Layer:
    name: str
    shape: Tuple[int, ...]
    params: np.ndarray


@dataclass(frozen=True, eq=False)
class LayeredModel:
    architecture: Architecture
    layers: Tuple[Layer, ...]

    def __post_init__(self):
        specs = self.architecture.layers
        if len(specs) != len(self.layers):
            raise SchemaError(f"{len(self.layers)} parameter arrays for {len(specs)} layers")
        for spec, layer in zip(specs, self.layers):
            if layer.params.shape != (spec.size,):
                raise SchemaError(f"layer {spec.name}: expected {spec.size} parameters, got {layer.params.shape}")

    @property
    def schema(self) -> Schema:
        return Schema(tuple(layer.name for layer in self.layers), tuple(layer.params.size for layer in self.layers))

    def flat(self) -> np.ndarray:
        return np.concatenate([layer.params for layer in self.layers])

    def with_params(self, arrays: Sequence[np.ndarray]) -> "LayeredModel":
        return LayeredModel(
            self.architecture,
            tuple(Layer(layer.name, layer.shape, np.asarray(a, dtype=np.float64)) for layer, a in zip(self.layers, arrays)),
        )

    def with_flat(self, vector: np.ndarray) -> "LayeredModel":
        return self.with_params(split_flat(vector, self.schema.sizes))

    def add(self, deltas: Sequence[np.ndarray]) -> "LayeredModel":
        if len(deltas) != len(self.layers):
            raise SchemaError(f"{len(deltas)} updates for {len(self.layers)} layers")
        return self.with_params([layer.params + d for layer, d in zip(self.layers, deltas)])


@dataclass(frozen=True)
class ForwardResult:
    loss: float
    logits: np.ndarray


@dataclass(frozen=True, eq=False)
class GradientStats:
    sq_norm_sum: float  # sum over the local steps of the squared stochastic gradient norm
    per_layer_update: Tuple[np.ndarray, ...]  # delta w = w_{r,tau} - w_{r,0}
    mean_loss: float = float("nan")
    steps: int = 0


def split_flat(vector: np.ndarray, sizes: Sequence[int]) -> List[np.ndarray]:
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape != (sum(sizes),):
        raise SchemaError(f"flat vector of shape {vector.shape} does not match {sum(sizes)} parameters")
    return np.split(vector, np.cumsum(sizes)[:-1])


# -- architectures ---------------------------------------------------------------


def mlp(sizes: Sequence[int], name: str = "mlp", activation: str = "relu") -> Architecture:
    """Fully connected network, e.g. mlp([784, 300, 100, 10])."""
    layers = tuple(
        LayerSpec(f"FC{i + 1}", "dense", fan_in, fan_out) for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]))
    )
    return Architecture(name, (sizes[0],), layers, activation)


def lenet_300_100(dims: int = 784, classes: int = 10, activation: str = "relu") -> Architecture:
    return mlp([dims, 300, 100, classes], "lenet_300_100", activation)


def mlp_small(dims: int = 784, classes: int = 10, activation: str = "relu") -> Architecture:
    return mlp([dims, 64, classes], "mlp_small", activation)


def _image_shape(dims: int) -> Tuple[int, int, int]:
    side = math.isqrt(dims)
    if side * side != dims:
        raise ConfigError(f"convolutional models need square single-channel inputs, got {dims} features")
    return (1, side, side)


def small_cnn(dims: int = 784, classes: int = 10, width: int = 8, activation: str = "relu") -> Architecture:
    """Two stride-2 convolutions and two dense layers (CV1, CV2, FC1, FC2)."""
    shape = _image_shape(dims)
    side = (shape[1] - 5) // 2 + 1
    side = (side - 5) // 2 + 1
    layers = (
        LayerSpec("CV1", "conv", 1, width, kernel=5, stride=2),
        LayerSpec("CV2", "conv", width, 2 * width, kernel=5, stride=2),
        LayerSpec("FC1", "dense", 2 * width * side * side, 64),
        LayerSpec("FC2", "dense", 64, classes),
    )
    return Architecture("small_cnn", shape, layers, activation)


def plain_cnn(dims: int = 784, classes: int = 10, activation: str = "relu") -> Architecture:
    """Eight-layer plain CNN (5 conv + 3 dense) used for the grouping runs."""
    shape = _image_shape(dims)
    convs = [(4, 3, 1), (8, 3, 2), (8, 3, 1), (16, 3, 2), (16, 3, 1)]
    layers = []
    channels, side = shape[0], shape[1]
    for i, (out, kernel, stride) in enumerate(convs):
        layers.append(LayerSpec(f"CV{i + 1}", "conv", channels, out, kernel=kernel, stride=stride))
        channels, side = out, (side - kernel) // stride + 1
    layers += [
        LayerSpec("FC1", "dense", channels * side * side, 32),
        LayerSpec("FC2", "dense", 32, 32),
        LayerSpec("FC3", "dense", 32, classes),
    ]
    return Architecture("plain_cnn", shape, tuple(layers), activation)


def init_model(architecture: Architecture, rng: np.random.Generator) -> LayeredModel:
    """Uniform(+-sqrt(6 / (fan_in + fan_out))) weights, zero biases."""
    layers = []
    for spec in architecture.layers:
        receptive = spec.kernel * spec.kernel
        limit = math.sqrt(6.0 / (spec.fan_in * receptive + spec.fan_out * receptive))
        weights = rng.uniform(-limit, limit, size=math.prod(spec.weight_shape))
        layers.append(Layer(spec.name, spec.weight_shape, np.concatenate([weights, np.zeros(spec.fan_out)])))
    return LayeredModel(architecture, tuple(layers))


# -- forward / backward ----------------------------------------------------------


def _unpack(spec: LayerSpec, params: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    cut = params.size - spec.fan_out
    return params[:cut].reshape(spec.weight_shape), params[cut:]


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    k = w.shape[-1]
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("bchwij,ocij->bohw", windows, w, optimize=True) + b[None, :, None, None]
    return out, windows


def _conv_backward(grad: np.ndarray, windows: np.ndarray, w: np.ndarray, stride: int, in_shape, need_input: bool):
    k = w.shape[-1]
    dw = np.einsum("bchwij,bohw->ocij", windows, grad, optimize=True)
    db = grad.sum(axis=(0, 2, 3))
    if not need_input:
        return None, dw, db
    dwin = np.einsum("bohw,ocij->bchwij", grad, w, optimize=True)
    dx = np.zeros(in_shape)
    rows, cols = grad.shape[2:]
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + stride * rows : stride, j : j + stride * cols : stride] += dwin[..., i, j]
    return dx, dw, db


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    return np.maximum(z, 0.0) if activation == "relu" else np.tanh(z)


def _activation_grad(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    return (z > 0).astype(np.float64) if activation == "relu" else 1.0 - a * a


def _check_batch(model: LayeredModel, batch: Dataset) -> np.ndarray:
    if len(batch) == 0:
        raise SchemaError("empty batch")
    arch = model.architecture
    if batch.dims != math.prod(arch.input_shape):
        raise SchemaError(f"batch has {batch.dims} features, model '{arch.name}' expects {math.prod(arch.input_shape)}")
    if batch.y.min() < 0 or batch.y.max() >= arch.num_classes:
        raise SchemaError(f"labels outside 0..{arch.num_classes - 1}")
    return np.asarray(batch.x, dtype=np.float64).reshape((len(batch),) + arch.input_shape)


def _propagate(model: LayeredModel, x: np.ndarray):
    arch = model.architecture
    caches = []
    h = x
    last = len(arch.layers) - 1
    for idx, (spec, layer) in enumerate(zip(arch.layers, model.layers)):
        w, b = _unpack(spec, layer.params)
        if spec.kind == "conv":
            z, saved = _conv_forward(h, w, b, spec.stride)
        else:
            saved = h.reshape(len(h), -1)
            z = saved @ w.T + b
        a = z if idx == last else _activate(z, arch.activation)
        caches.append((h.shape, saved, z, a))
        h = a
    return h, caches


def _cross_entropy(logits: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(len(y)), y].mean())
    return loss, np.exp(log_probs)


def forward(model: LayeredModel, batch: Dataset) -> ForwardResult:
    """Mean cross-entropy loss and per-example logits."""
    x = _check_batch(model, batch)
    logits, _ = _propagate(model, x)
    loss, _ = _cross_entropy(logits, batch.y)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} on a batch of {len(batch)}")
    return ForwardResult(loss, logits)


def loss_and_gradients(model: LayeredModel, batch: Dataset) -> Tuple[float, List[np.ndarray]]:
    x = _check_batch(model, batch)
    logits, caches = _propagate(model, x)
    loss, probs = _cross_entropy(logits, batch.y)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} on a batch of {len(batch)}")
    grad = probs
    grad[np.arange(len(batch)), batch.y] -= 1.0
    grad /= len(batch)

    arch = model.architecture
    grads: List[Optional[np.ndarray]] = [None] * len(arch.layers)
    for idx in reversed(range(len(arch.layers))):
        spec = arch.layers[idx]
        in_shape, saved, z, a = caches[idx]
        if idx != len(arch.layers) - 1:
            grad = grad * _activation_grad(z, a, arch.activation)
        w, _ = _unpack(spec, model.layers[idx].params)
        if spec.kind == "conv":
            grad_in, dw, db = _conv_backward(grad, saved, w, spec.stride, in_shape, need_input=idx > 0)
        else:
            dw = grad.T @ saved
            db = grad.sum(axis=0)
            grad_in = (grad @ w).reshape(in_shape) if idx > 0 else None
        grads[idx] = np.concatenate([dw.ravel(), db])
        grad = grad_in
    return loss, grads


def backward(model: LayeredModel, batch: Dataset) -> List[np.ndarray]:
    """Per-layer gradients of the mean cross-entropy loss, flat in schema order."""
    return loss_and_gradients(model, batch)[1]


def hidden_preactivations(model: LayeredModel, batch: Dataset) -> List[np.ndarray]:
    """Pre-activation values of every hidden layer (the points where ReLU is not smooth)."""
    _, caches = _propagate(model, _check_batch(model, batch))
    return [z for _, _, z, _ in caches[:-1]]


# -- training --------------------------------------------------------------------


def local_train(
    model: LayeredModel, shard: Dataset, hp: TrainingHyperparams, rng: np.random.Generator
) -> Tuple[LayeredModel, GradientStats]:
    """
    Run exactly `hp.tau` SGD steps on the shard.

    Each step samples a mini-batch of `hp.batch_size` without replacement (the whole
    shard when it is not larger than the batch size).

    Returns:
        (updated model, GradientStats): the updated model is `model + delta` with
        delta = w_final - w_initial, so the two are consistent bit for bit.
    """
    params = [layer.params.copy() for layer in model.layers]
    current = model
    sq_norm_sum = 0.0
    losses = []
    for step in range(hp.tau):
        if hp.batch_size >= len(shard):
            batch = shard
        else:
            batch = shard.subset(np.sort(rng.choice(len(shard), size=hp.batch_size, replace=False)))
        loss, grads = loss_and_gradients(current, batch)
        losses.append(loss)
        sq_norm_sum += float(sum(np.dot(g, g) for g in grads))
        for p, g in zip(params, grads):
            p -= hp.eta * g
        current = model.with_params(params)

    delta = [p - layer.params for p, layer in zip(params, model.layers)]
    if not all(np.all(np.isfinite(d)) for d in delta):
        raise NumericError(f"non-finite local update after {hp.tau} steps")
    stats = GradientStats(sq_norm_sum, tuple(delta), float(np.mean(losses)), hp.tau)
    return model.add(delta), stats


# -- Hessian-vector products -----------------------------------------------------


def central_difference_hvp(
    gradient: Callable[[np.ndarray], np.ndarray],
    point: np.ndarray,
    direction: np.ndarray,
    weight_scale: Optional[float] = None,
) -> np.ndarray:
    """
    (g(w + eps v) - g(w - eps v)) / (2 eps) with eps = 1e-3 (1 + |w|_inf) / |v|_inf.

    `weight_scale` replaces |w|_inf when the point is only a block of a larger model.
    """
    point = np.asarray(point, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    direction_scale = np.max(np.abs(direction)) if direction.size else 0.0
    if direction_scale == 0.0:
        raise ValueError("Hessian-vector product needs a nonzero direction")
    if weight_scale is None:
        weight_scale = float(np.max(np.abs(point)))
    eps = 1e-3 * (1.0 + weight_scale) / direction_scale
    return (gradient(point + eps * direction) - gradient(point - eps * direction)) / (2.0 * eps)


def _mask(layer_mask: Union[int, Iterable[int]], count: int) -> List[int]:
    layers = [layer_mask] if isinstance(layer_mask, (int, np.integer)) else sorted(set(int(k) for k in layer_mask))
    if not layers or layers[0] < 0 or layers[-1] >= count:
        raise SchemaError(f"layer mask {layer_mask} outside 0..{count - 1}")
    return [int(k) for k in layers]


def hvp(model: LayeredModel, batch: Dataset, v: np.ndarray, layer_mask: Union[int, Iterable[int]]) -> np.ndarray:
    """
    Hessian-vector product restricted to the masked layers' block.

    `v` covers only the masked layers (concatenated in layer order); all other
    coordinates are treated as zero and the result is the masked block of H v.
    """
    layers = _mask(layer_mask, len(model.layers))
    sizes = [model.layers[k].params.size for k in layers]
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (sum(sizes),):
        raise SchemaError(f"direction of shape {v.shape} for {sum(sizes)} masked parameters")
    base = [layer.params for layer in model.layers]
    scale = max(float(np.max(np.abs(p))) for p in base)

    def masked_gradient(point: np.ndarray) -> np.ndarray:
        arrays = list(base)
        for k, part in zip(layers, split_flat(point, sizes)):
            arrays[k] = part
        grads = backward(model.with_params(arrays), batch)
        return np.concatenate([grads[k] for k in layers])

    masked = np.concatenate([base[k] for k in layers])
    return central_difference_hvp(masked_gradient, masked, v, weight_scale=scale)
