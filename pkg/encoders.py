"""
Small feedforward encoders for the frozen pre-trained, global and
personalized models, with an exposed pre-final-layer output.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from tensor_core import (
    GradTape,
    Tensor,
    add_bias,
    as_tensor,
    matmul,
    segment,
    soft_cross_entropy,
    tanh,
)

DEFAULT_INPUT_DIM = 24
DEFAULT_HIDDEN_DIMS = (32,)
DEFAULT_EMBED_DIM = 16
DEFAULT_ACTIVATION = "tanh"
DEFAULT_PRETRAIN_EPOCHS = 30
DEFAULT_PRETRAIN_LEARNING_RATE = 0.05
DEFAULT_PRETRAIN_BATCH_SIZE = 32
DEFAULT_PRETRAIN_EMBED_NORM = 1.0
PARAMS_FORMAT_VERSION = 1
SUPPORTED_ACTIVATIONS = ("tanh", "linear")


class EncoderError(Exception):
    """Base class for encoder-related exceptions."""


class EncoderDimensionError(EncoderError):
    """Raised when inputs, parameters or gradients have the wrong shape."""


class ParamsFormatError(EncoderError):
    """Raised when a saved parameter file cannot be read back."""


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = DEFAULT_INPUT_DIM
    hidden_dims: tuple = DEFAULT_HIDDEN_DIMS
    embed_dim: int = DEFAULT_EMBED_DIM
    activation: str = DEFAULT_ACTIVATION

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.activation not in SUPPORTED_ACTIVATIONS:
            raise EncoderError(f"Unsupported activation: {self.activation}")
        if min((self.input_dim, self.embed_dim, *self.hidden_dims)) < 1:
            raise EncoderError(f"All layer widths must be positive: {self}")

    @property
    def widths(self) -> tuple:
        return (self.input_dim, *self.hidden_dims, self.embed_dim)

    @property
    def layer_shapes(self) -> list:
        widths = self.widths
        return [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]

    @property
    def parameter_count(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_shapes)

    @property
    def pre_final_dim(self) -> int:
        return self.widths[-2]


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = DEFAULT_PRETRAIN_EPOCHS
    learning_rate: float = DEFAULT_PRETRAIN_LEARNING_RATE
    batch_size: int = DEFAULT_PRETRAIN_BATCH_SIZE
    embed_norm: float = DEFAULT_PRETRAIN_EMBED_NORM

    def __post_init__(self):
        if self.embed_norm <= 0:
            raise EncoderError(f"embed_norm must be positive, got {self.embed_norm}")


@dataclass(frozen=True, eq=False)
class EncoderParams:
    """Immutable snapshot of layer weights (in x out) and biases (out)."""

    config: EncoderConfig
    weights: tuple
    biases: tuple

    def __post_init__(self):
        shapes = self.config.layer_shapes
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise EncoderDimensionError(
                f"Expected {len(shapes)} layers, got {len(self.weights)} weights "
                f"and {len(self.biases)} biases."
            )
        frozen_weights, frozen_biases = [], []
        for (fan_in, fan_out), weight, bias in zip(shapes, self.weights, self.biases):
            weight = np.array(weight, dtype=np.float64)
            bias = np.array(bias, dtype=np.float64)
            if weight.shape != (fan_in, fan_out) or bias.shape != (fan_out,):
                raise EncoderDimensionError(
                    f"Layer {fan_in}->{fan_out} got weight {weight.shape}, bias {bias.shape}"
                )
            weight.setflags(write=False)
            bias.setflags(write=False)
            frozen_weights.append(weight)
            frozen_biases.append(bias)
        object.__setattr__(self, "weights", tuple(frozen_weights))
        object.__setattr__(self, "biases", tuple(frozen_biases))

    def arrays(self) -> list:
        """Parameters in tape order: W0, b0, W1, b1, ..."""
        ordered = []
        for weight, bias in zip(self.weights, self.biases):
            ordered.extend((weight, bias))
        return ordered

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    @classmethod
    def from_flat(cls, config: EncoderConfig, flat) -> "EncoderParams":
        flat = np.asarray(flat, dtype=np.float64).reshape(-1)
        if flat.size != config.parameter_count:
            raise EncoderDimensionError(
                f"Flat vector has {flat.size} values, architecture needs {config.parameter_count}"
            )
        weights, biases, offset = [], [], 0
        for fan_in, fan_out in config.layer_shapes:
            weights.append(flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out))
            offset += fan_in * fan_out
            biases.append(flat[offset : offset + fan_out])
            offset += fan_out
        return cls(config, tuple(weights), tuple(biases))

    def tensors(self, tape: Optional[GradTape] = None) -> list:
        if tape is None:
            return [Tensor(a) for a in self.arrays()]
        return [tape.watch(a) for a in self.arrays()]

    def activation_tags(self) -> tuple:
        return tuple(self.config.activation for _ in self.config.hidden_dims)


@dataclass(frozen=True)
class EncoderOutput:
    final: Tensor
    pre_final: Tensor
    leaves: tuple = field(default_factory=tuple)


def layer_tensors_from_flat(flat: Tensor, config: EncoderConfig) -> list:
    """Tape-aware view of a flat parameter vector as W0, b0, W1, b1, ..."""
    layers, offset = [], 0
    for fan_in, fan_out in config.layer_shapes:
        layers.append(segment(flat, offset, (fan_in, fan_out)))
        offset += fan_in * fan_out
        layers.append(segment(flat, offset, (fan_out,)))
        offset += fan_out
    return layers


def forward_layers(layers: Sequence[Tensor], batch, config: EncoderConfig):
    batch = as_tensor(batch)
    if batch.data.ndim != 2 or batch.data.shape[1] != config.input_dim:
        raise EncoderDimensionError(
            f"Batch shape {batch.shape} does not match input_dim {config.input_dim}"
        )
    hidden = batch
    pairs = [(layers[i], layers[i + 1]) for i in range(0, len(layers), 2)]
    for weight, bias in pairs[:-1]:
        hidden = add_bias(matmul(hidden, weight), bias)
        if config.activation == "tanh":
            hidden = tanh(hidden)
    weight, bias = pairs[-1]
    return add_bias(matmul(hidden, weight), bias), hidden


def forward(params: EncoderParams, batch, tape: Optional[GradTape] = None) -> EncoderOutput:
    leaves = params.tensors(tape)
    final, pre_final = forward_layers(leaves, batch, params.config)
    return EncoderOutput(final, pre_final, tuple(leaves) if tape is not None else ())


def init_random(config: EncoderConfig, seed) -> EncoderParams:
    rng = np.random.default_rng(seed)
    weights = tuple(
        rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        for fan_in, fan_out in config.layer_shapes
    )
    biases = tuple(np.zeros(fan_out) for _, fan_out in config.layer_shapes)
    return EncoderParams(config, weights, biases)


def sgd_step(params: EncoderParams, grads: Sequence[np.ndarray], lr: float) -> EncoderParams:
    """Plain SGD: p <- p - lr * g. No momentum, no weight decay."""
    if lr < 0:
        raise EncoderError(f"Learning rate must be non-negative, got {lr}")
    arrays = params.arrays()
    if len(grads) != len(arrays):
        raise EncoderDimensionError(f"Expected {len(arrays)} gradients, got {len(grads)}")
    updated = []
    for array, grad in zip(arrays, grads):
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != array.shape:
            raise EncoderDimensionError(f"Gradient {grad.shape} does not match {array.shape}")
        updated.append(array - lr * grad)
    return EncoderParams(params.config, tuple(updated[0::2]), tuple(updated[1::2]))


def pretrain_supervised(
    params: EncoderParams,
    pool: Mapping[int, np.ndarray],
    settings: PretrainConfig,
    seed,
) -> EncoderParams:
    """
    Supervised pass over a labelled identity pool: a linear classifier head
    over the pool identities on top of the embedding, softmax cross entropy,
    plain SGD. The head is discarded afterwards and the final layer is
    rescaled so pool embeddings have mean norm embed_norm.
    """
    identities = sorted(pool)
    if len(identities) < 2:
        raise EncoderError("Supervised pre-training needs at least two identities.")
    features = np.concatenate([pool[i] for i in identities])
    labels = np.concatenate([np.full(len(pool[i]), n) for n, i in enumerate(identities)])
    rng = np.random.default_rng(seed)
    head = init_random(
        EncoderConfig(params.config.embed_dim, (), len(identities), "linear"), rng
    )

    for epoch in range(settings.epochs):
        order = rng.permutation(len(features))
        epoch_loss = 0.0
        for start in range(0, len(order), settings.batch_size):
            rows = order[start : start + settings.batch_size]
            tape = GradTape()
            encoded = forward(params, features[rows], tape)
            scored = forward(head, encoded.final, tape)
            targets = np.eye(len(identities))[labels[rows]]
            loss = soft_cross_entropy(scored.final, targets)
            grads = tape.gradient(loss, [*encoded.leaves, *scored.leaves])
            split = len(encoded.leaves)
            params = sgd_step(params, grads[:split], settings.learning_rate)
            head = sgd_step(head, grads[split:], settings.learning_rate)
            epoch_loss += loss.item() * len(rows)
        logging.debug("Pre-training epoch %d loss %.6f", epoch, epoch_loss / len(order))
    return rescale_embeddings(params, features, settings.embed_norm)


def rescale_embeddings(params: EncoderParams, features: np.ndarray, target_norm: float) -> EncoderParams:
    """Scale the last layer so embeddings of features have mean norm target_norm. Cosines are unchanged."""
    mean_norm = float(np.linalg.norm(forward(params, features).final.data, axis=1).mean())
    if mean_norm == 0.0:
        raise EncoderError("Cannot rescale an encoder whose embeddings are all zero.")
    factor = target_norm / mean_norm
    weights = (*params.weights[:-1], params.weights[-1] * factor)
    biases = (*params.biases[:-1], params.biases[-1] * factor)
    logging.debug("Rescaled embeddings from mean norm %.4f to %.4f", mean_norm, target_norm)
    return EncoderParams(params.config, weights, biases)


def init_pretrained(
    seed,
    config: EncoderConfig,
    public_pool: Mapping[int, np.ndarray],
    settings: PretrainConfig = PretrainConfig(),
) -> EncoderParams:
    """Seeded random init followed by supervised pre-training on the public pool."""
    rng = np.random.default_rng(seed)
    params = init_random(config, rng)
    params = pretrain_supervised(params, public_pool, settings, rng)
    logging.info(
        "Pre-trained encoder on %d public identities (%d parameters)",
        len(public_pool),
        config.parameter_count,
    )
    return params


def checksum(params: EncoderParams) -> str:
    return hashlib.sha256(params.flatten().astype("<f8").tobytes()).hexdigest()


def save_params(params: EncoderParams, path) -> tuple:
    """
    Write <path>.bin (flat little-endian float64, layer order W0 row-major,
    b0, W1, b1, ...) and a <path>.json sidecar describing the architecture.
    """
    path = Path(path)
    binary, sidecar = path.with_suffix(".bin"), path.with_suffix(".json")
    binary.parent.mkdir(parents=True, exist_ok=True)
    params.flatten().astype("<f8").tofile(binary)
    description = {
        "format_version": PARAMS_FORMAT_VERSION,
        "dtype": "<f8",
        "parameter_count": params.config.parameter_count,
        **asdict(params.config),
    }
    description["hidden_dims"] = list(params.config.hidden_dims)
    sidecar.write_text(json.dumps(description, indent=2, sort_keys=True))
    return binary, sidecar


def load_params(path) -> EncoderParams:
    path = Path(path)
    binary, sidecar = path.with_suffix(".bin"), path.with_suffix(".json")
    try:
        description = json.loads(sidecar.read_text())
        if description.get("format_version") != PARAMS_FORMAT_VERSION:
            raise ParamsFormatError(
                f"Unsupported format_version {description.get('format_version')} in {sidecar}"
            )
        config = EncoderConfig(
            input_dim=description["input_dim"],
            hidden_dims=tuple(description["hidden_dims"]),
            embed_dim=description["embed_dim"],
            activation=description["activation"],
        )
        flat = np.fromfile(binary, dtype="<f8")
    except (OSError, ValueError, KeyError) as error:
        raise ParamsFormatError(f"Cannot read parameters from {path}: {error}") from error
    try:
        return EncoderParams.from_flat(config, flat)
    except EncoderDimensionError as error:
        raise ParamsFormatError(f"{binary}: {error}") from error
