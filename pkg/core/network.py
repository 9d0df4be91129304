"""
Multilayer perceptrons as flat sequences of levels (affine maps and
elementwise activations), with forward passes that capture level outputs
at partition boundaries and an exact reverse pass.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import ClassVar, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import InvalidArgumentError, ShapeMismatchError
from core.numerics import as_matrix
from utils.logger import setup_logger

logger = setup_logger(__name__)


class Activation(str, Enum):
    """Elementwise activation tags."""
    RELU = "relu"
    IDENTITY = "identity"


class Boundary(str, Enum):
    """Where a fusion level's output is read."""
    PREACTIVATION = "preactivation"
    POSTACTIVATION = "postactivation"


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class AffineLevel:
    """Affine map x -> x W^T + b with W of shape (out, in)."""
    weight: np.ndarray
    bias: np.ndarray
    kind: ClassVar[str] = "affine"

    def __post_init__(self):
        weight = _frozen(self.weight)
        bias = _frozen(np.reshape(self.bias, -1))
        if weight.ndim != 2:
            raise ShapeMismatchError(f"affine weight must be 2-D, got shape {weight.shape}")
        if bias.shape[0] != weight.shape[0]:
            raise ShapeMismatchError(
                f"affine bias has length {bias.shape[0]} but weight has {weight.shape[0]} rows"
            )
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise InvalidArgumentError("affine parameters must be finite")
        object.__setattr__(self, "weight", weight)
        object.__setattr__(self, "bias", bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def apply(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weight.T + self.bias


@dataclass(frozen=True)
class ActivationLevel:
    """Parameter-free elementwise activation."""
    function: Activation
    kind: ClassVar[str] = "activation"

    def __post_init__(self):
        try:
            object.__setattr__(self, "function", Activation(self.function))
        except ValueError as e:
            raise InvalidArgumentError(f"unsupported activation: {self.function!r}") from e

    def apply(self, X: np.ndarray) -> np.ndarray:
        if self.function is Activation.RELU:
            return np.maximum(X, 0.0)
        return X

    def derivative(self, pre: np.ndarray) -> np.ndarray:
        """Elementwise derivative evaluated at the activation's input."""
        if self.function is Activation.RELU:
            return (pre > 0).astype(np.float64)
        return np.ones_like(pre)


Level = Union[AffineLevel, ActivationLevel]


@dataclass(frozen=True)
class LevelPartition:
    """Strictly increasing layer indices whose outputs are the fusion-level outputs."""
    boundaries: Tuple[int, ...]

    def __post_init__(self):
        boundaries = tuple(int(b) for b in self.boundaries)
        if not boundaries:
            raise InvalidArgumentError("partition needs at least one boundary")
        if any(b >= a for b, a in zip(boundaries, boundaries[1:])):
            raise InvalidArgumentError(f"partition boundaries must be strictly increasing: {boundaries}")
        object.__setattr__(self, "boundaries", boundaries)

    def __len__(self) -> int:
        return len(self.boundaries)

    def validate_for(self, levels: Sequence[Level]) -> None:
        """Check boundaries lie in range and the last one reads the logits."""
        if self.boundaries[0] < 0 or self.boundaries[-1] != len(levels) - 1:
            raise InvalidArgumentError(
                f"partition {self.boundaries} invalid for {len(levels)} layers; "
                f"last boundary must be {len(levels) - 1}"
            )

    def segments(self) -> List[Tuple[int, int]]:
        """Half-open layer ranges [start, stop) covered by each fusion level."""
        starts = (0,) + tuple(b + 1 for b in self.boundaries[:-1])
        return [(start, b + 1) for start, b in zip(starts, self.boundaries)]

    def is_preactivation(self, levels: Sequence[Level]) -> bool:
        return all(isinstance(levels[b], AffineLevel) for b in self.boundaries)


def preactivation_partition(levels: Sequence[Level]) -> LevelPartition:
    """Boundaries right after every affine map."""
    return LevelPartition(tuple(i for i, level in enumerate(levels) if isinstance(level, AffineLevel)))


def postactivation_partition(levels: Sequence[Level]) -> LevelPartition:
    """Boundaries after the activation following each hidden affine map; logits last."""
    boundaries = []
    last = len(levels) - 1
    for i, level in enumerate(levels):
        if not isinstance(level, AffineLevel) or i == last:
            continue
        j = i
        while j + 1 < last and isinstance(levels[j + 1], ActivationLevel):
            j += 1
        boundaries.append(j)
    boundaries.append(last)
    return LevelPartition(tuple(boundaries))


def partition_for(levels: Sequence[Level], boundary: Union[str, Boundary]) -> LevelPartition:
    if Boundary(boundary) is Boundary.PREACTIVATION:
        return preactivation_partition(levels)
    return postactivation_partition(levels)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """An MLP: a chain of levels ending in an affine map that produces logits."""
    levels: Tuple[Level, ...]
    partition: Optional[LevelPartition] = None

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels:
            raise InvalidArgumentError("model needs at least one level")
        if not isinstance(levels[-1], AffineLevel):
            raise InvalidArgumentError("final level must be an affine map producing logits")

        width = None
        for i, level in enumerate(levels):
            if isinstance(level, AffineLevel):
                if width is not None and level.in_dim != width:
                    raise ShapeMismatchError(
                        f"level {i} expects input width {level.in_dim} but receives {width}"
                    )
                width = level.out_dim
            elif not isinstance(level, ActivationLevel):
                raise InvalidArgumentError(f"level {i} has unsupported type {type(level).__name__}")
            elif width is None:
                raise InvalidArgumentError("model must start with an affine level")

        partition = self.partition or preactivation_partition(levels)
        partition.validate_for(levels)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "partition", partition)

    @property
    def input_dim(self) -> int:
        return self.levels[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.levels[-1].out_dim

    @property
    def affine_indices(self) -> List[int]:
        return [i for i, level in enumerate(self.levels) if isinstance(level, AffineLevel)]

    def width_at(self, layer: int) -> int:
        """Output width of the layer at index `layer` (-1 is the input)."""
        for level in reversed(self.levels[: layer + 1]):
            if isinstance(level, AffineLevel):
                return level.out_dim
        return self.input_dim

    def widths(self, partition: Optional[LevelPartition] = None) -> List[int]:
        partition = partition or self.partition
        return [self.width_at(b) for b in partition.boundaries]

    def architecture(self) -> Tuple:
        """Hashable description of layer kinds and shapes."""
        return tuple(
            ("affine", level.out_dim, level.in_dim) if isinstance(level, AffineLevel)
            else ("activation", level.function.value)
            for level in self.levels
        )

    def with_partition(self, partition: LevelPartition) -> "ModelSpec":
        return ModelSpec(self.levels, partition)

    def parameters(self) -> List[np.ndarray]:
        """Writable copies [W0, b0, W1, b1, ...] of every affine level."""
        params = []
        for i in self.affine_indices:
            params.append(np.array(self.levels[i].weight))
            params.append(np.array(self.levels[i].bias))
        return params

    def with_parameters(self, params: Sequence[np.ndarray]) -> "ModelSpec":
        """New model with the affine parameters replaced in parameters() order."""
        if len(params) != 2 * len(self.affine_indices):
            raise ShapeMismatchError(
                f"expected {2 * len(self.affine_indices)} parameter arrays, got {len(params)}"
            )
        levels = list(self.levels)
        for n, i in enumerate(self.affine_indices):
            weight, bias = params[2 * n], params[2 * n + 1]
            if np.shape(weight) != levels[i].weight.shape or np.shape(bias) != levels[i].bias.shape:
                raise ShapeMismatchError(f"parameter shapes for level {i} do not match")
            levels[i] = AffineLevel(weight, bias)
        return ModelSpec(tuple(levels), self.partition)

    def replace_level(self, index: int, level: Level) -> "ModelSpec":
        levels = list(self.levels)
        levels[index] = level
        return ModelSpec(tuple(levels), self.partition)


@dataclass(frozen=True, eq=False)
class ActivationBundle:
    """Per-level output matrices (batch x width) of one model."""
    model_id: str
    outputs: Tuple[np.ndarray, ...]
    boundaries: Tuple[int, ...] = field(default=())

    @property
    def batch_size(self) -> int:
        return self.outputs[0].shape[0]

    @property
    def widths(self) -> List[int]:
        return [z.shape[1] for z in self.outputs]

    def __len__(self) -> int:
        return len(self.outputs)

    def __getitem__(self, level: int) -> np.ndarray:
        return self.outputs[level]

    @staticmethod
    def concat(bundles: Sequence["ActivationBundle"], level: int) -> np.ndarray:
        """Concatenated outputs z^i of all models at one level."""
        return np.hstack([bundle.outputs[level] for bundle in bundles])


@dataclass
class Gradients:
    """Reverse-mode gradients of <upstream, output>."""
    param_grads: List[Optional[Tuple[np.ndarray, np.ndarray]]]
    input_grad: np.ndarray
    layer_grads: List[np.ndarray]
    level_grads: List[np.ndarray] = field(default_factory=list)

    def flat_params(self) -> List[np.ndarray]:
        """Gradients in ModelSpec.parameters() order."""
        flat = []
        for grads in self.param_grads:
            if grads is not None:
                flat.extend(grads)
        return flat


def forward_layers(levels: Sequence[Level], X: np.ndarray) -> List[np.ndarray]:
    """Outputs of every level in the sequence, in order."""
    outputs = []
    H = X
    for i, level in enumerate(levels):
        if isinstance(level, AffineLevel) and H.shape[1] != level.in_dim:
            raise ShapeMismatchError(
                f"level {i} expects input width {level.in_dim} but receives {H.shape[1]}"
            )
        H = level.apply(H)
        outputs.append(H)
    return outputs


def backward_layers(levels: Sequence[Level], X: np.ndarray, upstream: np.ndarray
                    ) -> Tuple[List[Optional[Tuple[np.ndarray, np.ndarray]]], np.ndarray, List[np.ndarray]]:
    """
    Gradients of <upstream, last output> for a level sequence fed with X.

    Returns:
        Tuple of (param_grads per level, gradient w.r.t. X, gradient w.r.t. each level output)
    """
    outputs = forward_layers(levels, X)
    if upstream.shape != outputs[-1].shape:
        raise ShapeMismatchError(
            f"upstream has shape {upstream.shape}, output has shape {outputs[-1].shape}"
        )
    inputs = [X] + outputs[:-1]

    param_grads: List[Optional[Tuple[np.ndarray, np.ndarray]]] = [None] * len(levels)
    layer_grads: List[np.ndarray] = [None] * len(levels)
    grad = upstream
    for i in range(len(levels) - 1, -1, -1):
        layer_grads[i] = grad
        level = levels[i]
        if isinstance(level, AffineLevel):
            param_grads[i] = (grad.T @ inputs[i], grad.sum(axis=0))
            grad = grad @ level.weight
        else:
            grad = grad * level.derivative(inputs[i])
    return param_grads, grad, layer_grads


def forward(model: ModelSpec, X: np.ndarray) -> np.ndarray:
    """Logits of the model on X."""
    X = as_matrix(X, "X")
    return forward_layers(model.levels, X)[-1]


def layer_output(model: ModelSpec, X: np.ndarray, layer: int) -> np.ndarray:
    """Output of the layer at index `layer`; -1 returns X itself."""
    X = as_matrix(X, "X")
    if layer < 0:
        return X
    return forward_layers(model.levels[: layer + 1], X)[-1]


def forward_from(model: ModelSpec, layer: int, H: np.ndarray) -> np.ndarray:
    """Logits computed from the output H of the layer at index `layer`."""
    rest = model.levels[layer + 1:]
    if not rest:
        return H
    return forward_layers(rest, H)[-1]


def backward_from(model: ModelSpec, layer: int, H: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of <upstream, logits> w.r.t. the output H of the layer at index `layer`."""
    rest = model.levels[layer + 1:]
    if not rest:
        return upstream
    return backward_layers(rest, H, upstream)[1]


def forward_collect(model: ModelSpec, X: np.ndarray, partition: Optional[LevelPartition] = None,
                    model_id: str = "") -> ActivationBundle:
    """
    Forward pass capturing the output at every partition boundary.

    Args:
        model: Model to evaluate
        X: B x input_dim inputs
        partition: Boundaries to read (defaults to the model's own)
        model_id: Identifier stored on the bundle

    Returns:
        ActivationBundle whose last entry equals the logits
    """
    X = as_matrix(X, "X")
    if X.shape[1] != model.input_dim:
        raise ShapeMismatchError(f"level 0 expects input width {model.input_dim} but receives {X.shape[1]}")
    partition = partition or model.partition
    partition.validate_for(model.levels)
    outputs = forward_layers(model.levels, X)
    captured = tuple(outputs[b] for b in partition.boundaries)
    return ActivationBundle(model_id, captured, partition.boundaries)


def backward(model: ModelSpec, X: np.ndarray, upstream: np.ndarray,
             partition: Optional[LevelPartition] = None) -> Gradients:
    """
    Exact reverse-mode gradients of <upstream, logits>.

    The forward pass is recomputed internally.

    Args:
        model: Model to differentiate
        X: B x input_dim inputs
        upstream: B x output_dim cotangent on the logits

    Returns:
        Gradients w.r.t. every parameter, the input, every layer output and every level output
    """
    X = as_matrix(X, "X")
    upstream = np.asarray(upstream, dtype=np.float64)
    param_grads, input_grad, layer_grads = backward_layers(model.levels, X, upstream)
    partition = partition or model.partition
    level_grads = [layer_grads[b] for b in partition.boundaries]
    return Gradients(param_grads, input_grad, layer_grads, level_grads)


def mlp(input_dim: int, hidden: Sequence[int], output_dim: int, seed: int = 0,
        activation: Union[str, Activation] = Activation.RELU) -> ModelSpec:
    """
    Build an MLP with He-normal weights and zero biases.

    Args:
        input_dim: Number of input features
        hidden: Widths of the hidden affine levels
        output_dim: Number of logits
        seed: Seed for the weight draw
        activation: Activation after each hidden affine level

    Returns:
        ModelSpec with a preactivation partition
    """
    rng = np.random.default_rng(seed)
    widths = [input_dim, *hidden, output_dim]
    levels: List[Level] = []
    for n, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        levels.append(AffineLevel(weight, np.zeros(fan_out)))
        if n < len(widths) - 2:
            levels.append(ActivationLevel(Activation(activation)))
    return ModelSpec(tuple(levels))
