"""
Multilayer perceptrons for distill-lab.

Holds the network description (MlpSpec), the parameter container (MlpModel),
reverse-mode gradients for relu/tanh MLPs, plain SGD with momentum and
global-norm clipping, and the versioned JSON checkpoint format.
"""

import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (CheckpointError, CheckpointIntegrityError, CheckpointVersionError,
                     ContractError, DomainError, ShapeError)
from .numerics import Matrix, ensure_finite

logger = logging.getLogger('distill-lab.nn')

CHECKPOINT_MAGIC = 'DISTILL-LAB-CKPT'
CHECKPOINT_VERSION = 1
SUPPORTED_CHECKPOINT_VERSIONS = (1,)

PathLike = Union[str, Path]


class Activation(str, Enum):
    """Hidden-layer non-linearity."""
    RELU = 'relu'
    TANH = 'tanh'


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a dense network.

    ``output_dim`` is the number of classes for classifiers; scalar heads
    (output_dim == 1) are only used by the NTK analysis.
    """
    input_dim: int
    hidden_dims: Tuple[int, ...]
    output_dim: int
    activation: Activation = Activation.RELU
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'hidden_dims', tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, 'activation', Activation(self.activation))
        dims = (self.input_dim,) + self.hidden_dims + (self.output_dim,)
        if any(int(d) < 1 for d in dims):
            raise DomainError(f"all layer dims must be >= 1, got {dims}")

    @property
    def dims(self) -> Tuple[int, ...]:
        return (self.input_dim,) + self.hidden_dims + (self.output_dim,)

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def parameter_count(self) -> int:
        dims = self.dims
        count = 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            count += fan_in * fan_out + (fan_out if self.use_bias else 0)
        return count

    def require_classifier(self) -> 'MlpSpec':
        if self.output_dim < 2:
            raise DomainError(f"a classifier needs output_dim >= 2, got {self.output_dim}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            'input_dim': self.input_dim,
            'hidden_dims': list(self.hidden_dims),
            'output_dim': self.output_dim,
            'activation': self.activation.value,
            'use_bias': self.use_bias,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MlpSpec':
        return cls(
            input_dim=int(data['input_dim']),
            hidden_dims=tuple(data.get('hidden_dims', ())),
            output_dim=int(data['output_dim']),
            activation=Activation(data.get('activation', 'relu')),
            use_bias=bool(data.get('use_bias', True)),
        )


@dataclass(eq=False)
class MlpModel:
    """Parameters of an MLP. ``weights[k]`` has shape dims[k] x dims[k+1]."""
    spec: MlpSpec
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        dims = self.spec.dims
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise ShapeError("layer count does not match spec",
                             (len(self.weights),), (self.spec.n_layers,))
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected_b = (dims[k + 1],) if self.spec.use_bias else (0,)
            if w.shape != (dims[k], dims[k + 1]):
                raise ShapeError(f"weights[{k}] does not match spec", w.shape, (dims[k], dims[k + 1]))
            if b.shape != expected_b:
                raise ShapeError(f"biases[{k}] does not match spec", b.shape, expected_b)

    def parameter_count(self) -> int:
        return self.spec.parameter_count()

    def flatten(self) -> np.ndarray:
        """All parameters as one vector, layer by layer (weights then bias)."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.reshape(-1))
            parts.append(b.reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_flat(self, flat: np.ndarray) -> 'MlpModel':
        """Return a new model whose parameters are read from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64).reshape(-1)
        if flat.size != self.parameter_count():
            raise ShapeError("flat parameter vector has the wrong size",
                             flat.shape, (self.parameter_count(),))
        weights, biases = _split_flat(self.spec, flat)
        return MlpModel(self.spec, weights, biases)

    def copy(self) -> 'MlpModel':
        return MlpModel(self.spec, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])

    def parameter_bytes(self) -> bytes:
        return self.flatten().tobytes()


@dataclass(eq=False)
class Gradients:
    """Parameter gradients shaped like the model they belong to."""
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.reshape(-1))
            parts.append(b.reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)

    def global_norm(self) -> float:
        total = 0.0
        for w, b in zip(self.weights, self.biases):
            total += float(np.sum(w * w)) + float(np.sum(b * b))
        return math.sqrt(total)

    def scaled(self, factor: float) -> 'Gradients':
        return Gradients([w * factor for w in self.weights], [b * factor for b in self.biases])


@dataclass(eq=False)
class ForwardCache:
    """Activations recorded by ``forward`` for use by ``backward``."""
    model_id: int
    model_version: int
    layer_inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float
    grad_clip: Optional[float] = None
    momentum: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise DomainError(f"grad_clip must be positive when set, got {self.grad_clip!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError(f"momentum must lie in [0, 1), got {self.momentum!r}")


@dataclass(eq=False)
class SgdState:
    """Momentum buffers; one per optimizer run."""
    velocity: Optional[Gradients] = None


@dataclass(eq=False)
class Checkpoint:
    epoch: int
    model: MlpModel
    dev_metric: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.epoch < 1:
            raise DomainError(f"checkpoint epoch must be >= 1, got {self.epoch}")


def _split_flat(spec: MlpSpec, flat: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    dims = spec.dims
    weights, biases = [], []
    offset = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        size = fan_in * fan_out
        weights.append(flat[offset:offset + size].reshape(fan_in, fan_out).copy())
        offset += size
        bias_size = fan_out if spec.use_bias else 0
        biases.append(flat[offset:offset + bias_size].copy())
        offset += bias_size
    return weights, biases


def init_model(spec: MlpSpec, seed: int) -> MlpModel:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.dims[:-1], spec.dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out if spec.use_bias else 0))
    return MlpModel(spec, weights, biases)


def _activate(activation: Activation, pre: np.ndarray) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(pre, 0.0)
    return np.tanh(pre)


def activation_derivative(activation: Activation, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the hidden activation at ``pre``."""
    if activation is Activation.RELU:
        return (pre > 0.0).astype(np.float64)
    return 1.0 - post * post


def forward(model: MlpModel, x: Matrix) -> Tuple[Matrix, ForwardCache]:
    """Logits for the batch ``x`` plus the cache needed by ``backward``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ShapeError("forward: input does not match the network input_dim",
                         x.shape, (None, model.spec.input_dim))
    layer_inputs, pre_activations = [], []
    h = x
    last = model.spec.n_layers - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        layer_inputs.append(h)
        pre = h @ w
        if model.spec.use_bias:
            pre = pre + b
        pre_activations.append(pre)
        h = pre if k == last else _activate(model.spec.activation, pre)
    ensure_finite(h, 'logits')
    cache = ForwardCache(id(model), model.version, layer_inputs, pre_activations)
    return h, cache


def backward(model: MlpModel, cache: ForwardCache, d_logits: Matrix) -> Gradients:
    """Reverse-mode parameter gradients given dLoss/dLogits."""
    if cache.model_id != id(model) or cache.model_version != model.version:
        raise ContractError("backward called with a cache from a different or updated model")
    delta = np.asarray(d_logits, dtype=np.float64)
    expected = cache.pre_activations[-1].shape
    if delta.shape != expected:
        raise ShapeError("backward: upstream gradient does not match the logits", delta.shape, expected)

    n_layers = model.spec.n_layers
    grad_w: List[np.ndarray] = [np.empty(0)] * n_layers
    grad_b: List[np.ndarray] = [np.empty(0)] * n_layers
    for k in range(n_layers - 1, -1, -1):
        grad_w[k] = cache.layer_inputs[k].T @ delta
        grad_b[k] = delta.sum(axis=0) if model.spec.use_bias else np.zeros(0)
        if k > 0:
            upstream = delta @ model.weights[k].T
            pre = cache.pre_activations[k - 1]
            delta = upstream * activation_derivative(model.spec.activation, pre,
                                                     cache.layer_inputs[k])
    return Gradients(grad_w, grad_b)


def sgd_step(model: MlpModel, gradients: Gradients, cfg: SgdConfig,
             state: Optional[SgdState] = None) -> MlpModel:
    """Apply one SGD(+momentum) update in place and return the model.

    With ``grad_clip`` set, gradients whose global norm exceeds the clip are
    rescaled to it first; the velocity is bounded the same way, so an update
    never exceeds ``learning_rate * grad_clip`` in global norm.
    """
    for k, (w, g) in enumerate(zip(model.weights, gradients.weights)):
        if w.shape != g.shape or model.biases[k].shape != gradients.biases[k].shape:
            raise ShapeError(f"sgd_step: gradient for layer {k} does not match parameters",
                             w.shape, g.shape)

    if cfg.grad_clip is not None:
        norm = gradients.global_norm()
        if norm > cfg.grad_clip:
            gradients = gradients.scaled(cfg.grad_clip / norm)

    if cfg.momentum > 0.0:
        if state is None:
            state = SgdState()
        if state.velocity is None:
            velocity = gradients.scaled(1.0)
        else:
            velocity = Gradients(
                [cfg.momentum * v + g for v, g in zip(state.velocity.weights, gradients.weights)],
                [cfg.momentum * v + g for v, g in zip(state.velocity.biases, gradients.biases)],
            )
        if cfg.grad_clip is not None:
            v_norm = velocity.global_norm()
            if v_norm > cfg.grad_clip:
                velocity = velocity.scaled(cfg.grad_clip / v_norm)
        state.velocity = velocity
    else:
        velocity = gradients

    for k in range(model.spec.n_layers):
        model.weights[k] = model.weights[k] - cfg.learning_rate * velocity.weights[k]
        model.biases[k] = model.biases[k] - cfg.learning_rate * velocity.biases[k]
    model.version += 1
    return model


def predict(model: MlpModel, x: Matrix) -> np.ndarray:
    logits, _ = forward(model, x)
    return np.argmax(logits, axis=1)


def accuracy(model: MlpModel, x: Matrix, labels: Sequence[int]) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(predict(model, x) == labels))


def _checkpoint_payload(ckpt: Checkpoint) -> Dict[str, Any]:
    model = ckpt.model
    return {
        'magic': CHECKPOINT_MAGIC,
        'version': CHECKPOINT_VERSION,
        'spec': model.spec.to_dict(),
        'epoch': ckpt.epoch,
        'dev_metric': ckpt.dev_metric,
        'seed': ckpt.seed,
        'weights': [w.tolist() for w in model.weights],
        'biases': [b.tolist() for b in model.biases],
    }


def _payload_crc(payload: Dict[str, Any]) -> int:
    body = {key: value for key, value in payload.items() if key != 'crc32'}
    canonical = json.dumps(body, sort_keys=True, separators=(',', ':'))
    return zlib.crc32(canonical.encode('utf-8'))


def save_checkpoint(ckpt: Checkpoint, path: PathLike) -> Path:
    """Write ``ckpt`` as a self-describing JSON envelope with a CRC-32."""
    path = Path(path)
    payload = _checkpoint_payload(ckpt)
    payload['crc32'] = _payload_crc(payload)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f)
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {path}: {e}") from e
    logger.debug("Saved checkpoint epoch %d to %s", ckpt.epoch, path)
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    """Read a checkpoint written by ``save_checkpoint``."""
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointIntegrityError(f"Checkpoint {path} is not valid JSON: {e}") from e
    except OSError as e:
        raise CheckpointError(f"Failed to read checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or payload.get('magic') != CHECKPOINT_MAGIC:
        raise CheckpointIntegrityError(f"Checkpoint {path} has a missing or wrong magic string")
    if payload.get('version') not in SUPPORTED_CHECKPOINT_VERSIONS:
        raise CheckpointVersionError(payload.get('version'), SUPPORTED_CHECKPOINT_VERSIONS)
    if payload.get('crc32') != _payload_crc(payload):
        raise CheckpointIntegrityError(f"Checkpoint {path} failed its CRC-32 check")

    try:
        spec = MlpSpec.from_dict(payload['spec'])
        weights = [np.array(w, dtype=np.float64).reshape(fan_in, fan_out)
                   for w, fan_in, fan_out in zip(payload['weights'], spec.dims[:-1], spec.dims[1:])]
        biases = [np.array(b, dtype=np.float64).reshape(-1) for b in payload['biases']]
        model = MlpModel(spec, weights, biases)
        dev_metric = payload.get('dev_metric')
        return Checkpoint(
            epoch=int(payload['epoch']),
            model=model,
            dev_metric=None if dev_metric is None else float(dev_metric),
            seed=payload.get('seed'),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointIntegrityError(f"Checkpoint {path} has a malformed payload: {e}") from e
