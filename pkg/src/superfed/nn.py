"""Feed-forward ReLU network with hand-written backprop and momentum SGD.

Parameters live in a :class:`WeightVector`: one ``(weight, bias)`` pair per
layer, where ``weight`` has shape ``(fan_in, fan_out)`` so that a layer is
``z = a @ weight + bias``. The flattened view enumerates, layer by layer,
``weight`` in row-major order followed by ``bias``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from superfed.errors import NonFiniteError, ShapeError

__all__ = [
    "NetworkSpec",
    "WeightVector",
    "ForwardTrace",
    "OptimizerState",
    "init_weights",
    "forward",
    "loss_and_grad",
    "cross_entropy",
    "softmax",
    "sgd_step",
    "lr_at_round",
]

LR_DECAY = 0.99


@dataclass(frozen=True)
class NetworkSpec:
    """Layer widths ``(input, hidden..., classes)``; ReLU between layers, raw logits out."""

    layer_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 3:
            raise ValueError("a network needs an input, at least one hidden layer and an output")
        if any(d < 1 for d in dims):
            raise ValueError(f"layer widths must be >= 1, got {dims}")
        object.__setattr__(self, "layer_dims", dims)

    @classmethod
    def two_nn(cls, input_dim: int, class_count: int, hidden: int = 200) -> "NetworkSpec":
        return cls((input_dim, hidden, hidden, class_count))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def class_count(self) -> int:
        return self.layer_dims[-1]

    @property
    def layer_count(self) -> int:
        return len(self.layer_dims) - 1

    def shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        d = self.layer_dims
        return [((d[i], d[i + 1]), (d[i + 1],)) for i in range(self.layer_count)]

    @property
    def size(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_dims[:-1], self.layer_dims[1:]))


class WeightVector:
    """Per-layer parameter blocks of one network, in double precision.

    Arithmetic helpers always return new objects; the arrays of an existing
    vector are never written to by library code.
    """

    __slots__ = ("spec", "params")

    def __init__(self, spec: NetworkSpec, params: Sequence[np.ndarray]):
        params = [np.asarray(p, dtype=np.float64) for p in params]
        expected = [s for pair in spec.shapes() for s in pair]
        if len(params) != len(expected) or any(p.shape != s for p, s in zip(params, expected)):
            got = [p.shape for p in params]
            raise ShapeError(f"parameter shapes {got} do not match {spec.layer_dims}")
        self.spec = spec
        self.params = params

    # construction

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> "WeightVector":
        return cls(spec, [np.zeros(s) for pair in spec.shapes() for s in pair])

    @classmethod
    def from_flat(cls, spec: NetworkSpec, flat: np.ndarray) -> "WeightVector":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (spec.size,):
            raise ShapeError(f"flat vector of length {flat.size} cannot fill {spec.size} parameters")
        params, pos = [], 0
        for pair in spec.shapes():
            for shape in pair:
                n = math.prod(shape)
                params.append(flat[pos : pos + n].reshape(shape).copy())
                pos += n
        return cls(spec, params)

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def copy(self) -> "WeightVector":
        return WeightVector(self.spec, [p.copy() for p in self.params])

    # structure

    def layers(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for i in range(0, len(self.params), 2):
            yield self.params[i], self.params[i + 1]

    @property
    def nbytes(self) -> int:
        return sum(p.nbytes for p in self.params)

    def _check(self, other: "WeightVector") -> None:
        if not isinstance(other, WeightVector) or other.spec != self.spec:
            raise ShapeError("weight vectors belong to different network layouts")

    # arithmetic

    def __add__(self, other: "WeightVector") -> "WeightVector":
        self._check(other)
        return WeightVector(self.spec, [a + b for a, b in zip(self.params, other.params)])

    def __sub__(self, other: "WeightVector") -> "WeightVector":
        self._check(other)
        return WeightVector(self.spec, [a - b for a, b in zip(self.params, other.params)])

    def __mul__(self, c: float) -> "WeightVector":
        return WeightVector(self.spec, [c * p for p in self.params])

    __rmul__ = __mul__

    def __neg__(self) -> "WeightVector":
        return self * -1.0

    def dot(self, other: "WeightVector") -> float:
        self._check(other)
        return float(sum(np.vdot(a, b) for a, b in zip(self.params, other.params)))

    def norm(self) -> float:
        return math.sqrt(self.dot(self))

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params)

    def allclose(self, other: "WeightVector", atol: float = 0.0, rtol: float = 0.0) -> bool:
        self._check(other)
        return all(np.allclose(a, b, atol=atol, rtol=rtol) for a, b in zip(self.params, other.params))

    def array_equal(self, other: "WeightVector") -> bool:
        self._check(other)
        return all(np.array_equal(a, b) for a, b in zip(self.params, other.params))

    def __repr__(self) -> str:
        return f"WeightVector(dims={self.spec.layer_dims}, norm={self.norm():.6g})"


@dataclass
class ForwardTrace:
    """Layer inputs and pre-activations cached by :func:`forward`."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    logits: np.ndarray


@dataclass
class OptimizerState:
    velocity: WeightVector
    momentum: float = 0.9
    weight_decay: float = 1e-4

    @classmethod
    def fresh(cls, spec: NetworkSpec, momentum: float = 0.9, weight_decay: float = 1e-4) -> "OptimizerState":
        return cls(WeightVector.zeros(spec), momentum, weight_decay)


def init_weights(spec: NetworkSpec, rng: np.random.Generator) -> WeightVector:
    """Weights uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, biases zero."""
    params = []
    for (fan_in, fan_out), bshape in spec.shapes():
        bound = 1.0 / math.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.append(np.zeros(bshape))
    return WeightVector(spec, params)


def forward(w: WeightVector, batch: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.spec.input_dim:
        raise ShapeError(f"batch of shape {x.shape} does not feed a {w.spec.input_dim}-input network")
    inputs, preacts = [], []
    a = x
    last = w.spec.layer_count - 1
    for i, (weight, bias) in enumerate(w.layers()):
        inputs.append(a)
        z = a @ weight + bias
        preacts.append(z)
        a = z if i == last else np.maximum(z, 0.0)
    return a, ForwardTrace(inputs, preacts, a)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels: np.ndarray, n_rows: int, class_count: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n_rows,):
        raise ShapeError(f"expected {n_rows} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= class_count):
        raise ValueError(f"labels must lie in [0, {class_count})")
    return y.astype(np.int64, copy=False)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy, computed through log-sum-exp."""
    y = _check_labels(labels, logits.shape[0], logits.shape[1])
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(y)), y]))


def loss_and_grad(
    w: WeightVector, trace: ForwardTrace, labels: np.ndarray
) -> tuple[float, WeightVector]:
    logits = trace.logits
    n = logits.shape[0]
    y = _check_labels(labels, n, w.spec.class_count)
    loss = cross_entropy(logits, y)

    delta = softmax(logits)
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grads: list[np.ndarray] = [None] * len(w.params)  # type: ignore[list-item]
    weights = w.params[0::2]
    for i in range(w.spec.layer_count - 1, -1, -1):
        grads[2 * i] = trace.inputs[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[i].T) * (trace.preacts[i - 1] > 0.0)
    return loss, WeightVector(w.spec, grads)


def sgd_step(
    w: WeightVector,
    grad: WeightVector,
    state: OptimizerState,
    lr: float,
    where: str = "",
) -> tuple[WeightVector, OptimizerState]:
    """One heavy-ball step with coupled L2 decay.

    ``v <- momentum * v + (grad + weight_decay * w)`` then ``w <- w - lr * v``.
    ``where`` is folded into the error message if the gradient is not finite.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    w._check(grad)
    w._check(state.velocity)
    if not grad.is_finite():
        raise NonFiniteError(f"non-finite gradient{' at ' + where if where else ''}")
    velocity, params = [], []
    for p, g, v in zip(w.params, grad.params, state.velocity.params):
        v_new = state.momentum * v + (g + state.weight_decay * p)
        velocity.append(v_new)
        params.append(p - lr * v_new)
    new_state = OptimizerState(WeightVector(w.spec, velocity), state.momentum, state.weight_decay)
    return WeightVector(w.spec, params), new_state


def lr_at_round(eta0: float, r: int) -> float:
    """Learning rate after ``r`` rounds of 1% per-round decay."""
    if r < 0:
        raise ValueError("round index must be non-negative")
    return eta0 * LR_DECAY**r
