"""Mixing of the federated and local endpoints, plus the two regularizers.

A client trains two networks of identical layout, the federated model ``w_f``
and the local model ``w_l``. Each mini-batch is pushed through the convex
combination ``(1 - lam) * w_f + lam * w_l`` and the task gradient at that
point is split back onto the endpoints. Two penalties shape the pair: a
proximal term ``mu * ||w_f - w_g||^2`` against the broadcast global model and
an orthogonality term ``nu * cos^2(w_f, w_l)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from superfed.errors import ShapeError
from superfed.nn import WeightVector

__all__ = [
    "MixScheme",
    "LambdaAssignment",
    "RegularizerConfig",
    "sample_lambda",
    "mix",
    "cos_sq_penalty",
    "cos_sq_penalty_per_layer",
    "prox_penalty",
    "assemble_gradients",
]


class MixScheme(enum.Enum):
    MODEL = "mm"
    LAYER = "lm"

    @classmethod
    def parse(cls, value: "str | MixScheme") -> "MixScheme":
        if isinstance(value, MixScheme):
            return value
        aliases = {"mm": cls.MODEL, "model": cls.MODEL, "lm": cls.LAYER, "layer": cls.LAYER}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown mixing scheme {value!r}; use 'mm' or 'lm'") from None


@dataclass(frozen=True)
class LambdaAssignment:
    """Mixing coefficients: one value for model mixing, one per layer for layer mixing."""

    scheme: MixScheme
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError("a lambda assignment needs at least one value")
        if self.scheme is MixScheme.MODEL and len(vals) != 1:
            raise ValueError("model mixing takes exactly one lambda")
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ValueError(f"lambda values must lie in [0, 1], got {vals}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def model(cls, lam: float) -> "LambdaAssignment":
        return cls(MixScheme.MODEL, (lam,))

    @classmethod
    def layer(cls, lams) -> "LambdaAssignment":
        return cls(MixScheme.LAYER, tuple(lams))

    def per_layer(self, layer_count: int) -> tuple[float, ...]:
        if self.scheme is MixScheme.MODEL:
            return self.values * layer_count
        if len(self.values) != layer_count:
            raise ShapeError(f"{len(self.values)} layer lambdas for a {layer_count}-layer network")
        return self.values

    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.values)


@dataclass(frozen=True)
class RegularizerConfig:
    mu: float = 0.0
    nu: float = 0.0
    epsilon_norm: float = 1e-12
    cos_per_layer: bool = False

    def __post_init__(self):
        if self.mu < 0 or self.nu < 0:
            raise ValueError("mu and nu must be non-negative")


def sample_lambda(
    rng: np.random.Generator,
    scheme: MixScheme,
    round: int,
    personalization_start: int,
    layer_count: int,
) -> LambdaAssignment:
    """Fresh coefficients for one mini-batch; all zero before personalization starts.

    No random numbers are consumed before ``personalization_start``.
    """
    if layer_count < 1:
        raise ValueError("layer_count must be >= 1")
    n = 1 if scheme is MixScheme.MODEL else layer_count
    if round < personalization_start:
        return LambdaAssignment(scheme, (0.0,) * n)
    return LambdaAssignment(scheme, tuple(rng.random(n)))


def _blockwise(w: WeightVector, lam: LambdaAssignment) -> list[float]:
    """Expand per-layer lambdas onto the (weight, bias) parameter list."""
    per_layer = lam.per_layer(w.spec.layer_count)
    return [per_layer[i // 2] for i in range(len(w.params))]


def mix(w_f: WeightVector, w_l: WeightVector, lam: LambdaAssignment) -> WeightVector:
    w_f._check(w_l)
    coeffs = _blockwise(w_f, lam)
    return WeightVector(
        w_f.spec,
        [(1.0 - c) * f + c * l for f, l, c in zip(w_f.params, w_l.params, coeffs)],
    )


def _cos_sq(f: np.ndarray, l: np.ndarray, eps: float) -> tuple[float, np.ndarray, np.ndarray]:
    nf = float(np.linalg.norm(f))
    nl = float(np.linalg.norm(l))
    if nf < eps or nl < eps:
        return 0.0, np.zeros_like(f), np.zeros_like(l)
    cos = float(f @ l) / (nf * nl)
    grad_f = 2.0 * cos * (l / (nf * nl) - cos * f / nf**2)
    grad_l = 2.0 * cos * (f / (nf * nl) - cos * l / nl**2)
    return cos * cos, grad_f, grad_l


def cos_sq_penalty(
    w_f: WeightVector, w_l: WeightVector, cfg: RegularizerConfig = RegularizerConfig()
) -> tuple[float, WeightVector, WeightVector]:
    """Squared cosine similarity over the full flattened vectors and its exact gradients.

    Returns zero value and zero gradients when either norm is below
    ``cfg.epsilon_norm``.
    """
    w_f._check(w_l)
    value, gf, gl = _cos_sq(w_f.flatten(), w_l.flatten(), cfg.epsilon_norm)
    return value, WeightVector.from_flat(w_f.spec, gf), WeightVector.from_flat(w_f.spec, gl)


def cos_sq_penalty_per_layer(
    w_f: WeightVector, w_l: WeightVector, cfg: RegularizerConfig = RegularizerConfig()
) -> tuple[float, WeightVector, WeightVector]:
    """Mean over layers of cos^2 between the layers' (weight, bias) blocks."""
    w_f._check(w_l)
    n_layers = w_f.spec.layer_count
    total = 0.0
    gf_params, gl_params = [], []
    for (wf, bf), (wl, bl) in zip(w_f.layers(), w_l.layers()):
        f = np.concatenate([wf.ravel(), bf])
        l = np.concatenate([wl.ravel(), bl])
        value, gf, gl = _cos_sq(f, l, cfg.epsilon_norm)
        total += value / n_layers
        for out, g in ((gf_params, gf / n_layers), (gl_params, gl / n_layers)):
            out.append(g[: wf.size].reshape(wf.shape))
            out.append(g[wf.size :])
    return total, WeightVector(w_f.spec, gf_params), WeightVector(w_f.spec, gl_params)


def prox_penalty(w_f: WeightVector, w_g: WeightVector) -> tuple[float, WeightVector]:
    """``||w_f - w_g||^2`` and its gradient in ``w_f``; ``w_g`` is a constant."""
    diff = w_f - w_g
    return diff.dot(diff), diff * 2.0


def assemble_gradients(
    task_grad: WeightVector,
    lam: LambdaAssignment,
    w_f: WeightVector,
    w_l: WeightVector,
    w_g: WeightVector,
    cfg: RegularizerConfig,
) -> tuple[WeightVector, WeightVector]:
    """Endpoint gradients of the local objective from one task gradient at the mixed point.

    Per block with coefficient ``c``::

        grad_f = (1 - c) * task + mu * d||w_f - w_g||^2/dw_f + nu * dcos^2/dw_f
        grad_l =      c  * task                               + nu * dcos^2/dw_l
    """
    for other in (w_f, w_l, w_g):
        task_grad._check(other)
    coeffs = _blockwise(task_grad, lam)
    _, prox_f = prox_penalty(w_f, w_g)
    penalty = cos_sq_penalty_per_layer if cfg.cos_per_layer else cos_sq_penalty
    _, cos_f, cos_l = penalty(w_f, w_l, cfg)

    grad_f, grad_l = [], []
    for t, p, cf, cl, c in zip(task_grad.params, prox_f.params, cos_f.params, cos_l.params, coeffs):
        grad_f.append((1.0 - c) * t + cfg.mu * p + cfg.nu * cf)
        grad_l.append(c * t + cfg.nu * cl)
    return WeightVector(task_grad.spec, grad_f), WeightVector(task_grad.spec, grad_l)
