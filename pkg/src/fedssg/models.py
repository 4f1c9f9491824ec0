"""Local objective families and the FedSSG composite local objective.

Three families share one flat parameter layout convention:

* ``quadratic``: ``0.5 (theta - theta_star)^T A (theta - theta_star)``; the
  batch is ignored.
* ``logistic``: multinomial logistic regression, i.e. a single dense layer
  followed by softmax cross-entropy.
* ``mlp``: dense ReLU layers with a softmax cross-entropy head.

For the dense families every layer contributes a row-major ``(fan_in,
fan_out)`` weight block followed by its bias, in layer order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .numkit import DimensionError, NumericError, RngStream

FAMILIES = ("quadratic", "logistic", "mlp")
ALIGNMENT_FORMS = ("inner_product", "proximal")


@dataclass
class ObjectiveSpec:
    family: str
    layer_sizes: tuple = ()
    l2_weight_decay: float = 0.0
    A: Optional[np.ndarray] = None
    theta_star: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown objective family {self.family!r}")
        if self.l2_weight_decay < 0:
            raise ValueError("l2_weight_decay must be nonnegative")
        if self.family == "quadratic":
            if self.A is None or self.theta_star is None:
                raise ValueError("quadratic family needs A and theta_star")
            self.A = np.asarray(self.A, dtype=np.float64)
            self.theta_star = np.asarray(self.theta_star, dtype=np.float64)
            d = self.theta_star.shape[0]
            if self.A.shape != (d, d):
                raise DimensionError(f"A has shape {self.A.shape}, expected {(d, d)}")
        else:
            self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
            if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
                raise ValueError("layer_sizes must list input dim ... class count")
            if self.family == "logistic" and len(self.layer_sizes) != 2:
                raise ValueError("logistic family takes layer_sizes=(features, classes)")

    @property
    def dim(self) -> int:
        if self.family == "quadratic":
            return int(self.theta_star.shape[0])
        return sum((a + 1) * b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1] if self.family != "quadratic" else 0


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise DimensionError("batch inputs must be (n, features) with n labels")

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class CorrectionTerms:
    """Round-constant inputs to the penalized and gradient-correction terms.

    ``h_prev``, ``omega_prev``, ``dtheta_prev`` and ``domega_prev`` are frozen
    at the start of the round; neither term depends on the inner iterate
    except through ``params`` itself.
    """

    alpha: float
    gate: float
    h_prev: np.ndarray
    omega_prev: np.ndarray
    dtheta_prev: np.ndarray
    domega_prev: np.ndarray
    eta: float
    epochs: int
    alignment_form: str = "inner_product"
    grad_correction_enabled: bool = True
    penalty_enabled: bool = True

    def __post_init__(self) -> None:
        if self.alignment_form not in ALIGNMENT_FORMS:
            raise ValueError(f"unknown alignment form {self.alignment_form!r}")
        if self.alpha < 0 or self.gate < 0:
            raise ValueError("alpha and gate must be nonnegative")
        if not self.eta * self.epochs > 0:
            raise ValueError("eta * epochs must be positive")
        shapes = {v.shape for v in (self.h_prev, self.omega_prev, self.dtheta_prev, self.domega_prev)}
        if len(shapes) != 1:
            raise DimensionError("correction vectors differ in length")


# ---------------------------------------------------------------------------
# dense layers


def _unpack(spec: ObjectiveSpec, params: np.ndarray):
    layers = []
    offset = 0
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        W = params[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        layers.append((W, b))
    return layers


def _forward(layers, x: np.ndarray):
    acts = [x]
    pre = []
    for k, (W, b) in enumerate(layers):
        z = acts[-1] @ W + b
        pre.append(z)
        acts.append(np.maximum(z, 0.0) if k < len(layers) - 1 else z)
    return acts, pre


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_params(spec: ObjectiveSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.dim,):
        raise DimensionError(f"params length {params.shape} does not match model dimension {spec.dim}")
    return params


def loss_and_grad(spec: ObjectiveSpec, params: np.ndarray, batch: Optional[Batch]):
    """Mean loss on ``batch`` plus weight decay, with its analytic gradient."""
    params = _check_params(spec, params)
    if spec.family == "quadratic":
        diff = params - spec.theta_star
        Ad = spec.A @ diff
        loss = 0.5 * float(diff @ Ad)
        grad = Ad
    else:
        if batch is None or len(batch) == 0:
            raise ValueError("dense families need a nonempty batch")
        if batch.inputs.shape[1] != spec.layer_sizes[0]:
            raise DimensionError("batch feature count does not match the input layer")
        layers = _unpack(spec, params)
        acts, pre = _forward(layers, batch.inputs)
        logits = acts[-1]
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite activations")
        n = len(batch)
        logp = _log_softmax(logits)
        loss = -float(logp[np.arange(n), batch.labels].mean())
        delta = np.exp(logp)
        delta[np.arange(n), batch.labels] -= 1.0
        delta /= n
        per_layer = [None] * len(layers)
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            per_layer[k] = ((acts[k].T @ delta).ravel(), delta.sum(axis=0))
            if k > 0:
                delta = (delta @ W.T) * (pre[k - 1] > 0)
        grad = np.concatenate([g for pair in per_layer for g in pair])
    if spec.l2_weight_decay:
        loss += 0.5 * spec.l2_weight_decay * float(params @ params)
        grad = grad + spec.l2_weight_decay * params
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    return loss, grad


def predict(spec: ObjectiveSpec, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Arg-max class predictions for the dense families."""
    if spec.family == "quadratic":
        raise ValueError("quadratic family has no predictions")
    acts, _ = _forward(_unpack(spec, _check_params(spec, params)), np.asarray(inputs, dtype=np.float64))
    return acts[-1].argmax(axis=1)


def init_params(spec: ObjectiveSpec, rng: RngStream) -> np.ndarray:
    """He-style uniform init scaled by fan-in; biases start at zero."""
    if spec.family == "quadratic":
        return np.zeros(spec.dim)
    chunks = []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# FedSSG local objective pieces


def _anchor(c: CorrectionTerms) -> np.ndarray:
    return c.omega_prev - c.h_prev


def penalized_term_value_and_grad(params: np.ndarray, c: CorrectionTerms):
    """Gated alignment term tying ``params`` to ``omega_prev - h_prev``."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != c.h_prev.shape:
        raise DimensionError("params and correction vectors differ in length")
    weight = c.gate * c.alpha
    if weight == 0.0:
        return 0.0, np.zeros_like(params)
    gap = params - _anchor(c)
    if c.alignment_form == "inner_product":
        return weight * float(gap @ c.h_prev), weight * c.h_prev
    return weight * 0.5 * float(gap @ gap), weight * gap


def gradient_correction_grad(c: CorrectionTerms) -> np.ndarray:
    """Constant gradient ``(dtheta_prev - domega_prev) / (eta * epochs)``."""
    return (c.dtheta_prev - c.domega_prev) / (c.eta * c.epochs)


def gradient_correction_value(params: np.ndarray, c: CorrectionTerms) -> float:
    return float(np.asarray(params, dtype=np.float64) @ gradient_correction_grad(c))


def composite_value(spec: ObjectiveSpec, params, batch, c: CorrectionTerms) -> float:
    value, _ = loss_and_grad(spec, params, batch)
    if c.penalty_enabled:
        value += penalized_term_value_and_grad(params, c)[0]
    if c.grad_correction_enabled:
        value += gradient_correction_value(params, c)
    return value


def composite_grad(spec: ObjectiveSpec, params, batch, c: CorrectionTerms) -> np.ndarray:
    """Gradient of empirical loss + gated penalty + gradient correction.

    Inactive terms are skipped rather than added as zeros, so a fully
    disabled correction returns the plain gradient bit for bit.
    """
    _, grad = loss_and_grad(spec, params, batch)
    if c.penalty_enabled and c.gate * c.alpha != 0.0:
        grad = grad + penalized_term_value_and_grad(params, c)[1]
    if c.grad_correction_enabled:
        grad = grad + gradient_correction_grad(c)
    return grad


def finite_diff_grad(
    scalar_fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    step: float = 1e-6,
    coords: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Central-difference gradient.

    When ``coords`` is given only those coordinates are estimated; the
    returned array has one entry per requested coordinate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = np.array(params, dtype=np.float64)
    idx = range(params.shape[0]) if coords is None else coords
    out = []
    for k in idx:
        orig = params[k]
        params[k] = orig + step
        f_plus = scalar_fn(params)
        params[k] = orig - step
        f_minus = scalar_fn(params)
        params[k] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite objective at coordinate {k}")
        out.append((f_plus - f_minus) / (2.0 * step))
    return np.array(out)
