"""Dense float64 kernels shared by every training path.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 (row-major);
bias vectors are 1-D. Every function here is pure: inputs are never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{name} contains non-finite entries")
    return arr


def linear_forward(x, weight, bias) -> np.ndarray:
    """Return ``x @ weight + bias`` for x [batch×in], weight [in×out], bias [out]."""
    x = as_matrix(x, "input")
    weight = as_matrix(weight, "weight")
    bias = np.asarray(bias, dtype=np.float64)
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"bias {bias.shape} incompatible with weight {weight.shape}")
    return _check_finite(x @ weight + bias, "linear output")


def linear_backward(x, weight, grad_output):
    """Gradients of a linear layer.

    Returns ``(grad_input, grad_weight, grad_bias)`` where
    grad_weight = xᵀ·g, grad_input = g·weightᵀ and grad_bias is the column sum of g.
    """
    x = as_matrix(x, "input")
    weight = as_matrix(weight, "weight")
    g = as_matrix(grad_output, "grad_output")
    if x.shape[1] != weight.shape[0] or g.shape != (x.shape[0], weight.shape[1]):
        raise DimensionError(
            f"shapes input {x.shape}, weight {weight.shape}, grad_output {g.shape} do not conform"
        )
    return g @ weight.T, x.T @ g, g.sum(axis=0)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = as_matrix(logits, "logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels {labels.shape} do not match batch size {n}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range for {k} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


@dataclass(frozen=True)
class AdamWState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 2e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, param, **hyper) -> "AdamWState":
        shape = np.shape(param)
        return cls(np.zeros(shape), np.zeros(shape), 0, **hyper)


def adamw_update(param, grad, state: AdamWState):
    """One decoupled-weight-decay AdamW step with bias correction.

    Returns ``(new_param, new_state)``.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or state.first_moment.shape != param.shape:
        raise DimensionError(
            f"param {param.shape}, grad {grad.shape}, moments {state.first_moment.shape} differ"
        )
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    t = state.step_count + 1
    m = b1 * state.first_moment + (1.0 - b1) * grad
    v = b2 * state.second_moment + (1.0 - b2) * (grad * grad)
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new = param * (1.0 - lr * state.weight_decay)
    new = new - lr * (m_hat / (np.sqrt(v_hat) + state.epsilon))
    return _check_finite(new, "updated parameter"), replace(
        state, first_moment=m, second_moment=v, step_count=t
    )
