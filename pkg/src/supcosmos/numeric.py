"""Dense float64 arithmetic, seeded initialization, Adam and a gradient checker.

Tensors are plain 2-D ``numpy.ndarray`` objects of dtype float64. Samples are
stored one per row throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

SeedLike = int | Sequence[int]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a computation produces NaN or Inf."""


def as_matrix(a) -> np.ndarray:
    """Coerce scalars and vectors to a 2-D float64 array (vectors become rows)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected rank 1 or 2, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if b.ndim == 1:
        b = b.reshape(-1, 1)
    if a.ndim != 2 or b.ndim != 2 or 0 in a.shape or 0 in b.shape or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def make_rng(seed: SeedLike, *keys: int) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by ``seed`` plus optional stream keys."""
    if isinstance(seed, (int, np.integer)):
        entropy = [int(seed)]
    else:
        entropy = [int(s) for s in seed]
    entropy.extend(int(k) for k in keys)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def init_weights(rows: int, cols: int, seed: SeedLike) -> np.ndarray:
    """He-normal initialization for a ``rows x cols`` weight (fan-in = rows)."""
    if rows < 1 or cols < 1:
        raise ShapeError(f"weight shape must be positive, got ({rows}, {cols})")
    rng = make_rng(seed)
    return rng.standard_normal((rows, cols)) * np.sqrt(2.0 / rows)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.m.shape != self.v.shape:
            raise ShapeError(f"moment shapes differ: {self.m.shape} vs {self.v.shape}")
        if self.step < 0:
            raise ValueError("step must be >= 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.eps <= 0 or self.lr <= 0:
            raise ValueError("lr and eps must be positive")

    @classmethod
    def zeros_like(cls, param: np.ndarray, lr: float = 1e-3, **kwargs) -> "AdamState":
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64), lr=lr, **kwargs)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update.

    Returns the updated parameter and a new state; neither input is modified.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError(f"param {param.shape}, grad {grad.shape}, state {state.m.shape} must match")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new_param = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_param, replace(state, m=m, v=v, step=step)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (same shape as ``x``)."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = float(f(x))
        flat_x[i] = orig - h
        f_minus = float(f(x))
        flat_x[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"f is not finite near index {i}")
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{name} is not finite")
