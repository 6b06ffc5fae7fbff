"""Leaky integrate-and-fire dynamics with soft reset.

Discrete update per step (membrane ``u``, leak ``lam``, threshold ``theta``)::

    u   <- lam * u_prev + I
    o    = 1 if u > theta else 0
    u   <- u - theta * o

The continuous-time resistance and time constant are absorbed into the
synaptic weights and ``lam`` respectively; they are never stored.

``theta`` may be a scalar or any array broadcastable against the membrane
(converted networks use per-channel thresholds of shape ``(1, C, 1, 1)``).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, ValidationError


@dataclass(frozen=True)
class LifLayerState:
    membrane: np.ndarray
    leak: float = 0.99
    threshold: float | np.ndarray = 1.0

    def __post_init__(self):
        if not 0.0 <= self.leak <= 1.0:
            raise ValidationError(f"leak must lie in [0, 1], got {self.leak}")
        if np.any(np.asarray(self.threshold) <= 0):
            raise ValidationError("threshold must be positive")

    @classmethod
    def zeros(cls, shape, leak=0.99, threshold=1.0, dtype=np.float32) -> "LifLayerState":
        return cls(np.zeros(shape, dtype=dtype), leak, threshold)


def _check(state: LifLayerState, current: np.ndarray) -> None:
    if current.shape != state.membrane.shape:
        raise DimensionError(
            f"input current shape {current.shape} != membrane shape {state.membrane.shape}"
        )


def fire(u: np.ndarray, theta) -> np.ndarray:
    """Heaviside spike with strict inequality; ties at theta do not fire."""
    return (u > theta).astype(u.dtype)


def lif_step(state: LifLayerState, current: np.ndarray) -> tuple[np.ndarray, LifLayerState]:
    _check(state, current)
    u = state.leak * state.membrane + current
    spikes = fire(u, state.threshold)
    u = u - spikes * state.threshold
    return spikes, replace(state, membrane=u.astype(state.membrane.dtype, copy=False))


def surrogate_grad(u: np.ndarray, theta) -> np.ndarray:
    """Piecewise-linear pseudo-derivative ``max(0, 1 - |(u - theta) / theta|)``."""
    theta = np.asarray(theta, dtype=u.dtype)
    if np.any(theta <= 0):
        raise ValidationError("threshold must be positive")
    return np.maximum(0, 1 - np.abs((u - theta) / theta)).astype(u.dtype, copy=False)


def relaxed_activation(u: np.ndarray, theta) -> np.ndarray:
    """Quadratic spline whose derivative in ``u`` is exactly :func:`surrogate_grad`.

    Zero for ``u <= 0``, saturates at ``theta`` for ``u >= 2 * theta``.
    """
    theta = np.asarray(theta, dtype=u.dtype)
    z = np.clip(u, 0, 2 * theta)
    low = z * z / (2 * theta)
    high = theta - (2 * theta - z) ** 2 / (2 * theta)
    return np.where(z <= theta, low, high).astype(u.dtype, copy=False)


def relaxed_step(state: LifLayerState, current: np.ndarray) -> tuple[np.ndarray, LifLayerState]:
    """Smooth stand-in for :func:`lif_step`, used only to verify gradients.

    The reset subtracts ``theta * activation`` so that the true derivative of
    the whole step coincides with what surrogate BPTT computes for spiking mode.
    """
    _check(state, current)
    u = state.leak * state.membrane + current
    a = relaxed_activation(u, state.threshold)
    u = u - a * state.threshold
    return a, replace(state, membrane=u)
