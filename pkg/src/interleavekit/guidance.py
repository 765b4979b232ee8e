"""Two-stage classifier-free guidance over an abstract denoiser.

The denoiser is any callable (z_t, conditions, t) -> noise estimate. One
guided step makes exactly three denoiser calls, then combines them in two
affine stages: first a text/visual balance (strength s1) pulling the
visual-only estimate toward the fully conditioned one, then overall
guidance (strength s2) against the fully unconditioned estimate. The
result equals the closed form

    (1 - s2) * e(none, none) + s2 * (1 - s1) * e(none, visual)
        + s2 * s1 * e(text, visual)

whose coefficients sum to one, so a constant denoiser passes through
unchanged. Inference uses a shifted timestep schedule that concentrates
steps near high noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

Prediction = np.ndarray


class LengthMismatch(ValueError):
    """Predictions combined in one step must share one length."""


@dataclass(frozen=True)
class ConditionSet:
    """Optional text/visual conditions; None stands for the null token."""

    text: Any | None = None
    visual: Any | None = None


Denoiser = Callable[[np.ndarray, ConditionSet, float], Prediction]


@dataclass(frozen=True)
class GuidanceConfig:
    s1: float = 4.0  # text-image balance
    s2: float = 1.5  # overall guidance strength
    shift: float = 3.0  # timestep shift
    num_steps: int = 50

    def __post_init__(self) -> None:
        if self.s1 < 0 or self.s2 < 0:
            raise ValueError("guidance strengths must be >= 0")
        if self.shift <= 0:
            raise ValueError("shift must be > 0")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")


def _as_vector(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr


def _check_lengths(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise LengthMismatch(f"prediction shapes differ: {a.shape} vs {b.shape}")


def balanced_estimate(e_null_text, e_full, s1: float) -> Prediction:
    """Stage one: e_null_text + s1 * (e_full - e_null_text)."""
    a = _as_vector(e_null_text)
    b = _as_vector(e_full)
    _check_lengths(a, b)
    return a + s1 * (b - a)


def final_prediction(e_null_null, balanced, s2: float) -> Prediction:
    """Stage two: e_null_null + s2 * (balanced - e_null_null)."""
    a = _as_vector(e_null_null)
    b = _as_vector(balanced)
    _check_lengths(a, b)
    return a + s2 * (b - a)


def guided_step(
    denoiser: Denoiser,
    z_t,
    c_t,
    c_v,
    t: float,
    config: GuidanceConfig,
) -> Prediction:
    """One guided denoising step: three denoiser calls, two affine stages."""
    z = _as_vector(z_t)
    e_visual = _as_vector(denoiser(z, ConditionSet(text=None, visual=c_v), t))
    e_full = _as_vector(denoiser(z, ConditionSet(text=c_t, visual=c_v), t))
    e_null = _as_vector(denoiser(z, ConditionSet(text=None, visual=None), t))
    _check_lengths(e_visual, e_full)
    _check_lengths(e_visual, e_null)
    balanced = balanced_estimate(e_visual, e_full, config.s1)
    return final_prediction(e_null, balanced, config.s2)


def shifted_schedule(num_steps: int, shift: float) -> list[float]:
    """Strictly decreasing timesteps in (0, 1] under the flow shift remap.

    Uniform points u_i = i/num_steps (i = num_steps..1) are remapped by
    t = shift * u / (1 + (shift - 1) * u); shift = 1 is the identity and any
    shift preserves the endpoint t = 1.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if shift <= 0:
        raise ValueError("shift must be > 0")
    out: list[float] = []
    for i in range(num_steps, 0, -1):
        u = i / num_steps
        # Algebraically shift*u / (1 + (shift-1)*u); this form hits the
        # u = 1 endpoint exactly in floating point for any shift.
        out.append(shift * u / (shift * u + (1.0 - u)))
    return out


def affine_coefficients(config: GuidanceConfig) -> tuple[float, float, float]:
    """Closed-form weights on (e_null_null, e_null_visual, e_text_visual)."""
    return (1.0 - config.s2, config.s2 * (1.0 - config.s1), config.s2 * config.s1)
