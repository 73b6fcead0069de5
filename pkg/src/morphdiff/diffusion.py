"""Noise schedules, forward noising and the deterministic DDIM update.

Everything here is plain arithmetic on arrays; the functions accept numpy
arrays and torch tensors alike.  ``alpha_bar[t]`` is the cumulative signal
coefficient, so ``x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MIN_STEP_RATIO = 0.001


class ScheduleError(ValueError):
    """Raised for invalid schedule parameters or out-of-range timesteps."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray = field(repr=False)
    s: float = 0.008

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.T + 1,):
            raise ScheduleError(f"alpha_bar must have length T+1={self.T + 1}, got {ab.shape}")
        if ab[0] != 1.0:
            raise ScheduleError("alpha_bar[0] must be exactly 1")
        if np.any(np.diff(ab) > 0) or np.any(ab <= 0):
            raise ScheduleError("alpha_bar must be positive and non-increasing")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    def check_t(self, t: int, allow_zero: bool = True) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def step_ratios(self) -> np.ndarray:
        """alpha_bar[t] / alpha_bar[t-1] for t = 1..T."""
        return self.alpha_bar[1:] / self.alpha_bar[:-1]


def make_cosine_schedule(T: int = 1000, s: float = 0.008) -> NoiseSchedule:
    """Cosine schedule ``f(t)/f(0)`` with ``f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)``.

    Per-step ratios are clipped from below at 0.001 (betas at most 0.999) and
    the cumulative product is rebuilt from the clipped ratios.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not 0 < s < 0.1:
        raise ScheduleError(f"offset s must lie in (0, 0.1), got {s!r}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1 + s)) * math.pi / 2) ** 2
    ratios = np.maximum(f[1:] / f[:-1], MIN_STEP_RATIO)
    alpha_bar = np.concatenate([[1.0], np.cumprod(ratios)])
    return NoiseSchedule(T=int(T), alpha_bar=alpha_bar, s=float(s))


def _check_shapes(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse(x0, t: int, eps, sched: NoiseSchedule):
    """Sample ``x_t`` given clean ``x0`` and externally drawn noise ``eps``."""
    t = sched.check_t(t)
    _check_shapes(x0, eps, "forward_diffuse")
    ab = float(sched.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(x_t, eps_hat, t: int, sched: NoiseSchedule):
    t = sched.check_t(t, allow_zero=False)
    _check_shapes(x_t, eps_hat, "predict_x0")
    ab = float(sched.alpha_bar[t])
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def ddim_coefficients(t: int, t_prev: int, sched: NoiseSchedule) -> tuple[float, float]:
    """Return ``(a, b)`` with ``x_prev = a * x_t - b * eps_hat`` (eta = 0)."""
    t = sched.check_t(t, allow_zero=False)
    t_prev = sched.check_t(t_prev)
    if t_prev >= t:
        raise ScheduleError(f"t_prev={t_prev} must be smaller than t={t}")
    ab_t = float(sched.alpha_bar[t])
    ab_p = float(sched.alpha_bar[t_prev])
    a = math.sqrt(ab_p / ab_t)
    b = math.sqrt((1.0 - ab_t) * ab_p / ab_t) - math.sqrt(1.0 - ab_p)
    return a, b


def ddim_step(x_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule):
    """One deterministic DDIM update from ``t`` to ``t_prev`` (no noise term)."""
    _check_shapes(x_t, eps_hat, "ddim_step")
    a, b = ddim_coefficients(t, t_prev, sched)
    return a * x_t - b * eps_hat


def make_timestep_subsequence(T: int, n_steps: int) -> list[int]:
    """Uniformly strided decreasing timesteps ``[T, ..., 0]`` of length ``n_steps + 1``.

    Element ``k`` (counted from the end) is ``floor(T * k / n_steps)``.
    """
    if not 1 <= n_steps <= T:
        raise ScheduleError(f"n_steps must be in [1, {T}], got {n_steps}")
    return [(T * k) // n_steps for k in range(n_steps, -1, -1)]
