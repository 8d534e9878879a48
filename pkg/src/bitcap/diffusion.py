"""Continuous Gaussian corruption and denoising over analog bit matrices.

The schedule is a monotone log noise-to-signal ratio g(t) on t in [0, 1];
signal and noise scales follow alpha^2 = sigmoid(-g), sigma^2 = sigmoid(g),
so alpha^2 + sigma^2 = 1 at every t (variance preserving).  The reverse
transition interpolates the current state toward the denoiser's clean-bits
estimate, with an optionally re-noised variance term.

All functions are pure given their inputs and an explicit RNG handle, so
batch items can be processed in parallel with independent streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import expit as sigmoid

from .tensor import ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear log noise-ratio ramp between two endpoints.

    gamma_min at t=0 should be very negative (nearly clean signal) and
    gamma_max at t=1 positive enough that the state is nearly pure noise.
    """

    gamma_min: float = -13.0
    gamma_max: float = 5.0

    def __post_init__(self):
        if not self.gamma_max > self.gamma_min:
            raise ValueError("gamma_max must exceed gamma_min")

    def log_noise_ratio(self, t: float | np.ndarray) -> float | np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError(f"time fraction {t} outside [0, 1]")
        out = self.gamma_min + t * (self.gamma_max - self.gamma_min)
        return float(out) if out.ndim == 0 else out

    def signal_scale(self, t) -> float | np.ndarray:
        return np.sqrt(sigmoid(-self.log_noise_ratio(t)))

    def noise_scale(self, t) -> float | np.ndarray:
        return np.sqrt(sigmoid(self.log_noise_ratio(t)))


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-chain controls: step count, step gap, stochastic re-noising."""

    steps: int = 50
    time_difference: int = 0
    stochastic: bool = False
    self_conditioning: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.time_difference < 0:
            raise ValueError("time_difference must be >= 0")


def forward_diffuse(
    x0: np.ndarray,
    t: float | np.ndarray,
    steps: int,
    eps: np.ndarray,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Corrupt clean bits to time t of a `steps`-step chain.

    x_t = signal_scale * x0 + noise_scale * eps with t scaled into (0, 1].
    ``t`` may be a scalar or one value per leading batch entry.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ShapeError("forward_diffuse", [x0.shape, eps.shape])
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0.0) or np.any(t > steps):
        raise ValueError(f"diffusion time {t} outside (0, {steps}]")
    frac = t / steps
    alpha = np.sqrt(sigmoid(-_ramp(schedule, frac)))
    sigma = np.sqrt(sigmoid(_ramp(schedule, frac)))
    if alpha.ndim > 0:  # per-batch times broadcast over trailing dims
        extra = x0.ndim - alpha.ndim
        alpha = alpha.reshape(alpha.shape + (1,) * extra)
        sigma = sigma.reshape(sigma.shape + (1,) * extra)
    return (alpha * x0 + sigma * eps).astype(x0.dtype, copy=False)


def _ramp(schedule: NoiseSchedule, frac):
    return schedule.gamma_min + np.asarray(frac, dtype=np.float64) * (
        schedule.gamma_max - schedule.gamma_min
    )


def reverse_transition(
    x_t: np.ndarray,
    g_s: float,
    g_t: float,
    x0_hat: np.ndarray,
    eps: np.ndarray | None,
) -> np.ndarray:
    """Denoising transition between two log noise-ratio values g_s <= g_t.

      c     = -expm1(g_s - g_t)
      mean  = alpha_s * (x_t * (1 - c) / alpha_t + c * x0_hat)
      var   = sigma_s^2 * c

    and the new state is mean + sqrt(var) * eps (eps omitted when None).
    Equal ratios give c = 0, hence the exact identity map.
    """
    x_t = np.asarray(x_t)
    x0_hat = np.asarray(x0_hat)
    if x_t.shape != x0_hat.shape:
        raise ShapeError("reverse_transition", [x_t.shape, x0_hat.shape])
    alpha_s = np.sqrt(sigmoid(-g_s))
    alpha_t = np.sqrt(sigmoid(-g_t))
    sigma_s = np.sqrt(sigmoid(g_s))
    c = -np.expm1(g_s - g_t)
    mean = alpha_s * (x_t * (1.0 - c) / alpha_t + c * x0_hat)
    if eps is None:
        return mean.astype(x_t.dtype, copy=False)
    var = sigma_s**2 * c
    return (mean + np.sqrt(var) * np.asarray(eps)).astype(x_t.dtype, copy=False)


def reverse_step(
    x_t: np.ndarray,
    t: float,
    s: float,
    x0_hat: np.ndarray,
    eps: np.ndarray | None,
    steps: int,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """One reverse chain step from time t to strictly earlier time s."""
    if s >= t:
        raise ValueError(f"reverse step needs s < t, got s={s}, t={t}")
    g_s = schedule.log_noise_ratio(s / steps)
    g_t = schedule.log_noise_ratio(t / steps)
    return reverse_transition(x_t, g_s, g_t, x0_hat, eps)


class SampleResult(NamedTuple):
    words: np.ndarray  # (..., seq_len) argmax of the final word distribution
    probs: np.ndarray  # final (..., vocab, seq_len) distribution
    bits: np.ndarray  # final latent state, quantizable for the bit-path decode


# denoiser(x_t, gamma_value, prev_estimate) -> (clean_bits_estimate, word_probs)
Denoiser = Callable[[np.ndarray, float, np.ndarray], tuple[np.ndarray, np.ndarray]]


def sample(
    denoiser: Denoiser,
    shape: tuple[int, ...],
    config: SamplerConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    x_init: np.ndarray | None = None,
    dtype=np.float64,
) -> SampleResult:
    """Run the reverse chain from pure noise down to a sentence.

    The denoiser sees the current state, the log noise ratio, and (when
    self-conditioning is on) its previous clean-bits estimate, zeros on the
    first call.  Words come from the final call's distribution by per-column
    argmax; the final latent state is returned for bit-path inspection.
    """
    T = config.steps
    x = rng.standard_normal(shape).astype(dtype) if x_init is None else np.array(x_init, dtype=dtype)
    prev_est = np.zeros(shape, dtype=dtype)
    probs = None
    for t in range(T, 0, -1):
        s = max(t - 1 - config.time_difference, 0)
        gamma_t = schedule.log_noise_ratio(t / T)
        x0_hat, probs = denoiser(x, gamma_t, prev_est)
        if config.self_conditioning:
            prev_est = np.asarray(x0_hat, dtype=dtype)
        eps = rng.standard_normal(shape).astype(dtype) if config.stochastic else None
        x = reverse_step(x, t, s, x0_hat, eps, T, schedule)
    words = np.argmax(probs, axis=-2)
    return SampleResult(words=words, probs=np.asarray(probs), bits=x)


def bit_regression_loss(x0_hat, x0):
    """Mean squared error between estimated and true analog bits.

    Works on plain arrays or taped tensors (returns the matching kind).
    """
    from . import tensor as tt

    if isinstance(x0_hat, tt.Tensor) or isinstance(x0, tt.Tensor):
        a, b = tt.astensor(x0_hat), tt.astensor(x0)
        if a.shape != b.shape:
            raise ShapeError("bit_regression_loss", [a.shape, b.shape])
        d = a - b
        return (d * d).mean()
    a, b = np.asarray(x0_hat), np.asarray(x0)
    if a.shape != b.shape:
        raise ShapeError("bit_regression_loss", [a.shape, b.shape])
    return float(np.mean((a - b) ** 2))
