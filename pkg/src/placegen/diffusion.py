"""Core diffusion mechanics: schedules, forward noising, masked loss, DDIM step.

Everything here is a pure function of its inputs.  Images are H×W×C float
arrays in [-1, 1]; the same array type serves as clean image, noisy image and
noise, depending on context.

Timestep conventions:
- Schedule arrays are 0-indexed: ``beta[i]`` etc. for ``i = 0 .. T-1``.
- ``q_sample`` takes the 0-based index ``t`` (``0 <= t < T``).
- ``ddim_step`` takes the 1-based step number ``t`` (``1 <= t <= T``); step
  ``t`` consumes ``alpha_bar[t-1]`` and moves toward step ``t-1``, where the
  cumulative product before step 1 is defined as exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise schedule with cached cumulative products."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if self.T < 1 or len(self.beta) != self.T:
            raise ValueError(f"schedule length {len(self.beta)} != T={self.T}")
        if np.any(self.beta <= 0.0) or np.any(self.beta >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")


@dataclass(frozen=True)
class LossReport:
    """Value of the (masked) denoising objective plus the mask size used."""

    value: float
    masked_pixel_count: int


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build a linear beta schedule of length T.

    Raises ValueError for T < 2 or betas outside (0, 1) or beta_start > beta_end.
    """
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noise a clean image to step index ``t``: sqrt(a_bar)*x0 + sqrt(1-a_bar)*eps.

    ``t`` is a 0-based schedule index, or an integer array of per-example
    indices when ``x0`` is a batch with leading batch axis.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= sched.T):
        raise ValueError(f"t={t} outside schedule range [0, {sched.T})")
    ab = sched.alpha_bar[t_arr]
    if t_arr.ndim == 1:  # per-example indices -> broadcast over trailing dims
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    dt = x0.dtype
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(dt, copy=False)


def masked_denoise_loss(pred_eps: np.ndarray, true_eps: np.ndarray, mask: np.ndarray) -> LossReport:
    """Mean squared error over masked pixels only.

    ``mask`` is a binary H×W grid; it gates all channels of a pixel.  With an
    all-ones mask this is exactly the plain denoising MSE.  An all-zero mask
    yields value 0 with masked_pixel_count 0 rather than an error.
    """
    if pred_eps.shape != true_eps.shape:
        raise ValueError(f"shape mismatch: {pred_eps.shape} vs {true_eps.shape}")
    m = np.asarray(mask)
    if m.shape != pred_eps.shape[:2]:
        raise ValueError(f"mask {m.shape} does not gate image {pred_eps.shape}")
    count = int(np.count_nonzero(m))
    if count == 0:
        return LossReport(value=0.0, masked_pixel_count=0)
    channels = 1 if pred_eps.ndim == 2 else pred_eps.shape[2]
    diff2 = (pred_eps - true_eps) ** 2
    if pred_eps.ndim == 3:
        diff2 = diff2 * m[:, :, None]
    else:
        diff2 = diff2 * m
    value = float(diff2.sum() / (count * channels))
    return LossReport(value=value, masked_pixel_count=count)


def masked_loss_grad(pred_eps: np.ndarray, true_eps: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Gradient of masked_denoise_loss w.r.t. pred_eps.

    Exactly zero outside the mask by construction.
    """
    m = np.asarray(mask)
    count = int(np.count_nonzero(m))
    grad = np.zeros_like(pred_eps)
    if count == 0:
        return grad
    channels = 1 if pred_eps.ndim == 2 else pred_eps.shape[2]
    gate = m[:, :, None] if pred_eps.ndim == 3 else m
    np.multiply(2.0 * (pred_eps - true_eps) / (count * channels), gate, out=grad)
    return grad


def ddim_step(x_t: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule,
              t_prev: int | None = None) -> np.ndarray:
    """One deterministic reverse step from step number ``t`` (1-based).

    Reconstructs the x0 estimate (x_t - sqrt(1-a_bar)*eps)/sqrt(a_bar) and
    re-noises it to ``t_prev`` (default t-1; pass a smaller step for strided
    sampling).  At t_prev = 0 the output is the x0 estimate itself.
    """
    if x_t.shape != eps.shape:
        raise ValueError(f"shape mismatch: x_t {x_t.shape} vs eps {eps.shape}")
    if not (1 <= t <= sched.T):
        raise ValueError(f"step number t={t} outside [1, {sched.T}]")
    if t_prev is None:
        t_prev = t - 1
    if not (0 <= t_prev < t):
        raise ValueError(f"t_prev={t_prev} must satisfy 0 <= t_prev < t={t}")
    ab_t = sched.alpha_bar[t - 1]
    ab_prev = 1.0 if t_prev == 0 else sched.alpha_bar[t_prev - 1]
    x0_est = (x_t - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    if t_prev == 0:
        return x0_est.astype(x_t.dtype, copy=False)
    out = np.sqrt(ab_prev) * x0_est + np.sqrt(1.0 - ab_prev) * eps
    return out.astype(x_t.dtype, copy=False)


def strided_steps(T: int, num_steps: int) -> list[int]:
    """Descending list of 1-based step numbers from T down to 1.

    Evenly spaced; the first entry is always T and the last is always 1, so a
    full reverse pass ends on the x0 estimate.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if num_steps >= T:
        return list(range(T, 0, -1))
    ts = np.unique(np.round(np.linspace(1, T, num_steps)).astype(int))
    return [int(v) for v in ts[::-1]]
