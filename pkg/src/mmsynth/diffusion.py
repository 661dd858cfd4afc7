"""Noise schedules, the closed-form forward process, the deterministic
reverse update, and the loss terms of the latent diffusion core.

Schedule tables are accumulated in float64; per-sample arithmetic runs in
whatever precision the caller's arrays use (float32 in training).
All array operations accept both numpy arrays and torch tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

try:
    import torch
except ImportError:  # pragma: no cover - torch is a hard dependency elsewhere
    torch = None


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance tables; index t runs 1..T, stored at [t-1]."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def alpha_bar_at(self, t):
        """alpha_bar for step t with the boundary convention alpha_bar_0 = 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"step {t} outside [0, {self.T}]")
        padded = np.concatenate([[1.0], self.alpha_bar])
        out = padded[t]
        return float(out) if out.ndim == 0 else out


def build_linear_schedule(T: int, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp: beta_t = beta_1 + (t-1)/(T-1) * (beta_T - beta_1)."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_1 <= beta_T < 1.0):
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got ({beta_1}, {beta_T})")
    steps = np.arange(1, T + 1, dtype=np.float64)
    beta = beta_1 + (steps - 1.0) / (T - 1.0) * (beta_T - beta_1)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, posterior_var=posterior_var)


def _check_same_shape(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _is_scalar_step(t) -> bool:
    return np.ndim(t) == 0


def _coeff(values, like):
    """Broadcastable per-batch coefficient in the array library of `like`."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1, *([1] * (like.ndim - 1)))
    if torch is not None and isinstance(like, torch.Tensor):
        return torch.as_tensor(arr, dtype=like.dtype, device=like.device)
    return arr.astype(like.dtype)


def _step_values(t) -> np.ndarray:
    if torch is not None and isinstance(t, torch.Tensor):
        return t.detach().cpu().numpy()
    return np.asarray(t)


def forward_diffuse(x0, t, noise, sched: NoiseSchedule):
    """Closed-form corruption: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise.

    `t` may be a single step or one step per leading batch element.
    """
    _check_same_shape(x0, noise, "forward_diffuse")
    tv = _step_values(t)
    if np.any(tv < 1) or np.any(tv > sched.T):
        raise ValueError(f"step {t} outside [1, {sched.T}]")
    abar = sched.alpha_bar_at(tv)
    if _is_scalar_step(tv):
        return float(np.sqrt(abar)) * x0 + float(np.sqrt(1.0 - abar)) * noise
    return _coeff(np.sqrt(abar), x0) * x0 + _coeff(np.sqrt(1.0 - abar), x0) * noise


def reverse_step(x_t, eps_hat, t: int, sched: NoiseSchedule, t_prev: int | None = None):
    """Deterministic reverse update from step t to t_prev (default t-1).

    Algebraically this rescales the implied clean latent
    (x_t - sqrt(1-abar_t) * eps_hat) / sqrt(abar_t) back to noise level
    t_prev; there is no injected stochastic term. It is evaluated in the
    regrouped form a * x_t + c * eps_hat. Both coefficients and state are
    held in 64 bits and the result is returned in 64 bits: the update gain
    1/sqrt(alpha_t) exceeds 1 at every step, so rounding the state back to
    32 bits between steps compounds to ~2e-4 over a 1000-step chain, while
    a 64-bit chain over 32-bit inputs stays at the input quantization floor
    (~3e-5). Callers that need 32 bits (e.g. to feed a network) cast at the
    point of use. With t_prev = 0 the update returns the implied clean
    latent itself (alpha_bar_0 = 1).
    """
    _check_same_shape(x_t, eps_hat, "reverse_step")
    t = int(t)
    t_prev = t - 1 if t_prev is None else int(t_prev)
    if not (1 <= t <= sched.T):
        raise ValueError(f"step {t} outside [1, {sched.T}]")
    if not (0 <= t_prev < t):
        raise ValueError(f"target step {t_prev} must lie in [0, {t})")
    abar_t = sched.alpha_bar_at(t)
    abar_p = sched.alpha_bar_at(t_prev)
    a = math.sqrt(abar_p / abar_t)
    c = math.sqrt(1.0 - abar_p) - a * math.sqrt(1.0 - abar_t)
    if torch is not None and isinstance(x_t, torch.Tensor):
        return a * x_t.to(torch.float64) + c * eps_hat.to(torch.float64)
    return a * np.asarray(x_t, dtype=np.float64) + c * np.asarray(eps_hat, dtype=np.float64)


def strided_plan(T: int, steps: int) -> list[int]:
    """Strictly decreasing, near-uniform step subsequence from T down to 1."""
    if not (1 <= steps <= T):
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    if steps == 1:
        return [T]
    plan = np.round(np.linspace(T, 1, steps)).astype(int).tolist()
    for i in range(1, steps):
        plan[i] = min(plan[i], plan[i - 1] - 1)
    if plan[-1] < 1:
        raise AssertionError("strided plan left the valid step range")
    return plan


def epsilon_loss(eps_true, eps_pred):
    """Mean squared error over all elements (mean, not sum)."""
    _check_same_shape(eps_true, eps_pred, "epsilon_loss")
    diff = eps_pred - eps_true
    return (diff * diff).mean()


def kl_term(x0, x_t, t, eps_hat, sched: NoiseSchedule):
    """Gaussian KL between the true reverse posterior and the predicted one.

    Both distributions share the fixed posterior variance, so the KL
    reduces to the squared gap of their means over twice that variance,
    averaged over elements. Valid for transitions with t >= 2 (the step-1
    posterior is degenerate). With a per-batch `t`, returns one value per
    batch element.
    """
    _check_same_shape(x0, x_t, "kl_term")
    _check_same_shape(x0, eps_hat, "kl_term")
    tv = _step_values(t)
    if np.any(tv < 2) or np.any(tv > sched.T):
        raise ValueError(f"transition step {t} outside [2, {sched.T}]")

    abar_t = sched.alpha_bar_at(tv)
    abar_p = sched.alpha_bar_at(tv - 1)
    beta_t = sched.beta[tv - 1]
    var = sched.posterior_var[tv - 1]

    # both posterior means share the x_t term, so the gap is the x0
    # coefficient times the difference of true and implied x0
    c0 = np.sqrt(abar_p) * beta_t / (1.0 - abar_t)

    if _is_scalar_step(tv):
        x0_hat = (x_t - float(np.sqrt(1.0 - abar_t)) * eps_hat) / float(np.sqrt(abar_t))
        gap = float(c0) * (x0 - x0_hat)
        return (gap * gap).mean() / (2.0 * float(var))
    x0_hat = (x_t - _coeff(np.sqrt(1.0 - abar_t), x_t) * eps_hat) / _coeff(np.sqrt(abar_t), x_t)
    gap = _coeff(c0, x0) * (x0 - x0_hat)
    per_elem = gap * gap
    reduced = per_elem.reshape(per_elem.shape[0], -1).mean(-1)
    return reduced / _coeff(2.0 * var, reduced).reshape(-1)


def combined_loss(eps_loss, kl_loss):
    """Unweighted sum of the noise-prediction and KL terms."""
    for name, value in (("eps_loss", eps_loss), ("kl_loss", kl_loss)):
        scalar = value.detach() if torch is not None and isinstance(value, torch.Tensor) else value
        if not math.isfinite(float(scalar)):
            raise ValueError(f"{name} is not finite: {value}")
    return eps_loss + kl_loss
