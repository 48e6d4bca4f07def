"""Noise schedule and the x0 / eps / v conversions.

``alpha_bar`` has T + 1 entries with ``alpha_bar[0] == 1``; training draws
t from 1..T and sampling walks a descending subsequence ending at 0.
"""

import math
from dataclasses import dataclass

import torch

from luminet.errors import ShapeError, UsageError

LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 2e-2
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kind: str
    alpha_bar: torch.Tensor  # float64, shape (T + 1,)

    @property
    def sqrt_alpha_bar(self) -> torch.Tensor:
        return self.alpha_bar.sqrt()

    @property
    def sqrt_one_minus_alpha_bar(self) -> torch.Tensor:
        return (1.0 - self.alpha_bar).sqrt()

    def coefficients(self, t: torch.Tensor | int, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """sqrt(alpha_bar[t]) and sqrt(1 - alpha_bar[t]) broadcastable against ``like``"""
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 0).any() or (t > self.T).any():
            raise ShapeError(f"timestep outside 0..{self.T}")
        a = self.sqrt_alpha_bar[t].to(like.dtype)
        s = self.sqrt_one_minus_alpha_bar[t].to(like.dtype)
        if a.ndim == 1:
            shape = (-1,) + (1,) * (like.ndim - 1)
            a, s = a.view(shape), s.view(shape)
        return a, s

    def sample_timesteps(self, n: int, generator: torch.Generator | None = None) -> torch.Tensor:
        return torch.randint(1, self.T + 1, (n,), generator=generator)

    def ddim_timesteps(self, steps: int) -> list[int]:
        """Descending, unique, from T down to 0"""
        if steps < 1:
            raise UsageError("steps must be >= 1")
        grid = torch.linspace(self.T, 0, min(steps, self.T) + 1, dtype=torch.float64).round().long().tolist()
        return sorted(set(grid), reverse=True)


def make_schedule(T: int, kind: str = "cosine") -> NoiseSchedule:  # noqa: N803
    if T < 1:
        raise UsageError("T must be >= 1")
    if kind == "linear":
        betas = torch.linspace(LINEAR_BETA_START, LINEAR_BETA_END, T, dtype=torch.float64)
    elif kind == "cosine":
        steps = torch.arange(T + 1, dtype=torch.float64)
        f = torch.cos((steps / T + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
        betas = (1 - f[1:] / f[:-1]).clamp(min=1e-8, max=MAX_BETA)
    else:
        raise UsageError(f"unknown schedule kind {kind!r}")
    alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1 - betas, dim=0)])
    return NoiseSchedule(T=T, kind=kind, alpha_bar=alpha_bar)


def _check_same(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    _check_same(x0, eps)
    a, s = sched.coefficients(t, x0)
    return a * x0 + s * eps


def vpred_convert(x0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    _check_same(x0, eps)
    a, s = sched.coefficients(t, x0)
    return a * eps - s * x0


def x0_from(v: torch.Tensor, x_t: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    _check_same(v, x_t)
    a, s = sched.coefficients(t, x_t)
    return a * x_t - s * v


def eps_from(v: torch.Tensor, x_t: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    _check_same(v, x_t)
    a, s = sched.coefficients(t, x_t)
    return s * x_t + a * v


def prediction_target(x0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule, prediction_type: str):
    if prediction_type == "v":
        return vpred_convert(x0, eps, t, sched)
    if prediction_type == "epsilon":
        return eps
    raise UsageError(f"unknown prediction type {prediction_type!r}")


def split_prediction(pred: torch.Tensor, x_t: torch.Tensor, t, sched: NoiseSchedule, prediction_type: str):
    """Model output -> (x0 estimate, eps estimate)"""
    if prediction_type == "v":
        return x0_from(pred, x_t, t, sched), eps_from(pred, x_t, t, sched)
    if prediction_type == "epsilon":
        a, s = sched.coefficients(t, x_t)
        return (x_t - s * pred) / a, pred
    raise UsageError(f"unknown prediction type {prediction_type!r}")
