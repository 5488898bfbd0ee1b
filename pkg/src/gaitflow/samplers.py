"""Trajectory samplers: ancestral (DDPM), Euler ODE (DDIM), and DPM-Solver++(2M).

All steppers consume a denoiser callable ``denoise_fn(x, sigma) -> x_hat``
and integrate over a :func:`gaitflow.diffusion.karras_sigma_grid`. A
Langevin chain at fixed sigma is included as a slow reference sampler for
tests only.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .diffusion import SigmaSchedule, karras_sigma_grid

__all__ = [
    "SamplerKind",
    "SamplerConfig",
    "LangevinConfig",
    "DivergedSampleError",
    "sample",
    "langevin_reference",
]


class SamplerKind(enum.Enum):
    DDPM = "ddpm"
    DDIM = "ddim"
    DPMPP2M = "dpmpp2m"


class DivergedSampleError(RuntimeError):
    """A sampling run produced NaN/inf; carries the offending step index."""

    def __init__(self, step_index: int, message: str = "sample diverged"):
        super().__init__(f"{message} at step {step_index}")
        self.step_index = step_index


@dataclass(frozen=True)
class SamplerConfig:
    kind: SamplerKind
    n_steps: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.kind is SamplerKind.DPMPP2M and self.n_steps < 2:
            raise ValueError("DPM-Solver++(2M) needs n_steps >= 2")


@dataclass(frozen=True)
class LangevinConfig:
    epsilon: float
    n_iters: int
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.n_iters < 1:
            raise ValueError(f"n_iters must be >= 1, got {self.n_iters}")


def _check_finite(x: np.ndarray, step: int):
    if not np.all(np.isfinite(x)):
        raise DivergedSampleError(step)


def sample(
    denoise_fn,
    cfg: SamplerConfig,
    sched: SigmaSchedule,
    shape: tuple,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Draw a sample by iterating the configured stepper over the sigma grid.

    Starts from ``x ~ N(0, sigma_max^2 I)`` seeded by ``cfg.seed`` (or the
    caller-supplied ``rng``). ``shape`` may include leading batch axes; the
    denoiser is then evaluated batched. DDIM and DPM-Solver++(2M) are
    deterministic given the seed; DDPM draws fresh noise each step from the
    same stream.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    sigmas = karras_sigma_grid(cfg.n_steps, sched)
    x = rng.standard_normal(shape) * sigmas[0]

    old_d = None
    h_last = None
    for i in range(cfg.n_steps):
        s_cur, s_next = sigmas[i], sigmas[i + 1]
        d = denoise_fn(x, s_cur)
        _check_finite(d, i)

        if cfg.kind is SamplerKind.DDIM:
            x = x + (s_next - s_cur) * (x - d) / s_cur
        elif cfg.kind is SamplerKind.DDPM:
            if s_next == 0.0:
                x = d
            else:
                var_ratio = (s_cur**2 - s_next**2) / s_cur**2
                s_up = min(s_next, s_next * math.sqrt(var_ratio))
                s_down = math.sqrt(s_next**2 - s_up**2)
                x = x + (s_down - s_cur) * (x - d) / s_cur
                x = x + s_up * rng.standard_normal(shape)
        elif cfg.kind is SamplerKind.DPMPP2M:
            # Second-order linear multistep in -ln(sigma); first and final
            # updates fall back to the first-order exponential step.
            if s_next == 0.0:
                x = d
            else:
                h = math.log(s_cur) - math.log(s_next)
                if old_d is None:
                    d_eff = d
                else:
                    r = h_last / h
                    d_eff = (1 + 1 / (2 * r)) * d - (1 / (2 * r)) * old_d
                x = (s_next / s_cur) * x - math.expm1(-h) * d_eff
                h_last = h
            old_d = d
        else:  # pragma: no cover - enum is exhaustive
            raise ValueError(f"unknown sampler kind {cfg.kind}")
        _check_finite(x, i)
    return x


def langevin_reference(
    score_fn,
    cfg: LangevinConfig,
    init: np.ndarray,
    rng: np.random.Generator | None = None,
    return_chain: bool = False,
):
    """Unadjusted Langevin chain at a single fixed noise level.

    Iterates ``x <- x + (eps/2) * score(x) + sqrt(eps) * z`` for ``n_iters``
    steps. Used as an independent oracle for the fast samplers; with a small
    step size the chain's stationary distribution approximates the density
    whose score is supplied.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    x = np.array(init, dtype=float)
    chain = np.empty((cfg.n_iters,) + x.shape) if return_chain else None
    root_eps = math.sqrt(cfg.epsilon)
    for t in range(cfg.n_iters):
        x = x + 0.5 * cfg.epsilon * score_fn(x) + root_eps * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > 1e6:
            raise DivergedSampleError(t, "langevin chain diverged")
        if return_chain:
            chain[t] = x
    return chain if return_chain else x
