"""Noise schedules, denoiser preconditioning, and the denoising training loss.

Everything here operates on plain numpy arrays in float64. The diffusion
variable is an action trajectory of shape ``(T, action_dim)``; batched
variants prepend a leading batch axis. The noise parameterization is
variance-exploding with ``sigma(t) = t``, so samplers integrate directly
in sigma space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SigmaSchedule",
    "PreconditionScalars",
    "NoisedBatch",
    "karras_sigma_grid",
    "precondition",
    "denoise",
    "score_from_denoised",
    "loss_weight",
    "dsm_loss",
    "sample_log_sigma",
    "sample_training_sigma",
]


@dataclass(frozen=True)
class SigmaSchedule:
    """Training noise distribution plus the inference sigma grid parameters.

    ``loc`` and ``scale`` parameterize a log-logistic distribution over
    ``ln(sigma)`` used when drawing training noise levels. ``loc`` defaults
    to ``ln(sigma_data)`` so training noise is centred on the data scale.
    """

    sigma_min: float = 0.02
    sigma_max: float = 80.0
    rho: float = 7.0
    sigma_data: float = 1.0
    loc: float | None = None
    scale: float = 0.5

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValueError(
                f"need 0 < sigma_min < sigma_max, got [{self.sigma_min}, {self.sigma_max}]"
            )
        if self.sigma_data <= 0:
            raise ValueError(f"sigma_data must be positive, got {self.sigma_data}")
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.scale < 0:
            raise ValueError(f"scale must be non-negative, got {self.scale}")
        if self.loc is None:
            object.__setattr__(self, "loc", math.log(self.sigma_data))


@dataclass(frozen=True)
class PreconditionScalars:
    """Input/output scalings that let one network act across noise levels."""

    c_skip: float | np.ndarray
    c_out: float | np.ndarray
    c_in: float | np.ndarray
    c_noise: float | np.ndarray


@dataclass(frozen=True)
class NoisedBatch:
    """A batch of clean trajectories, the added noise, and per-sample sigma."""

    clean: np.ndarray  # (B, T, action_dim)
    noise: np.ndarray  # same shape as clean
    sigma: np.ndarray  # (B,)

    def __post_init__(self):
        if self.clean.shape != self.noise.shape:
            raise ValueError(
                f"clean/noise shape mismatch: {self.clean.shape} vs {self.noise.shape}"
            )
        if np.any(np.asarray(self.sigma) <= 0):
            raise ValueError("per-sample sigma must be positive")


def karras_sigma_grid(n_steps: int, sched: SigmaSchedule) -> np.ndarray:
    """Polynomially spaced sigma grid for sampling, ending at exactly zero.

    Returns ``n_steps + 1`` values: ``n_steps`` strictly decreasing positive
    levels from ``sigma_max`` down to ``sigma_min``, then a final 0. With
    ``n_steps == 1`` the single positive level is ``sigma_max``.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if n_steps == 1:
        return np.array([sched.sigma_max, 0.0])
    inv_rho = 1.0 / sched.rho
    hi = sched.sigma_max**inv_rho
    lo = sched.sigma_min**inv_rho
    frac = np.arange(n_steps) / (n_steps - 1)
    sigmas = (hi + frac * (lo - hi)) ** sched.rho
    return np.append(sigmas, 0.0)


def precondition(sigma, sched: SigmaSchedule) -> PreconditionScalars:
    """Scaling factors (c_skip, c_out, c_in, c_noise) at noise level sigma.

    ``sigma`` may be a scalar or an array. ``sigma == 0`` is allowed and
    yields the identity pass-through (c_skip=1, c_out=0); c_noise is then
    set to 0 since it multiplies into a branch with zero output weight.
    """
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0):
        raise ValueError("sigma must be >= 0")
    sd2 = sched.sigma_data**2
    denom = sigma**2 + sd2
    c_skip = sd2 / denom
    c_out = sigma * sched.sigma_data / np.sqrt(denom)
    c_in = 1.0 / np.sqrt(denom)
    with np.errstate(divide="ignore"):
        c_noise = np.where(sigma > 0, 0.25 * np.log(np.maximum(sigma, 1e-300)), 0.0)
    if sigma.ndim == 0:
        return PreconditionScalars(
            float(c_skip), float(c_out), float(c_in), float(c_noise)
        )
    return PreconditionScalars(c_skip, c_out, c_in, c_noise)


def _bcast(value, x: np.ndarray):
    """Reshape a per-sample factor so it broadcasts over trailing axes of x."""
    value = np.asarray(value, dtype=float)
    if value.ndim == 0:
        return value
    return value.reshape(value.shape[0], *([1] * (x.ndim - 1)))


def denoise(net, x: np.ndarray, sigma, cond, allow_oob_return: bool = False) -> np.ndarray:
    """Evaluate the preconditioned denoiser D(x; sigma, cond).

    ``net`` is anything with an ``apply(x_scaled, c_noise, cond)`` method
    producing the raw network output F with the same shape as ``x_scaled``:

        D = c_skip * x + c_out * F(c_in * x; c_noise, cond)

    ``x`` is ``(T, action_dim)`` or ``(B, T, action_dim)``; ``sigma`` a
    positive scalar or per-sample array. ``allow_oob_return`` waives the
    [0, 1] check on the return conditioning for deliberate probes.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in denoiser input")
    if np.any(np.asarray(sigma) <= 0):
        raise ValueError("denoise requires sigma > 0")
    scal = precondition(sigma, _sched_of(net))
    f = net.apply(
        _bcast(scal.c_in, x) * x, scal.c_noise, cond, allow_oob_return=allow_oob_return
    )
    return _bcast(scal.c_skip, x) * x + _bcast(scal.c_out, x) * f


def _sched_of(net) -> SigmaSchedule:
    sched = getattr(net, "sched", None)
    if sched is None:
        raise ValueError("net must carry its SigmaSchedule as .sched")
    return sched


def score_from_denoised(x: np.ndarray, d: np.ndarray, sigma) -> np.ndarray:
    """Score of the sigma-perturbed density from a denoised estimate.

    Exactly ``(d - x) / sigma**2`` elementwise; the algebraic inverse of
    ``d = x + sigma**2 * score``.
    """
    if np.any(np.asarray(sigma) == 0):
        raise ValueError("score is undefined at sigma = 0")
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    return (d - x) / _bcast(np.asarray(sigma, dtype=float) ** 2, x)


def loss_weight(sigma, sched: SigmaSchedule):
    """Per-sample loss weight making the effective network target unit-variance."""
    sigma = np.asarray(sigma, dtype=float)
    return (sigma**2 + sched.sigma_data**2) / (sigma * sched.sigma_data) ** 2


def dsm_loss(net, batch: NoisedBatch, cond) -> float:
    """Weighted denoising loss: mean over the batch of w(sigma)*||D - y||^2.

    The squared norm runs over all trajectory elements of a sample. Zero
    iff the denoiser reproduces every clean trajectory exactly.
    """
    if batch.clean.shape[0] == 0:
        raise ValueError("dsm_loss needs a non-empty batch")
    d = denoise(net, batch.clean + batch.noise, batch.sigma, cond)
    err = d - batch.clean
    per_sample = np.sum(err**2, axis=tuple(range(1, err.ndim)))
    return float(np.mean(loss_weight(batch.sigma, _sched_of(net)) * per_sample))


def sample_log_sigma(rng: np.random.Generator, sched: SigmaSchedule, size=None):
    """Pre-clamp draws of ln(sigma) from the log-logistic training distribution.

    Uses the inverse CDF: s = loc + scale * logit(u), u ~ U(0, 1).
    """
    u = rng.uniform(size=size)
    return sched.loc + sched.scale * (np.log(u) - np.log1p(-u))


def sample_training_sigma(rng: np.random.Generator, sched: SigmaSchedule, size=None):
    """Training noise level(s): exp of a log-logistic draw, clamped to the grid range."""
    s = sample_log_sigma(rng, sched, size=size)
    sigma = np.clip(np.exp(s), sched.sigma_min, sched.sigma_max)
    return float(sigma) if size is None else sigma
