"""Classifier-free guidance: blending conditional and unconditional denoisers.

The guided estimate is ``(1 - lam) * D_uncond + lam * D_cond`` where the
conditional branch sees the target return and the unconditional branch sees
the mask sentinel. Blending denoiser outputs is equivalent to blending
scores, since the score is affine in D at fixed (x, sigma).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .diffusion import SigmaSchedule, denoise
from .network import MASK, Conditioning
from .samplers import SamplerConfig, sample

__all__ = [
    "GuidanceConfig",
    "MissingUnconditionalBranchWarning",
    "cfg_denoise",
    "guided_sampler",
]


class MissingUnconditionalBranchWarning(UserWarning):
    """Guidance was requested from a model whose returns were never masked."""


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance strength and the return target supplied to the conditional branch.

    ``target_return`` is clamped into [0, 1] unless ``clamp_target`` is
    disabled, which marks a deliberate out-of-distribution probe.
    """

    lam: float = 1.5
    target_return: float = 1.0
    clamp_target: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"guidance strength must be >= 0, got {self.lam}")
        if self.clamp_target:
            object.__setattr__(
                self, "target_return", float(np.clip(self.target_return, 0.0, 1.0))
            )


def cfg_denoise(net, x, sigma, cond: Conditioning, g: GuidanceConfig) -> np.ndarray:
    """Guided denoised trajectory at one noise level.

    Evaluates the denoiser with the return replaced by ``g.target_return``
    (conditional) and by the mask sentinel (unconditional). ``lam = 0`` and
    ``lam = 1`` return the respective single branches bit-exactly.
    """
    allow_oob = not g.clamp_target
    if g.lam == 0.0:
        return denoise(net, x, sigma, replace(cond, return_value=MASK))
    cond_c = replace(cond, return_value=g.target_return)
    d_cond = denoise(net, x, sigma, cond_c, allow_oob_return=allow_oob)
    if g.lam == 1.0:
        return d_cond
    d_uncond = denoise(net, x, sigma, replace(cond, return_value=MASK))
    return (1.0 - g.lam) * d_uncond + g.lam * d_cond


def guided_sampler(
    net,
    sampler_cfg: SamplerConfig,
    g: GuidanceConfig,
    cond: Conditioning,
    sched: SigmaSchedule | None = None,
    shape: tuple | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Run the configured sampler with the guided denoiser plugged in.

    The conditioning's return field is ignored; each denoising step makes
    one conditional and one unconditional evaluation (two per step).
    """
    if getattr(net, "cfg", None) is not None and net.cfg.mask_prob == 0.0:
        warnings.warn(
            "model was trained with mask_prob=0: the unconditional branch "
            "was never trained, guided samples are unreliable",
            MissingUnconditionalBranchWarning,
            stacklevel=2,
        )
    if sched is None:
        sched = net.sched
    if shape is None:
        shape = (net.cfg.horizon, net.cfg.action_dim)
    return sample(
        lambda x, s: cfg_denoise(net, x, s, cond, g),
        sampler_cfg,
        sched,
        shape,
        rng=rng,
    )
