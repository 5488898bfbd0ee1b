"""gaitflow: return-guided diffusion policies for a toy locomotion environment.

A numpy library that trains a return-conditioned trajectory denoiser on
unlabeled multi-skill locomotion data and extracts reward-maximizing
behaviour offline through classifier-free guidance, driven by a
receding-horizon controller.
"""

from .diffusion import (
    NoisedBatch,
    PreconditionScalars,
    SigmaSchedule,
    denoise,
    dsm_loss,
    karras_sigma_grid,
    precondition,
    sample_training_sigma,
    score_from_denoised,
)
from .env import (
    Dataset,
    EnvConfig,
    EnvState,
    Episode,
    ReturnStats,
    collect_dataset,
    expert_action,
    label_returns,
    label_rewards,
    load_dataset,
    save_dataset,
    step,
)
from .guidance import GuidanceConfig, cfg_denoise, guided_sampler
from .network import (
    MASK,
    Conditioning,
    DenoiserParams,
    ModelConfig,
    embed_conditioning,
    forward,
    init_params,
)
from .samplers import (
    DivergedSampleError,
    LangevinConfig,
    SamplerConfig,
    SamplerKind,
    langevin_reference,
    sample,
)
from .training import GradCheckConfig, TrainConfig, grad_check, train
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
