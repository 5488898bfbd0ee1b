"""Denoiser training: data assembly, the optimizer loop, and gradient checks.

Training is single-threaded and fully deterministic for a fixed seed: one
generator drives batch order, noise levels, corruption noise, and the
return-masking coin flips, in a fixed consumption order. Checkpoints at
epoch boundaries carry enough state (optimizer moments, generator state)
to resume bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import SigmaSchedule, sample_training_sigma
from .env import Dataset
from .network import (
    DenoiserParams,
    ModelConfig,
    init_params,
    loss_and_grads,
    _embed_cond_batched,
    _decoder_fwd,
)

__all__ = [
    "MissingLabelsError",
    "Normalization",
    "TrainConfig",
    "TrainState",
    "GradCheckConfig",
    "build_training_set",
    "train",
    "grad_check",
]


class MissingLabelsError(ValueError):
    """The dataset lacks the return labels training conditions on."""


@dataclass
class Normalization:
    """Per-dimension standardization applied around the diffusion model."""

    action_mean: np.ndarray
    action_std: np.ndarray
    obs_mean: np.ndarray
    obs_std: np.ndarray
    sigma_data: float

    def normalize_actions(self, a):
        return (a - self.action_mean) / self.action_std

    def denormalize_actions(self, a):
        return a * self.action_std + self.action_mean

    def normalize_obs(self, o):
        return (o - self.obs_mean) / self.obs_std


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    batch: int = 128
    lr: float = 3e-4
    seed: int = 0
    grad_clip: float = 1.0


@dataclass
class TrainState:
    """Everything beyond the weights needed to continue a run exactly."""

    step: int
    epoch: int
    total_steps: int
    adam_m: dict
    adam_v: dict
    rng_state: dict
    curve: list = field(default_factory=list)


def build_training_set(dataset: Dataset, cfg: ModelConfig):
    """Windowed training arrays plus normalization statistics.

    A step is usable when its action window fits inside the episode and its
    return label covered a full discount window. Observation histories are
    padded at episode starts by repeating the first observation.
    """
    if dataset.return_scaled is None:
        raise MissingLabelsError(
            "dataset has no scaled return labels; relabel it before training"
        )
    ep_start = np.concatenate([[0], np.cumsum(dataset.ep_length)[:-1]])
    starts = ep_start[dataset.episode_id]
    lengths = dataset.ep_length[dataset.episode_id]
    usable = dataset.return_valid & (dataset.t + cfg.horizon <= lengths)
    idx = np.flatnonzero(usable)
    if idx.size == 0:
        raise ValueError("no usable training windows in this dataset")

    t = dataset.t[idx]
    base = starts[idx]
    hist_offsets = np.arange(-(cfg.cond_steps - 1), 1)
    hist_idx = base[:, None] + np.maximum(t[:, None] + hist_offsets, 0)
    act_idx = (base + t)[:, None] + np.arange(cfg.horizon)

    action_mean = dataset.actions.mean(axis=0)
    action_std = np.maximum(dataset.actions.std(axis=0), 1e-6)
    obs_mean = dataset.obs.mean(axis=0)
    obs_std = np.maximum(dataset.obs.std(axis=0), 1e-6)
    actions_n = (dataset.actions - action_mean) / action_std
    sigma_data = float(actions_n.std(axis=0).mean())
    norm = Normalization(action_mean, action_std, obs_mean, obs_std, sigma_data)

    skills = np.zeros((idx.size, cfg.n_skills))
    skills[np.arange(idx.size), dataset.skill[idx]] = 1.0
    return {
        "obs": ((dataset.obs - obs_mean) / obs_std)[hist_idx],
        "actions": actions_n[act_idx],
        "returns": dataset.return_scaled[idx],
        "skills": skills,
    }, norm


def _clip_grads(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def _adam_step(weights, grads, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, g in grads.items():
        m[name] = b1 * m[name] + (1 - b1) * g
        v[name] = b2 * v[name] + (1 - b2) * g * g
        weights[name] -= lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + eps)


def _cosine_lr(base_lr: float, step: int, total: int) -> float:
    frac = min(step / max(total, 1), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def train(
    dataset: Dataset,
    model_cfg: ModelConfig,
    sched: SigmaSchedule | None = None,
    train_cfg: TrainConfig = TrainConfig(),
    resume: tuple[DenoiserParams, TrainState] | None = None,
    on_epoch_end=None,
):
    """Train the denoiser on a return-labeled dataset.

    Each step draws a minibatch, samples per-sample noise levels, corrupts
    the (standardized) action windows, masks the return conditioning with
    probability ``model_cfg.mask_prob``, and applies one adaptive-moment
    update with cosine learning-rate decay and global-norm clipping.

    Returns ``(params, loss_curve)``; ``params.train_state`` carries the
    optimizer/generator state for exact resumption and ``params.norm`` the
    normalization statistics. ``resume`` continues a previous run up to
    ``train_cfg.epochs`` total epochs.
    """
    data, norm = build_training_set(dataset, model_cfg)
    if sched is None:
        sched = SigmaSchedule(sigma_data=norm.sigma_data)

    n = data["returns"].shape[0]
    steps_per_epoch = max(1, math.ceil(n / train_cfg.batch))
    total_steps = train_cfg.epochs * steps_per_epoch

    if resume is None:
        ss = np.random.SeedSequence(train_cfg.seed)
        init_ss, loop_ss = ss.spawn(2)
        params = init_params(model_cfg, sched, seed=init_ss)
        rng = np.random.default_rng(loop_ss)
        state = TrainState(
            step=0,
            epoch=0,
            total_steps=total_steps,
            adam_m={k: np.zeros_like(w) for k, w in params.weights.items()},
            adam_v={k: np.zeros_like(w) for k, w in params.weights.items()},
            rng_state={},
            curve=[],
        )
    else:
        params, state = resume
        params = params.copy()
        state = TrainState(
            step=state.step,
            epoch=state.epoch,
            total_steps=state.total_steps,
            adam_m={k: v.copy() for k, v in state.adam_m.items()},
            adam_v={k: v.copy() for k, v in state.adam_v.items()},
            rng_state=state.rng_state,
            curve=list(state.curve),
        )
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state

    for epoch in range(state.epoch, train_cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, train_cfg.batch):
            idx = order[start : start + train_cfg.batch]
            b = idx.size
            clean = data["actions"][idx]
            sigma = sample_training_sigma(rng, sched, size=b)
            noise = rng.standard_normal(clean.shape) * sigma[:, None, None]
            masked = rng.uniform(size=b) < model_cfg.mask_prob
            vals = np.where(masked, 0.0, data["returns"][idx])
            cond_arrays = (
                data["obs"][idx],
                data["skills"][idx],
                vals,
                masked,
                0.25 * np.log(sigma),
            )
            loss, grads = loss_and_grads(params, clean, noise, sigma, cond_arrays)
            _clip_grads(grads, train_cfg.grad_clip)
            lr = _cosine_lr(train_cfg.lr, state.step, state.total_steps)
            _adam_step(params.weights, grads, state.adam_m, state.adam_v,
                       state.step + 1, lr)
            state.step += 1
            state.curve.append(loss)
            epoch_losses.append(loss)
        state.epoch = epoch + 1
        state.rng_state = rng.bit_generator.state
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, state, float(np.mean(epoch_losses)))

    state.rng_state = rng.bit_generator.state
    params.norm = norm
    params.train_state = state
    return params, np.array(state.curve)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckConfig:
    fd_step: float = 1e-5
    batch: int = 2
    seed: int = 0


def _probe_batch(params: DenoiserParams, probe: GradCheckConfig):
    cfg = params.cfg
    rng = np.random.default_rng(probe.seed)
    b = probe.batch
    clean = rng.normal(size=(b, cfg.horizon, cfg.action_dim))
    sigma = np.exp(rng.uniform(math.log(0.3), math.log(2.0), size=b))
    noise = rng.standard_normal(clean.shape) * sigma[:, None, None]
    obs = rng.normal(size=(b, cfg.cond_steps, cfg.obs_dim))
    skills = np.zeros((b, cfg.n_skills))
    skills[np.arange(b), rng.integers(cfg.n_skills, size=b)] = 1.0
    masked = np.arange(b) % 2 == 1  # exercise both return paths
    vals = np.where(masked, 0.0, rng.uniform(size=b))
    cond = (obs, skills, vals, masked, 0.25 * np.log(sigma))
    return clean, noise, sigma, cond


def _loss_only(params, clean, noise, sigma, cond_arrays) -> float:
    sched = params.sched
    sd2 = sched.sigma_data**2
    denom = sigma**2 + sd2
    c_skip = (sd2 / denom)[:, None, None]
    c_out = (sigma * sched.sigma_data / np.sqrt(denom))[:, None, None]
    c_in = (1.0 / np.sqrt(denom))[:, None, None]
    weight = (denom / (sigma * sched.sigma_data) ** 2)[:, None, None]
    x_noised = clean + noise
    tokens, _ = _embed_cond_batched(params, *cond_arrays, want_cache=False)
    f, _ = _decoder_fwd(params, c_in * x_noised, tokens, want_cache=False)
    err = c_skip * x_noised + c_out * f - clean
    return float(np.sum(weight * err**2) / clean.shape[0])


def grad_check(
    params: DenoiserParams, probe: GradCheckConfig = GradCheckConfig()
) -> float:
    """Max relative error of the analytic gradients over all weight groups.

    Central finite differences with the configured step on a random probe
    batch. Per group, errors are normalized by the group's largest gradient
    magnitude, floored at an absolute scale tied to the loss value: central
    differences of a float64 loss carry roundoff noise of order
    ``eps * loss / step``, so groups whose true gradients sit below that
    floor would otherwise report pure noise. Unused parameters (zero
    gradient on both paths) report 0 exactly.
    """
    clean, noise, sigma, cond = _probe_batch(params, probe)
    loss0, grads = loss_and_grads(params, clean, noise, sigma, cond)
    atol = 1e-6 * (1.0 + abs(loss0))

    worst = 0.0
    h = probe.fd_step
    for name, w in params.weights.items():
        fd = np.zeros_like(w)
        flat_w = w.reshape(-1)
        flat_fd = fd.reshape(-1)
        for i in range(flat_w.size):
            orig = flat_w[i]
            flat_w[i] = orig + h
            lp = _loss_only(params, clean, noise, sigma, cond)
            flat_w[i] = orig - h
            lm = _loss_only(params, clean, noise, sigma, cond)
            flat_w[i] = orig
            flat_fd[i] = (lp - lm) / (2 * h)
        scale = max(float(np.abs(grads[name]).max()), float(np.abs(fd).max()), atol)
        err = float(np.abs(grads[name] - fd).max()) / scale
        worst = max(worst, err)
    return worst
