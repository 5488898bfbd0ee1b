"""Checkpoint persistence: weights, config, normalization, return statistics.

Loading a checkpoint fully reproduces inference; when training state was
saved (optimizer moments, generator state, step counters), it also resumes
a run bit-exactly from the last epoch boundary.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffusion import SigmaSchedule
from .env import ReturnStats
from .network import DenoiserParams, ModelConfig
from .persist import read_container, write_container
from .training import Normalization, TrainState

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_FORMAT = "gaitflow-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    params: DenoiserParams
    return_stats: ReturnStats | None
    train_state: TrainState | None
    meta: dict


def save_checkpoint(
    path,
    params: DenoiserParams,
    return_stats: ReturnStats | None = None,
    extra_meta: dict | None = None,
    include_train_state: bool = True,
) -> str:
    """Write a checkpoint container; returns its content hash."""
    if params.norm is None:
        raise ValueError("params carry no normalization stats; train first")
    state = params.train_state if include_train_state else None
    meta = {
        "model": asdict(params.cfg),
        "sched": asdict(params.sched),
        "sigma_data": params.norm.sigma_data,
        "return_stats": None if return_stats is None else asdict(return_stats),
        "train_state": None
        if state is None
        else {
            "step": state.step,
            "epoch": state.epoch,
            "total_steps": state.total_steps,
            "rng_state": state.rng_state,
        },
        "extra": extra_meta or {},
    }
    arrays = {f"w:{k}": v for k, v in params.weights.items()}
    arrays["norm:action_mean"] = params.norm.action_mean
    arrays["norm:action_std"] = params.norm.action_std
    arrays["norm:obs_mean"] = params.norm.obs_mean
    arrays["norm:obs_std"] = params.norm.obs_std
    if state is not None:
        arrays["curve"] = np.asarray(state.curve)
        for k, v in state.adam_m.items():
            arrays[f"adam_m:{k}"] = v
        for k, v in state.adam_v.items():
            arrays[f"adam_v:{k}"] = v
    return write_container(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, meta, arrays)


def load_checkpoint(path) -> Checkpoint:
    meta, arrays, _ = read_container(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)
    cfg = ModelConfig(**meta["model"])
    sched = SigmaSchedule(**meta["sched"])
    weights = {k[2:]: v for k, v in arrays.items() if k.startswith("w:")}
    norm = Normalization(
        action_mean=arrays["norm:action_mean"],
        action_std=arrays["norm:action_std"],
        obs_mean=arrays["norm:obs_mean"],
        obs_std=arrays["norm:obs_std"],
        sigma_data=meta["sigma_data"],
    )
    params = DenoiserParams(cfg, sched, weights, norm=norm)

    stats = None
    if meta["return_stats"] is not None:
        stats = ReturnStats(**meta["return_stats"])

    state = None
    if meta["train_state"] is not None:
        ts = meta["train_state"]
        state = TrainState(
            step=ts["step"],
            epoch=ts["epoch"],
            total_steps=ts["total_steps"],
            adam_m={k[7:]: v for k, v in arrays.items() if k.startswith("adam_m:")},
            adam_v={k[7:]: v for k, v in arrays.items() if k.startswith("adam_v:")},
            rng_state=ts["rng_state"],
            curve=list(arrays.get("curve", np.array([]))),
        )
        params.train_state = state
    return Checkpoint(params=params, return_stats=stats, train_state=state, meta=meta)
