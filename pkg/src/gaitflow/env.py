"""Planar quadruped-surrogate environment, scripted experts, and labeling.

The environment is a deterministic first-order system at 25 Hz: the base
velocity integrates clamped velocity-delta actions, body height relaxes
toward a commanded offset around a nominal stance, and a four-legged gait
phase advances at a skill-dependent cadence. The measured base velocity
carries a gait-locked oscillation, so even perfect command tracking leaves
a small residual velocity error - which keeps return labels informative.

Two skills are provided, a tall walk and a low crawl, each with a scripted
proportional-tracking expert standing in for a learned data-collection
policy. Episodes never mix skills.

Actions are issued one control step before they take effect (single-step
actuation delay); the pending action is part of the environment state and
of the observation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace, asdict

import numpy as np

from .persist import write_container, read_container

__all__ = [
    "EnvConfig",
    "SkillDynamics",
    "EnvState",
    "Episode",
    "Dataset",
    "ReturnStats",
    "SKILL_NAMES",
    "skill_dynamics_for",
    "clamp_action",
    "reset",
    "observe",
    "step",
    "expert_action",
    "collect_dataset",
    "label_rewards",
    "label_returns",
    "tracking_score",
    "save_dataset",
    "load_dataset",
]

SKILL_NAMES = ("walk", "crawl")

OBS_DIM = 17  # v_meas (3), height (1), sin/cos of 4 leg phases (8), pending action (5)
ACTION_DIM = 5

DATASET_FORMAT = "gaitflow-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.04
    episode_len: int = 250
    # action bounds: (a_vx, a_vy, a_wz) are velocity deltas per second,
    # a_h is a height-target offset around the nominal stance, a_phi a
    # gait-rate offset.
    accel_bound: float = 1.0
    turn_bound: float = 2.0
    height_offset_bound: float = 0.40
    phase_rate_bound: float = 2.0
    nominal_height: float = 0.425
    height_rate: float = 4.0          # 1/s relaxation toward the commanded height
    height_limits: tuple = (0.15, 0.8)
    vx_limit: float = 1.5
    # per-episode command box
    command_low: tuple = (-0.8, -0.5, -1.0)
    command_high: tuple = (0.8, 0.5, 1.0)
    # scripted expert
    tracking_gain: float = 3.0
    gait_action_amp: float = 0.8
    # initial-state ranges at collection time
    init_height_range: tuple = (0.25, 0.60)
    init_speed_range: float = 0.15

    def action_bounds(self) -> np.ndarray:
        return np.array(
            [
                self.accel_bound,
                self.accel_bound,
                self.turn_bound,
                self.height_offset_bound,
                self.phase_rate_bound,
            ]
        )


@dataclass(frozen=True)
class SkillDynamics:
    """Per-skill dynamics parameters and the expert's stance target."""

    name: str
    height_target: float
    cadence: float        # base gait phase rate, rad/s
    wobble: float         # gait-locked oscillation amplitude on measured velocity


_SKILLS = {
    "walk": SkillDynamics("walk", height_target=0.55, cadence=2 * math.pi * 1.5, wobble=0.10),
    "crawl": SkillDynamics("crawl", height_target=0.30, cadence=2 * math.pi * 0.75, wobble=0.06),
}

_LEG_OFFSETS = np.array([0.0, math.pi, 0.5 * math.pi, 1.5 * math.pi])


def skill_dynamics_for(skill) -> SkillDynamics:
    if isinstance(skill, SkillDynamics):
        return skill
    if isinstance(skill, (int, np.integer)):
        return _SKILLS[SKILL_NAMES[int(skill)]]
    return _SKILLS[skill]


@dataclass
class EnvState:
    v: np.ndarray                 # base velocity (v_x, v_y, omega_z)
    h: float                      # body height, m
    phase: np.ndarray             # 4 leg phases, wrapped to [0, 2*pi)
    last_action: np.ndarray       # action issued last step, applied this step


def clamp_action(action, cfg: EnvConfig) -> np.ndarray:
    a = np.asarray(action, dtype=float)
    if a.shape[-1] != ACTION_DIM or not np.all(np.isfinite(a)):
        raise ValueError(f"action must be {ACTION_DIM} finite reals")
    bounds = cfg.action_bounds()
    return np.clip(a, -bounds, bounds)


def _measured_v(v, phase, wobble):
    """Vectorized measured velocity: gait-locked oscillation on vx/vy."""
    out = np.array(v, dtype=float, copy=True)
    out[..., 0] += wobble * np.sin(phase[..., 0])
    out[..., 1] += wobble * np.cos(phase[..., 0])
    return out


def _dynamics(v, h, phase, applied, cadence, cfg: EnvConfig):
    """Vectorized one-step update shared by the scalar and batched paths."""
    v_new = v + applied[..., :3] * cfg.dt
    h_cmd = cfg.nominal_height + applied[..., 3]
    h_new = h + cfg.height_rate * (h_cmd - h) * cfg.dt
    rate = np.asarray(cadence) + applied[..., 4]
    phase_new = np.mod(phase + rate[..., None] * cfg.dt, 2 * math.pi)
    return v_new, h_new, phase_new


def _obs_vec(v_meas, h, phase, last_action):
    return np.concatenate(
        [
            v_meas,
            np.asarray(h)[..., None],
            np.sin(phase),
            np.cos(phase),
            last_action,
        ],
        axis=-1,
    )


def measured_velocity(state: EnvState, sd: SkillDynamics) -> np.ndarray:
    """Base velocity as observed/recorded: gait oscillation included."""
    return _measured_v(state.v, state.phase, sd.wobble)


def observe(state: EnvState, sd: SkillDynamics) -> np.ndarray:
    return _obs_vec(
        measured_velocity(state, sd), state.h, state.phase, state.last_action
    )


def reset(rng: np.random.Generator, cfg: EnvConfig, sd: SkillDynamics) -> EnvState:
    """Random initial state: varied height/speeds so transients are in-data."""
    lo, hi = cfg.init_height_range
    h = rng.uniform(lo, hi)
    v = rng.uniform(-cfg.init_speed_range, cfg.init_speed_range, size=3)
    phase0 = rng.uniform(0.0, 2 * math.pi)
    phase = np.mod(phase0 + _LEG_OFFSETS, 2 * math.pi)
    return EnvState(v=v, h=h, phase=phase, last_action=np.zeros(ACTION_DIM))


def step(state: EnvState, action, sd: SkillDynamics, cfg: EnvConfig = EnvConfig()):
    """Advance one control step; the newly issued action is applied next step.

    Returns ``(state', obs', terminated)``; termination triggers when the
    body height leaves its limits or the measured forward speed exceeds
    the hard bound.
    """
    sd = skill_dynamics_for(sd)
    issued = clamp_action(action, cfg)
    applied = state.last_action  # single-step actuation delay

    v, h, phase = _dynamics(state.v, state.h, state.phase, applied, sd.cadence, cfg)
    new = EnvState(v=v, h=float(h), phase=phase, last_action=issued)

    v_meas = measured_velocity(new, sd)
    lo, hi = cfg.height_limits
    terminated = bool(h < lo or h > hi or abs(v_meas[0]) > cfg.vx_limit)
    return new, observe(new, sd), terminated


def expert_action(
    state: EnvState, command, skill, cfg: EnvConfig = EnvConfig()
) -> np.ndarray:
    """Scripted controller: proportional velocity tracking plus stance/gait.

    The height channel commands the skill's stance as an offset from the
    nominal height; a gait-locked sinusoid on the phase-rate channel keeps
    the recorded behaviour multi-modal.
    """
    sd = skill_dynamics_for(skill)
    command = np.asarray(command, dtype=float)
    v_err = command - measured_velocity(state, sd)
    a = np.empty(ACTION_DIM)
    a[:3] = cfg.tracking_gain * v_err
    a[3] = sd.height_target - cfg.nominal_height
    a[4] = cfg.gait_action_amp * math.sin(state.phase[0])
    return clamp_action(a, cfg)


# ---------------------------------------------------------------------------
# dataset containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReturnStats:
    """Exp-transform temperature and the batch statistics used for scaling."""

    temperature: float = 10.0
    normalize: bool = True
    gamma: float = 0.99
    horizon: int = 50
    r_min: float | None = None
    r_max: float | None = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.normalize and self.r_min is not None and self.r_max is not None:
            if not self.r_min < self.r_max:
                raise ValueError("need r_min < r_max when normalizing")


@dataclass
class Episode:
    """Per-step records of one rollout; the skill never changes mid-episode."""

    skill_id: int
    command: np.ndarray
    obs: np.ndarray          # (L, OBS_DIM)
    actions: np.ndarray      # (L, ACTION_DIM), as issued
    velocity: np.ndarray     # (L, 3) measured base velocity when acting
    terminated: np.ndarray   # (L,) bool, True on the step that ended the episode

    def __post_init__(self):
        if len(self.obs) == 0:
            raise ValueError("episode must be non-empty")


@dataclass
class Dataset:
    """Flat step records plus an episode table and optional labels."""

    env_cfg: EnvConfig
    seed: int
    ep_skill: np.ndarray        # (E,) skill id per episode
    ep_command: np.ndarray      # (E, 3) withheld from the policy's observations
    ep_length: np.ndarray       # (E,)
    obs: np.ndarray             # (N, OBS_DIM)
    actions: np.ndarray         # (N, ACTION_DIM)
    velocity: np.ndarray        # (N, 3)
    skill: np.ndarray           # (N,)
    episode_id: np.ndarray      # (N,)
    t: np.ndarray               # (N,) step index within the episode
    terminated: np.ndarray      # (N,) bool
    v_target: np.ndarray | None = None
    reward: np.ndarray | None = None
    return_scaled: np.ndarray | None = None
    return_valid: np.ndarray | None = None   # True where the return window was full
    return_stats: ReturnStats | None = None

    def __len__(self):
        return len(self.obs)

    @property
    def n_episodes(self):
        return len(self.ep_length)

    def episode(self, e: int) -> Episode:
        sel = self.episode_id == e
        return Episode(
            skill_id=int(self.ep_skill[e]),
            command=self.ep_command[e],
            obs=self.obs[sel],
            actions=self.actions[sel],
            velocity=self.velocity[sel],
            terminated=self.terminated[sel],
        )

    def episodes(self):
        for e in range(self.n_episodes):
            yield self.episode(e)

    def content_hash(self) -> str:
        from .persist import content_digest

        meta, arrays = _dataset_payload(self)
        return content_digest(meta, arrays)


def collect_dataset(
    n_steps_per_skill: int, seed: int, cfg: EnvConfig = EnvConfig()
) -> Dataset:
    """Roll out the scripted experts until each skill has exactly n steps.

    One uniformly drawn 3D velocity command per episode; the command is
    stored in the episode table only, never in the observations.
    """
    rng = np.random.default_rng(seed)
    lo = np.asarray(cfg.command_low)
    hi = np.asarray(cfg.command_high)

    ep_skill, ep_command, ep_length = [], [], []
    obs_rows, act_rows, vel_rows, skill_rows, epid_rows, t_rows, term_rows = (
        [] for _ in range(7)
    )

    for skill_id, name in enumerate(SKILL_NAMES):
        sd = skill_dynamics_for(name)
        collected = 0
        while collected < n_steps_per_skill:
            command = rng.uniform(lo, hi)
            state = reset(rng, cfg, sd)
            length = min(cfg.episode_len, n_steps_per_skill - collected)
            e = len(ep_length)
            n_recorded = 0
            for t in range(length):
                ob = observe(state, sd)
                action = expert_action(state, command, sd, cfg)
                vel = measured_velocity(state, sd)
                state, _, terminated = step(state, action, sd, cfg)
                obs_rows.append(ob)
                act_rows.append(action)
                vel_rows.append(vel)
                skill_rows.append(skill_id)
                epid_rows.append(e)
                t_rows.append(t)
                term_rows.append(terminated)
                n_recorded += 1
                if terminated:
                    break
            ep_skill.append(skill_id)
            ep_command.append(command)
            ep_length.append(n_recorded)
            collected += n_recorded

    return Dataset(
        env_cfg=cfg,
        seed=seed,
        ep_skill=np.array(ep_skill, dtype=np.int64),
        ep_command=np.array(ep_command),
        ep_length=np.array(ep_length, dtype=np.int64),
        obs=np.array(obs_rows),
        actions=np.array(act_rows),
        velocity=np.array(vel_rows),
        skill=np.array(skill_rows, dtype=np.int64),
        episode_id=np.array(epid_rows, dtype=np.int64),
        t=np.array(t_rows, dtype=np.int64),
        terminated=np.array(term_rows, dtype=bool),
    )


def tracking_score(velocity: np.ndarray, v_target) -> np.ndarray:
    """exp(-3 * sum of squared active-component errors); reward is this - 1.

    Components whose target is zero are inactive and ignored, matching an
    evaluation that names a single commanded direction.
    """
    v_target = np.asarray(v_target, dtype=float)
    active = v_target != 0.0
    if not active.any():
        active = np.ones_like(active)
    err = np.asarray(velocity)[..., active] - v_target[active]
    return np.exp(-3.0 * np.sum(err**2, axis=-1))


def label_rewards(dataset: Dataset, v_target) -> Dataset:
    """Relabel every step with the velocity-tracking reward in (-1, 0]."""
    v_target = np.asarray(v_target, dtype=float)
    reward = tracking_score(dataset.velocity, v_target) - 1.0
    return replace(
        dataset,
        v_target=v_target,
        reward=reward,
        return_scaled=None,
        return_valid=None,
        return_stats=None,
    )


def label_returns(
    dataset: Dataset,
    gamma: float = 0.99,
    horizon: int = 50,
    stats: ReturnStats = ReturnStats(),
) -> Dataset:
    """Label each step with its scaled discounted return over ``horizon`` steps.

    The discounted sum truncates at the episode end; steps whose window was
    cut short are flagged invalid (``return_valid == False``) and excluded
    from the min/max scaling statistics, since their raw sums are biased
    toward zero. The exp transform ``exp(R0 / A)`` maps the sum into (0, 1];
    when ``stats.normalize`` is set, full-window values are then rescaled to
    span [0, 1] exactly.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if dataset.reward is None:
        raise ValueError("dataset has no reward labels; run label_rewards first")

    n = len(dataset)
    r0 = np.zeros(n)
    valid = np.zeros(n, dtype=bool)
    offset = 0
    for length in dataset.ep_length:
        r = dataset.reward[offset : offset + length]
        acc = np.zeros(length)
        for k in range(min(horizon, length)):
            acc[: length - k] += (gamma**k) * r[k:]
        r0[offset : offset + length] = acc
        valid[offset : offset + length] = np.arange(length) + horizon <= length
        offset += length

    raw = np.exp(r0 / stats.temperature)
    if valid.any():
        r_min = float(raw[valid].min())
        r_max = float(raw[valid].max())
    else:
        r_min, r_max = float(raw.min()), float(raw.max())
    out_stats = replace(stats, gamma=gamma, horizon=horizon, r_min=r_min, r_max=r_max)
    if stats.normalize:
        if not r_min < r_max:
            raise ValueError("degenerate return distribution: r_min == r_max")
        scaled = np.clip((raw - r_min) / (r_max - r_min), 0.0, 1.0)
    else:
        scaled = raw
    return replace(
        dataset, return_scaled=scaled, return_valid=valid, return_stats=out_stats
    )


# ---------------------------------------------------------------------------
# dataset persistence
# ---------------------------------------------------------------------------


def _dataset_payload(ds: Dataset):
    meta = {
        "env": asdict(ds.env_cfg),
        "seed": int(ds.seed),
        "skills": list(SKILL_NAMES),
        "command_box": {
            "low": list(ds.env_cfg.command_low),
            "high": list(ds.env_cfg.command_high),
        },
        "labeled": ds.reward is not None,
        "returns_labeled": ds.return_scaled is not None,
        "v_target": None if ds.v_target is None else list(map(float, ds.v_target)),
        "return_stats": None
        if ds.return_stats is None
        else asdict(ds.return_stats),
    }
    arrays = {
        "ep_skill": ds.ep_skill,
        "ep_command": ds.ep_command,
        "ep_length": ds.ep_length,
        "obs": ds.obs,
        "actions": ds.actions,
        "velocity": ds.velocity,
        "skill": ds.skill,
        "episode_id": ds.episode_id,
        "t": ds.t,
        "terminated": ds.terminated,
    }
    if ds.reward is not None:
        arrays["reward"] = ds.reward
    if ds.return_scaled is not None:
        arrays["return_scaled"] = ds.return_scaled
        arrays["return_valid"] = ds.return_valid
    return meta, arrays


def save_dataset(ds: Dataset, path) -> str:
    """Write the dataset container; returns its content hash."""
    # Every episode must carry a single skill id.
    for e in range(ds.n_episodes):
        sel = ds.episode_id == e
        if sel.any() and not np.all(ds.skill[sel] == ds.ep_skill[e]):
            raise ValueError(f"episode {e} mixes skill ids")
    meta, arrays = _dataset_payload(ds)
    return write_container(path, DATASET_FORMAT, DATASET_VERSION, meta, arrays)


def load_dataset(path) -> Dataset:
    meta, arrays, _ = read_container(path, DATASET_FORMAT, DATASET_VERSION)
    env_meta = dict(meta["env"])
    for key in ("height_limits", "command_low", "command_high",
                "init_height_range"):
        env_meta[key] = tuple(env_meta[key])
    stats = None
    if meta["return_stats"] is not None:
        stats = ReturnStats(**meta["return_stats"])
    return Dataset(
        env_cfg=EnvConfig(**env_meta),
        seed=meta["seed"],
        ep_skill=arrays["ep_skill"],
        ep_command=arrays["ep_command"],
        ep_length=arrays["ep_length"],
        obs=arrays["obs"],
        actions=arrays["actions"],
        velocity=arrays["velocity"],
        skill=arrays["skill"],
        episode_id=arrays["episode_id"],
        t=arrays["t"],
        terminated=arrays["terminated"],
        v_target=None if meta["v_target"] is None else np.array(meta["v_target"]),
        reward=arrays.get("reward"),
        return_scaled=arrays.get("return_scaled"),
        return_valid=arrays.get("return_valid"),
        return_stats=stats,
    )
