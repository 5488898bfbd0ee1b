"""The conditioned denoiser network and its reverse-mode gradients.

A small causally-masked transformer decoder maps a noised action trajectory
plus a conditioning token sequence (observation history, noise level, skill,
return) to the raw denoiser output F. Forward and backward passes are
written out explicitly over a fixed block set (linear, layernorm, GELU,
soft-max attention); there is no autodiff engine underneath.

Arrays are float64 throughout. Single samples ``(T, action_dim)`` and
batches ``(B, T, action_dim)`` are both accepted; gradients are only
computed through the batched training path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .diffusion import SigmaSchedule

__all__ = [
    "MASK",
    "ModelConfig",
    "Conditioning",
    "DenoiserParams",
    "init_params",
    "embed_conditioning",
    "forward",
]


class _MaskSentinel:
    """Marker for an intentionally hidden return value."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "MASK"


MASK = _MaskSentinel()


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and conditioning layout of the denoiser."""

    horizon: int = 8          # actions predicted per sample (T)
    action_dim: int = 5
    obs_dim: int = 17
    cond_steps: int = 4       # observation history length (T_cond)
    n_skills: int = 2
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    mask_prob: float = 0.2

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not (0.0 <= self.mask_prob < 1.0):
            raise ValueError(f"mask_prob must lie in [0, 1), got {self.mask_prob}")
        if self.n_layers < 0:
            raise ValueError(f"n_layers must be >= 0, got {self.n_layers}")

    @property
    def n_cond_tokens(self) -> int:
        # obs history tokens + sigma token + skill token + return token
        return self.cond_steps + 3


@dataclass
class Conditioning:
    """Side input of the denoiser.

    ``return_value`` is a float in [0, 1], the :data:`MASK` sentinel, or
    a per-sample array where NaN marks masked entries. ``sigma`` is the
    noise level the conditioning was built for; callers evaluating the
    denoiser at a different level pass the noise embedding explicitly.
    """

    obs_history: np.ndarray              # (T_cond, obs_dim) or (B, T_cond, obs_dim)
    skill: np.ndarray                    # (K,) or (B, K) one-hot
    return_value: object = MASK          # float | MASK | (B,) array with NaN masked
    sigma: float | np.ndarray | None = None


def _returns_as_arrays(return_value, batch: int):
    """Normalize the return field to (values, masked) arrays of length batch."""
    if return_value is MASK:
        return np.zeros(batch), np.ones(batch, dtype=bool)
    vals = np.asarray(return_value, dtype=float)
    if vals.ndim == 0:
        vals = np.full(batch, float(vals))
    masked = np.isnan(vals)
    return np.where(masked, 0.0, vals), masked


def _validate_returns(vals: np.ndarray, masked: np.ndarray, allow_oob: bool):
    live = vals[~masked]
    if not allow_oob and live.size and (live.min() < 0.0 or live.max() > 1.0):
        raise ValueError(
            f"return conditioning outside [0, 1]: range "
            f"[{live.min():.4g}, {live.max():.4g}] (pass allow_oob_return "
            "to probe out-of-range targets deliberately)"
        )


def _validate_skill(skill: np.ndarray):
    ok = np.all(np.isin(skill, (0.0, 1.0))) and np.all(skill.sum(axis=-1) == 1.0)
    if not ok:
        raise ValueError("skill must be one-hot with exactly one active entry")


# ---------------------------------------------------------------------------
# primitive blocks (forward + backward)
# ---------------------------------------------------------------------------

_LN_EPS = 1e-6


def _linear_fwd(x, w, b):
    return x @ w + b


def _linear_bwd(x, w, dout):
    din, dout_dim = w.shape
    x2 = x.reshape(-1, din)
    g2 = dout.reshape(-1, dout_dim)
    dw = x2.T @ g2
    db = g2.sum(axis=0)
    dx = dout @ w.T
    return dx, dw, db


def _layernorm_fwd(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc**2, axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * istd
    return xhat * g + b, (xhat, istd)


def _layernorm_bwd(cache, g, dout):
    xhat, istd = cache
    dxhat = dout * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = istd * (dxhat - m1 - xhat * m2)
    axes = tuple(range(dout.ndim - 1))
    return dx, (dout * xhat).sum(axis=axes), dout.sum(axis=axes)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu_fwd(x):
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * phi, phi


def _gelu_bwd(x, phi, dout):
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return dout * (phi + x * pdf)


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _attention_fwd(q, k, v, causal: bool):
    """Soft-max attention on split heads (B, H, T, dh)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    if causal:
        t_q, t_k = scores.shape[-2:]
        mask = np.triu(np.ones((t_q, t_k), dtype=bool), k=1)
        scores = np.where(mask, -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ v
    return out, (p, q, k, v, scale)


def _attention_bwd(cache, dout):
    p, q, k, v, scale = cache
    dp = dout @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(p, -1, -2) @ dout
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    dq = (ds @ k) * scale
    dk = (np.swapaxes(ds, -1, -2) @ q) * scale
    return dq, dk, dv


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class DenoiserParams:
    """All trainable weights plus the config/schedule they were built for.

    ``norm`` (standardization stats) and ``train_state`` (optimizer and
    generator state) are attached by the training loop and persisted in
    checkpoints.
    """

    cfg: ModelConfig
    sched: SigmaSchedule
    weights: dict = field(default_factory=dict)
    norm: object = None
    train_state: object = None

    def apply(self, x_scaled, c_noise, cond: Conditioning, allow_oob_return=False):
        """Raw network output F for pre-scaled input; no gradient tracking."""
        single = np.asarray(x_scaled).ndim == 2
        x, cond_arrays = _prepare(self, x_scaled, c_noise, cond, allow_oob_return)
        tokens, _ = _embed_cond_batched(self, *cond_arrays, want_cache=False)
        out, _ = _decoder_fwd(self, x, tokens, want_cache=False)
        return out[0] if single else out

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            self.cfg,
            self.sched,
            {k: v.copy() for k, v in self.weights.items()},
            norm=self.norm,
            train_state=self.train_state,
        )

    def flat_norm(self) -> float:
        return math.sqrt(sum(float((w**2).sum()) for w in self.weights.values()))


def init_params(
    cfg: ModelConfig, sched: SigmaSchedule, seed: int = 0
) -> DenoiserParams:
    """Initialize weights. The output head starts at zero so F == 0 initially."""
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    w = {}

    def norm(*shape, std=0.02):
        return rng.normal(0.0, std, size=shape)

    w["in.w"] = norm(cfg.action_dim, d)
    w["in.b"] = np.zeros(d)
    w["pos_act"] = norm(cfg.horizon, d)
    w["obs.w"] = norm(cfg.obs_dim, d)
    w["obs.b"] = np.zeros(d)
    w["pos_obs"] = norm(cfg.cond_steps, d)
    w["sig.w"] = norm(1, d)
    w["sig.b"] = np.zeros(d)
    w["skl.w"] = norm(cfg.n_skills, d)
    w["skl.b"] = np.zeros(d)
    w["ret.w"] = norm(1, d)
    w["ret.b"] = np.zeros(d)
    w["ret.mask"] = norm(d)

    resid_std = 0.02 / math.sqrt(2.0 * max(cfg.n_layers, 1))
    for i in range(cfg.n_layers):
        p = f"l{i}."
        w[p + "ln1.g"] = np.ones(d)
        w[p + "ln1.b"] = np.zeros(d)
        w[p + "attn.wqkv"] = norm(d, 3 * d)
        w[p + "attn.bqkv"] = np.zeros(3 * d)
        w[p + "attn.wo"] = norm(d, d, std=resid_std)
        w[p + "attn.bo"] = np.zeros(d)
        w[p + "ln2.g"] = np.ones(d)
        w[p + "ln2.b"] = np.zeros(d)
        w[p + "x.wq"] = norm(d, d)
        w[p + "x.bq"] = np.zeros(d)
        w[p + "x.wkv"] = norm(d, 2 * d)
        w[p + "x.bkv"] = np.zeros(2 * d)
        w[p + "x.wo"] = norm(d, d, std=resid_std)
        w[p + "x.bo"] = np.zeros(d)
        w[p + "ln3.g"] = np.ones(d)
        w[p + "ln3.b"] = np.zeros(d)
        w[p + "mlp.w1"] = norm(d, 4 * d)
        w[p + "mlp.b1"] = np.zeros(4 * d)
        w[p + "mlp.w2"] = norm(4 * d, d, std=resid_std)
        w[p + "mlp.b2"] = np.zeros(d)

    w["lnf.g"] = np.ones(d)
    w["lnf.b"] = np.zeros(d)
    w["out.w"] = np.zeros((d, cfg.action_dim))
    w["out.b"] = np.zeros(cfg.action_dim)
    return DenoiserParams(cfg, sched, w)


# ---------------------------------------------------------------------------
# conditioning embedding
# ---------------------------------------------------------------------------


def _embed_cond_batched(params, obs, skill, ret_vals, ret_masked, c_noise, want_cache):
    w = params.weights
    obs_tok = _linear_fwd(obs, w["obs.w"], w["obs.b"]) + w["pos_obs"]
    sig_tok = _linear_fwd(c_noise[:, None, None], w["sig.w"], w["sig.b"])
    skl_tok = _linear_fwd(skill[:, None, :], w["skl.w"], w["skl.b"])
    ret_lin = _linear_fwd(ret_vals[:, None, None], w["ret.w"], w["ret.b"])
    ret_tok = np.where(ret_masked[:, None, None], w["ret.mask"], ret_lin)
    tokens = np.concatenate([obs_tok, sig_tok, skl_tok, ret_tok], axis=1)
    cache = (obs, skill, ret_vals, ret_masked, c_noise) if want_cache else None
    return tokens, cache


def _embed_cond_bwd(params, cache, dtokens, grads):
    obs, skill, ret_vals, ret_masked, c_noise = cache
    w = params.weights
    tc = obs.shape[1]
    d_obs = dtokens[:, :tc]
    d_sig = dtokens[:, tc : tc + 1]
    d_skl = dtokens[:, tc + 1 : tc + 2]
    d_ret = dtokens[:, tc + 2 : tc + 3]

    _, grads["obs.w"], grads["obs.b"] = _linear_bwd(obs, w["obs.w"], d_obs)
    grads["pos_obs"] = d_obs.sum(axis=0)
    _, grads["sig.w"], grads["sig.b"] = _linear_bwd(
        c_noise[:, None, None], w["sig.w"], d_sig
    )
    _, grads["skl.w"], grads["skl.b"] = _linear_bwd(skill[:, None, :], w["skl.w"], d_skl)

    live = ~ret_masked
    d_ret_lin = d_ret * live[:, None, None]
    _, grads["ret.w"], grads["ret.b"] = _linear_bwd(
        ret_vals[:, None, None], w["ret.w"], d_ret_lin
    )
    if ret_masked.any():
        grads["ret.mask"] = d_ret[ret_masked, 0].sum(axis=0)
    else:
        grads["ret.mask"] = np.zeros_like(w["ret.mask"])


def embed_conditioning(
    cond: Conditioning,
    params: DenoiserParams,
    c_noise=None,
    allow_oob_return: bool = False,
) -> np.ndarray:
    """Embed the conditioning into a token sequence of length T_cond + 3.

    Layout: observation-history tokens, then one noise-level token, one
    skill token, and one return token (a learned constant when the return
    is masked). ``c_noise`` defaults to the embedding input derived from
    ``cond.sigma``.
    """
    obs = np.asarray(cond.obs_history, dtype=float)
    single = obs.ndim == 2
    if single:
        obs = obs[None]
    b = obs.shape[0]
    if obs.shape[1:] != (params.cfg.cond_steps, params.cfg.obs_dim):
        raise ValueError(
            f"obs history shape {obs.shape[1:]} does not match model "
            f"({params.cfg.cond_steps}, {params.cfg.obs_dim})"
        )
    skill = np.asarray(cond.skill, dtype=float)
    if skill.ndim == 1:
        skill = np.broadcast_to(skill, (b, skill.shape[0])).copy()
    _validate_skill(skill)
    vals, masked = _returns_as_arrays(cond.return_value, b)
    _validate_returns(vals, masked, allow_oob_return)
    if c_noise is None:
        if cond.sigma is None:
            raise ValueError("conditioning has no sigma and no c_noise was given")
        sig = np.asarray(cond.sigma, dtype=float)
        if np.any(sig <= 0):
            raise ValueError("conditioning sigma must be positive")
        c_noise = 0.25 * np.log(sig)
    c_noise = np.asarray(c_noise, dtype=float)
    if c_noise.ndim == 0:
        c_noise = np.full(b, float(c_noise))
    tokens, _ = _embed_cond_batched(params, obs, skill, vals, masked, c_noise, False)
    return tokens[0] if single else tokens


def _prepare(params, x_scaled, c_noise, cond, allow_oob_return):
    """Promote inputs to batch form and build validated conditioning arrays."""
    x = np.asarray(x_scaled, dtype=float)
    if x.ndim == 2:
        x = x[None]
    b = x.shape[0]
    cfg = params.cfg
    if x.shape[1:] != (cfg.horizon, cfg.action_dim):
        raise ValueError(
            f"action trajectory shape {x.shape[1:]} does not match model "
            f"({cfg.horizon}, {cfg.action_dim})"
        )
    obs = np.asarray(cond.obs_history, dtype=float)
    if obs.ndim == 2:
        obs = np.broadcast_to(obs, (b,) + obs.shape).copy()
    if obs.shape != (b, cfg.cond_steps, cfg.obs_dim):
        raise ValueError(
            f"obs history shape {obs.shape} does not match batch "
            f"({b}, {cfg.cond_steps}, {cfg.obs_dim})"
        )
    skill = np.asarray(cond.skill, dtype=float)
    if skill.ndim == 1:
        skill = np.broadcast_to(skill, (b, skill.shape[0])).copy()
    _validate_skill(skill)
    vals, masked = _returns_as_arrays(cond.return_value, b)
    _validate_returns(vals, masked, allow_oob_return)
    cn = np.asarray(c_noise, dtype=float)
    if cn.ndim == 0:
        cn = np.full(b, float(cn))
    return x, (obs, skill, vals, masked, cn)


# ---------------------------------------------------------------------------
# decoder forward / backward
# ---------------------------------------------------------------------------


def _decoder_fwd(params: DenoiserParams, x, tokens, want_cache: bool):
    """Batched decoder pass over embedded tokens; caches feed the backward."""
    cfg, w = params.cfg, params.weights

    h = _linear_fwd(x, w["in.w"], w["in.b"]) + w["pos_act"]
    layer_caches = [] if want_cache else None
    for i in range(cfg.n_layers):
        p = f"l{i}."
        ln1, ln1_cache = _layernorm_fwd(h, w[p + "ln1.g"], w[p + "ln1.b"])
        qkv = _linear_fwd(ln1, w[p + "attn.wqkv"], w[p + "attn.bqkv"])
        q, k, v = np.split(qkv, 3, axis=-1)
        att_h, att_cache = _attention_fwd(
            *(_split_heads(t, cfg.n_heads) for t in (q, k, v)), causal=True
        )
        att = _merge_heads(att_h)
        a = h + _linear_fwd(att, w[p + "attn.wo"], w[p + "attn.bo"])

        ln2, ln2_cache = _layernorm_fwd(a, w[p + "ln2.g"], w[p + "ln2.b"])
        xq = _linear_fwd(ln2, w[p + "x.wq"], w[p + "x.bq"])
        kv = _linear_fwd(tokens, w[p + "x.wkv"], w[p + "x.bkv"])
        xk, xv = np.split(kv, 2, axis=-1)
        xatt_h, xatt_cache = _attention_fwd(
            *(_split_heads(t, cfg.n_heads) for t in (xq, xk, xv)), causal=False
        )
        xatt = _merge_heads(xatt_h)
        bq = a + _linear_fwd(xatt, w[p + "x.wo"], w[p + "x.bo"])

        ln3, ln3_cache = _layernorm_fwd(bq, w[p + "ln3.g"], w[p + "ln3.b"])
        m1 = _linear_fwd(ln3, w[p + "mlp.w1"], w[p + "mlp.b1"])
        act, act_phi = _gelu_fwd(m1)
        h_next = bq + _linear_fwd(act, w[p + "mlp.w2"], w[p + "mlp.b2"])

        if want_cache:
            layer_caches.append(
                (h, ln1, ln1_cache, att, att_cache, a, ln2, ln2_cache,
                 xatt, xatt_cache, bq, ln3, ln3_cache, m1, act, act_phi)
            )
        h = h_next

    if cfg.n_layers == 0:
        # degenerate affine model (used for exact gradient validation)
        lnf, lnf_cache = h, None
    else:
        lnf, lnf_cache = _layernorm_fwd(h, w["lnf.g"], w["lnf.b"])
    out = _linear_fwd(lnf, w["out.w"], w["out.b"])
    cache = (x, tokens, layer_caches, lnf, lnf_cache) if want_cache else None
    return out, cache


def _decoder_bwd(params: DenoiserParams, cache, dout):
    """Backward through the decoder; returns (grads, dtokens)."""
    cfg, w = params.cfg, params.weights
    x, tokens, layer_caches, lnf, lnf_cache = cache
    grads = {}

    dlnf, grads["out.w"], grads["out.b"] = _linear_bwd(lnf, w["out.w"], dout)
    if lnf_cache is None:
        dh = dlnf
        grads["lnf.g"] = np.zeros_like(w["lnf.g"])
        grads["lnf.b"] = np.zeros_like(w["lnf.b"])
    else:
        dh, grads["lnf.g"], grads["lnf.b"] = _layernorm_bwd(
            lnf_cache, w["lnf.g"], dlnf
        )

    dtokens = np.zeros_like(tokens)
    for i in reversed(range(cfg.n_layers)):
        p = f"l{i}."
        (h_in, ln1, ln1_cache, att, att_cache, a, ln2, ln2_cache,
         xatt, xatt_cache, bq, ln3, ln3_cache, m1, act, act_phi) = layer_caches[i]

        dact, grads[p + "mlp.w2"], grads[p + "mlp.b2"] = _linear_bwd(
            act, w[p + "mlp.w2"], dh
        )
        dm1 = _gelu_bwd(m1, act_phi, dact)
        dln3, grads[p + "mlp.w1"], grads[p + "mlp.b1"] = _linear_bwd(
            ln3, w[p + "mlp.w1"], dm1
        )
        dbq, grads[p + "ln3.g"], grads[p + "ln3.b"] = _layernorm_bwd(
            ln3_cache, w[p + "ln3.g"], dln3
        )
        dbq = dbq + dh

        dxatt, grads[p + "x.wo"], grads[p + "x.bo"] = _linear_bwd(
            xatt, w[p + "x.wo"], dbq
        )
        dxq_h, dxk_h, dxv_h = _attention_bwd(
            xatt_cache, _split_heads(dxatt, cfg.n_heads)
        )
        dxq = _merge_heads(dxq_h)
        dkv = np.concatenate([_merge_heads(dxk_h), _merge_heads(dxv_h)], axis=-1)
        dtok_i, grads[p + "x.wkv"], grads[p + "x.bkv"] = _linear_bwd(
            tokens, w[p + "x.wkv"], dkv
        )
        dtokens += dtok_i
        dln2, grads[p + "x.wq"], grads[p + "x.bq"] = _linear_bwd(ln2, w[p + "x.wq"], dxq)
        da, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layernorm_bwd(
            ln2_cache, w[p + "ln2.g"], dln2
        )
        da = da + dbq

        datt, grads[p + "attn.wo"], grads[p + "attn.bo"] = _linear_bwd(
            att, w[p + "attn.wo"], da
        )
        dq_h, dk_h, dv_h = _attention_bwd(att_cache, _split_heads(datt, cfg.n_heads))
        dqkv = np.concatenate(
            [_merge_heads(dq_h), _merge_heads(dk_h), _merge_heads(dv_h)], axis=-1
        )
        dln1, grads[p + "attn.wqkv"], grads[p + "attn.bqkv"] = _linear_bwd(
            ln1, w[p + "attn.wqkv"], dqkv
        )
        dh_in, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layernorm_bwd(
            ln1_cache, w[p + "ln1.g"], dln1
        )
        dh = dh_in + da

    dx, grads["in.w"], grads["in.b"] = _linear_bwd(x, w["in.w"], dh)
    grads["pos_act"] = dh.sum(axis=0)
    return grads, dtokens, dx


def forward(params: DenoiserParams, noised_actions, cond_tokens) -> np.ndarray:
    """Decoder output for pre-embedded conditioning tokens.

    Row i of the output depends on rows <= i of ``noised_actions`` and on
    every conditioning token; the pass is deterministic.
    """
    cfg = params.cfg
    x = np.asarray(noised_actions, dtype=float)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != (cfg.horizon, cfg.action_dim):
        raise ValueError(
            f"action trajectory shape {x.shape[1:]} does not match model "
            f"({cfg.horizon}, {cfg.action_dim})"
        )
    tokens = np.asarray(cond_tokens, dtype=float)
    if tokens.ndim == 2:
        tokens = np.broadcast_to(tokens, (x.shape[0],) + tokens.shape).copy()
    if tokens.shape[1:] != (cfg.n_cond_tokens, cfg.d_model):
        raise ValueError(
            f"conditioning tokens shape {tokens.shape[1:]} does not match "
            f"({cfg.n_cond_tokens}, {cfg.d_model})"
        )
    out, _ = _decoder_fwd(params, x, tokens, want_cache=False)
    return out[0] if single else out


def loss_and_grads(
    params: DenoiserParams,
    clean: np.ndarray,
    noise: np.ndarray,
    sigma: np.ndarray,
    cond_arrays,
):
    """Weighted denoising loss and its gradient w.r.t. every weight.

    ``cond_arrays`` is the validated tuple produced by :func:`_prepare`.
    Returns ``(loss, grads)`` where the loss matches
    :func:`gaitflow.diffusion.dsm_loss` on the same batch.
    """
    sched = params.sched
    b = clean.shape[0]
    sd2 = sched.sigma_data**2
    denom = sigma**2 + sd2
    c_skip = (sd2 / denom)[:, None, None]
    c_out = (sigma * sched.sigma_data / np.sqrt(denom))[:, None, None]
    c_in = (1.0 / np.sqrt(denom))[:, None, None]
    weight = (denom / (sigma * sched.sigma_data) ** 2)[:, None, None]

    x_noised = clean + noise
    tokens, embed_cache = _embed_cond_batched(params, *cond_arrays, want_cache=True)
    f, cache = _decoder_fwd(params, c_in * x_noised, tokens, want_cache=True)
    err = c_skip * x_noised + c_out * f - clean
    loss = float(np.sum(weight * err**2) / b)

    dout = (2.0 / b) * weight * c_out * err
    grads, dtokens, _ = _decoder_bwd(params, cache, dout)
    _embed_cond_bwd(params, embed_cache, dtokens, grads)
    return loss, grads
