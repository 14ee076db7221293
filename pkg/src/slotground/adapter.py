"""Slot adapter: bottleneck projection, iterative slot attention, token reconstruction.

Tensors carry arbitrary leading dimensions; the last two axes are
(tokens, features) for visual inputs and (slots, features) for slots.
Every frame is processed independently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor

RECON_MODES = ("cross_attention", "repeat_project")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    D: int = 2048  # host hidden size
    d: int = 512
    n_slots: int = 4
    iters: int = 3
    heads: int = 8
    recon_mode: str = "cross_attention"
    eps_token_norm: float = 1e-8
    ln_eps: float = 1e-5

    def __post_init__(self):
        for key in ("D", "d", "n_slots", "iters", "heads"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.recon_mode not in RECON_MODES:
            raise ConfigError(f"recon_mode must be one of {RECON_MODES}, got {self.recon_mode!r}")
        if self.eps_token_norm <= 0:
            raise ConfigError("eps_token_norm must be positive")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclass
class SlotAttentionOutput:
    slots: Tensor  # (..., n_slots, d)
    attn: Tensor  # (..., N, n_slots): softmax over slots, head-averaged
    attn_hat: Tensor  # (..., N, n_slots): attn renormalized over tokens


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_adapter_params(cfg: AdapterConfig, rng: np.random.Generator) -> ParamSet:
    D, d = cfg.D, cfg.d
    p = ParamSet()

    def new(name, arr):
        p[name] = Tensor(arr, requires_grad=True)

    new("W_down", xavier_uniform(rng, D, d))
    new("S0", rng.normal(0.0, 0.02, size=(cfg.n_slots, d)))
    new("ln_in.g", np.ones(d))
    new("ln_in.b", np.zeros(d))
    new("ln_slot.g", np.ones(d))
    new("ln_slot.b", np.zeros(d))
    for name in ("W_Q", "W_K", "W_V"):
        new(name, xavier_uniform(rng, d, d))
    for gate in ("z", "r", "h"):
        new(f"gru.W_{gate}", xavier_uniform(rng, d, d))
        new(f"gru.U_{gate}", xavier_uniform(rng, d, d))
        new(f"gru.b_{gate}", np.zeros(d))
    if cfg.recon_mode == "cross_attention":
        for name in ("W_q", "W_k", "W_v"):
            new(f"recon.{name}", xavier_uniform(rng, d, d))
    else:
        new("recon.W_proj", xavier_uniform(rng, d, d))
    new("W_up", np.zeros((d, D)))
    return p


def _frames(x: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    lead = x.shape[:-2]
    return ad.reshape(x, (-1,) + x.shape[-2:]), lead


def _split_heads(x: Tensor, heads: int) -> Tensor:
    f, n, d = x.shape
    return ad.transpose(ad.reshape(x, (f, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    f, h, n, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (f, n, h * dh))


def down_project(X: Tensor, params: ParamSet) -> Tensor:
    W = params["W_down"]
    if X.shape[-1] != W.shape[0]:
        raise ad.DimensionError(f"input feature dim {X.shape[-1]} != adapter D {W.shape[0]}")
    return X @ W


def gru_cell(x: Tensor, h: Tensor, params: ParamSet) -> Tensor:
    z = ad.sigmoid(x @ params["gru.W_z"] + h @ params["gru.U_z"] + params["gru.b_z"])
    r = ad.sigmoid(x @ params["gru.W_r"] + h @ params["gru.U_r"] + params["gru.b_r"])
    n = ad.tanh(x @ params["gru.W_h"] + (r * h) @ params["gru.U_h"] + params["gru.b_h"])
    return (1.0 - z) * n + z * h


def _token_keys_values(X_down: Tensor, params: ParamSet, cfg: AdapterConfig) -> tuple[Tensor, Tensor]:
    xn = ad.layer_norm(X_down, params["ln_in.g"], params["ln_in.b"], cfg.ln_eps)
    k = _split_heads(xn @ params["W_K"], cfg.heads)
    v = _split_heads(xn @ params["W_V"], cfg.heads)
    return k, v


def _attend(slots: Tensor, k: Tensor, v: Tensor, params: ParamSet, cfg: AdapterConfig):
    # slots (F, K, d); k, v (F, H, N, dh)
    sn = ad.layer_norm(slots, params["ln_slot.g"], params["ln_slot.b"], cfg.ln_eps)
    q = _split_heads(sn @ params["W_Q"], cfg.heads)
    logits = ad.scale(k @ ad.transpose_last2(q), 1.0 / math.sqrt(cfg.head_dim))  # (F, H, N, K)
    attn = ad.softmax_axis(logits, -1)
    col = ad.sum_axis(attn, -2, keepdims=True)
    attn_hat = attn / (col + cfg.eps_token_norm)
    z = _merge_heads(ad.transpose_last2(attn_hat) @ v)  # (F, K, d)
    new_slots = gru_cell(z, slots, params)
    return new_slots, ad.mean_axis(attn, 1), ad.mean_axis(attn_hat, 1)


def slot_attention_step(slots: Tensor, X_down: Tensor, params: ParamSet, cfg: AdapterConfig):
    """One round of competitive attention followed by the GRU slot update.

    Returns ``(slots', A, A_hat)`` with A/A_hat averaged over heads.
    """
    sf, lead = _frames(slots)
    xf, _ = _frames(X_down)
    k, v = _token_keys_values(xf, params, cfg)
    new, attn, attn_hat = _attend(sf, k, v, params, cfg)
    return (
        ad.reshape(new, lead + new.shape[1:]),
        ad.reshape(attn, lead + attn.shape[1:]),
        ad.reshape(attn_hat, lead + attn_hat.shape[1:]),
    )


def initial_slots(params: ParamSet, n_frames: int) -> Tensor:
    S0 = params["S0"]
    ones = Tensor(np.ones((n_frames, 1, 1)))
    return ones * S0


def run_slot_attention(X_down: Tensor, params: ParamSet, cfg: AdapterConfig) -> SlotAttentionOutput:
    xf, lead = _frames(X_down)
    k, v = _token_keys_values(xf, params, cfg)
    slots = initial_slots(params, xf.shape[0])
    for _ in range(cfg.iters):
        slots, attn, attn_hat = _attend(slots, k, v, params, cfg)
    return SlotAttentionOutput(
        slots=ad.reshape(slots, lead + slots.shape[1:]),
        attn=ad.reshape(attn, lead + attn.shape[1:]),
        attn_hat=ad.reshape(attn_hat, lead + attn_hat.shape[1:]),
    )


def reconstruct(X_down: Tensor, slots: Tensor, params: ParamSet, cfg: AdapterConfig) -> Tensor:
    """Map slots back onto the token grid of ``X_down``."""
    xf, lead = _frames(X_down)
    sf, _ = _frames(slots)
    n, k = xf.shape[1], sf.shape[1]
    if cfg.recon_mode == "cross_attention":
        xn = ad.layer_norm(xf, params["ln_in.g"], params["ln_in.b"], cfg.ln_eps)
        q = xn @ params["recon.W_q"]
        keys = sf @ params["recon.W_k"]
        vals = sf @ params["recon.W_v"]
        w = ad.softmax_axis(ad.scale(q @ ad.transpose_last2(keys), 1.0 / math.sqrt(cfg.d)), -1)
        out = w @ vals
    else:
        if n % k:
            raise ConfigError(f"repeat_project needs N % n_slots == 0, got N={n}, n_slots={k}")
        rep = np.repeat(np.arange(k), n // k)
        out = ad.take(sf, rep, axis=1) @ params["recon.W_proj"]
    return ad.reshape(out, lead + out.shape[1:])


def adapter_forward(X: Tensor, params: ParamSet, cfg: AdapterConfig) -> tuple[Tensor, SlotAttentionOutput]:
    """X_out = X + reconstruct(slots(X W_down)) W_up."""
    X_down = down_project(X, params)
    sa = run_slot_attention(X_down, params, cfg)
    X_hat = reconstruct(X_down, sa.slots, params, cfg)
    return X + X_hat @ params["W_up"], sa


# Ablation baseline: same bottleneck and zero-init residual, plain per-frame self-attention.


def init_self_attention_params(cfg: AdapterConfig, rng: np.random.Generator) -> ParamSet:
    D, d = cfg.D, cfg.d
    p = ParamSet()
    p["W_down"] = Tensor(xavier_uniform(rng, D, d), requires_grad=True)
    p["ln_in.g"] = Tensor(np.ones(d), requires_grad=True)
    p["ln_in.b"] = Tensor(np.zeros(d), requires_grad=True)
    for name in ("W_Q", "W_K", "W_V", "W_O"):
        p[name] = Tensor(xavier_uniform(rng, d, d), requires_grad=True)
    p["W_up"] = Tensor(np.zeros((d, D)), requires_grad=True)
    return p


def self_attention_adapter_forward(X: Tensor, params: ParamSet, cfg: AdapterConfig) -> Tensor:
    xf, lead = _frames(down_project(X, params))
    xn = ad.layer_norm(xf, params["ln_in.g"], params["ln_in.b"], cfg.ln_eps)
    q = _split_heads(xn @ params["W_Q"], cfg.heads)
    k = _split_heads(xn @ params["W_K"], cfg.heads)
    v = _split_heads(xn @ params["W_V"], cfg.heads)
    w = ad.softmax_axis(ad.scale(q @ ad.transpose_last2(k), 1.0 / math.sqrt(cfg.head_dim)), -1)
    out = _merge_heads(w @ v) @ params["W_O"]
    out = ad.reshape(out, lead + out.shape[1:])
    return X + out @ params["W_up"]
